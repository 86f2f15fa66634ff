//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//! `"FLXA" u32 version u32 count` then per tensor
//! `u16 name_len, name (UTF-8), u8 dtype, u8 rank, u64 dims[rank], data`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{FluxError, Result};
use crate::model::{ModelConfig, TransformerWeights};
use crate::router::{RouterConfig, Routers};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FLXA";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            TensorData::F32(t) => t.cast(),
            TensorData::F64(t) => t.cast(),
        }
    }
}

/// Named tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.cast()),
            DType::F64 => TensorData::F64(t.cast()),
        };
        self.entries.push((name.into(), data));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn raw(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    /// Tensor `name` converted to `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.raw(name)
            .map(|d| d.to())
            .ok_or_else(|| FluxError::Format(format!("missing tensor '{name}'")))
    }

    fn fill<T: Scalar>(&self, name: &str, dst: &mut Tensor<T>) -> Result<()> {
        let t = self.get::<T>(name)?;
        if t.shape() != dst.shape() {
            return Err(FluxError::Format(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                t.shape(),
                dst.shape()
            )));
        }
        *dst = t;
        Ok(())
    }

    pub fn add_model<T: Scalar>(&mut self, w: &TransformerWeights<T>) {
        for (name, t) in w.named_tensors() {
            self.push(name, t);
        }
    }

    pub fn add_routers<T: Scalar>(&mut self, r: &Routers<T>) {
        for (name, t) in r.named_tensors() {
            self.push(name, t);
        }
    }

    /// Rebuild backbone weights for `config`; shapes must match.
    pub fn model<T: Scalar>(&self, config: ModelConfig) -> Result<TransformerWeights<T>> {
        config.validate()?;
        let mut w = TransformerWeights::<T>::init(config, &mut NoRng)?;
        for (name, t) in w.named_tensors_mut() {
            self.fill(&name, t)?;
        }
        Ok(w)
    }

    pub fn has_routers(&self) -> bool {
        self.entries.iter().any(|(n, _)| n.starts_with("router."))
    }

    pub fn routers<T: Scalar>(&self, config: RouterConfig, n_layers: usize) -> Result<Routers<T>> {
        let mut r = Routers::<T>::zeros(config, n_layers);
        for (name, t) in r.named_tensors_mut() {
            self.fill(&name, t)?;
        }
        Ok(r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let count = u32::try_from(self.entries.len())
            .map_err(|_| FluxError::Format("too many tensors".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        for (name, data) in &self.entries {
            let len = u16::try_from(name.len())
                .map_err(|_| FluxError::Format(format!("name too long: {name}")))?;
            let rank = u8::try_from(data.shape().len())
                .map_err(|_| FluxError::Format(format!("rank too large: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[data.dtype() as u8, rank])?;
            for &d in data.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            match data {
                TensorData::F32(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                TensorData::F64(t) => {
                    for v in t.data() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(FluxError::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(FluxError::Format(format!("unsupported version {version}")));
        }
        let count = read_u32(r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut b2 = [0u8; 2];
            read_exact(r, &mut b2)?;
            let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| FluxError::Format("tensor name is not UTF-8".into()))?;
            read_exact(r, &mut b2)?;
            let (dtype, rank) = (b2[0], b2[1] as usize);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b8 = [0u8; 8];
                read_exact(r, &mut b8)?;
                shape.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| {
                    FluxError::Format(format!("dimension overflow in '{name}'"))
                })?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| FluxError::Format(format!("size overflow in '{name}'")))?;
            let data = match dtype {
                0 => {
                    let mut buf = vec![0u8; n * 4];
                    read_exact(r, &mut buf)?;
                    let v = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F32(tensor(&name, shape, v)?)
                }
                1 => {
                    let mut buf = vec![0u8; n * 8];
                    read_exact(r, &mut buf)?;
                    let v = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F64(tensor(&name, shape, v)?)
                }
                other => return Err(FluxError::Format(format!("unknown dtype {other} in '{name}'"))),
            };
            entries.push((name, data));
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(FluxError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file_err = |source| FluxError::File {
            path: path.to_path_buf(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(file_err)?);
        self.write_to(&mut w)?;
        w.flush().map_err(file_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|source| FluxError::File {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn tensor<T: Scalar>(name: &str, shape: Vec<usize>, data: Vec<T>) -> Result<Tensor<T>> {
    Tensor::new(shape, data).map_err(|e| FluxError::Format(format!("tensor '{name}': {e}")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => FluxError::Format("truncated file".into()),
        _ => FluxError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Zero-filling generator used to allocate weights that are overwritten.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        0
    }
    fn next_u64(&mut self) -> u64 {
        0
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        dest.fill(0);
        Ok(())
    }
}
