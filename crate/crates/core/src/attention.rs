//! Full and sparse attention kernels.
//!
//! Tensors are `[s, h, d']` row-major; head `h` of position `p` lives at
//! `p·h·d' + h·d'`. Every kernel applies the `1/√d'` scale. Sparse patterns
//! describe each query's visible keys as a short list of ascending ranges,
//! so a kernel never touches invisible keys.

use std::ops::Range;

use crate::error::{FluxError, Result};
use crate::tensor::{softmax_in_place, Scalar, Tensor};

/// Block-granular causal mask: `grid[qb][kb]` marks key block `kb` visible
/// to every query in block `qb`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    block_size: usize,
    grid: Vec<Vec<bool>>,
}

impl BlockMask {
    /// Rejects grids that are not lower-triangular or that hide a block's
    /// own diagonal (a query must always see itself).
    pub fn new(block_size: usize, grid: Vec<Vec<bool>>) -> Result<Self> {
        if block_size == 0 {
            return Err(FluxError::contract("block size must be >= 1"));
        }
        for (qb, row) in grid.iter().enumerate() {
            if row.len() > qb + 1 && row[qb + 1..].iter().any(|&b| b) {
                return Err(FluxError::contract(format!(
                    "block mask row {qb} is not causal"
                )));
            }
            if !row.get(qb).copied().unwrap_or(false) {
                return Err(FluxError::contract(format!(
                    "block mask row {qb} hides its diagonal block"
                )));
            }
        }
        Ok(Self { block_size, grid })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.grid.len()
    }
}

/// Per-layer attention mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    /// Streaming sparse attention: attention sinks plus a trailing window.
    Ssa { sink: usize, local: usize },
    BlockMask(BlockMask),
}

impl AttentionMode {
    pub fn ssa(sink: usize, local: usize) -> Result<Self> {
        if local == 0 {
            return Err(FluxError::contract("SSA local window must be >= 1"));
        }
        Ok(AttentionMode::Ssa { sink, local })
    }

    pub fn is_sparse(&self) -> bool {
        !matches!(self, AttentionMode::Full)
    }

    /// Visible-key pattern of this mode over a causal sequence.
    pub fn pattern(&self, seq_len: usize) -> Result<SparsePattern> {
        match self {
            AttentionMode::Full => Ok(SparsePattern::causal(seq_len)),
            AttentionMode::Ssa { sink, local } => make_ssa_pattern(seq_len, *sink, *local),
            AttentionMode::BlockMask(mask) => SparsePattern::blocks(seq_len, mask.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PatternKind {
    Dense { causal: bool },
    Ssa { sink: usize, local: usize },
    Blocks(BlockMask),
}

/// The visible key set of every query position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsePattern {
    seq_len: usize,
    kind: PatternKind,
}

impl SparsePattern {
    pub fn causal(seq_len: usize) -> Self {
        Self {
            seq_len,
            kind: PatternKind::Dense { causal: true },
        }
    }

    /// Every query sees every key (not used on autoregressive paths).
    pub fn bidirectional(seq_len: usize) -> Self {
        Self {
            seq_len,
            kind: PatternKind::Dense { causal: false },
        }
    }

    pub fn blocks(seq_len: usize, mask: BlockMask) -> Result<Self> {
        let needed = seq_len.div_ceil(mask.block_size);
        if mask.n_blocks() < needed {
            return Err(FluxError::contract(format!(
                "block mask covers {} blocks, sequence needs {needed}",
                mask.n_blocks()
            )));
        }
        Ok(Self {
            seq_len,
            kind: PatternKind::Blocks(mask),
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn is_causal(&self) -> bool {
        !matches!(self.kind, PatternKind::Dense { causal: false })
    }

    /// Ascending, disjoint key ranges visible from query `q`.
    pub fn visible_ranges(&self, q: usize, out: &mut Vec<Range<usize>>) {
        out.clear();
        match &self.kind {
            PatternKind::Dense { causal: true } => out.push(0..q + 1),
            PatternKind::Dense { causal: false } => out.push(0..self.seq_len),
            PatternKind::Ssa { sink, local } => {
                let sink_end = (*sink).min(q + 1);
                let local_start = (q + 1).saturating_sub(*local).max(sink_end);
                if sink_end > 0 {
                    out.push(0..sink_end);
                }
                if local_start < q + 1 {
                    // Merge touching ranges so callers see one contiguous run.
                    if let Some(last) = out.last_mut().filter(|r| r.end == local_start) {
                        last.end = q + 1;
                    } else {
                        out.push(local_start..q + 1);
                    }
                }
            }
            PatternKind::Blocks(mask) => {
                let b = mask.block_size;
                let qb = q / b;
                for (kb, &on) in mask.grid[qb].iter().enumerate().take(qb + 1) {
                    if !on {
                        continue;
                    }
                    let r = kb * b..((kb + 1) * b).min(q + 1);
                    match out.last_mut() {
                        Some(last) if last.end == r.start => last.end = r.end,
                        _ => out.push(r),
                    }
                }
            }
        }
    }

    pub fn visible(&self, q: usize) -> Vec<usize> {
        let mut ranges = Vec::new();
        self.visible_ranges(q, &mut ranges);
        ranges.into_iter().flatten().collect()
    }

    pub fn visible_count(&self, q: usize) -> usize {
        let mut ranges = Vec::new();
        self.visible_ranges(q, &mut ranges);
        ranges.iter().map(|r| r.len()).sum()
    }
}

/// SSA pattern: `visible(q) = [0, min(sink, q+1)) ∪ [max(0, q−local+1), q]`.
pub fn make_ssa_pattern(seq_len: usize, sink: usize, local: usize) -> Result<SparsePattern> {
    if seq_len == 0 {
        return Err(FluxError::contract("pattern needs seq_len >= 1"));
    }
    if local == 0 {
        return Err(FluxError::contract("SSA local window must be >= 1"));
    }
    Ok(SparsePattern {
        seq_len,
        kind: PatternKind::Ssa { sink, local },
    })
}

/// Attention geometry shared by the kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Heads {
    pub n_heads: usize,
    pub head_dim: usize,
}

impl Heads {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::one() / T::from_usize(self.head_dim).unwrap().sqrt()
    }
}

/// Softmax probabilities saved for the backward pass, ragged per query:
/// `probs[h·total + offsets[q] + j]` is head `h`'s weight on the `j`-th
/// visible key of query `q`.
#[derive(Debug, Clone)]
pub(crate) struct AttnProbs<T> {
    pub probs: Vec<T>,
    pub offsets: Vec<usize>,
}

impl<T> AttnProbs<T> {
    fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }
}

/// Forward kernel over flat `[s, h·d']` buffers.
pub(crate) fn attend<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: Heads,
    pattern: &SparsePattern,
) -> Result<(Vec<T>, AttnProbs<T>)> {
    let d = heads.width();
    let s = pattern.seq_len();
    if q.len() != s * d || k.len() != s * d || v.len() != s * d {
        return Err(FluxError::dim(
            "attention",
            format!("q/k/v sizes {}/{}/{} for s={s} width={d}", q.len(), k.len(), v.len()),
        ));
    }
    let hd = heads.head_dim;
    let scale: T = heads.scale();
    let mut ranges = Vec::with_capacity(2);
    let mut offsets = Vec::with_capacity(s + 1);
    offsets.push(0);
    for qi in 0..s {
        pattern.visible_ranges(qi, &mut ranges);
        let n: usize = ranges.iter().map(|r| r.len()).sum();
        if n == 0 {
            return Err(FluxError::contract(format!(
                "query {qi} has an empty visible set"
            )));
        }
        offsets.push(offsets[qi] + n);
    }
    let total = offsets[s];
    let mut probs = vec![T::zero(); heads.n_heads * total];
    let mut out = vec![T::zero(); s * d];
    for qi in 0..s {
        pattern.visible_ranges(qi, &mut ranges);
        let base = offsets[qi];
        let n = offsets[qi + 1] - base;
        for h in 0..heads.n_heads {
            let qv = &q[qi * d + h * hd..qi * d + (h + 1) * hd];
            let p = &mut probs[h * total + base..h * total + base + n];
            let mut j = 0;
            for r in ranges.iter() {
                for kj in r.clone() {
                    let kv = &k[kj * d + h * hd..kj * d + (h + 1) * hd];
                    p[j] = dot(qv, kv) * scale;
                    j += 1;
                }
            }
            softmax_in_place(p);
            let o = &mut out[qi * d + h * hd..qi * d + (h + 1) * hd];
            let mut j = 0;
            for r in ranges.iter() {
                for kj in r.clone() {
                    let vv = &v[kj * d + h * hd..kj * d + (h + 1) * hd];
                    axpy(p[j], vv, o);
                    j += 1;
                }
            }
        }
    }
    Ok((out, AttnProbs { probs, offsets }))
}

/// Backward of [`attend`]: returns `(dq, dk, dv)`.
pub(crate) fn attend_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    heads: Heads,
    pattern: &SparsePattern,
    saved: &AttnProbs<T>,
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = heads.width();
    let s = pattern.seq_len();
    let hd = heads.head_dim;
    let scale: T = heads.scale();
    let total = saved.total();
    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dv = vec![T::zero(); s * d];
    let mut ranges = Vec::with_capacity(2);
    let mut dp = Vec::new();
    for qi in 0..s {
        pattern.visible_ranges(qi, &mut ranges);
        let base = saved.offsets[qi];
        let n = saved.offsets[qi + 1] - base;
        for h in 0..heads.n_heads {
            let lo = h * hd;
            let p = &saved.probs[h * total + base..h * total + base + n];
            let dout = &d_out[qi * d + lo..qi * d + lo + hd];
            dp.clear();
            let mut weighted = T::zero();
            let mut j = 0;
            for r in ranges.iter() {
                for kj in r.clone() {
                    let g = dot(dout, &v[kj * d + lo..kj * d + lo + hd]);
                    weighted += g * p[j];
                    dp.push(g);
                    axpy(p[j], dout, &mut dv[kj * d + lo..kj * d + lo + hd]);
                    j += 1;
                }
            }
            let qv = &q[qi * d + lo..qi * d + lo + hd];
            let mut j = 0;
            for r in ranges.iter() {
                for kj in r.clone() {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    axpy(ds, &k[kj * d + lo..kj * d + lo + hd], &mut dq[qi * d + lo..qi * d + lo + hd]);
                    axpy(ds, qv, &mut dk[kj * d + lo..kj * d + lo + hd]);
                    j += 1;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn heads_of<T: Scalar>(t: &Tensor<T>, name: &str) -> Result<(usize, Heads)> {
    if t.rank() != 3 {
        return Err(FluxError::dim(
            "attention",
            format!("{name} must be [s, h, d'], got {:?}", t.shape()),
        ));
    }
    let sh = t.shape();
    Ok((
        sh[0],
        Heads {
            n_heads: sh[1],
            head_dim: sh[2],
        },
    ))
}

fn check_same<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<(usize, Heads)> {
    let (s, heads) = heads_of(q, "Q")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(FluxError::dim(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((s, heads))
}

/// `Softmax(QKᵀ/√d')V` per head, causally masked when `causal`.
pub fn full_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
    let (s, heads) = check_same(q, k, v)?;
    let pattern = if causal {
        SparsePattern::causal(s)
    } else {
        SparsePattern::bidirectional(s)
    };
    let (out, _) = attend(q.data(), k.data(), v.data(), heads, &pattern)?;
    Tensor::new(q.shape().to_vec(), out)
}

/// Attention restricted per query to the pattern's visible keys.
pub fn sparse_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    pattern: &SparsePattern,
) -> Result<Tensor<T>> {
    let (s, heads) = check_same(q, k, v)?;
    if pattern.seq_len() != s {
        return Err(FluxError::dim(
            "sparse_attention",
            format!("pattern length {} for sequence {s}", pattern.seq_len()),
        ));
    }
    let (out, _) = attend(q.data(), k.data(), v.data(), heads, &pattern.clone())?;
    Tensor::new(q.shape().to_vec(), out)
}

/// Single-query attention over cached key/value segments, visited in order.
/// Each segment is a pair of `[n_i, h·d']` row-major buffers.
pub(crate) fn decode_attend<T: Scalar>(
    q: &[T],
    segments: &[(&[T], &[T])],
    heads: Heads,
    scores: &mut Vec<T>,
    out: &mut [T],
) -> Result<()> {
    let d = heads.width();
    let hd = heads.head_dim;
    let n: usize = segments.iter().map(|(k, _)| k.len() / d).sum();
    if n == 0 {
        return Err(FluxError::contract("decode attention over an empty cache"));
    }
    let scale: T = heads.scale();
    scores.clear();
    scores.resize(heads.n_heads * n, T::zero());
    let mut j = 0;
    for (keys, _) in segments {
        for row in keys.chunks_exact(d) {
            for h in 0..heads.n_heads {
                scores[h * n + j] = dot(&q[h * hd..(h + 1) * hd], &row[h * hd..(h + 1) * hd]) * scale;
            }
            j += 1;
        }
    }
    for h in 0..heads.n_heads {
        softmax_in_place(&mut scores[h * n..(h + 1) * n]);
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    let mut j = 0;
    for (_, values) in segments {
        for row in values.chunks_exact(d) {
            for h in 0..heads.n_heads {
                axpy(
                    scores[h * n + j],
                    &row[h * hd..(h + 1) * hd],
                    &mut out[h * hd..(h + 1) * hd],
                );
            }
            j += 1;
        }
    }
    Ok(())
}

/// One decode query (`[1, h, d']` or `[h, d']`) against cached keys and
/// values (`[n, h, d']`). Attends over exactly the cached tokens.
pub fn decode_attention<T: Scalar>(
    q: &Tensor<T>,
    cache_keys: &Tensor<T>,
    cache_values: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, heads) = heads_of(cache_keys, "cache keys")?;
    if cache_values.shape() != cache_keys.shape() {
        return Err(FluxError::dim("decode_attention", "keys/values shape mismatch"));
    }
    if q.len() != heads.width() {
        return Err(FluxError::dim(
            "decode_attention",
            format!("query {:?} against width {}", q.shape(), heads.width()),
        ));
    }
    let mut out = vec![T::zero(); heads.width()];
    let mut scores = Vec::new();
    decode_attend(
        q.data(),
        &[(cache_keys.data(), cache_values.data())],
        heads,
        &mut scores,
        &mut out,
    )?;
    Tensor::new(vec![1, heads.n_heads, heads.head_dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_qkv(rng: &mut ChaCha8Rng, s: usize, h: usize, hd: usize) -> [Tensor<f64>; 3] {
        let mut t = || {
            Tensor::<f64>::from_fn(&[s, h, hd], |_| rng.gen_range(-1.0..1.0))
        };
        [t(), t(), t()]
    }

    /// Dense masked softmax oracle: full score matrix, -inf outside the pattern.
    fn dense_oracle(
        q: &Tensor<f64>,
        k: &Tensor<f64>,
        v: &Tensor<f64>,
        visible: impl Fn(usize, usize) -> bool,
    ) -> Vec<f64> {
        let sh = q.shape();
        let (s, h, hd) = (sh[0], sh[1], sh[2]);
        let mut out = vec![0.0; s * h * hd];
        for head in 0..h {
            for i in 0..s {
                let mut logits = vec![f64::NEG_INFINITY; s];
                for (j, l) in logits.iter_mut().enumerate() {
                    if visible(i, j) {
                        let mut acc = 0.0;
                        for c in 0..hd {
                            acc += q.data()[(i * h + head) * hd + c] * k.data()[(j * h + head) * hd + c];
                        }
                        *l = acc / (hd as f64).sqrt();
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..s {
                    let p = (logits[j] - m).exp() / z;
                    for c in 0..hd {
                        out[(i * h + head) * hd + c] += p * v.data()[(j * h + head) * hd + c];
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let [q, k, v] = rand_qkv(&mut rng, 1, 2, 4);
        let o = full_attention(&q, &k, &v, true).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn equal_logits_average_the_prefix() {
        let q = Tensor::<f64>::zeros(&[3, 1, 2]);
        let k = Tensor::<f64>::from_fn(&[3, 1, 2], |i| i as f64);
        let v = Tensor::<f64>::from_f64(&[3, 1, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let o = full_attention(&q, &k, &v, true).unwrap();
        let expect = [1., 2., 2., 3., 3., 4.];
        assert!(max_diff(o.data(), &expect) < 1e-12);
    }

    #[test]
    fn full_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let [q, k, v] = rand_qkv(&mut rng, 7, 2, 4);
        let o = full_attention(&q, &k, &v, true).unwrap();
        let oracle = dense_oracle(&q, &k, &v, |i, j| j <= i);
        assert!(max_diff(o.data(), &oracle) <= 1e-12);
        let o = full_attention(&q, &k, &v, false).unwrap();
        let oracle = dense_oracle(&q, &k, &v, |_, _| true);
        assert!(max_diff(o.data(), &oracle) <= 1e-12);
    }

    #[test]
    fn ssa_self_only_window_copies_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let [q, k, v] = rand_qkv(&mut rng, 9, 2, 3);
        let p = make_ssa_pattern(9, 0, 1).unwrap();
        let o = sparse_attention(&q, &k, &v, &p).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn ssa_matches_masked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let [q, k, v] = rand_qkv(&mut rng, 16, 2, 4);
        let p = make_ssa_pattern(16, 2, 4).unwrap();
        let o = sparse_attention(&q, &k, &v, &p).unwrap();
        let oracle = dense_oracle(&q, &k, &v, |i, j| j <= i && (j < 2 || j + 4 > i));
        assert!(max_diff(o.data(), &oracle) <= 1e-12);
    }

    #[test]
    fn ssa_visible_sets() {
        let p = make_ssa_pattern(4, 0, 2).unwrap();
        assert_eq!(p.visible(3), vec![2, 3]);
        let p = make_ssa_pattern(10, 2, 3).unwrap();
        assert_eq!(p.visible(7), vec![0, 1, 5, 6, 7]);
        // Overlapping sink and window: union, no double counting.
        assert_eq!(p.visible(2), vec![0, 1, 2]);
        let p = make_ssa_pattern(6, 3, 3).unwrap();
        let c = SparsePattern::causal(6);
        for qi in 0..6 {
            assert_eq!(p.visible(qi), c.visible(qi));
        }
    }

    #[test]
    fn block_mask_validation_and_pattern() {
        assert!(BlockMask::new(2, vec![vec![true, true], vec![true, true]]).is_err());
        assert!(BlockMask::new(2, vec![vec![true], vec![true, false]]).is_err());
        let m = BlockMask::new(2, vec![vec![true], vec![false, true], vec![true, false, true]]).unwrap();
        let p = SparsePattern::blocks(6, m).unwrap();
        assert_eq!(p.visible(3), vec![2, 3]);
        assert_eq!(p.visible(5), vec![0, 1, 4, 5]);
        assert_eq!(p.visible(4), vec![0, 1, 4]);
    }

    #[test]
    fn empty_cache_is_rejected() {
        let q = vec![0.0f64; 4];
        let mut scores = Vec::new();
        let mut out = vec![0.0; 4];
        let heads = Heads { n_heads: 1, head_dim: 4 };
        assert!(decode_attend(&q, &[(&[][..], &[][..])], heads, &mut scores, &mut out).is_err());
    }

    #[test]
    fn decode_single_cached_token() {
        let q = Tensor::<f64>::from_fn(&[1, 2, 2], |i| i as f64);
        let k = Tensor::<f64>::from_fn(&[1, 2, 2], |i| -(i as f64));
        let v = Tensor::<f64>::from_f64(&[1, 2, 2], &[0.5, 1.5, -2.0, 3.0]).unwrap();
        let o = decode_attention(&q, &k, &v).unwrap();
        assert!(max_diff(o.data(), v.data()) < 1e-15);
    }

    #[test]
    fn decode_matches_oracle_on_ssa_visible_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let [q, k, v] = rand_qkv(&mut rng, 64, 2, 4);
        let p = make_ssa_pattern(64, 4, 8).unwrap();
        let vis = p.visible(63);
        let rows = |t: &Tensor<f64>| {
            let mut d = Vec::new();
            for &j in &vis {
                d.extend_from_slice(&t.data()[j * 8..(j + 1) * 8]);
            }
            Tensor::<f64>::new(vec![vis.len(), 2, 4], d).unwrap()
        };
        let qlast = Tensor::<f64>::new(vec![1, 2, 4], q.data()[63 * 8..].to_vec()).unwrap();
        let o = decode_attention(&qlast, &rows(&k), &rows(&v)).unwrap();
        let oracle = dense_oracle(&q, &k, &v, |i, j| j <= i && (j < 4 || j + 8 > i));
        assert!(max_diff(o.data(), &oracle[63 * 8..]) <= 1e-12);
    }
}
