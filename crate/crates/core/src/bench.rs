//! Decode latency measurement and the memory-traffic cost model that
//! contrasts head-level with layer-level sparsity.

use std::io::Write;
use std::time::Instant;

use rand::Rng;

use crate::error::{FluxError, Result};
use crate::model::{decode_step, KvCache, ModelConfig, RoutingPlan, TransformerWeights};
use crate::router::{route_logits, LayerRoute, RouterWeights};
use crate::seed::substream;
use crate::tensor::{Scalar, Tensor};

pub const DENSE_VARIANT: &str = "dense";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup_steps: usize,
    pub measure_iters: usize,
    pub batch: usize,
    pub context_lengths: Vec<usize>,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 10,
            measure_iters: 50,
            batch: 1,
            context_lengths: vec![4096, 8192, 16384, 32768],
            repetitions: 5,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.measure_iters == 0 || self.repetitions == 0 {
            return Err(FluxError::contract("bench needs measure_iters >= 1 and repetitions >= 1"));
        }
        if self.batch != 1 {
            return Err(FluxError::contract("decode latency is measured at batch size 1"));
        }
        Ok(())
    }

    /// Decode positions consumed after a context of `ctx` tokens.
    pub fn steps_per_run(&self) -> usize {
        self.warmup_steps + self.measure_iters
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Measured,
    Modeled,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Measured => "measured",
            Provenance::Modeled => "modeled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRecord {
    pub context_len: usize,
    pub variant: String,
    pub omega: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub provenance: Provenance,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-token decode time after a `ctx_len`-token context, under a fixed
/// plan. The context's keys and values are random; prompt processing is not
/// timed.
pub fn measure_decode<T: Scalar>(
    weights: &TransformerWeights<T>,
    plan: &RoutingPlan,
    ctx_len: usize,
    cfg: &BenchConfig,
    variant: &str,
) -> Result<LatencyRecord> {
    cfg.validate()?;
    let model = &weights.config;
    if ctx_len == 0 || ctx_len + cfg.steps_per_run() > model.max_seq_len {
        return Err(FluxError::contract(format!(
            "context {ctx_len} plus {} decode steps exceeds max_seq_len {}",
            cfg.steps_per_run(),
            model.max_seq_len
        )));
    }
    let mut samples = Vec::with_capacity(cfg.measure_iters * cfg.repetitions);
    for rep in 0..cfg.repetitions {
        let mut rng = substream(cfg.seed, &format!("bench.{ctx_len}.{rep}"));
        let mut cache = KvCache::for_plan(model, plan)?;
        cache.prime_random(ctx_len, &mut rng);
        let tokens: Vec<u32> = (0..cfg.steps_per_run())
            .map(|_| rng.gen_range(0..model.vocab_size as u32))
            .collect();
        for (i, &t) in tokens.iter().enumerate() {
            let start = Instant::now();
            let logits = decode_step(t, weights, &mut cache, plan)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(logits);
            if i >= cfg.warmup_steps {
                samples.push(ms);
            }
        }
    }
    let (mean_ms, std_ms) = mean_std(&samples);
    Ok(LatencyRecord {
        context_len: ctx_len,
        variant: variant.to_string(),
        omega: plan.sparse_layers() as f64 / plan.n_layers().max(1) as f64,
        mean_ms,
        std_ms,
        provenance: Provenance::Measured,
    })
}

/// Decode time as KV bytes moved over bandwidth plus a fixed per-layer
/// cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// `2·H·d'·dtype_bytes`: one token's key and value in one layer.
    pub bytes_per_token: f64,
    pub bandwidth_bytes_per_ms: f64,
    pub overhead_ms: f64,
}

impl CostModel {
    pub fn for_model(cfg: &ModelConfig, dtype_bytes: usize, bandwidth_bytes_per_ms: f64, overhead_ms: f64) -> Result<Self> {
        let m = Self {
            bytes_per_token: (2 * cfg.model_dim() * dtype_bytes) as f64,
            bandwidth_bytes_per_ms,
            overhead_ms,
        };
        if !(m.bytes_per_token > 0.0 && bandwidth_bytes_per_ms > 0.0 && overhead_ms >= 0.0) {
            return Err(FluxError::contract("cost model parameters must be positive"));
        }
        Ok(m)
    }

    fn layer_ms(&self, tokens: f64) -> f64 {
        tokens * self.bytes_per_token / self.bandwidth_bytes_per_ms
    }
}

/// Every layer streams either the whole context (FA) or at most the window
/// (SA); a fraction `omega` of layers is sparse.
pub fn modeled_latency_layerlevel(
    ctx: usize,
    omega: f64,
    sink: usize,
    local: usize,
    n_layers: usize,
    cost: &CostModel,
) -> f64 {
    let l = n_layers as f64;
    let window = ctx.min(sink + local) as f64;
    let tokens = (1.0 - omega) * ctx as f64 + omega * window;
    l * cost.layer_ms(tokens) + l * cost.overhead_ms
}

/// Heads of a layer run in parallel, each with `1/H` of the bandwidth for
/// its `1/H` of the bytes, and the layer finishes with its slowest head:
/// per-layer time is the max over heads plus overhead.
/// `modes[layer][head]` assigns each head.
pub fn modeled_latency_headlevel(
    ctx: usize,
    modes: &[Vec<LayerRoute>],
    sink: usize,
    local: usize,
    cost: &CostModel,
) -> Result<f64> {
    let window = ctx.min(sink + local) as f64;
    let mut total = 0.0;
    for (l, heads) in modes.iter().enumerate() {
        if heads.is_empty() {
            return Err(FluxError::contract(format!("layer {l} has no heads")));
        }
        let slowest = heads
            .iter()
            .map(|m| cost.layer_ms(if m.is_sparse() { window } else { ctx as f64 }))
            .fold(0.0, f64::max);
        total += slowest + cost.overhead_ms;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterOverhead {
    /// `(length, mean ms per routing decision)`.
    pub per_length: Vec<(usize, f64)>,
    /// Coefficient of variation of the means across lengths.
    pub cv: f64,
}

/// Time pooling plus logits of one router on random query tensors of each
/// length.
pub fn router_overhead_probe<T: Scalar>(
    router: &RouterWeights<T>,
    pool: usize,
    lengths: &[usize],
    iters: usize,
    seed: u64,
) -> Result<RouterOverhead> {
    if lengths.is_empty() || iters == 0 {
        return Err(FluxError::contract("router probe needs lengths and iterations"));
    }
    let width = router.in_dim() / 2;
    let mut rng = substream(seed, "bench.router");
    let inputs: Vec<Tensor<T>> = lengths
        .iter()
        .map(|&s| {
            if s < 2 * pool {
                return Err(FluxError::contract(format!("length {s} below twice the pool size")));
            }
            Ok(Tensor::from_fn(&[s, width], |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0))))
        })
        .collect::<Result<_>>()?;
    // Warm caches and code paths before timing anything.
    for x in &inputs {
        std::hint::black_box(route_logits(x, router, pool)?);
    }
    let mut means = vec![0.0; lengths.len()];
    // Interleave lengths so slow drift in machine state hits all alike.
    let rounds = 10;
    for _ in 0..rounds {
        for (i, x) in inputs.iter().enumerate() {
            let start = Instant::now();
            for _ in 0..iters {
                std::hint::black_box(route_logits(std::hint::black_box(x), router, pool)?);
            }
            means[i] += start.elapsed().as_secs_f64() * 1e3 / (iters * rounds) as f64;
        }
    }
    let (m, s) = mean_std(&means);
    Ok(RouterOverhead {
        per_length: lengths.iter().copied().zip(means).collect(),
        cv: s / m,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub record: LatencyRecord,
    pub speedup_vs_dense: f64,
}

/// Speedup of every record over the dense record of the same context length
/// and provenance. A record without such a dense reference is an error, so
/// measured and modeled times never share a ratio.
pub fn speedup_report(records: &[LatencyRecord]) -> Result<Vec<SpeedupRow>> {
    records
        .iter()
        .map(|r| {
            let dense = records
                .iter()
                .find(|d| {
                    d.variant == DENSE_VARIANT && d.context_len == r.context_len && d.provenance == r.provenance
                })
                .ok_or_else(|| {
                    FluxError::contract(format!(
                        "no {} dense record at context {} for '{}'",
                        r.provenance.as_str(),
                        r.context_len,
                        r.variant
                    ))
                })?;
            if !(r.mean_ms > 0.0) {
                return Err(FluxError::contract(format!("non-positive latency for '{}'", r.variant)));
            }
            Ok(SpeedupRow {
                record: r.clone(),
                speedup_vs_dense: dense.mean_ms / r.mean_ms,
            })
        })
        .collect()
}

pub fn write_speedup_csv(w: &mut impl Write, rows: &[SpeedupRow]) -> Result<()> {
    writeln!(w, "ctx_len,variant,omega,provenance,mean_ms,std_ms,speedup_vs_dense")?;
    for r in rows {
        let rec = &r.record;
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            rec.context_len,
            rec.variant,
            rec.omega,
            rec.provenance.as_str(),
            rec.mean_ms,
            rec.std_ms,
            r.speedup_vs_dense
        )?;
    }
    Ok(())
}

/// Head assignment with `dense_heads` full-attention heads in every layer.
pub fn head_modes(n_layers: usize, n_heads: usize, dense_heads: usize) -> Vec<Vec<LayerRoute>> {
    (0..n_layers)
        .map(|_| {
            (0..n_heads)
                .map(|h| if h < dense_heads { LayerRoute::Full } else { LayerRoute::Sparse })
                .collect()
        })
        .collect()
}
