use crate::error::Result;
use crate::model::{model_sparsity_ratio, prefill, ModelConfig, Routing, TransformerWeights};
use crate::router::{LayerRoute, Routers};
use crate::seed::substream;
use crate::tasks::{Example, TaskSpec};
use crate::tensor::Scalar;

use rand::Rng;

/// How layers are routed during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    Dense,
    Routed,
    Forced(Vec<LayerRoute>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    /// Fraction of answers predicted exactly; `None` without answers.
    pub accuracy: Option<f64>,
    /// `exp` of mean NLL over all scored targets.
    pub perplexity: f64,
    /// Mean realized sparsity ratio over the probe set.
    pub omega: f64,
    pub n_examples: usize,
}

/// `n` held-out examples of `task`, drawn from the named substream
/// `probe.<task>` under `seed`.
pub fn probe_set(task: &TaskSpec, n: usize, seed: u64, cfg: &ModelConfig) -> Result<Vec<Example>> {
    let mut rng = substream(seed, &format!("probe.{}", task.name));
    (0..n)
        .map(|_| task.sample(rng.gen(), cfg.ssa_sink, cfg.ssa_local))
        .collect()
}

fn nll_row<T: Scalar>(row: &[T], target: u32) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    lse - row[target as usize].as_f64()
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate<T: Scalar>(
    weights: &TransformerWeights<T>,
    routers: Option<&Routers<T>>,
    mode: &EvalMode,
    examples: &[Example],
) -> Result<EvalMetrics> {
    let n_layers = weights.config.n_layers;
    let dense = vec![LayerRoute::Full; n_layers];
    let (mut correct, mut answered) = (0usize, 0usize);
    let (mut nll, mut scored) = (0.0, 0usize);
    let mut omega = 0.0;
    for ex in examples {
        let routing = match mode {
            EvalMode::Dense => Routing::Forced(&dense),
            EvalMode::Routed => Routing::Hard,
            EvalMode::Forced(routes) => Routing::Forced(routes),
        };
        let out = prefill(&ex.tokens, weights, routers, routing, false)?;
        omega += model_sparsity_ratio(&out.plan, weights.config.n_heads);
        for &(pos, tgt) in &ex.targets {
            nll += nll_row(out.logits.row(pos), tgt);
            scored += 1;
        }
        if let Some((pos, ans)) = ex.answer {
            answered += 1;
            if argmax(out.logits.row(pos)) == ans as usize {
                correct += 1;
            }
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(EvalMetrics {
        accuracy: (answered > 0).then(|| correct as f64 / answered as f64),
        perplexity: (nll / scored.max(1) as f64).exp(),
        omega: omega / n,
        n_examples: examples.len(),
    })
}
