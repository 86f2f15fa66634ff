use log::info;
use rand::Rng;

use super::eval::{evaluate, probe_set, EvalMode};
use super::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::error::{FluxError, Result};
use crate::grad::Graph;
use crate::model::{forward_graph, ModelConfig, Routing, TransformerWeights};
use crate::router::LayerRoute;
use crate::seed::substream;
use crate::tasks::{BigramChain, TaskCategory, TaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Held-out examples per task for the final probe.
    pub probe_examples: usize,
    /// Required retrieval accuracy on probes.
    pub min_retrieval_accuracy: f64,
    /// Allowed holistic perplexity as a multiple of the chain's own.
    pub max_perplexity_ratio: f64,
    /// Chance that a layer runs sparse attention for a training sequence.
    pub sparse_layer_prob: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 8,
            lr: 3e-3,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            seed: 0,
            probe_examples: 64,
            min_retrieval_accuracy: 0.95,
            max_perplexity_ratio: 1.10,
            sparse_layer_prob: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub retrieval_accuracy: Option<f64>,
    pub holistic_perplexity: Option<f64>,
    pub reference_perplexity: f64,
    pub converged: bool,
}

/// Train a backbone on the task mixture, then probe it densely. During
/// training each layer of each sequence runs sparse attention with
/// probability `sparse_layer_prob`. The returned weights are frozen; `report.converged` says whether the probe targets
/// were met.
pub fn pretrain_backbone(
    config: ModelConfig,
    tasks: &[TaskSpec],
    cfg: &PretrainConfig,
) -> Result<(TransformerWeights<f32>, PretrainReport)> {
    if tasks.is_empty() || cfg.batch == 0 {
        return Err(FluxError::contract("pretraining needs tasks and a positive batch"));
    }
    if !(0.0..=1.0).contains(&cfg.sparse_layer_prob) {
        return Err(FluxError::contract("sparse_layer_prob must lie in [0, 1]"));
    }
    let mut weights = TransformerWeights::<f32>::init(config, &mut substream(cfg.seed, "init"))?;
    let mut data = substream(cfg.seed, "data");
    let sched = LrSchedule {
        peak: cfg.lr,
        warmup_ratio: cfg.warmup_ratio,
        total_steps: cfg.steps,
    };
    let mut opt = {
        let named = weights.named_tensors();
        let params: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
        AdamW::new(
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
            &params,
        )
    };
    let mut layer_rng = substream(cfg.seed, "pretrain.routes");
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        let mut acc: Option<Vec<Tensor<f32>>> = None;
        let mut loss_sum = 0.0;
        for i in 0..cfg.batch {
            let task = &tasks[(step * cfg.batch + i) % tasks.len()];
            let ex = task.sample(data.gen(), config.ssa_sink, config.ssa_local)?;
            let mut g = Graph::new();
            let m = weights.bind(&mut g, true);
            let routes: Vec<LayerRoute> = (0..config.n_layers)
                .map(|_| {
                    if layer_rng.gen_bool(cfg.sparse_layer_prob) {
                        LayerRoute::Sparse
                    } else {
                        LayerRoute::Full
                    }
                })
                .collect();
            let mut routing = Routing::Forced(&routes);
            let fwd = forward_graph(&mut g, &weights, &m, None, &ex.tokens, &mut routing)?;
            // Language loss on the stream plus an equally weighted lookup term.
            let mut loss = g.cross_entropy(fwd.logits, &ex.targets)?;
            if !ex.recalls.is_empty() {
                let a = g.cross_entropy(fwd.logits, &ex.recalls)?;
                loss = g.add(loss, a)?;
            }
            let lv = g.value(loss).item() as f64;
            if !lv.is_finite() {
                return Err(FluxError::Numeric(format!("pretraining loss is {lv} at step {step}")));
            }
            loss_sum += lv;
            let inv = 1.0 / cfg.batch as f32;
            let mut grads = g.backward_seeded(vec![(loss, Tensor::scalar(inv))])?;
            let gs: Vec<Tensor<f32>> = m
                .all()
                .into_iter()
                .zip(weights.named_tensors())
                .map(|(v, (_, t))| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            match acc.as_mut() {
                None => acc = Some(gs),
                Some(a) => a.iter_mut().zip(&gs).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        let grads = acc.expect("batch is non-empty");
        let mut named = weights.named_tensors_mut();
        let mut params: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        opt.update(&mut params, &grads, sched.lr(step))?;
        final_loss = loss_sum / cfg.batch as f64;
        if step % 100 == 0 || step + 1 == cfg.steps {
            info!("pretrain step {step}: loss {final_loss:.4}");
        }
    }

    let report = probe_backbone(&weights, tasks, cfg, final_loss)?;
    weights.frozen = true;
    Ok((weights, report))
}

/// Dense probe metrics against the pretraining targets.
pub fn probe_backbone(
    weights: &TransformerWeights<f32>,
    tasks: &[TaskSpec],
    cfg: &PretrainConfig,
    final_loss: f64,
) -> Result<PretrainReport> {
    let reference = BigramChain::new().reference_perplexity();
    let mut acc = None;
    let mut ppl = None;
    for task in tasks {
        let probes = probe_set(task, cfg.probe_examples, cfg.seed, &weights.config)?;
        let m = evaluate(weights, None, &EvalMode::Dense, &probes)?;
        match task.category {
            TaskCategory::Retrieval => acc = m.accuracy,
            TaskCategory::Holistic => ppl = Some(m.perplexity),
        }
    }
    let converged = acc.map_or(true, |a| a >= cfg.min_retrieval_accuracy)
        && ppl.map_or(true, |p| p <= cfg.max_perplexity_ratio * reference);
    Ok(PretrainReport {
        final_loss,
        retrieval_accuracy: acc,
        holistic_perplexity: ppl,
        reference_perplexity: reference,
        converged,
    })
}
