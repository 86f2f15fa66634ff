//! Router training under per-task sparsity budgets, backbone pretraining and
//! evaluation helpers.
//!
//! The router objective per task is
//! `L_lang + λ1·L_diff + λ2·L_diff²` with `L_diff = mean(1 − r_soft) − t`.
//! Routers descend on it; the multipliers ascend, projected onto `λ ≥ 0`.

mod eval;
mod gradcheck;
mod history;
mod optim;
mod pretrain;

pub use eval::{evaluate, probe_set, EvalMetrics, EvalMode};
pub use gradcheck::{router_gradcheck, GradcheckConfig, GradcheckReport};
pub use history::{HistoryRow, TaskStep, TrainHistory};
pub use optim::{AdamW, AdamWConfig, LrSchedule};
pub use pretrain::{pretrain_backbone, probe_backbone, PretrainConfig, PretrainReport};

use log::{info, warn};
use rand::Rng;

use crate::error::{FluxError, Result};
use crate::grad::{Graph, Var};
use crate::model::{forward_graph, NoiseSource, Routing, TransformerWeights};
use crate::router::{GumbelNoise, Routers, TemperatureSchedule};
use crate::seed::substream;
use crate::tasks::{Example, TaskCategory, TaskSpec};
use crate::tensor::{Scalar, Tensor};

/// Cap on `λ2`, whose ascent direction `L_diff²` is never negative.
pub const LAMBDA_MAX: f64 = 100.0;

/// Lagrange multipliers of one task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualVariables {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl DualVariables {
    pub const ZERO: DualVariables = DualVariables {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    /// Both multipliers uniform in `[0, 0.1]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            lambda1: rng.gen_range(0.0..=0.1),
            lambda2: rng.gen_range(0.0..=0.1),
        }
    }
}

/// `mean(1 − r_soft) − t` over every supplied gate value.
pub fn sparsity_deviation(r_soft: &[f64], budget: f64) -> f64 {
    if r_soft.is_empty() {
        return -budget;
    }
    r_soft.iter().map(|r| 1.0 - r).sum::<f64>() / r_soft.len() as f64 - budget
}

pub fn total_loss(l_lang: f64, l_diff: f64, duals: DualVariables) -> f64 {
    l_lang + duals.lambda1 * l_diff + duals.lambda2 * l_diff * l_diff
}

/// Projected gradient ascent on the multipliers.
pub fn dual_ascent_step(duals: DualVariables, l_diff: f64, lr_dual: f64) -> DualVariables {
    DualVariables {
        lambda1: (duals.lambda1 + lr_dual * l_diff).max(0.0),
        lambda2: (duals.lambda2 + lr_dual * l_diff * l_diff).clamp(0.0, LAMBDA_MAX),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterTrainConfig {
    pub steps: usize,
    /// Sequences per step, assigned to tasks round-robin.
    pub batch: usize,
    pub lr_router: f64,
    pub lr_dual: f64,
    pub adam: AdamWConfig,
    pub warmup_ratio: f64,
    pub tau: TemperatureSchedule,
    /// When false the multipliers stay at zero.
    pub dual_updates: bool,
    pub seed: u64,
    /// Hard-routed probe every this many steps (0 disables).
    pub probe_every: usize,
    pub probe_examples: usize,
}

impl Default for RouterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr_router: 5e-4,
            lr_dual: 1e-3,
            adam: AdamWConfig::default(),
            warmup_ratio: 0.2,
            tau: TemperatureSchedule::default(),
            dual_updates: true,
            seed: 0,
            probe_every: 50,
            probe_examples: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RouterTrainOutcome {
    pub routers: Routers<f32>,
    pub duals: Vec<DualVariables>,
    pub history: TrainHistory,
}

/// Scored positions for the router's language loss: the answer for
/// retrieval, every transition otherwise.
pub fn router_targets(task: &TaskSpec, ex: &Example) -> Vec<(usize, u32)> {
    match task.category {
        TaskCategory::Retrieval => ex.answer_targets(),
        TaskCategory::Holistic => ex.targets.clone(),
    }
}

/// One sequence of a router batch with its Gumbel noise, one pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSample {
    pub task: usize,
    pub example: Example,
    pub noise: Vec<GumbelNoise>,
}

/// Value and router gradient of the mean per-task objective on one batch.
#[derive(Debug, Clone)]
pub struct RouterObjective<T: Scalar> {
    pub loss: f64,
    /// Per-task means; NaN for tasks absent from the batch.
    pub l_lang: Vec<f64>,
    pub l_diff: Vec<f64>,
    pub r_soft_mean: Vec<f64>,
    /// Aligned with `Routers::named_tensors`.
    pub grads: Vec<Tensor<T>>,
}

/// One sequence's forward state, kept until the batch's deviations are known.
struct SeqPass<T: Scalar> {
    task: usize,
    graph: Graph<T>,
    ce: Var,
    gates: Vec<Var>,
    router_vars: Vec<Var>,
    l_lang: f64,
    r_soft: Vec<f64>,
}

fn soft_pass<T: Scalar>(
    weights: &TransformerWeights<T>,
    routers: &Routers<T>,
    task: &TaskSpec,
    sample: &RouterSample,
    tau: f64,
) -> Result<SeqPass<T>> {
    let mut g = Graph::new();
    let m = weights.bind(&mut g, false);
    let r = routers.bind(&mut g, true);
    let mut routing = Routing::Soft {
        tau,
        noise: NoiseSource::Fixed(&sample.noise),
    };
    let fwd = forward_graph(&mut g, weights, &m, Some(&r), &sample.example.tokens, &mut routing)?;
    let ce = g.cross_entropy(fwd.logits, &router_targets(task, &sample.example))?;
    let gates: Vec<Var> = fwd.layers.iter().map(|l| l.gate.expect("soft routing")).collect();
    let l_lang = g.value(ce).item().as_f64();
    let r_soft: Vec<f64> = fwd.layers.iter().map(|l| l.r_soft).collect();
    if !l_lang.is_finite() || r_soft.iter().any(|r| !r.is_finite()) {
        return Err(FluxError::Numeric(format!(
            "non-finite forward on task '{}': l_lang={l_lang}, r_soft={r_soft:?}",
            task.name
        )));
    }
    Ok(SeqPass {
        task: sample.task,
        graph: g,
        ce,
        gates,
        router_vars: r.all(),
        l_lang,
        r_soft,
    })
}

/// Per-task means of the language loss and of `1 − r_soft`; NaN for tasks
/// absent from the batch.
fn task_stats<T: Scalar>(passes: &[SeqPass<T>], tasks: &[TaskSpec]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut l_lang = vec![0.0; tasks.len()];
    let mut r_all: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut n = vec![0usize; tasks.len()];
    for p in passes {
        l_lang[p.task] += p.l_lang;
        n[p.task] += 1;
        r_all[p.task].extend_from_slice(&p.r_soft);
    }
    let mut l_diff = vec![f64::NAN; tasks.len()];
    let mut r_mean = vec![f64::NAN; tasks.len()];
    for t in 0..tasks.len() {
        if n[t] == 0 {
            l_lang[t] = f64::NAN;
            continue;
        }
        l_lang[t] /= n[t] as f64;
        l_diff[t] = sparsity_deviation(&r_all[t], tasks[t].budget);
        r_mean[t] = r_all[t].iter().sum::<f64>() / r_all[t].len() as f64;
    }
    (l_lang, l_diff, r_mean)
}

/// Mean over the tasks present in `batch` of
/// `L_lang + λ1·L_diff + λ2·L_diff²`, with its gradient with respect to
/// every router parameter. The multipliers are held fixed.
pub fn router_objective<T: Scalar>(
    weights: &TransformerWeights<T>,
    routers: &Routers<T>,
    tasks: &[TaskSpec],
    batch: &[RouterSample],
    duals: &[DualVariables],
    tau: f64,
) -> Result<RouterObjective<T>> {
    if duals.len() != tasks.len() {
        return Err(FluxError::contract("one dual pair per task required"));
    }
    if batch.is_empty() {
        return Err(FluxError::contract("empty router batch"));
    }
    let mut passes = Vec::with_capacity(batch.len());
    for s in batch {
        let task = tasks
            .get(s.task)
            .ok_or_else(|| FluxError::contract(format!("task index {} out of range", s.task)))?;
        if s.noise.len() != weights.config.n_layers {
            return Err(FluxError::contract("one noise pair per layer required"));
        }
        passes.push(soft_pass(weights, routers, task, s, tau)?);
    }
    let (l_lang, l_diff, r_soft_mean) = task_stats(&passes, tasks);

    let present = l_diff.iter().filter(|d| d.is_finite()).count() as f64;
    let mut counts = vec![0usize; tasks.len()];
    for p in &passes {
        counts[p.task] += 1;
    }
    let mut loss = 0.0;
    for t in 0..tasks.len() {
        if l_diff[t].is_finite() {
            loss += total_loss(l_lang[t], l_diff[t], duals[t]) / present;
        }
    }
    let mut grads: Vec<Tensor<T>> = routers
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    for p in &passes {
        let n_t = counts[p.task] as f64;
        let n_layers = p.gates.len() as f64;
        let dual = duals[p.task];
        let ld = l_diff[p.task];
        let w_ce = 1.0 / (present * n_t);
        // d/dr of λ1·Ld + λ2·Ld², with dLd/dr = −1/(n_t·L).
        let w_r = -(dual.lambda1 + 2.0 * dual.lambda2 * ld) / (present * n_t * n_layers);
        let mut seeds = vec![(p.ce, Tensor::scalar(T::from_f64_lossy(w_ce)))];
        seeds.extend(p.gates.iter().map(|&v| (v, Tensor::scalar(T::from_f64_lossy(w_r)))));
        let mut gs = p.graph.backward_seeded(seeds)?;
        for (a, &v) in grads.iter_mut().zip(&p.router_vars) {
            if let Some(gv) = gs.take(v) {
                a.add_assign(&gv);
            }
        }
    }
    Ok(RouterObjective {
        loss,
        l_lang,
        l_diff,
        r_soft_mean,
        grads,
    })
}

/// Train `routers` against the frozen `weights`.
///
/// Each step draws `batch` sequences round-robin over `tasks`, runs soft
/// routing, takes one AdamW step on the routers for the mean per-task
/// objective, then one projected ascent step on each task's multipliers,
/// and anneals the temperature.
pub fn train_router(
    weights: &TransformerWeights<f32>,
    routers: Routers<f32>,
    tasks: &[TaskSpec],
    cfg: &RouterTrainConfig,
) -> Result<RouterTrainOutcome> {
    if tasks.is_empty() || cfg.batch == 0 {
        return Err(FluxError::contract("router training needs tasks and a positive batch"));
    }
    if !weights.frozen {
        return Err(FluxError::contract("router training needs a frozen backbone"));
    }
    for t in tasks {
        t.validate()?;
    }
    if routers.layers.len() != weights.config.n_layers {
        return Err(FluxError::contract("one router per layer required"));
    }

    let mut share = vec![0usize; tasks.len()];
    for i in 0..cfg.steps * cfg.batch {
        share[i % tasks.len()] += 1;
    }
    for (t, &n) in tasks.iter().zip(&share) {
        if (n as f64) < 0.1 * (cfg.steps * cfg.batch) as f64 {
            warn!("task '{}' gets under 10% of training sequences; routing may collapse", t.name);
        }
    }

    let model_cfg = weights.config;
    let mut data = substream(cfg.seed, "data");
    let mut gumbel = substream(cfg.seed, "gumbel");
    let mut dual_rng = substream(cfg.seed, "dual");
    let mut duals: Vec<DualVariables> = tasks
        .iter()
        .map(|_| {
            if cfg.dual_updates {
                DualVariables::random(&mut dual_rng)
            } else {
                DualVariables::ZERO
            }
        })
        .collect();
    let tau_sched = TemperatureSchedule::new(cfg.tau.tau_init, cfg.tau.tau_final, cfg.steps)?;
    let lr_router = LrSchedule {
        peak: cfg.lr_router,
        warmup_ratio: cfg.warmup_ratio,
        total_steps: cfg.steps,
    };
    let lr_dual = LrSchedule {
        peak: cfg.lr_dual,
        ..lr_router
    };
    let probes: Vec<Vec<Example>> = if cfg.probe_every > 0 {
        tasks
            .iter()
            .map(|t| probe_set(t, cfg.probe_examples, cfg.seed, &model_cfg))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut routers = routers;
    let mut opt = {
        let named = routers.named_tensors();
        let params: Vec<&Tensor<f32>> = named.iter().map(|(_, t)| *t).collect();
        AdamW::new(cfg.adam, &params)
    };
    let mut history = TrainHistory::new(tasks.iter().map(|t| t.name.clone()).collect());

    for step in 0..cfg.steps {
        let tau = tau_sched.anneal(step);
        let mut batch = Vec::with_capacity(cfg.batch);
        for i in 0..cfg.batch {
            let t = (step * cfg.batch + i) % tasks.len();
            let example = tasks[t].sample(data.gen(), model_cfg.ssa_sink, model_cfg.ssa_local)?;
            let noise = (0..model_cfg.n_layers).map(|_| GumbelNoise::sample(&mut gumbel)).collect();
            batch.push(RouterSample { task: t, example, noise });
        }
        let obj = router_objective(weights, &routers, tasks, &batch, &duals, tau)?;
        let (l_lang, l_diff, r_mean, grads) = (obj.l_lang, obj.l_diff, obj.r_soft_mean, obj.grads);
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(FluxError::Numeric(format!("non-finite router gradient at step {step}")));
        }
        {
            let mut named = routers.named_tensors_mut();
            let mut params: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            opt.update(&mut params, &grads, lr_router.lr(step))?;
        }
        if cfg.dual_updates {
            for (d, &ld) in duals.iter_mut().zip(&l_diff) {
                if ld.is_finite() {
                    *d = dual_ascent_step(*d, ld, lr_dual.lr(step));
                }
            }
        }

        let omega: Vec<Option<f64>> = if cfg.probe_every > 0
            && (step % cfg.probe_every == 0 || step + 1 == cfg.steps)
        {
            probes
                .iter()
                .map(|p| evaluate(weights, Some(&routers), &EvalMode::Routed, p).map(|m| Some(m.omega)))
                .collect::<Result<_>>()?
        } else {
            vec![None; tasks.len()]
        };
        let present: Vec<f64> = l_lang.iter().copied().filter(|v| v.is_finite()).collect();
        let row = HistoryRow {
            step,
            l_lang: present.iter().sum::<f64>() / present.len().max(1) as f64,
            tau,
            tasks: (0..tasks.len())
                .map(|t| TaskStep {
                    l_diff: l_diff[t],
                    r_soft_mean: r_mean[t],
                    lambda1: duals[t].lambda1,
                    lambda2: duals[t].lambda2,
                    omega: omega[t],
                })
                .collect(),
        };
        if step % 25 == 0 || step + 1 == cfg.steps {
            info!("router step {step}: {}", row.summary(&history.task_names));
        }
        history.push(row);
    }
    Ok(RouterTrainOutcome {
        routers,
        duals,
        history,
    })
}
