use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};

use flux_core::bench::{
    head_modes, measure_decode, modeled_latency_headlevel, modeled_latency_layerlevel, router_overhead_probe,
    speedup_report, write_speedup_csv, CostModel, LatencyRecord, Provenance, DENSE_VARIANT,
};
use flux_core::checkpoint::Checkpoint;
use flux_core::entropy::{full_layer_count, profile_layers, sparsity_sweep, static_sparsify, write_entropy_csv, write_sweep_csv, EntropyScore};
use flux_core::model::{model_sparsity_ratio_heads, RoutingPlan, TransformerWeights};
use flux_core::router::{LayerRoute, Routers};
use flux_core::seed::substream;
use flux_core::tasks::{Example, TaskCategory, TaskSpec};
use flux_core::tensor::Tensor;
use flux_core::train::{
    evaluate, pretrain_backbone, probe_set, router_gradcheck, train_router, DualVariables, EvalMetrics, EvalMode,
    GradcheckConfig, GradcheckReport, PretrainReport, RouterTrainOutcome,
};
use flux_core::FluxError;

use crate::config::RunConfig;
use crate::error::CliError;

/// Resolved configuration plus the output directory.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(cfg: RunConfig, out: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).map_err(|e| file_error(&out, e))?;
        Ok(Self { cfg, out })
    }

    /// Relative paths are taken inside the output directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.backbone)
    }

    pub fn routed_path(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.routed)
    }

    /// Write `name` in the output directory: provenance comment, then `body`.
    fn csv(
        &self,
        name: &str,
        body: impl FnOnce(&mut BufWriter<File>) -> flux_core::Result<()>,
    ) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| file_error(&path, e))?;
        let mut w = BufWriter::new(f);
        writeln!(w, "# config_hash={} seed={}", self.cfg.hash(), self.cfg.seed)?;
        body(&mut w)?;
        w.flush()?;
        info!("wrote {}", path.display());
        Ok(path)
    }
}

fn file_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(FluxError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn dual_key(task: &str) -> String {
    format!("dual.{task}")
}

/// Pretrain the dense backbone and save it. A backbone that misses the
/// probe targets is still written, and reported as a failed check.
pub fn cmd_pretrain(ctx: &Context) -> Result<PretrainReport, CliError> {
    let cfg = &ctx.cfg;
    let (weights, report) = pretrain_backbone(cfg.model, &cfg.tasks, &cfg.pretrain_config())?;
    let mut ck = Checkpoint::new();
    ck.add_model(&weights);
    let path = ctx.backbone_path();
    ck.save(&path)?;
    info!("wrote {}", path.display());
    ctx.csv("pretrain_metrics.csv", |w| {
        writeln!(w, "metric,value")?;
        writeln!(w, "final_loss,{}", report.final_loss)?;
        if let Some(a) = report.retrieval_accuracy {
            writeln!(w, "retrieval_accuracy,{a}")?;
        }
        if let Some(p) = report.holistic_perplexity {
            writeln!(w, "holistic_perplexity,{p}")?;
        }
        writeln!(w, "reference_perplexity,{}", report.reference_perplexity)?;
        writeln!(w, "converged,{}", report.converged)?;
        Ok(())
    })?;
    Ok(report)
}

fn load_backbone(ctx: &Context, path: &Path) -> Result<(Checkpoint, TransformerWeights<f32>), CliError> {
    let ck = Checkpoint::load(path)?;
    let mut w = ck.model::<f32>(ctx.cfg.model)?;
    w.frozen = true;
    Ok((ck, w))
}

/// Train routers on the frozen backbone at `backbone`; the routed checkpoint
/// holds the backbone, the routers and every task's multipliers.
pub fn cmd_train_router(ctx: &Context, backbone: &Path) -> Result<RouterTrainOutcome, CliError> {
    let cfg = &ctx.cfg;
    let (_, weights) = load_backbone(ctx, backbone)?;
    let routers = Routers::<f32>::init(
        cfg.router_config(),
        cfg.model.n_layers,
        &mut substream(cfg.seed, "init.router"),
    );
    let outcome = train_router(&weights, routers, &cfg.tasks, &cfg.router_train_config())?;

    let mut ck = Checkpoint::new();
    ck.add_model(&weights);
    ck.add_routers(&outcome.routers);
    for (t, d) in cfg.tasks.iter().zip(&outcome.duals) {
        ck.push(dual_key(&t.name), &Tensor::<f64>::from_fn(&[2], |i| [d.lambda1, d.lambda2][i]));
    }
    let path = ctx.routed_path();
    ck.save(&path)?;
    info!("wrote {}", path.display());
    ctx.csv("train_history.csv", |w| outcome.history.write_csv(w))?;
    Ok(outcome)
}

/// Multipliers stored in a routed checkpoint, in task order.
pub fn load_duals(ck: &Checkpoint, tasks: &[TaskSpec]) -> Result<Vec<DualVariables>, CliError> {
    tasks
        .iter()
        .map(|t| {
            let v = ck.get::<f64>(&dual_key(&t.name))?;
            match v.data() {
                [l1, l2] => Ok(DualVariables {
                    lambda1: *l1,
                    lambda2: *l2,
                }),
                _ => Err(FluxError::Format(format!("{} must hold two values", dual_key(&t.name))).into()),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalSpec {
    Dense,
    Routed,
    /// Static entropy-ranked plan at this target sparsity.
    Forced(f64),
}

impl FromStr for EvalSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "dense" => Ok(EvalSpec::Dense),
            "routed" => Ok(EvalSpec::Routed),
            _ => {
                let omega = s
                    .strip_prefix("forced:")
                    .and_then(|o| o.parse::<f64>().ok())
                    .filter(|o| (0.0..=1.0).contains(o))
                    .ok_or_else(|| CliError::Config(format!("mode must be dense, routed or forced:<0..1>, got '{s}'")))?;
                Ok(EvalSpec::Forced(omega))
            }
        }
    }
}

impl EvalSpec {
    pub fn label(&self) -> String {
        match self {
            EvalSpec::Dense => "dense".into(),
            EvalSpec::Routed => "routed".into(),
            EvalSpec::Forced(o) => format!("forced{o}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub task: String,
    pub category: TaskCategory,
    pub metrics: EvalMetrics,
}

/// Dense-pass entropy scores over the profiling probes of every task.
fn entropy_scores(ctx: &Context, weights: &TransformerWeights<f32>) -> Result<Vec<EntropyScore>, CliError> {
    let cfg = &ctx.cfg;
    let mut probes: Vec<Example> = Vec::new();
    for t in &cfg.tasks {
        probes.extend(probe_set(t, cfg.profile.probe_examples, cfg.seed, &cfg.model)?);
    }
    Ok(profile_layers(weights, &probes, cfg.profile.truncation)?)
}

fn eval_sets(ctx: &Context) -> Result<Vec<(TaskSpec, Vec<Example>)>, CliError> {
    let cfg = &ctx.cfg;
    cfg.tasks
        .iter()
        .map(|t| Ok((t.clone(), probe_set(t, cfg.eval_probe_examples, cfg.seed, &cfg.model)?)))
        .collect()
}

pub fn cmd_eval(ctx: &Context, checkpoint: &Path, mode: EvalSpec) -> Result<Vec<EvalRow>, CliError> {
    let cfg = &ctx.cfg;
    let (ck, weights) = load_backbone(ctx, checkpoint)?;
    let routers = if mode == EvalSpec::Routed {
        if !ck.has_routers() {
            return Err(CliError::Config(format!(
                "{} holds no routers; routed evaluation needs a trained checkpoint",
                checkpoint.display()
            )));
        }
        describe_duals(&ck, &cfg.tasks);
        Some(ck.routers::<f32>(cfg.router_config(), cfg.model.n_layers)?)
    } else {
        None
    };
    let eval_mode = match mode {
        EvalSpec::Dense => EvalMode::Dense,
        EvalSpec::Routed => EvalMode::Routed,
        EvalSpec::Forced(omega) => {
            let scores: Vec<f64> = entropy_scores(ctx, &weights)?.iter().map(|s| s.entropy).collect();
            EvalMode::Forced(static_sparsify(&scores, omega)?.plan.routes)
        }
    };
    let mut rows = Vec::new();
    for (task, probes) in eval_sets(ctx)? {
        let metrics = evaluate(&weights, routers.as_ref(), &eval_mode, &probes)?;
        info!(
            "{} [{}]: accuracy {:?} perplexity {:.4} omega {:.4}",
            task.name,
            mode.label(),
            metrics.accuracy,
            metrics.perplexity,
            metrics.omega
        );
        rows.push(EvalRow {
            task: task.name.clone(),
            category: task.category,
            metrics,
        });
    }
    ctx.csv(&format!("eval_{}.csv", mode.label()), |w| {
        writeln!(w, "task,category,accuracy,perplexity,omega_msr,n_examples")?;
        for r in &rows {
            let m = &r.metrics;
            let acc = m.accuracy.map_or(String::new(), |a| a.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.task,
                r.category.as_str(),
                acc,
                m.perplexity,
                m.omega,
                m.n_examples
            )?;
        }
        Ok(())
    })?;
    Ok(rows)
}

/// Per-layer entropy and the static sparsity sweep.
pub fn cmd_profile(ctx: &Context, checkpoint: &Path) -> Result<Vec<EntropyScore>, CliError> {
    let cfg = &ctx.cfg;
    let (_, weights) = load_backbone(ctx, checkpoint)?;
    let scores = entropy_scores(ctx, &weights)?;
    ctx.csv("entropy.csv", |w| write_entropy_csv(w, &scores))?;
    let values: Vec<f64> = scores.iter().map(|s| s.entropy).collect();
    let rows = sparsity_sweep(&weights, &values, &eval_sets(ctx)?, &cfg.profile.grid)?;
    ctx.csv("sweep.csv", |w| write_sweep_csv(w, &rows))?;
    Ok(scores)
}

/// Layers `l ≥ ⌊(1−Ω)·L⌋` sparse, the rest full.
fn trailing_sparse_plan(n_layers: usize, omega: f64) -> RoutingPlan {
    let k = full_layer_count(omega, n_layers);
    RoutingPlan::forced(
        (0..n_layers)
            .map(|l| if l < k { LayerRoute::Full } else { LayerRoute::Sparse })
            .collect(),
    )
}

/// Measured decode latency of dense, all-sparse and layer-level plans, plus
/// modeled head-level versus layer-level latency, plus router cost.
pub fn cmd_bench(ctx: &Context, checkpoint: &Path) -> Result<Vec<LatencyRecord>, CliError> {
    let cfg = &ctx.cfg;
    let bc = cfg.bench_config();
    bc.validate()?;
    let (ck, weights) = load_backbone(ctx, checkpoint)?;
    let m = cfg.model;
    let longest = bc.context_lengths.iter().copied().max().unwrap_or(0);
    let weights = weights.with_max_seq_len((longest + bc.steps_per_run()).max(m.max_seq_len))?;

    let omega_label = format!("layer_omega{}", cfg.bench.omega);
    let plans = [
        (DENSE_VARIANT.to_string(), RoutingPlan::uniform(m.n_layers, LayerRoute::Full)),
        ("all_sparse".to_string(), RoutingPlan::uniform(m.n_layers, LayerRoute::Sparse)),
        (omega_label, trailing_sparse_plan(m.n_layers, cfg.bench.omega)),
    ];
    let mut records = Vec::new();
    for &ctx_len in &bc.context_lengths {
        for (name, plan) in &plans {
            let r = measure_decode(&weights, plan, ctx_len, &bc, name)?;
            info!("ctx {ctx_len} {name}: {:.4} ms/token", r.mean_ms);
            records.push(r);
        }
    }

    let cost = CostModel::for_model(
        &m,
        std::mem::size_of::<f32>(),
        cfg.bench.bandwidth_gb_s * 1e6,
        cfg.bench.overhead_us * 1e-3,
    )?;
    let one_dense = head_modes(m.n_layers, m.n_heads, 1);
    let head_omega = model_sparsity_ratio_heads(&one_dense);
    for &ctx_len in &cfg.bench.modeled_context_lengths {
        let modeled = |variant: &str, omega: f64, mean_ms: f64| LatencyRecord {
            context_len: ctx_len,
            variant: variant.to_string(),
            omega,
            mean_ms,
            std_ms: 0.0,
            provenance: Provenance::Modeled,
        };
        let dense = modeled_latency_layerlevel(ctx_len, 0.0, m.ssa_sink, m.ssa_local, m.n_layers, &cost);
        let head = modeled_latency_headlevel(ctx_len, &one_dense, m.ssa_sink, m.ssa_local, &cost)?;
        // The same share of full-attention work, moved to whole layers.
        let layer = modeled_latency_layerlevel(ctx_len, head_omega, m.ssa_sink, m.ssa_local, m.n_layers, &cost);
        records.push(modeled(DENSE_VARIANT, 0.0, dense));
        records.push(modeled("head_one_dense", head_omega, head));
        records.push(modeled("layer_equal_flops", head_omega, layer));
    }
    let rows = speedup_report(&records)?;
    ctx.csv("latency.csv", |w| write_speedup_csv(w, &rows))?;

    let routers = if ck.has_routers() {
        ck.routers::<f32>(cfg.router_config(), m.n_layers)?
    } else {
        Routers::<f32>::init(cfg.router_config(), m.n_layers, &mut substream(cfg.seed, "init.router"))
    };
    let overhead = router_overhead_probe(
        &routers.layers[0],
        cfg.pool_size,
        &cfg.bench.router_lengths,
        cfg.bench.router_iters,
        cfg.seed,
    )?;
    info!("router overhead cv {:.4}", overhead.cv);
    ctx.csv("router_overhead.csv", |w| {
        writeln!(w, "ctx_len,mean_ms,cv")?;
        for (len, ms) in &overhead.per_length {
            writeln!(w, "{len},{ms},{}", overhead.cv)?;
        }
        Ok(())
    })?;
    Ok(records)
}

/// Router gradient check on the 64-bit toy batch; failure is a failed check.
pub fn cmd_gradcheck(ctx: &Context) -> Result<GradcheckReport, CliError> {
    let gc = GradcheckConfig::default();
    let report = router_gradcheck(&gc, ctx.cfg.seed)?;
    let line = format!(
        "max rel err {:.3e} over {} router parameters (tolerance {:.0e})",
        report.fd.max_rel_err, report.n_params, gc.tol
    );
    if report.fd.passed {
        println!("PASS, {line}");
        Ok(report)
    } else {
        println!("FAIL, {line}; worst entry in {}", report.worst_tensor);
        Err(CliError::CheckFailed(format!("gradient check: {line}")))
    }
}

/// Log the stored multipliers, or warn when they do not match the tasks.
fn describe_duals(ck: &Checkpoint, tasks: &[TaskSpec]) {
    match load_duals(ck, tasks) {
        Ok(d) => {
            for (t, d) in tasks.iter().zip(d) {
                info!("{}: lambda1 {:.5} lambda2 {:.5}", t.name, d.lambda1, d.lambda2);
            }
        }
        Err(e) => warn!("no multipliers for the configured tasks: {e}"),
    }
}
