use rand::Rng;

use super::{router_objective, DualVariables, RouterSample};
use crate::error::Result;
use crate::grad::{finite_diff_check_5pt, FdReport};
use crate::model::{ModelConfig, TransformerWeights};
use crate::router::{GumbelNoise, PoolingConfig, RouterConfig, Routers};
use crate::seed::substream;
use crate::tasks::{TaskCategory, TaskSpec};

/// Toy setting for checking router gradients in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub pool_size: usize,
    /// Sequences per task.
    pub per_task: usize,
    pub tau: f64,
    pub h: f64,
    pub tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                n_layers: 2,
                n_heads: 2,
                head_dim: 8,
                vocab_size: crate::tasks::VOCAB_SIZE,
                max_seq_len: 64,
                mlp_hidden: 32,
                ssa_sink: 4,
                ssa_local: 12,
            },
            seq_len: 64,
            pool_size: 8,
            per_task: 2,
            tau: 0.7,
            h: 1e-3,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub n_params: usize,
    pub loss: f64,
    pub fd: FdReport,
    /// Name of the router tensor holding the worst entry.
    pub worst_tensor: String,
}

/// Compare the analytic router gradient of the constrained objective with
/// central differences on a fixed-noise batch drawn from `seed`.
pub fn router_gradcheck(cfg: &GradcheckConfig, seed: u64) -> Result<GradcheckReport> {
    let mc = cfg.model;
    let weights = TransformerWeights::<f64>::init(mc, &mut substream(seed, "init"))?;
    let rc = RouterConfig {
        pooling: PoolingConfig {
            pool_size: cfg.pool_size,
        },
        ..RouterConfig::for_model_dim(mc.model_dim())
    };
    let routers = Routers::<f64>::init(rc, mc.n_layers, &mut substream(seed, "init.router"));
    let tasks = vec![
        TaskSpec::new("retrieval", TaskCategory::Retrieval, 0.45, cfg.seq_len, cfg.seq_len)?,
        TaskSpec::new("holistic", TaskCategory::Holistic, 1.0, cfg.seq_len, cfg.seq_len)?,
    ];
    let mut data = substream(seed, "data");
    let mut gumbel = substream(seed, "gumbel");
    let mut batch = Vec::new();
    for (t, spec) in tasks.iter().enumerate() {
        for _ in 0..cfg.per_task {
            batch.push(RouterSample {
                task: t,
                example: spec.sample(data.gen(), mc.ssa_sink, mc.ssa_local)?,
                noise: (0..mc.n_layers).map(|_| GumbelNoise::sample(&mut gumbel)).collect(),
            });
        }
    }
    // Non-zero multipliers so both penalty terms contribute.
    let mut dual_rng = substream(seed, "dual");
    let duals: Vec<DualVariables> = tasks
        .iter()
        .map(|_| DualVariables {
            lambda1: dual_rng.gen_range(0.1..1.0),
            lambda2: dual_rng.gen_range(0.5..2.0),
        })
        .collect();

    let obj = router_objective(&weights, &routers, &tasks, &batch, &duals, cfg.tau)?;
    let analytic: Vec<f64> = obj.grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let names: Vec<(String, usize)> = routers
        .named_tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let params: Vec<f64> = routers
        .named_tensors()
        .iter()
        .flat_map(|(_, t)| t.data().iter().copied().collect::<Vec<_>>())
        .collect();

    let mut probe = routers.clone();
    let mut failure = None;
    let fd = finite_diff_check_5pt(
        |p| {
            let mut off = 0;
            for (_, t) in probe.named_tensors_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&p[off..off + n]);
                off += n;
            }
            match router_objective(&weights, &probe, &tasks, &batch, &duals, cfg.tau) {
                Ok(o) => o.loss,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &params,
        &analytic,
        cfg.h,
        cfg.tol,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let mut off = 0;
    let mut worst_tensor = String::new();
    for (n, len) in names {
        if fd.worst_index < off + len {
            worst_tensor = n;
            break;
        }
        off += len;
    }
    Ok(GradcheckReport {
        n_params: params.len(),
        loss: obj.loss,
        fd,
        worst_tensor,
    })
}
