use flux_core::model::{ModelConfig, TransformerWeights};
use flux_core::router::{PoolingConfig, RouterConfig, Routers, TemperatureSchedule};
use flux_core::seed::substream;
use flux_core::tasks::{TaskCategory, TaskSpec};
use flux_core::train::{dual_ascent_step, train_router, DualVariables, LrSchedule, RouterTrainConfig, RouterTrainOutcome};

fn tiny_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 8,
        max_seq_len: 96,
        mlp_hidden: 32,
        ssa_sink: 4,
        ssa_local: 12,
        ..ModelConfig::default()
    }
}

fn tasks() -> Vec<TaskSpec> {
    let mut r = TaskSpec::new("retrieval", TaskCategory::Retrieval, 0.45, 48, 64).unwrap();
    r.n_pairs = 4;
    r.n_recalls = 4;
    vec![r, TaskSpec::new("holistic", TaskCategory::Holistic, 1.0, 48, 64).unwrap()]
}

fn train_cfg(steps: usize, dual_updates: bool) -> RouterTrainConfig {
    RouterTrainConfig {
        steps,
        batch: 4,
        lr_router: 1e-2,
        lr_dual: 1e-1,
        tau: TemperatureSchedule::new(1.0, 0.1, steps).unwrap(),
        dual_updates,
        seed: 3,
        probe_every: 0,
        ..RouterTrainConfig::default()
    }
}

fn setup() -> (TransformerWeights<f32>, Routers<f32>) {
    let cfg = tiny_model();
    let mut w = TransformerWeights::<f32>::init(cfg, &mut substream(3, "init")).unwrap();
    w.frozen = true;
    let r = Routers::init(
        RouterConfig {
            pooling: PoolingConfig { pool_size: 8 },
            ..RouterConfig::for_model_dim(cfg.model_dim())
        },
        cfg.n_layers,
        &mut substream(3, "init.router"),
    );
    (w, r)
}

fn run(steps: usize, dual_updates: bool) -> (TransformerWeights<f32>, Routers<f32>, RouterTrainOutcome) {
    let (w, r) = setup();
    let out = train_router(&w, r.clone(), &tasks(), &train_cfg(steps, dual_updates)).unwrap();
    (w, r, out)
}

#[test]
fn backbone_is_untouched() {
    let (w, _, _) = run(6, true);
    let before = setup().0;
    for ((n, a), (_, b)) in before.named_tensors().into_iter().zip(w.named_tensors()) {
        assert_eq!(a.data(), b.data(), "{n}");
    }
}

#[test]
fn routers_move() {
    let (_, r0, out) = run(6, true);
    let changed = r0
        .named_tensors()
        .into_iter()
        .zip(out.routers.named_tensors())
        .any(|((_, a), (_, b))| a.data() != b.data());
    assert!(changed);
}

#[test]
fn multipliers_change_only_by_their_ascent_step() {
    let steps = 12;
    let (_, _, out) = run(steps, true);
    let cfg = train_cfg(steps, true);
    let lr = LrSchedule {
        peak: cfg.lr_dual,
        warmup_ratio: cfg.warmup_ratio,
        total_steps: steps,
    };
    let mut dual_rng = substream(cfg.seed, "dual");
    let mut duals: Vec<DualVariables> = (0..2).map(|_| DualVariables::random(&mut dual_rng)).collect();
    for row in out.history.rows() {
        for (d, t) in duals.iter_mut().zip(&row.tasks) {
            *d = dual_ascent_step(*d, t.l_diff, lr.lr(row.step));
            assert_eq!((d.lambda1, d.lambda2), (t.lambda1, t.lambda2), "step {}", row.step);
            assert!(t.lambda1 >= 0.0 && t.lambda2 >= 0.0);
        }
    }
    assert_eq!(out.duals, duals);
}

#[test]
fn disabled_duals_stay_zero() {
    let (_, _, out) = run(5, false);
    assert!(out.duals.iter().all(|d| *d == DualVariables::ZERO));
    assert!(out
        .history
        .rows()
        .iter()
        .all(|r| r.tasks.iter().all(|t| t.lambda1 == 0.0 && t.lambda2 == 0.0)));
}

#[test]
fn same_seed_same_routers() {
    let a = run(5, true).2;
    let b = run(5, true).2;
    for ((n, x), (_, y)) in a.routers.named_tensors().into_iter().zip(b.routers.named_tensors()) {
        assert_eq!(x.data(), y.data(), "{n}");
    }
    assert_eq!(a.history, b.history);
}

#[test]
fn unfrozen_backbone_is_rejected() {
    let (mut w, r) = setup();
    w.frozen = false;
    assert!(train_router(&w, r, &tasks(), &train_cfg(2, true)).is_err());
}
