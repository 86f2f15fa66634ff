//! End-to-end acceptance checks on the desk model. Criteria run one after
//! another inside a single test so the latency measurements never share the
//! CPU with training.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use flux_cli::commands::{cmd_bench, cmd_eval, cmd_pretrain, cmd_train_router, Context, EvalRow, EvalSpec};
use flux_cli::RunConfig;
use flux_core::attention::{full_attention, make_ssa_pattern, sparse_attention, BlockMask, SparsePattern};
use flux_core::bench::{speedup_report, router_overhead_probe, Provenance, DENSE_VARIANT};
use flux_core::checkpoint::Checkpoint;
use flux_core::entropy::{profile_layers, sparsity_sweep, SweepRow};
use flux_core::model::{model_sparsity_ratio, model_sparsity_ratio_heads, RoutingPlan, TransformerWeights};
use flux_core::router::{hard_route, GumbelNoise, LayerRoute, Routers};
use flux_core::seed::substream;
use flux_core::tasks::{Example, TaskCategory};
use flux_core::tensor::Tensor;
use flux_core::train::{probe_set, router_gradcheck, GradcheckConfig, TrainHistory};

const DESK: &str = include_str!("../../../configs/desk.cfg");

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

/// Straight to the process stdout so the lines show up without --nocapture.
fn report(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn outcome(name: &'static str, pass: bool, detail: String) -> Outcome {
    report(format!("{} criterion {name}: {detail}", if pass { "PASS" } else { "FAIL" }));
    Outcome { name, pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random_qkv(rng: &mut impl Rng, s: usize, h: usize, d: usize) -> [Tensor<f64>; 3] {
    let mut t = || Tensor::from_fn(&[s, h, d], |_| rng.gen_range(-2.0..2.0));
    [t(), t(), t()]
}

/// Textbook causal softmax attention, one query at a time.
fn naive_causal(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Vec<f64> {
    let sh = q.shape();
    let (s, h, d) = (sh[0], sh[1], sh[2]);
    let at = |t: &Tensor<f64>, i: usize, hh: usize, j: usize| t.data()[(i * h + hh) * d + j];
    let mut out = vec![0.0; s * h * d];
    for i in 0..s {
        for hh in 0..h {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|c| at(q, i, hh, c) * at(k, j, hh, c)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = w.iter().sum();
            for c in 0..d {
                out[(i * h + hh) * d + c] = (0..=i).map(|j| w[j] * at(v, j, hh, c)).sum::<f64>() / z;
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn kernel_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = substream(1, "acceptance.kernels");
    let (mut worst, mut worst_naive) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let s = rng.gen_range(1..=64);
        let h = rng.gen_range(1..=4);
        let d = rng.gen_range(1..=16);
        let [q, k, v] = random_qkv(&mut rng, s, h, d);
        let full = full_attention(&q, &k, &v, true).unwrap();
        // Full causal visibility expressed two ways: an SSA window wider than
        // the sequence, and a lower-triangular block mask.
        let pattern = if case % 2 == 0 {
            make_ssa_pattern(s, rng.gen_range(0..=s), s).unwrap()
        } else {
            let b = rng.gen_range(1..=8);
            let n = s.div_ceil(b);
            let grid = (0..n).map(|qb| (0..n).map(|kb| kb <= qb).collect()).collect();
            SparsePattern::blocks(s, BlockMask::new(b, grid).unwrap()).unwrap()
        };
        let sparse = sparse_attention(&q, &k, &v, &pattern).unwrap();
        worst = worst.max(max_abs_diff(full.data(), sparse.data()));
        worst_naive = worst_naive.max(max_abs_diff(full.data(), &naive_causal(&q, &k, &v)));
    }
    let elapsed = start.elapsed();
    outcome(
        "1 kernel equivalence",
        worst <= 1e-12 && worst_naive <= 1e-12 && elapsed < Duration::from_secs(1),
        format!("max|sparse-full| {worst:.2e}, max|full-naive| {worst_naive:.2e}, {}", secs(elapsed)),
    )
}

fn gumbel_statistics() -> Outcome {
    let start = Instant::now();
    let n = 200_000;
    let mut rng = substream(2, "acceptance.gumbel");
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for delta in [-2.0f64, -0.5, 0.0, 0.5, 2.0] {
        let (pi_fa, pi_sa) = (0.3 + delta, 0.3);
        let fa = (0..n)
            .filter(|_| {
                let g = GumbelNoise::sample(&mut rng);
                hard_route(pi_fa + g.g_fa, pi_sa + g.g_sa) == LayerRoute::Full
            })
            .count();
        let freq = fa as f64 / n as f64;
        let expect = 1.0 / (1.0 + (-delta).exp());
        worst = worst.max((freq - expect).abs());
        parts.push(format!("{delta:+}: {freq:.4}/{expect:.4}"));
    }
    let elapsed = start.elapsed();
    outcome(
        "2 gumbel statistics",
        worst <= 0.01 && elapsed < Duration::from_secs(5),
        format!("{} max dev {worst:.4}, {}", parts.join(" "), secs(elapsed)),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GradcheckConfig::default();
    let pass_shape = cfg.model.n_layers == 2 && cfg.model.n_heads == 2 && cfg.model.head_dim == 8 && cfg.seq_len == 64;
    let report = router_gradcheck(&cfg, 3).unwrap();
    let elapsed = start.elapsed();
    outcome(
        "3 gradient suite",
        pass_shape && report.fd.passed && report.fd.max_rel_err <= 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "{} router parameters, max rel err {:.2e} (worst in {}), {}",
            report.n_params,
            report.fd.max_rel_err,
            report.worst_tensor,
            secs(elapsed)
        ),
    )
}

fn msr_exactness() -> Outcome {
    let mut rng = substream(4, "acceptance.msr");
    let mut mismatches = 0;
    for _ in 0..100 {
        let layers = rng.gen_range(1..=32);
        let heads = rng.gen_range(1..=16);
        let routes: Vec<LayerRoute> = (0..layers)
            .map(|_| if rng.gen_bool(0.5) { LayerRoute::Sparse } else { LayerRoute::Full })
            .collect();
        let sparse_layers = routes.iter().filter(|r| **r == LayerRoute::Sparse).count();
        // Every head of a sparse layer is one sparse slot.
        let hand = (sparse_layers * heads) as f64 / (layers * heads) as f64;
        if model_sparsity_ratio(&RoutingPlan::forced(routes), heads) != hand {
            mismatches += 1;
        }
        let modes: Vec<Vec<LayerRoute>> = (0..layers)
            .map(|_| {
                (0..heads)
                    .map(|_| if rng.gen_bool(0.3) { LayerRoute::Sparse } else { LayerRoute::Full })
                    .collect()
            })
            .collect();
        let mut count = 0;
        for row in &modes {
            for m in row {
                if *m == LayerRoute::Sparse {
                    count += 1;
                }
            }
        }
        if model_sparsity_ratio_heads(&modes) != count as f64 / (layers * heads) as f64 {
            mismatches += 1;
        }
    }
    outcome(
        "4 msr exactness",
        mismatches == 0,
        format!("{mismatches} mismatches over 100 layer plans and 100 head assignments"),
    )
}

fn metrics<'a>(rows: &'a [EvalRow], cat: TaskCategory) -> &'a EvalRow {
    rows.iter().find(|r| r.category == cat).expect("task of each category")
}

fn routing_differentiation(dense: &[EvalRow], routed: &[EvalRow], elapsed: Duration) -> Outcome {
    let ret_d = metrics(dense, TaskCategory::Retrieval).metrics.accuracy.unwrap();
    let ret = metrics(routed, TaskCategory::Retrieval).metrics;
    let hol = metrics(routed, TaskCategory::Holistic).metrics;
    let gap = hol.omega - ret.omega;
    let acc = ret.accuracy.unwrap();
    outcome(
        "5 routing differentiation",
        gap >= 0.2 && acc >= ret_d - 0.05 && elapsed <= Duration::from_secs(15 * 60),
        format!(
            "omega holistic {:.3} retrieval {:.3} (gap {gap:.3}); retrieval accuracy routed {acc:.4} dense {ret_d:.4}; {}",
            hol.omega,
            ret.omega,
            secs(elapsed)
        ),
    )
}

fn mean_r(h: &TrainHistory, task: usize, range: std::ops::Range<usize>) -> f64 {
    let rows = &h.rows()[range];
    rows.iter().map(|r| r.tasks[task].r_soft_mean).sum::<f64>() / rows.len() as f64
}

fn degenerate_fa(h: &TrainHistory) -> Outcome {
    let t = h.task_index("retrieval").unwrap();
    let n = h.len();
    let tenth = (n / 10).max(1);
    let (first, last) = (mean_r(h, t, 0..tenth), mean_r(h, t, n - tenth..n));
    let zero = h.rows().iter().all(|r| r.tasks.iter().all(|s| s.lambda1 == 0.0 && s.lambda2 == 0.0));
    outcome(
        "5 lambda=0 drift",
        zero && last > first && last >= 0.95,
        format!("retrieval mean r_soft {first:.3} over the first tenth, {last:.3} over the last"),
    )
}

fn sparsity_cliff(rows: &[SweepRow], elapsed: Duration) -> Outcome {
    let series = |metric: &str| -> Vec<(f64, f64)> {
        rows.iter().filter(|r| r.metric == metric).map(|r| (r.omega, r.value)).collect()
    };
    let acc = series("accuracy");
    let ppl = series("perplexity");
    let (dense_ppl, cliff) = (ppl[0].1, acc.windows(2).map(|w| w[0].1 - w[1].1).fold(f64::MIN, f64::max));
    let worst_ppl = ppl
        .iter()
        .filter(|(o, _)| *o <= 0.75 + 1e-12)
        .map(|(_, p)| p / dense_ppl - 1.0)
        .fold(f64::MIN, f64::max);
    let acc_s: Vec<String> = acc.iter().map(|(o, a)| format!("{o}:{a:.3}")).collect();
    outcome(
        "6 sparsity cliff",
        cliff > 0.30 && worst_ppl <= 0.10 && elapsed <= Duration::from_secs(10 * 60),
        format!(
            "retrieval accuracy [{}], largest step drop {:.1} points; holistic perplexity within {:.2}% for omega <= 0.75; {}",
            acc_s.join(" "),
            cliff * 100.0,
            worst_ppl * 100.0,
            secs(elapsed)
        ),
    )
}

fn decode_scaling(cfg: &RunConfig, records: &[flux_core::bench::LatencyRecord], elapsed: Duration) -> Outcome {
    let rows = speedup_report(records).unwrap();
    let find = |ctx: usize, variant: &str, prov: Provenance| {
        rows.iter()
            .find(|r| r.record.context_len == ctx && r.record.variant == variant && r.record.provenance == prov)
            .unwrap_or_else(|| panic!("no {variant} record at {ctx}"))
    };
    let m = Provenance::Measured;
    let sa_ratio = find(32768, "all_sparse", m).record.mean_ms / find(4096, "all_sparse", m).record.mean_ms;
    let omega_label = format!("layer_omega{}", cfg.bench.omega);
    let layer = find(16384, &omega_label, m).speedup_vs_dense;
    let head = find(65536, "head_one_dense", Provenance::Modeled).speedup_vs_dense;
    let equal = find(65536, "layer_equal_flops", Provenance::Modeled).speedup_vs_dense;
    let dense_one = rows
        .iter()
        .filter(|r| r.record.variant == DENSE_VARIANT)
        .all(|r| r.speedup_vs_dense == 1.0);
    outcome(
        "7 decode scaling",
        sa_ratio <= 1.3 && layer >= 1.3 && head <= 1.1 && equal >= 1.8 && dense_one && elapsed <= Duration::from_secs(600),
        format!(
            "all-sparse 32768/4096 {sa_ratio:.3}; measured omega {} speedup at 16384 {layer:.3}; modeled at 65536 head-level {head:.3} layer-level {equal:.3}; {}",
            cfg.bench.omega,
            secs(elapsed)
        ),
    )
}

fn router_overhead(cfg: &RunConfig, routers: &Routers<f32>) -> Outcome {
    let probe = router_overhead_probe(
        &routers.layers[0],
        cfg.pool_size,
        &cfg.bench.router_lengths,
        cfg.bench.router_iters,
        cfg.seed,
    )
    .unwrap();
    let per: Vec<String> = probe.per_length.iter().map(|(l, ms)| format!("{l}:{:.2}us", ms * 1e3)).collect();
    outcome(
        "8 router overhead",
        probe.cv <= 0.10,
        format!("[{}] cv {:.4}", per.join(" "), probe.cv),
    )
}

fn dual_mechanics(h: &TrainHistory) -> Outcome {
    let rows = h.rows();
    let nonneg = rows.iter().all(|r| r.tasks.iter().all(|t| t.lambda1 >= 0.0 && t.lambda2 >= 0.0));
    let mut violations = 0;
    let mut positive_steps = 0;
    for w in rows.windows(2) {
        for (prev, cur) in w[0].tasks.iter().zip(&w[1].tasks) {
            if cur.l_diff > 0.0 {
                positive_steps += 1;
                if cur.lambda1 < prev.lambda1 {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        "9 dual ascent",
        nonneg && violations == 0,
        format!(
            "lambda >= 0 at all {} steps: {nonneg}; lambda1 decreased on {violations} of {positive_steps} steps with L_diff > 0",
            rows.len()
        ),
    )
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn acceptance_criteria() {
    let mut results = vec![kernel_equivalence(), gumbel_statistics(), gradient_suite(), msr_exactness()];

    let cfg = RunConfig::parse(DESK).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ctx = Context::new(cfg.clone(), dir.path().join("run")).unwrap();
    let pre = cmd_pretrain(&ctx).unwrap();
    report(format!(
        "backbone: retrieval accuracy {:?}, holistic perplexity {:?} (chain {:.4})",
        pre.retrieval_accuracy, pre.holistic_perplexity, pre.reference_perplexity
    ));
    let backbone = ctx.backbone_path();

    let start = Instant::now();
    let trained = cmd_train_router(&ctx, &backbone).unwrap();
    let routed_path = ctx.routed_path();
    let dense = cmd_eval(&ctx, &routed_path, EvalSpec::Dense).unwrap();
    let routed = cmd_eval(&ctx, &routed_path, EvalSpec::Routed).unwrap();
    results.push(routing_differentiation(&dense, &routed, start.elapsed()));

    let mut frozen = cfg.clone();
    frozen.train.dual_updates = false;
    let ctx_frozen = Context::new(frozen, dir.path().join("frozen")).unwrap();
    let no_duals = cmd_train_router(&ctx_frozen, &backbone).unwrap();
    results.push(degenerate_fa(&no_duals.history));

    let start = Instant::now();
    let mut weights: TransformerWeights<f32> = Checkpoint::load(&backbone).unwrap().model(cfg.model).unwrap();
    weights.frozen = true;
    let mut profile_probes: Vec<Example> = Vec::new();
    let mut evals = Vec::new();
    for t in &cfg.tasks {
        profile_probes.extend(probe_set(t, cfg.profile.probe_examples, cfg.seed, &cfg.model).unwrap());
        evals.push((t.clone(), probe_set(t, cfg.eval_probe_examples, cfg.seed, &cfg.model).unwrap()));
    }
    let scores: Vec<f64> = profile_layers(&weights, &profile_probes, cfg.profile.truncation)
        .unwrap()
        .iter()
        .map(|s| s.entropy)
        .collect();
    let sweep = sparsity_sweep(&weights, &scores, &evals, &cfg.profile.grid).unwrap();
    results.push(sparsity_cliff(&sweep, start.elapsed()));

    let start = Instant::now();
    let records = cmd_bench(&ctx, &routed_path).unwrap();
    results.push(decode_scaling(&cfg, &records, start.elapsed()));
    results.push(router_overhead(&cfg, &trained.routers));
    results.push(dual_mechanics(&trained.history));

    let ctx_again = Context::new(cfg.clone(), dir.path().join("again")).unwrap();
    cmd_train_router(&ctx_again, &backbone).unwrap();
    let same = read(&routed_path) == read(&ctx_again.routed_path());
    results.push(outcome(
        "10 determinism",
        same,
        format!("repeated router training {} the checkpoint bit for bit", if same { "reproduces" } else { "does not reproduce" }),
    ));

    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
