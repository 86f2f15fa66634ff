use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attention::{full_attention, make_ssa_pattern, sparse_attention};
use crate::router::{GumbelNoise, LayerRoute, RouterConfig, Routers};
use LayerRoute::{Full, Sparse};

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        n_heads: 2,
        head_dim: 4,
        vocab_size: 260,
        max_seq_len: 64,
        mlp_hidden: 16,
        ssa_sink: 2,
        ssa_local: 6,
    }
}

fn model<T: Scalar>(cfg: ModelConfig, seed: u64) -> TransformerWeights<T> {
    TransformerWeights::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..260)).collect()
}

/// Routers whose head bias pins every decision to `route` by `margin`.
fn pinned_routers<T: Scalar>(cfg: &ModelConfig, route: LayerRoute, margin: f64) -> Routers<T> {
    let mut r = Routers::zeros(RouterConfig::for_model_dim(cfg.model_dim()), cfg.n_layers);
    for w in &mut r.layers {
        let b = w.head_b.data_mut();
        let sign = if route == Full { 1.0 } else { -1.0 };
        b[0] = T::from_f64_lossy(sign * margin);
    }
    r
}

fn last_row<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.row(t.rows() - 1).iter().map(|v| v.as_f64()).collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn hard_all_full_is_bit_identical_to_dense() {
    let cfg = small_config();
    let w = model::<f32>(cfg, 1);
    let toks = tokens(20, 2);
    let dense = prefill(&toks, &w, None, Routing::Forced(&[Full; 3]), false).unwrap();
    let routers = pinned_routers(&cfg, Full, 3.0);
    let hard = prefill(&toks, &w, Some(&routers), Routing::Hard, false).unwrap();
    assert_eq!(hard.plan.routes, vec![Full; 3]);
    assert_eq!(dense.logits, hard.logits);
}

#[test]
fn tied_router_logits_route_to_full() {
    let cfg = small_config();
    let w = model::<f64>(cfg, 1);
    let routers = Routers::zeros(RouterConfig::for_model_dim(cfg.model_dim()), 3);
    let out = prefill(&tokens(10, 5), &w, Some(&routers), Routing::Hard, false).unwrap();
    assert_eq!(out.plan.routes, vec![Full; 3]);
    assert_eq!(out.r_soft, vec![0.5; 3]);
}

#[test]
fn soft_endpoint_matches_dense() {
    let cfg = small_config();
    let w = model::<f64>(cfg, 3);
    let toks = tokens(24, 4);
    let dense = prefill(&toks, &w, None, Routing::Forced(&[Full; 3]), false).unwrap();
    let routers = pinned_routers(&cfg, Full, 40.0);
    let noise = [GumbelNoise::ZERO; 3];
    let soft = prefill(
        &toks,
        &w,
        Some(&routers),
        Routing::Soft {
            tau: 1.0,
            noise: NoiseSource::Fixed(&noise),
        },
        false,
    )
    .unwrap();
    assert!(soft.logits.max_abs_diff(&dense.logits) <= 1e-5);
    // Soft caches keep every token.
    assert!(soft.cache.layers.iter().all(|l| l.policy() == CachePolicy::Full));

    let sparse = prefill(&toks, &w, None, Routing::Forced(&[Sparse; 3]), false).unwrap();
    let routers = pinned_routers(&cfg, Sparse, 40.0);
    let soft = prefill(
        &toks,
        &w,
        Some(&routers),
        Routing::Soft {
            tau: 1.0,
            noise: NoiseSource::Fixed(&noise),
        },
        false,
    )
    .unwrap();
    assert!(soft.logits.max_abs_diff(&sparse.logits) <= 1e-12);
}

#[test]
fn half_gate_averages_independent_branches() {
    let cfg = small_config();
    let w = model::<f64>(cfg, 5);
    let toks = tokens(16, 6);
    let routers = Routers::zeros(RouterConfig::for_model_dim(cfg.model_dim()), 3);
    let noise = [GumbelNoise::ZERO; 3];
    let out = prefill(
        &toks,
        &w,
        Some(&routers),
        Routing::Soft {
            tau: 0.7,
            noise: NoiseSource::Fixed(&noise),
        },
        true,
    )
    .unwrap();
    assert_eq!(out.r_soft, vec![0.5; 3]);
    let s = toks.len();
    for tr in out.trace.unwrap() {
        let shape = [s, cfg.n_heads, cfg.head_dim];
        let q = tr.x_q.clone().reshape(&shape).unwrap();
        let k = tr.k.clone().reshape(&shape).unwrap();
        let v = tr.v.clone().reshape(&shape).unwrap();
        let fa = full_attention(&q, &k, &v, true).unwrap();
        let pattern = make_ssa_pattern(s, cfg.ssa_sink, cfg.ssa_local).unwrap();
        let sa = sparse_attention(&q, &k, &v, &pattern).unwrap();
        for (i, got) in tr.attn.data().iter().enumerate() {
            let want = 0.5 * (fa.data()[i] + sa.data()[i]);
            assert!((got - want).abs() <= 1e-12);
        }
    }
}

fn decode_vs_prefill(plan: &[LayerRoute], prompt: usize, steps: usize, cfg: ModelConfig) -> f64 {
    let w = model::<f32>(cfg, 7);
    let toks = tokens(prompt + steps, 8);
    let mut pre = prefill(&toks[..prompt], &w, None, Routing::Forced(plan), false).unwrap();
    let mut logits = None;
    for &t in &toks[prompt..] {
        logits = Some(decode_step(t, &w, &mut pre.cache, &pre.plan).unwrap());
    }
    let full = prefill(&toks, &w, None, Routing::Forced(plan), false).unwrap();
    max_diff(&last_row(&logits.unwrap()), &last_row(&full.logits))
}

#[test]
fn dense_decode_matches_batch_prefill() {
    assert!(decode_vs_prefill(&[Full; 3], 12, 1, small_config()) <= 1e-5);
    assert!(decode_vs_prefill(&[Full; 3], 12, 6, small_config()) <= 1e-5);
}

#[test]
fn wide_window_sparse_decode_matches_dense() {
    let mut cfg = small_config();
    cfg.ssa_sink = 4;
    cfg.ssa_local = 30;
    let w = model::<f32>(cfg, 9);
    let toks = tokens(24, 10);
    let run = |plan: &[LayerRoute]| {
        let mut pre = prefill(&toks[..16], &w, None, Routing::Forced(plan), false).unwrap();
        let mut last = None;
        for &t in &toks[16..] {
            last = Some(decode_step(t, &w, &mut pre.cache, &pre.plan).unwrap());
        }
        last_row(&last.unwrap())
    };
    assert!(max_diff(&run(&[Sparse; 3]), &run(&[Full; 3])) <= 1e-5);
}

#[test]
fn mixed_plan_decode_matches_forced_prefill() {
    let cfg = small_config();
    let err = decode_vs_prefill(&[Sparse, Full, Sparse], 32, 8, cfg);
    assert!(err <= 1e-4, "{err}");
    // Windowed layers hold exactly sink + local tokens.
    let w = model::<f32>(cfg, 7);
    let pre = prefill(&tokens(32, 8), &w, None, Routing::Forced(&[Sparse, Full, Sparse]), false).unwrap();
    let stored: Vec<usize> = pre.cache.layers.iter().map(|l| l.stored()).collect();
    assert_eq!(stored, vec![8, 32, 8]);
    let counts = kv_cache_tokens(&pre.plan, 32, cfg.ssa_sink, cfg.ssa_local);
    assert_eq!(counts.per_layer, stored);
}

#[test]
fn sparse_route_over_full_cache_restricts_to_window() {
    let cfg = small_config();
    let w = model::<f64>(cfg, 11);
    let toks = tokens(30, 12);
    let plan = RoutingPlan::forced(vec![Sparse, Full, Sparse]);
    let mut windowed = KvCache::for_plan(&cfg, &plan).unwrap();
    let mut full = KvCache::new(&cfg, &[CachePolicy::Full; 3]).unwrap();
    let (mut a, mut b) = (None, None);
    for &t in &toks {
        a = Some(decode_step(t, &w, &mut windowed, &plan).unwrap());
        b = Some(decode_step(t, &w, &mut full, &plan).unwrap());
    }
    assert!(a.unwrap().max_abs_diff(&b.unwrap()) <= 1e-12);
}

#[test]
fn decode_contract_errors() {
    let cfg = small_config();
    let w = model::<f32>(cfg, 1);
    let mut pre = prefill(&tokens(4, 1), &w, None, Routing::Forced(&[Sparse; 3]), false).unwrap();
    let short = RoutingPlan::uniform(2, Full);
    assert!(matches!(
        decode_step(1, &w, &mut pre.cache, &short),
        Err(FluxError::Contract(_))
    ));
    let full = RoutingPlan::uniform(3, Full);
    assert!(matches!(
        decode_step(1, &w, &mut pre.cache, &full),
        Err(FluxError::Contract(_))
    ));
    assert!(matches!(
        decode_step(999, &w, &mut pre.cache, &pre.plan.clone()),
        Err(FluxError::Index { .. })
    ));
    assert!(prefill(&[], &w, None, Routing::Forced(&[Full; 3]), false).is_err());
    assert!(matches!(
        prefill(&[260], &w, None, Routing::Forced(&[Full; 3]), false),
        Err(FluxError::Index { .. })
    ));
    assert!(prefill(&tokens(65, 1), &w, None, Routing::Forced(&[Full; 3]), false).is_err());
    assert!(prefill(&tokens(5, 1), &w, None, Routing::Hard, false).is_err());
}

#[test]
fn frozen_backbone_gets_no_gradient() {
    let cfg = small_config();
    let mut w = model::<f64>(cfg, 2);
    w.frozen = true;
    let routers: Routers<f64> = Routers::init(
        RouterConfig::for_model_dim(cfg.model_dim()),
        3,
        &mut ChaCha8Rng::seed_from_u64(3),
    );
    let mut g = crate::grad::Graph::new();
    let m = w.bind(&mut g, true);
    let r = routers.bind(&mut g, true);
    let toks = tokens(12, 3);
    let noise = [GumbelNoise::ZERO; 3];
    let mut routing = Routing::Soft {
        tau: 1.0,
        noise: NoiseSource::Fixed(&noise),
    };
    let fwd = forward_graph(&mut g, &w, &m, Some(&r), &toks, &mut routing).unwrap();
    let targets: Vec<(usize, u32)> = (0..11).map(|i| (i, toks[i + 1])).collect();
    let loss = g.cross_entropy(fwd.logits, &targets).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(m.all().iter().all(|&v| grads.get(v).is_none()));
    // Layer 0's router influences the loss only through frozen layers.
    assert!(grads.get(r.layers[0].head_w).is_some());
    assert!(r.all().iter().all(|&v| grads.get(v).is_some()));
}

#[test]
fn named_tensors_cover_every_parameter() {
    let w = model::<f32>(small_config(), 1);
    let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 2 + 16 * 3 + 4);
    assert_eq!(names[2], "layer0.ln1.g");
    assert_eq!(names.last().unwrap(), "head.b");
    let mut g = crate::grad::Graph::<f32>::new();
    assert_eq!(w.bind(&mut g, true).all().len(), names.len());
}

#[test]
fn extended_positions_keep_short_prompts_and_wrap() {
    let cfg = small_config();
    let w = model::<f32>(cfg, 3);
    let long = w.with_max_seq_len(150).unwrap();
    assert_eq!(long.config.max_seq_len, 150);
    let toks = tokens(30, 4);
    let a = prefill(&toks, &w, None, Routing::Forced(&[Full, Sparse, Full]), false).unwrap();
    let b = prefill(&toks, &long, None, Routing::Forced(&[Full, Sparse, Full]), false).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
    let d = cfg.model_dim();
    assert_eq!(long.pos_emb.row(64 + 5), w.pos_emb.row(5));
    assert_eq!(long.pos_emb.row(149), w.pos_emb.row(149 - 128));
    assert_eq!(long.pos_emb.shape(), &[150, d]);
    assert!(w.with_max_seq_len(0).is_err());
}

proptest! {
    #[test]
    fn windowed_cache_keeps_sink_and_recent(sink in 0usize..5, local in 1usize..7, n in 1usize..30) {
        let mut c = LayerCache::<f64>::new(CachePolicy::Windowed { sink, local }, 1).unwrap();
        for t in 0..n {
            c.push(&[t as f64], &[-(t as f64)]);
        }
        let (k, v) = c.to_tensors().unwrap();
        let got: Vec<usize> = k.data().iter().map(|&x| x as usize).collect();
        let expected: Vec<usize> = make_ssa_pattern(n, sink, local).unwrap().visible(n - 1);
        prop_assert_eq!(got, expected);
        prop_assert!(v.data().iter().zip(k.data()).all(|(a, b)| *a == -*b));
        prop_assert_eq!(c.stored(), n.min(sink + local));
    }
}
