use rand::RngCore;

use super::cache::{CachePolicy, KvCache};
use super::plan::RoutingPlan;
use super::{ModelConfig, TransformerWeights};
use crate::attention::{make_ssa_pattern, SparsePattern};
use crate::error::{FluxError, Result};
use crate::grad::{Graph, Var};
use crate::router::{hard_route, BoundRouters, GumbelNoise, LayerRoute, Routers};
use crate::tensor::{Scalar, Tensor};

/// Backbone parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<BoundLayer>,
    pub ln_f_g: Var,
    pub ln_f_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Where Gumbel noise for soft routing comes from.
pub enum NoiseSource<'a> {
    /// One fresh pair per layer, drawn in layer order.
    Sampled(&'a mut dyn RngCore),
    /// One pair per layer, supplied by the caller.
    Fixed(&'a [GumbelNoise]),
}

pub enum Routing<'a> {
    /// Both branches run and are blended by the relaxed gate.
    Soft { tau: f64, noise: NoiseSource<'a> },
    /// Argmax over router logits; only the chosen branch runs.
    Hard,
    /// A fixed plan; routers are not consulted.
    Forced(&'a [LayerRoute]),
}

/// Graph nodes of one layer.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub x_q: Var,
    pub k: Var,
    pub v: Var,
    pub logits: Option<Var>,
    /// Soft-mode gate `r_soft`.
    pub gate: Option<Var>,
    pub fa: Option<Var>,
    pub sa: Option<Var>,
    pub attn: Var,
    pub hidden: Var,
    pub route: LayerRoute,
    pub r_soft: f64,
}

#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Var,
    pub layers: Vec<LayerRecord>,
}

/// Per-layer activations copied out of a prefill.
#[derive(Debug, Clone)]
pub struct LayerTrace<T: Scalar> {
    pub x_q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub fa: Option<Tensor<T>>,
    pub sa: Option<Tensor<T>>,
    pub attn: Tensor<T>,
    pub hidden: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Prefill<T: Scalar> {
    pub logits: Tensor<T>,
    pub plan: RoutingPlan,
    pub cache: KvCache<T>,
    pub r_soft: Vec<f64>,
    pub trace: Option<Vec<LayerTrace<T>>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() || tokens.len() > cfg.max_seq_len {
        return Err(FluxError::contract(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    Ok(())
}

/// Run the model over `tokens` inside `g`.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    weights: &TransformerWeights<T>,
    model: &BoundModel,
    routers: Option<&BoundRouters>,
    tokens: &[u32],
    routing: &mut Routing<'_>,
) -> Result<GraphForward> {
    let cfg = &weights.config;
    check_tokens(cfg, tokens)?;
    let n_layers = cfg.n_layers;
    let s = tokens.len();

    let routers = match routing {
        Routing::Forced(routes) => {
            if routes.len() != n_layers {
                return Err(FluxError::contract(format!(
                    "forced plan has {} layers, model has {n_layers}",
                    routes.len()
                )));
            }
            None
        }
        _ => {
            let r = routers.ok_or_else(|| FluxError::contract("routed prefill needs routers"))?;
            if r.layers.len() != n_layers {
                return Err(FluxError::contract(format!(
                    "{} routers for {n_layers} layers",
                    r.layers.len()
                )));
            }
            Some(r)
        }
    };
    if let Routing::Soft {
        noise: NoiseSource::Fixed(n),
        ..
    } = routing
    {
        if n.len() != n_layers {
            return Err(FluxError::contract("fixed noise needs one pair per layer"));
        }
    }

    let causal = SparsePattern::causal(s);
    let ssa = make_ssa_pattern(s, cfg.ssa_sink, cfg.ssa_local)?;
    let positions: Vec<u32> = (0..s as u32).collect();

    let tok = g.embed(model.tok_emb, tokens)?;
    let pos = g.embed(model.pos_emb, &positions)?;
    let mut x = g.add(tok, pos)?;
    let mut records = Vec::with_capacity(n_layers);

    for (l, lw) in model.layers.iter().enumerate() {
        let h = g.layer_norm(x, lw.ln1_g, lw.ln1_b)?;
        let x_q = g.linear(h, lw.wq, lw.bq)?;
        let k = g.linear(h, lw.wk, lw.bk)?;
        let v = g.linear(h, lw.wv, lw.bv)?;

        let mut rec = LayerRecord {
            x_q,
            k,
            v,
            logits: None,
            gate: None,
            fa: None,
            sa: None,
            attn: x_q,
            hidden: x_q,
            route: LayerRoute::Full,
            r_soft: 1.0,
        };
        match routing {
            Routing::Soft { tau, noise } => {
                let rv = &routers.unwrap().layers[l];
                let logits = rv.logits(g, x_q, routers.unwrap().pool)?;
                let pair = match noise {
                    NoiseSource::Sampled(rng) => GumbelNoise::sample(rng),
                    NoiseSource::Fixed(n) => n[l],
                };
                let gate = g.gumbel_gate(
                    logits,
                    (T::from_f64_lossy(pair.g_fa), T::from_f64_lossy(pair.g_sa)),
                    T::from_f64_lossy(*tau),
                )?;
                let fa = g.attention(x_q, k, v, cfg.n_heads, &causal)?;
                let sa = g.attention(x_q, k, v, cfg.n_heads, &ssa)?;
                let lv = g.value(logits).data();
                rec.route = hard_route(lv[0], lv[1]);
                rec.r_soft = g.value(gate).item().as_f64();
                rec.attn = g.blend(gate, fa, sa)?;
                rec.logits = Some(logits);
                rec.gate = Some(gate);
                rec.fa = Some(fa);
                rec.sa = Some(sa);
            }
            Routing::Hard => {
                let rv = &routers.unwrap().layers[l];
                let logits = rv.logits(g, x_q, routers.unwrap().pool)?;
                let lv = g.value(logits).data();
                let (pi_fa, pi_sa) = (lv[0], lv[1]);
                rec.route = hard_route(pi_fa, pi_sa);
                rec.r_soft = sigmoid(pi_fa.as_f64() - pi_sa.as_f64());
                rec.logits = Some(logits);
            }
            Routing::Forced(routes) => {
                rec.route = routes[l];
                rec.r_soft = if routes[l].is_sparse() { 0.0 } else { 1.0 };
            }
        }
        if rec.gate.is_none() {
            let a = match rec.route {
                LayerRoute::Full => {
                    let a = g.attention(x_q, k, v, cfg.n_heads, &causal)?;
                    rec.fa = Some(a);
                    a
                }
                LayerRoute::Sparse => {
                    let a = g.attention(x_q, k, v, cfg.n_heads, &ssa)?;
                    rec.sa = Some(a);
                    a
                }
            };
            rec.attn = a;
        }

        let o = g.linear(rec.attn, lw.wo, lw.bo)?;
        x = g.add(x, o)?;
        let h2 = g.layer_norm(x, lw.ln2_g, lw.ln2_b)?;
        let m = g.linear(h2, lw.w1, lw.b1)?;
        let m = g.gelu(m);
        let m = g.linear(m, lw.w2, lw.b2)?;
        x = g.add(x, m)?;
        rec.hidden = x;
        records.push(rec);
    }

    let h = g.layer_norm(x, model.ln_f_g, model.ln_f_b)?;
    let logits = g.linear(h, model.head_w, model.head_b)?;
    Ok(GraphForward {
        logits,
        layers: records,
    })
}

/// Process a prompt without recording gradients and build the KV cache the
/// routing decision implies: full caches for soft routing and FA layers,
/// windowed caches for SA layers.
pub fn prefill<T: Scalar>(
    tokens: &[u32],
    weights: &TransformerWeights<T>,
    routers: Option<&Routers<T>>,
    mut routing: Routing<'_>,
    trace: bool,
) -> Result<Prefill<T>> {
    let mut g = Graph::inference();
    let model = weights.bind(&mut g, false);
    let bound = routers.map(|r| r.bind(&mut g, false));
    let soft = matches!(routing, Routing::Soft { .. });
    let fwd = forward_graph(&mut g, weights, &model, bound.as_ref(), tokens, &mut routing)?;

    let cfg = &weights.config;
    let routes: Vec<LayerRoute> = fwd.layers.iter().map(|r| r.route).collect();
    let r_soft: Vec<f64> = fwd.layers.iter().map(|r| r.r_soft).collect();
    let policies: Vec<CachePolicy> = routes
        .iter()
        .map(|route| match (soft, route) {
            (false, LayerRoute::Sparse) => CachePolicy::Windowed {
                sink: cfg.ssa_sink,
                local: cfg.ssa_local,
            },
            _ => CachePolicy::Full,
        })
        .collect();
    let mut cache = KvCache::new(cfg, &policies)?;
    for (lc, rec) in cache.layers.iter_mut().zip(&fwd.layers) {
        let (k, v) = (g.value(rec.k), g.value(rec.v));
        for i in 0..tokens.len() {
            lc.push(k.row(i), v.row(i));
        }
    }

    let trace = trace.then(|| {
        fwd.layers
            .iter()
            .map(|rec| LayerTrace {
                x_q: g.value(rec.x_q).clone(),
                k: g.value(rec.k).clone(),
                v: g.value(rec.v).clone(),
                fa: rec.fa.map(|a| g.value(a).clone()),
                sa: rec.sa.map(|a| g.value(a).clone()),
                attn: g.value(rec.attn).clone(),
                hidden: g.value(rec.hidden).clone(),
            })
            .collect()
    });
    Ok(Prefill {
        logits: g.value(fwd.logits).clone(),
        plan: RoutingPlan {
            routes,
            r_soft: r_soft.clone(),
            decided_at: tokens.len(),
        },
        cache,
        r_soft,
        trace,
    })
}
