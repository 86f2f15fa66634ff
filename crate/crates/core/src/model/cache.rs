use rand::Rng;

use super::plan::RoutingPlan;
use super::{ModelConfig, TransformerWeights};
use crate::attention::{decode_attend, Heads};
use crate::error::{FluxError, Result};
use crate::router::LayerRoute;
use crate::tensor::{embed, gelu, layer_norm, linear, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Full,
    /// Keeps the first `sink` tokens plus a ring of the latest `local`.
    Windowed { sink: usize, local: usize },
}

/// Keys and values of one layer, `width = H·d'` values per token.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T: Scalar> {
    policy: CachePolicy,
    width: usize,
    keys: Vec<T>,
    values: Vec<T>,
    seen: usize,
}

impl<T: Scalar> LayerCache<T> {
    pub fn new(policy: CachePolicy, width: usize) -> Result<Self> {
        if let CachePolicy::Windowed { local: 0, .. } = policy {
            return Err(FluxError::contract("windowed cache needs local >= 1"));
        }
        Ok(Self {
            policy,
            width,
            keys: Vec::new(),
            values: Vec::new(),
            seen: 0,
        })
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    /// Tokens appended so far, including evicted ones.
    pub fn len(&self) -> usize {
        self.seen
    }

    pub fn is_empty(&self) -> bool {
        self.seen == 0
    }

    /// Tokens currently held.
    pub fn stored(&self) -> usize {
        self.keys.len() / self.width
    }

    pub fn push(&mut self, k: &[T], v: &[T]) {
        debug_assert_eq!(k.len(), self.width);
        let w = self.width;
        match self.policy {
            CachePolicy::Full => {
                self.keys.extend_from_slice(k);
                self.values.extend_from_slice(v);
            }
            CachePolicy::Windowed { sink, local } => {
                if self.seen < sink + local {
                    self.keys.extend_from_slice(k);
                    self.values.extend_from_slice(v);
                } else {
                    // Overwrite the oldest non-sink slot.
                    let slot = sink + (self.seen - sink) % local;
                    self.keys[slot * w..(slot + 1) * w].copy_from_slice(k);
                    self.values[slot * w..(slot + 1) * w].copy_from_slice(v);
                }
            }
        }
        self.seen += 1;
    }

    fn rows(&self, r: std::ops::Range<usize>) -> (&[T], &[T]) {
        let w = self.width;
        (&self.keys[r.start * w..r.end * w], &self.values[r.start * w..r.end * w])
    }

    /// Stored tokens as chronologically ordered `(keys, values)` runs.
    pub fn segments(&self) -> Vec<(&[T], &[T])> {
        let n = self.stored();
        match self.policy {
            CachePolicy::Full => vec![self.rows(0..n)],
            CachePolicy::Windowed { sink, local } => {
                if self.seen <= sink + local {
                    return vec![self.rows(0..n)];
                }
                let head = sink + (self.seen - sink) % local;
                let mut out = vec![self.rows(0..sink)];
                out.push(self.rows(head..sink + local));
                if head > sink {
                    out.push(self.rows(sink..head));
                }
                out.retain(|(k, _)| !k.is_empty());
                out
            }
        }
    }

    /// Runs of a full cache visible to the newest token under a sink+local
    /// pattern.
    fn window_segments(&self, sink: usize, local: usize) -> Vec<(&[T], &[T])> {
        let n = self.stored();
        let sink_end = sink.min(n);
        let local_start = n.saturating_sub(local).max(sink_end);
        let mut out = Vec::with_capacity(2);
        if sink_end > 0 {
            out.push(self.rows(0..sink_end));
        }
        if local_start < n {
            out.push(self.rows(local_start..n));
        }
        out
    }

    /// Stored keys and values in chronological order, `[n, width]` each.
    pub fn to_tensors(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let (mut k, mut v) = (Vec::new(), Vec::new());
        for (ks, vs) in self.segments() {
            k.extend_from_slice(ks);
            v.extend_from_slice(vs);
        }
        let n = k.len() / self.width;
        Ok((Tensor::new(vec![n, self.width], k)?, Tensor::new(vec![n, self.width], v)?))
    }
}

/// Per-layer caches of one generation session.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<T: Scalar> {
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ModelConfig, policies: &[CachePolicy]) -> Result<Self> {
        if policies.len() != cfg.n_layers {
            return Err(FluxError::contract(format!(
                "{} cache policies for {} layers",
                policies.len(),
                cfg.n_layers
            )));
        }
        let layers = policies
            .iter()
            .map(|&p| LayerCache::new(p, cfg.model_dim()))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Policies implied by a hard plan: FA layers keep everything, SA layers
    /// keep sink + local.
    pub fn for_plan(cfg: &ModelConfig, plan: &RoutingPlan) -> Result<Self> {
        let policies: Vec<CachePolicy> = plan
            .routes
            .iter()
            .map(|r| match r {
                LayerRoute::Full => CachePolicy::Full,
                LayerRoute::Sparse => CachePolicy::Windowed {
                    sink: cfg.ssa_sink,
                    local: cfg.ssa_local,
                },
            })
            .collect();
        Self::new(cfg, &policies)
    }

    /// Fill every layer with `ctx` tokens of uniform random keys and values,
    /// standing in for a prefilled prompt.
    pub fn prime_random(&mut self, ctx: usize, rng: &mut impl Rng) {
        for lc in &mut self.layers {
            let w = lc.width;
            let mut k = vec![T::zero(); w];
            let mut v = vec![T::zero(); w];
            for _ in 0..ctx {
                for (a, b) in k.iter_mut().zip(v.iter_mut()) {
                    *a = T::from_f64_lossy(rng.gen_range(-1.0..1.0));
                    *b = T::from_f64_lossy(rng.gen_range(-1.0..1.0));
                }
                lc.push(&k, &v);
            }
        }
    }

    /// Position of the next token.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stored_tokens(&self) -> usize {
        self.layers.iter().map(|l| l.stored()).sum()
    }
}

/// Generate logits for one new token, appending its keys and values to the
/// cache. Each layer attends per `plan`; routers are not consulted.
pub fn decode_step<T: Scalar>(
    token: u32,
    weights: &TransformerWeights<T>,
    cache: &mut KvCache<T>,
    plan: &RoutingPlan,
) -> Result<Tensor<T>> {
    let cfg = &weights.config;
    if plan.routes.len() != cfg.n_layers || cache.layers.len() != cfg.n_layers {
        return Err(FluxError::contract(format!(
            "plan has {} layers, cache {}, model {}",
            plan.routes.len(),
            cache.layers.len(),
            cfg.n_layers
        )));
    }
    let pos = cache.len();
    if cache.layers.iter().any(|l| l.len() != pos) {
        return Err(FluxError::contract("layer caches disagree on length"));
    }
    if pos >= cfg.max_seq_len {
        return Err(FluxError::contract(format!(
            "position {pos} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    for (l, (lc, route)) in cache.layers.iter().zip(&plan.routes).enumerate() {
        if *route == LayerRoute::Full && lc.policy != CachePolicy::Full {
            return Err(FluxError::contract(format!(
                "layer {l} routed to full attention over a windowed cache"
            )));
        }
    }

    let heads = Heads {
        n_heads: cfg.n_heads,
        head_dim: cfg.head_dim,
    };
    let mut x = embed(&[token], &weights.tok_emb)?;
    x.add_assign(&embed(&[pos as u32], &weights.pos_emb)?);
    let mut scores = Vec::new();
    let mut attn = vec![T::zero(); cfg.model_dim()];

    for ((lw, lc), route) in weights.layers.iter().zip(&mut cache.layers).zip(&plan.routes) {
        let h = layer_norm(&x, &lw.ln1_g, &lw.ln1_b)?;
        let q = linear(&h, &lw.wq, Some(&lw.bq))?;
        let k = linear(&h, &lw.wk, Some(&lw.bk))?;
        let v = linear(&h, &lw.wv, Some(&lw.bv))?;
        lc.push(k.data(), v.data());
        let segments = match (route, lc.policy) {
            (LayerRoute::Sparse, CachePolicy::Full) => lc.window_segments(cfg.ssa_sink, cfg.ssa_local),
            _ => lc.segments(),
        };
        decode_attend(q.data(), &segments, heads, &mut scores, &mut attn)?;
        let a = Tensor::new(vec![1, cfg.model_dim()], attn.clone())?;
        x.add_assign(&linear(&a, &lw.wo, Some(&lw.bo))?);
        let h2 = layer_norm(&x, &lw.ln2_g, &lw.ln2_b)?;
        let m = gelu(&linear(&h2, &lw.w1, Some(&lw.b1))?);
        x.add_assign(&linear(&m, &lw.w2, Some(&lw.b2))?);
    }
    let h = layer_norm(&x, &weights.ln_f_g, &weights.ln_f_b)?;
    linear(&h, &weights.head_w, Some(&weights.head_b))
}
