//! The per-layer router: prefix/suffix pooling of the layer's query tensor,
//! a two-layer context encoder, a two-logit head, Gumbel-Softmax relaxation
//! for training and argmax routing for inference.

use rand::Rng;

use crate::error::{FluxError, Result};
use crate::grad::{Graph, Var};
use crate::tensor::{gelu, linear, Scalar, Tensor};

/// Binary per-layer decision. `Full` is `r_hard = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerRoute {
    Full,
    Sparse,
}

impl LayerRoute {
    pub fn r_hard(self) -> u8 {
        match self {
            LayerRoute::Full => 1,
            LayerRoute::Sparse => 0,
        }
    }

    pub fn is_sparse(self) -> bool {
        self == LayerRoute::Sparse
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolingConfig {
    pub pool_size: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self { pool_size: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouterConfig {
    /// Width of the pooled descriptor: `2·H·d'`.
    pub in_dim: usize,
    pub hidden: usize,
    pub pooling: PoolingConfig,
}

impl RouterConfig {
    /// Defaults for a model of width `d = H·d'`; hidden width is `d/2`.
    pub fn for_model_dim(model_dim: usize) -> Self {
        Self {
            in_dim: 2 * model_dim,
            hidden: (model_dim / 2).max(1),
            pooling: PoolingConfig::default(),
        }
    }
}

/// Encoder `gelu(gelu(x·W1+b1)·W2+b2)` followed by a `hidden → 2` head.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterWeights<T: Scalar = f32> {
    pub enc1_w: Tensor<T>,
    pub enc1_b: Tensor<T>,
    pub enc2_w: Tensor<T>,
    pub enc2_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> RouterWeights<T> {
    pub fn zeros(cfg: &RouterConfig) -> Self {
        Self {
            enc1_w: Tensor::zeros(&[cfg.in_dim, cfg.hidden]),
            enc1_b: Tensor::zeros(&[cfg.hidden]),
            enc2_w: Tensor::zeros(&[cfg.hidden, cfg.hidden]),
            enc2_b: Tensor::zeros(&[cfg.hidden]),
            head_w: Tensor::zeros(&[cfg.hidden, 2]),
            head_b: Tensor::zeros(&[2]),
        }
    }

    /// Small uniform init with a zero head bias, so fresh routers start
    /// near `r_soft = 0.5`.
    pub fn init(cfg: &RouterConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(cfg);
        fill_uniform(&mut w.enc1_w, (3.0 / cfg.in_dim as f64).sqrt(), rng);
        fill_uniform(&mut w.enc2_w, (3.0 / cfg.hidden as f64).sqrt(), rng);
        fill_uniform(&mut w.head_w, 0.1 * (3.0 / cfg.hidden as f64).sqrt(), rng);
        w
    }

    pub fn in_dim(&self) -> usize {
        self.enc1_w.shape()[0]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("enc1.w", &self.enc1_w),
            ("enc1.b", &self.enc1_b),
            ("enc2.w", &self.enc2_w),
            ("enc2.b", &self.enc2_b),
            ("head.w", &self.head_w),
            ("head.b", &self.head_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 6] {
        [
            ("enc1.w", &mut self.enc1_w),
            ("enc1.b", &mut self.enc1_b),
            ("enc2.w", &mut self.enc2_w),
            ("enc2.b", &mut self.enc2_b),
            ("head.w", &mut self.head_w),
            ("head.b", &mut self.head_b),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> RouterWeights<U> {
        RouterWeights {
            enc1_w: self.enc1_w.cast(),
            enc1_b: self.enc1_b.cast(),
            enc2_w: self.enc2_w.cast(),
            enc2_b: self.enc2_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> RouterVars {
        RouterVars {
            enc1_w: g.param(self.enc1_w.clone(), trainable),
            enc1_b: g.param(self.enc1_b.clone(), trainable),
            enc2_w: g.param(self.enc2_w.clone(), trainable),
            enc2_b: g.param(self.enc2_b.clone(), trainable),
            head_w: g.param(self.head_w.clone(), trainable),
            head_b: g.param(self.head_b.clone(), trainable),
        }
    }
}

pub(crate) fn fill_uniform<T: Scalar>(t: &mut Tensor<T>, bound: f64, rng: &mut impl Rng) {
    for v in t.data_mut() {
        *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
    }
}

/// Router parameters bound into a graph, in [`RouterWeights::tensors`] order.
#[derive(Debug, Clone, Copy)]
pub struct RouterVars {
    pub enc1_w: Var,
    pub enc1_b: Var,
    pub enc2_w: Var,
    pub enc2_b: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl RouterVars {
    pub fn all(&self) -> [Var; 6] {
        [
            self.enc1_w,
            self.enc1_b,
            self.enc2_w,
            self.enc2_b,
            self.head_w,
            self.head_b,
        ]
    }

    /// Differentiable `x_Q → [π_FA, π_SA]`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, x_q: Var, pool: usize) -> Result<Var> {
        let pooled = g.pool_prefix_suffix(x_q, pool)?;
        let h = g.linear(pooled, self.enc1_w, self.enc1_b)?;
        let h = g.gelu(h);
        let h = g.linear(h, self.enc2_w, self.enc2_b)?;
        let h = g.gelu(h);
        g.linear(h, self.head_w, self.head_b)
    }
}

/// One router per layer, sharing a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Routers<T: Scalar = f32> {
    pub config: RouterConfig,
    pub layers: Vec<RouterWeights<T>>,
}

/// [`Routers`] bound into a graph.
#[derive(Debug, Clone)]
pub struct BoundRouters {
    pub layers: Vec<RouterVars>,
    pub pool: usize,
}

impl<T: Scalar> Routers<T> {
    pub fn init(config: RouterConfig, n_layers: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..n_layers).map(|_| RouterWeights::init(&config, rng)).collect();
        Self { config, layers }
    }

    pub fn zeros(config: RouterConfig, n_layers: usize) -> Self {
        Self {
            config,
            layers: vec![RouterWeights::zeros(&config); n_layers],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|w| w.param_count()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Routers<U> {
        Routers {
            config: self.config,
            layers: self.layers.iter().map(|w| w.cast()).collect(),
        }
    }

    /// Checkpoint names `router.layer<l>.<tensor>`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, w) in self.layers.iter().enumerate() {
            for (name, t) in w.tensors() {
                out.push((format!("router.layer{l}.{name}"), t));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, w) in self.layers.iter_mut().enumerate() {
            for (name, t) in w.tensors_mut() {
                out.push((format!("router.layer{l}.{name}"), t));
            }
        }
        out
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundRouters {
        BoundRouters {
            layers: self.layers.iter().map(|w| w.bind(g, trainable)).collect(),
            pool: self.config.pooling.pool_size,
        }
    }
}

impl BoundRouters {
    /// Vars in [`Routers::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|r| r.all()).collect()
    }
}

/// Mean of the first `min(P, s)` rows concatenated with the mean of the last
/// `min(P, s)` rows, as a `[1, 2·d]` descriptor. The windows overlap when
/// `s < 2P`.
pub fn pool_prefix_suffix<T: Scalar>(x_q: &Tensor<T>, pool: usize) -> Result<Tensor<T>> {
    if pool == 0 {
        return Err(FluxError::contract("pool size must be >= 1"));
    }
    // Tokens lead; heads and channels flatten into one feature axis.
    let s = x_q.shape()[0];
    let d = x_q.len() / s;
    let row = |r: usize| &x_q.data()[r * d..(r + 1) * d];
    let p = pool.min(s);
    let inv = T::one() / T::from_usize(p).unwrap();
    let mut out = vec![T::zero(); 2 * d];
    let (prefix, suffix) = out.split_at_mut(d);
    for r in 0..p {
        for (o, v) in prefix.iter_mut().zip(row(r)) {
            *o += *v;
        }
    }
    for r in s - p..s {
        for (o, v) in suffix.iter_mut().zip(row(r)) {
            *o += *v;
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![1, 2 * d], out)
}

/// `(π_FA, π_SA)` for a pooled descriptor.
pub fn router_logits<T: Scalar>(descriptor: &Tensor<T>, w: &RouterWeights<T>) -> Result<(T, T)> {
    if descriptor.len() != w.in_dim() {
        return Err(FluxError::contract(format!(
            "descriptor length {} does not match router input {}",
            descriptor.len(),
            w.in_dim()
        )));
    }
    let x = descriptor.clone().reshape(&[1, descriptor.len()])?;
    let h = gelu(&linear(&x, &w.enc1_w, Some(&w.enc1_b))?);
    let h = gelu(&linear(&h, &w.enc2_w, Some(&w.enc2_b))?);
    let out = linear(&h, &w.head_w, Some(&w.head_b))?;
    Ok((out.data()[0], out.data()[1]))
}

/// Pool and score in one call; the inference-time router cost.
pub fn route_logits<T: Scalar>(x_q: &Tensor<T>, w: &RouterWeights<T>, pool: usize) -> Result<(T, T)> {
    router_logits(&pool_prefix_suffix(x_q, pool)?, w)
}

/// One Gumbel(0, 1) pair per routed layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GumbelNoise {
    pub g_fa: f64,
    pub g_sa: f64,
}

impl GumbelNoise {
    pub const ZERO: GumbelNoise = GumbelNoise { g_fa: 0.0, g_sa: 0.0 };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            g_fa: sample_gumbel(rng),
            g_sa: sample_gumbel(rng),
        }
    }
}

/// `−ln(−ln u)`, `u ~ Uniform(0, 1)` with both endpoints excluded.
pub fn sample_gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// `σ(((π_FA+g_FA) − (π_SA+g_SA))/τ)`, the relaxed FA probability.
pub fn gumbel_soft<T: Scalar>(pi_fa: T, pi_sa: T, tau: T, noise: (T, T)) -> Result<T> {
    if !(tau > T::zero()) {
        return Err(FluxError::contract("temperature must be > 0"));
    }
    let z = ((pi_fa + noise.0) - (pi_sa + noise.1)) / tau;
    Ok(T::one() / (T::one() + (-z).exp()))
}

/// Argmax routing; ties go to full attention.
pub fn hard_route<T: Scalar>(pi_fa: T, pi_sa: T) -> LayerRoute {
    if pi_fa >= pi_sa {
        LayerRoute::Full
    } else {
        LayerRoute::Sparse
    }
}

/// Linear temperature decay from `tau_init` to `tau_final`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub tau_init: f64,
    pub tau_final: f64,
    pub total_steps: usize,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        Self {
            tau_init: 1.0,
            tau_final: 0.1,
            total_steps: 300,
        }
    }
}

impl TemperatureSchedule {
    pub fn new(tau_init: f64, tau_final: f64, total_steps: usize) -> Result<Self> {
        if !(tau_final > 0.0 && tau_init >= tau_final) {
            return Err(FluxError::contract(format!(
                "temperature schedule needs tau_init >= tau_final > 0, got {tau_init} -> {tau_final}"
            )));
        }
        Ok(Self {
            tau_init,
            tau_final,
            total_steps,
        })
    }

    /// Temperature at `step`; steps outside `[0, total_steps]` clamp.
    pub fn anneal(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.tau_final;
        }
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.tau_init + (self.tau_final - self.tau_init) * frac
    }
}
