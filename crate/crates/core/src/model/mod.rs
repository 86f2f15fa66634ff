//! Decoder-only transformer whose attention layers are routed between full
//! and streaming-sparse attention.
//!
//! Blocks are pre-norm with learned positional embeddings. The backbone is
//! frozen while routers train; routers see each layer's post-projection query
//! tensor.

mod cache;
mod forward;
mod plan;

pub use cache::{decode_step, CachePolicy, KvCache, LayerCache};
pub use forward::{
    forward_graph, prefill, BoundLayer, BoundModel, GraphForward, LayerRecord, LayerTrace,
    NoiseSource, Prefill, Routing,
};
pub use plan::{
    kv_cache_tokens, model_sparsity_ratio, model_sparsity_ratio_heads, KvTokenCounts, RoutingPlan,
};

use rand::Rng;

use crate::attention::AttentionMode;
use crate::error::{FluxError, Result};
use crate::grad::{Graph, Var};
use crate::router::fill_uniform;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
    pub ssa_sink: usize,
    pub ssa_local: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 4,
            head_dim: 16,
            vocab_size: crate::tasks::VOCAB_SIZE,
            max_seq_len: 256,
            mlp_hidden: 256,
            ssa_sink: 4,
            ssa_local: 28,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("mlp_hidden", self.mlp_hidden),
            ("ssa_local", self.ssa_local),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(FluxError::contract(format!("model.{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn ssa_mode(&self) -> AttentionMode {
        AttentionMode::Ssa {
            sink: self.ssa_sink,
            local: self.ssa_local,
        }
    }

    /// Sink plus local window: the most tokens a sparse layer ever stores.
    pub fn window(&self) -> usize {
        self.ssa_sink + self.ssa_local
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Scalar = f32> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_g, "ln1.g");
        $m!(ln1_b, "ln1.b");
        $m!(wq, "attn.wq");
        $m!(bq, "attn.bq");
        $m!(wk, "attn.wk");
        $m!(bk, "attn.bk");
        $m!(wv, "attn.wv");
        $m!(bv, "attn.bv");
        $m!(wo, "attn.wo");
        $m!(bo, "attn.bo");
        $m!(ln2_g, "ln2.g");
        $m!(ln2_b, "ln2.b");
        $m!(w1, "mlp.w1");
        $m!(b1, "mlp.b1");
        $m!(w2, "mlp.w2");
        $m!(b2, "mlp.b2");
    };
}

impl<T: Scalar> LayerWeights<T> {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim();
        let h = cfg.mlp_hidden;
        let proj = |rng: &mut _, fan_in: usize, fan_out: usize, damp: f64| {
            let mut t = Tensor::zeros(&[fan_in, fan_out]);
            fill_uniform(&mut t, damp * (3.0 / fan_in as f64).sqrt(), rng);
            t
        };
        // Residual-branch outputs start damped so the stream stays O(1).
        let damp = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        Self {
            ln1_g: Tensor::full(&[d], T::one()),
            ln1_b: Tensor::zeros(&[d]),
            wq: proj(rng, d, d, 1.0),
            bq: Tensor::zeros(&[d]),
            wk: proj(rng, d, d, 1.0),
            bk: Tensor::zeros(&[d]),
            wv: proj(rng, d, d, 1.0),
            bv: Tensor::zeros(&[d]),
            wo: proj(rng, d, d, damp),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::full(&[d], T::one()),
            ln2_b: Tensor::zeros(&[d]),
            w1: proj(rng, d, h, 1.0),
            b1: Tensor::zeros(&[h]),
            w2: proj(rng, h, d, damp),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::with_capacity(16);
        macro_rules! push {
            ($f:ident, $n:expr) => {
                out.push(($n, &self.$f));
            };
        }
        layer_fields!(push);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(16);
        macro_rules! push {
            ($f:ident, $n:expr) => {
                out.push(($n, &mut self.$f));
            };
        }
        layer_fields!(push);
        out
    }

    fn cast<U: Scalar>(&self) -> LayerWeights<U> {
        LayerWeights {
            ln1_g: self.ln1_g.cast(),
            ln1_b: self.ln1_b.cast(),
            wq: self.wq.cast(),
            bq: self.bq.cast(),
            wk: self.wk.cast(),
            bk: self.bk.cast(),
            wv: self.wv.cast(),
            bv: self.bv.cast(),
            wo: self.wo.cast(),
            bo: self.bo.cast(),
            ln2_g: self.ln2_g.cast(),
            ln2_b: self.ln2_b.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLayer {
        let mut p = |t: &Tensor<T>| g.param(t.clone(), trainable);
        BoundLayer {
            ln1_g: p(&self.ln1_g),
            ln1_b: p(&self.ln1_b),
            wq: p(&self.wq),
            bq: p(&self.bq),
            wk: p(&self.wk),
            bk: p(&self.bk),
            wv: p(&self.wv),
            bv: p(&self.bv),
            wo: p(&self.wo),
            bo: p(&self.bo),
            ln2_g: p(&self.ln2_g),
            ln2_b: p(&self.ln2_b),
            w1: p(&self.w1),
            b1: p(&self.b1),
            w2: p(&self.w2),
            b2: p(&self.b2),
        }
    }
}

/// Backbone weights. `frozen` marks weights that must not be updated.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub ln_f_g: Tensor<T>,
    pub ln_f_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
    pub frozen: bool,
}

impl<T: Scalar> TransformerWeights<T> {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim();
        let mut tok_emb = Tensor::zeros(&[config.vocab_size, d]);
        fill_uniform(&mut tok_emb, 1.0, rng);
        let mut pos_emb = Tensor::zeros(&[config.max_seq_len, d]);
        fill_uniform(&mut pos_emb, 0.5, rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights::init(&config, rng))
            .collect();
        let mut head_w = Tensor::zeros(&[d, config.vocab_size]);
        fill_uniform(&mut head_w, (3.0 / d as f64).sqrt(), rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f_g: Tensor::full(&[d], T::one()),
            ln_f_b: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[config.vocab_size]),
            frozen: false,
        })
    }

    /// Checkpoint-named tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &self.ln_f_g));
        out.push(("ln_f.b".to_string(), &self.ln_f_b));
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.tensors_mut() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("ln_f.g".to_string(), &mut self.ln_f_g));
        out.push(("ln_f.b".to_string(), &mut self.ln_f_b));
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> TransformerWeights<U> {
        TransformerWeights {
            config: self.config,
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            ln_f_g: self.ln_f_g.cast(),
            ln_f_b: self.ln_f_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            frozen: self.frozen,
        }
    }

    /// Copy with room for `max_seq_len` positions. Rows past the trained
    /// table repeat it cyclically, which keeps shapes and costs realistic for
    /// latency runs but carries no positional meaning.
    pub fn with_max_seq_len(&self, max_seq_len: usize) -> Result<TransformerWeights<T>> {
        if max_seq_len == 0 {
            return Err(FluxError::contract("max_seq_len must be positive"));
        }
        let d = self.config.model_dim();
        let old = self.config.max_seq_len;
        let src = self.pos_emb.data();
        let pos_emb = Tensor::from_fn(&[max_seq_len, d], |i| src[(i / d % old) * d + i % d]);
        Ok(TransformerWeights {
            config: ModelConfig {
                max_seq_len,
                ..self.config
            },
            pos_emb,
            ..self.clone()
        })
    }

    /// Leaves for every weight; trainable only when `trainable` and the
    /// backbone is not frozen.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        let trainable = trainable && !self.frozen;
        let p = |t: &Tensor<T>, g: &mut Graph<T>| g.param(t.clone(), trainable);
        let tok_emb = p(&self.tok_emb, g);
        let pos_emb = p(&self.pos_emb, g);
        let layers = self.layers.iter().map(|l| l.bind(g, trainable)).collect();
        BoundModel {
            tok_emb,
            pos_emb,
            layers,
            ln_f_g: p(&self.ln_f_g, g),
            ln_f_b: p(&self.ln_f_b, g),
            head_w: p(&self.head_w, g),
            head_b: p(&self.head_b, g),
        }
    }
}

impl BoundModel {
    /// Vars in [`TransformerWeights::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend_from_slice(&l.all());
        }
        out.extend_from_slice(&[self.ln_f_g, self.ln_f_b, self.head_w, self.head_b]);
        out
    }
}

impl BoundLayer {
    pub fn all(&self) -> [Var; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo,
            self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

#[cfg(test)]
mod tests;
