use crate::router::LayerRoute;

/// Per-layer routing decision fixed at prefill and reused for every decode
/// step.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    pub routes: Vec<LayerRoute>,
    pub r_soft: Vec<f64>,
    /// Prompt length at which the decision was taken.
    pub decided_at: usize,
}

impl RoutingPlan {
    /// A plan with no router behind it; `r_soft` mirrors the routes.
    pub fn forced(routes: Vec<LayerRoute>) -> Self {
        let r_soft = routes
            .iter()
            .map(|r| if r.is_sparse() { 0.0 } else { 1.0 })
            .collect();
        Self {
            routes,
            r_soft,
            decided_at: 0,
        }
    }

    pub fn uniform(n_layers: usize, route: LayerRoute) -> Self {
        Self::forced(vec![route; n_layers])
    }

    pub fn n_layers(&self) -> usize {
        self.routes.len()
    }

    pub fn sparse_layers(&self) -> usize {
        self.routes.iter().filter(|r| r.is_sparse()).count()
    }
}

/// Fraction of (layer, head) slots running sparse attention. Every head of
/// a layer shares the layer's route.
pub fn model_sparsity_ratio(plan: &RoutingPlan, n_heads: usize) -> f64 {
    let slots = plan.routes.len() * n_heads;
    if slots == 0 {
        return 0.0;
    }
    let sparse: usize = plan
        .routes
        .iter()
        .map(|r| if r.is_sparse() { n_heads } else { 0 })
        .sum();
    sparse as f64 / slots as f64
}

/// Sparsity ratio of a head-level assignment, `modes[layer][head]`.
pub fn model_sparsity_ratio_heads(modes: &[Vec<LayerRoute>]) -> f64 {
    let slots: usize = modes.iter().map(|m| m.len()).sum();
    if slots == 0 {
        return 0.0;
    }
    let sparse = modes.iter().flatten().filter(|r| r.is_sparse()).count();
    sparse as f64 / slots as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvTokenCounts {
    pub per_layer: Vec<usize>,
    pub total: usize,
}

/// Tokens each layer keeps after `seq_len` tokens under `plan`.
pub fn kv_cache_tokens(plan: &RoutingPlan, seq_len: usize, sink: usize, local: usize) -> KvTokenCounts {
    let per_layer: Vec<usize> = plan
        .routes
        .iter()
        .map(|r| match r {
            LayerRoute::Full => seq_len,
            LayerRoute::Sparse => seq_len.min(sink + local),
        })
        .collect();
    let total = per_layer.iter().sum();
    KvTokenCounts { per_layer, total }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LayerRoute::{Full, Sparse};

    #[test]
    fn msr_examples() {
        assert_eq!(model_sparsity_ratio(&RoutingPlan::uniform(5, Sparse), 3), 1.0);
        let plan = RoutingPlan::forced(vec![Sparse, Full, Sparse, Full]);
        for h in 1..6 {
            assert_eq!(model_sparsity_ratio(&plan, h), 0.5);
        }
        let mut routes = vec![Full; 32];
        for r in routes.iter_mut().step_by(2).take(15) {
            *r = Sparse;
        }
        assert_eq!(model_sparsity_ratio(&RoutingPlan::forced(routes), 8), 0.46875);
    }

    #[test]
    fn head_level_ratio_counts_slots() {
        let modes = vec![vec![Full, Sparse, Sparse, Sparse], vec![Full, Full, Full, Sparse]];
        assert_eq!(model_sparsity_ratio_heads(&modes), 0.5);
    }

    #[test]
    fn kv_token_examples() {
        let sa = RoutingPlan::uniform(1, Sparse);
        assert_eq!(kv_cache_tokens(&sa, 10_000, 128, 2048).total, 2176);
        assert_eq!(kv_cache_tokens(&sa, 100, 128, 2048).total, 100);
        let plan = RoutingPlan::forced(vec![Full, Sparse, Full, Sparse, Full, Sparse, Full, Sparse]);
        let counts = kv_cache_tokens(&plan, 8192, 4, 252);
        assert_eq!(counts.total, 4 * 8192 + 4 * 256);
        assert_eq!(counts.per_layer[1], 256);
    }
}
