//! Static sparsification baseline: score each layer by the truncated matrix
//! entropy of its hidden states, keep the highest-scoring layers on full
//! attention and move the rest to sparse attention.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{FluxError, Result};
use crate::model::{prefill, RoutingPlan, Routing, TransformerWeights};
use crate::router::LayerRoute;
use crate::tasks::{Example, TaskCategory, TaskSpec};
use crate::tensor::{Scalar, Tensor};
use crate::train::{evaluate, EvalMode};

/// Spectrum truncation: keep the fewest leading eigenvalues whose mass
/// reaches `mass` of the total (at least one).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationPolicy {
    pub mass: f64,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self { mass: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyScore {
    pub layer: usize,
    /// Nats, within `[0, ln k]`.
    pub entropy: f64,
    pub k: usize,
}

const RESIDUAL_TOL: f64 = 1e-8;

/// Eigenvalues of the trace-normalized covariance of `hidden` (`[s, d]`),
/// descending. Computed on the `d×d` Gram matrix `XᵀX`, whose nonzero
/// spectrum equals that of `XXᵀ`.
pub fn normalized_spectrum<T: Scalar>(hidden: &Tensor<T>) -> Result<Vec<f64>> {
    let (s, d) = (hidden.rows(), hidden.cols());
    let x = DMatrix::from_row_iterator(s, d, hidden.data().iter().map(|v| v.as_f64()));
    let gram = x.transpose() * &x;
    let trace = gram.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(FluxError::contract(
            "hidden states are all zero or non-finite; covariance trace undefined",
        ));
    }
    let sigma = gram / trace;
    let eig = SymmetricEigen::new(sigma.clone());
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let residual = (&sigma * v - v * lambda).norm();
        if residual > RESIDUAL_TOL {
            return Err(FluxError::Numeric(format!(
                "eigenpair {i} residual {residual:e} exceeds {RESIDUAL_TOL:e}"
            )));
        }
    }
    let mut vals: Vec<f64> = eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect();
    vals.sort_by(|a, b| b.total_cmp(a));
    Ok(vals)
}

/// Truncated entropy of a descending spectrum: returns `(E, K)`.
pub fn truncated_entropy(spectrum: &[f64], policy: TruncationPolicy) -> (f64, usize) {
    let total: f64 = spectrum.iter().sum();
    let mut acc = 0.0;
    let mut k = spectrum.len().max(1);
    for (i, v) in spectrum.iter().enumerate() {
        acc += v;
        if acc >= policy.mass * total * (1.0 - 1e-12) {
            k = i + 1;
            break;
        }
    }
    let kept = &spectrum[..k.min(spectrum.len())];
    let mass: f64 = kept.iter().sum();
    let e = -kept
        .iter()
        .map(|&v| v / mass)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    (e.max(0.0), k)
}

/// Truncated matrix entropy of one layer's hidden states: `(E, K)`.
pub fn layer_entropy<T: Scalar>(hidden: &Tensor<T>, policy: TruncationPolicy) -> Result<(f64, usize)> {
    Ok(truncated_entropy(&normalized_spectrum(hidden)?, policy))
}

/// Score every layer of a dense forward pass, pooling the hidden-state rows
/// of all `probes` into one matrix per layer.
pub fn profile_layers<T: Scalar>(
    weights: &TransformerWeights<T>,
    probes: &[Example],
    policy: TruncationPolicy,
) -> Result<Vec<EntropyScore>> {
    if probes.is_empty() {
        return Err(FluxError::contract("entropy profiling needs probe sequences"));
    }
    let cfg = &weights.config;
    let dense = vec![LayerRoute::Full; cfg.n_layers];
    let mut rows: Vec<Vec<T>> = vec![Vec::new(); cfg.n_layers];
    for ex in probes {
        let out = prefill(&ex.tokens, weights, None, Routing::Forced(&dense), true)?;
        for (l, tr) in out.trace.expect("trace requested").iter().enumerate() {
            rows[l].extend_from_slice(tr.hidden.data());
        }
    }
    let d = cfg.model_dim();
    rows.into_iter()
        .enumerate()
        .map(|(layer, data)| {
            let x = Tensor::new(vec![data.len() / d, d], data)?;
            let (entropy, k) = layer_entropy(&x, policy)?;
            Ok(EntropyScore { layer, entropy, k })
        })
        .collect()
}

/// Layer indices by descending score; ties keep the lower index first.
pub fn rank_layers(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticPlan {
    pub omega: f64,
    pub ranking: Vec<usize>,
    pub plan: RoutingPlan,
}

/// Number of layers left on full attention at target sparsity `omega`.
pub fn full_layer_count(omega: f64, n_layers: usize) -> usize {
    // The epsilon keeps exact products such as 0.75·4 from flooring low.
    (((1.0 - omega) * n_layers as f64) + 1e-9).floor() as usize
}

/// Keep the `⌊(1−Ω)·L⌋` highest-entropy layers on full attention.
pub fn static_sparsify(scores: &[f64], omega: f64) -> Result<StaticPlan> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(FluxError::contract(format!("target sparsity {omega} outside [0, 1]")));
    }
    let n = scores.len();
    let ranking = rank_layers(scores);
    let k = full_layer_count(omega, n).min(n);
    let mut routes = vec![LayerRoute::Sparse; n];
    for &l in &ranking[..k] {
        routes[l] = LayerRoute::Full;
    }
    Ok(StaticPlan {
        omega,
        ranking,
        plan: RoutingPlan::forced(routes),
    })
}

/// `{0, 1/8, …, 1}`.
pub fn default_omega_grid() -> Vec<f64> {
    (0..=8).map(|i| i as f64 / 8.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    /// Realized sparsity of the static plan.
    pub realized_omega: f64,
    pub task: String,
    pub metric: &'static str,
    pub value: f64,
}

/// Evaluate each task's probes under the static plan for every grid point.
/// Retrieval tasks report accuracy, holistic tasks perplexity.
pub fn sparsity_sweep<T: Scalar>(
    weights: &TransformerWeights<T>,
    scores: &[f64],
    evals: &[(TaskSpec, Vec<Example>)],
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    let mut out = Vec::new();
    for &omega in grid {
        let sp = static_sparsify(scores, omega)?;
        let realized = sp.plan.sparse_layers() as f64 / sp.plan.n_layers() as f64;
        for (task, probes) in evals {
            let m = evaluate(weights, None, &EvalMode::Forced(sp.plan.routes.clone()), probes)?;
            let (metric, value) = match task.category {
                TaskCategory::Retrieval => ("accuracy", m.accuracy.unwrap_or(f64::NAN)),
                TaskCategory::Holistic => ("perplexity", m.perplexity),
            };
            out.push(SweepRow {
                omega,
                realized_omega: realized,
                task: task.name.clone(),
                metric,
                value,
            });
        }
    }
    Ok(out)
}

pub fn write_entropy_csv(w: &mut impl Write, scores: &[EntropyScore]) -> Result<()> {
    let values: Vec<f64> = scores.iter().map(|s| s.entropy).collect();
    let ranking = rank_layers(&values);
    writeln!(w, "layer,entropy,K,rank")?;
    for s in scores {
        let rank = ranking.iter().position(|&l| l == s.layer).unwrap_or(0);
        writeln!(w, "{},{},{},{}", s.layer, s.entropy, s.k, rank)?;
    }
    Ok(())
}

pub fn write_sweep_csv(w: &mut impl Write, rows: &[SweepRow]) -> Result<()> {
    writeln!(w, "omega,task,metric,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.omega, r.task, r.metric, r.value)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn equal_singular_values_give_ln_k() {
        // Rows of a scaled identity block: K equal singular values.
        for k in 1..=6 {
            let x = Tensor::<f64>::from_fn(&[k + 3, 8], |i| {
                let (r, c) = (i / 8, i % 8);
                if r < k && r == c {
                    2.5
                } else {
                    0.0
                }
            });
            let (e, kk) = layer_entropy(&x, TruncationPolicy::default()).unwrap();
            assert_eq!(kk, k);
            assert!((e - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_has_zero_entropy() {
        let x = Tensor::<f64>::from_fn(&[10, 5], |i| ((i / 5) as f64 + 1.0) * ((i % 5) as f64 - 1.5));
        let (e, k) = layer_entropy(&x, TruncationPolicy::default()).unwrap();
        assert_eq!(k, 1);
        assert!(e.abs() < 1e-12);
    }

    #[test]
    fn zero_hidden_is_a_contract_error() {
        let x = Tensor::<f64>::zeros(&[4, 3]);
        assert!(matches!(
            layer_entropy(&x, TruncationPolicy::default()),
            Err(FluxError::Contract(_))
        ));
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_layers(&[0.1, 0.9, 0.5]), vec![1, 2, 0]);
        assert_eq!(rank_layers(&[0.3; 5]), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn static_plan_examples() {
        let scores: Vec<f64> = (0..32).map(|i| (i * 7 % 32) as f64).collect();
        let all_fa = static_sparsify(&scores, 0.0).unwrap();
        assert_eq!(all_fa.plan.sparse_layers(), 0);
        assert_eq!(static_sparsify(&scores, 1.0).unwrap().plan.sparse_layers(), 32);
        assert_eq!(static_sparsify(&scores, 0.3).unwrap().plan.sparse_layers(), 32 - 22);
        assert_eq!(full_layer_count(0.75, 4), 1);
        assert_eq!(full_layer_count(0.125, 8), 7);
        assert!(static_sparsify(&scores, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn entropy_is_bounded_and_rotation_scale_invariant(
            vals in proptest::collection::vec(-3.0f64..3.0, 24),
            angle in 0.0f64..6.3,
            scale in 0.01f64..100.0,
        ) {
            let x = Tensor::<f64>::from_f64(&[8, 3], &vals).unwrap();
            prop_assume!(x.data().iter().any(|v| v.abs() > 1e-3));
            let (e, k) = layer_entropy(&x, TruncationPolicy::default()).unwrap();
            prop_assert!(e >= 0.0 && e <= (k as f64).ln() + 1e-12);
            // Rotate the first two feature columns and rescale.
            let (c, s) = (angle.cos(), angle.sin());
            let y = Tensor::<f64>::from_fn(&[8, 3], |i| {
                let (r, col) = (i / 3, i % 3);
                let row = &vals[r * 3..r * 3 + 3];
                scale * match col {
                    0 => c * row[0] - s * row[1],
                    1 => s * row[0] + c * row[1],
                    _ => row[2],
                }
            });
            let (e2, k2) = layer_entropy(&y, TruncationPolicy::default()).unwrap();
            prop_assert_eq!(k, k2);
            prop_assert!((e - e2).abs() < 1e-8);
        }

        #[test]
        fn static_plans_nest(scores in proptest::collection::vec(0.0f64..5.0, 1..12), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = static_sparsify(&scores, lo).unwrap().plan;
            let p_hi = static_sparsify(&scores, hi).unwrap().plan;
            for (x, y) in p_lo.routes.iter().zip(&p_hi.routes) {
                if *y == LayerRoute::Full {
                    prop_assert_eq!(*x, LayerRoute::Full);
                }
            }
        }
    }
}
