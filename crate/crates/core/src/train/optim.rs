use crate::error::{FluxError, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup over the first `warmup_ratio` of steps, then cosine decay
/// to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).ceil() as usize
    }

    /// Rate for the zero-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.peak * (step + 1) as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1);
        let frac = ((step - warm) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Decoupled-decay Adam over a fixed list of parameters. Rank-1 parameters
/// (biases, norm gains) are not decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update<T: Scalar>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(FluxError::contract("optimizer parameter list changed"));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(FluxError::dim("adamw", format!("param {i} and gradient sizes differ")));
            }
            let decay = if p.rank() >= 2 { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let wf = w.as_f64();
                let next = wf - lr * (mhat / (vhat.sqrt() + c.eps) + decay * wf);
                *w = T::from_f64_lossy(next);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1.0,
            warmup_ratio: 0.2,
            total_steps: 100,
        };
        assert_eq!(s.warmup_steps(), 20);
        assert!((s.lr(0) - 0.05).abs() < 1e-12);
        assert!((s.lr(19) - 1.0).abs() < 1e-12);
        assert!((s.lr(20) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(99) < 0.01);
        for t in 20..99 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first Adam step is lr·g/|g|.
        let mut w = Tensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[2], &[0.3, -7.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&w]);
        opt.update(&mut [&mut w], &[g], 0.01).unwrap();
        assert!((w.data()[0] - 0.99).abs() < 1e-6);
        assert!((w.data()[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn decay_skips_vectors() {
        let mut m = Tensor::<f64>::full(&[1, 1], 1.0);
        let mut b = Tensor::<f64>::full(&[1], 1.0);
        let zero = || Tensor::<f64>::zeros(&[1]);
        let mut opt = AdamW::new(AdamWConfig::default(), &[&m, &b]);
        opt.update(&mut [&mut m, &mut b], &[zero().reshape(&[1, 1]).unwrap(), zero()], 0.1)
            .unwrap();
        assert!((m.data()[0] - 0.99).abs() < 1e-12);
        assert_eq!(b.data()[0], 1.0);
    }
}
