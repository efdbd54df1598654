//! Adam with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &[Array2<f64>]) -> Self {
        let zeros = |p: &Array2<f64>| Array2::zeros(p.dim());
        Self { cfg, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }

    /// `θ ← θ (1 - lr·wd)` followed by the bias-corrected Adam step.
    pub fn step(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let AdamWConfig { lr, weight_decay, beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let shrink = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p *= shrink;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        let mut params = vec![array![[2.0, -4.0]]];
        let mut opt = AdamW::new(cfg, &params);
        let zero = vec![Array2::zeros((1, 2))];
        for k in 1..=5 {
            opt.step(&mut params, &zero);
            let f = (1.0f64 - 0.1 * 0.01).powi(k);
            assert!((params[0][[0, 0]] - 2.0 * f).abs() < 1e-15);
            assert!((params[0][[0, 1]] + 4.0 * f).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first step ±lr·g/(|g|+eps)
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let mut params = vec![array![[1.0, 1.0]]];
        let mut opt = AdamW::new(cfg, &params);
        opt.step(&mut params, &[array![[3.0, -0.5]]]);
        assert!((params[0][[0, 0]] - (1.0 - 0.01 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((params[0][[0, 1]] - (1.0 + 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn minimizes_quadratic() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut params = vec![array![[3.0]]];
        let mut opt = AdamW::new(cfg, &params);
        for _ in 0..2000 {
            let g = params[0].mapv(|x| 2.0 * (x - 1.0));
            opt.step(&mut params, &[g]);
        }
        assert!((params[0][[0, 0]] - 1.0).abs() < 1e-3);
    }
}
