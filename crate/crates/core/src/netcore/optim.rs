//! Adam with a constant learning rate, and exponential moving averages of
//! parameters.

use crate::error::{ensure, Error, Result};
use crate::netcore::params::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-network Adam accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub step: u64,
    pub first_moment: ParamStore<f32>,
    pub second_moment: ParamStore<f32>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore<f32>, lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// One Adam update. `grads` must be keyed exactly like `params`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>) -> Result<()> {
        for path in params.paths() {
            let g = grads
                .get(path)
                .ok_or_else(|| Error::invalid(format!("missing gradient for `{path}`")))?;
            ensure!(
                g.shape() == params.get(path).unwrap().shape(),
                "gradient shape mismatch for `{path}`"
            );
        }
        ensure!(
            self.first_moment.same_layout(params),
            "optimizer state does not match parameter layout"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
        let (bc1, bc2, lr, eps) = (bc1 as f32, bc2 as f32, self.lr as f32, ADAM_EPS as f32);
        for (path, p) in params.iter_mut() {
            let g = grads.get(path).unwrap().data();
            let m = self.first_moment.get_mut(path).unwrap().data_mut();
            for (mi, &gi) in m.iter_mut().zip(g) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
            }
            let v = self.second_moment.get_mut(path).unwrap().data_mut();
            for (vi, &gi) in v.iter_mut().zip(g) {
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            let m = self.first_moment.get(path).unwrap().data();
            let v = self.second_moment.get(path).unwrap().data();
            for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `shadow <- decay * shadow + (1 - decay) * live`
pub fn ema_update(shadow: &mut ParamStore<f32>, live: &ParamStore<f32>, decay: f64) -> Result<()> {
    ensure!(shadow.same_layout(live), "EMA shadow and live parameters differ in layout");
    ensure!((0.0..=1.0).contains(&decay), "EMA decay {decay} outside [0, 1]");
    let d = decay as f32;
    for (path, s) in shadow.iter_mut() {
        let l = live.get(path).unwrap();
        if decay == 0.0 {
            *s = l.clone();
            continue;
        }
        for (sv, &lv) in s.data_mut().iter_mut().zip(l.data()) {
            *sv = d * *sv + (1.0 - d) * lv;
        }
    }
    Ok(())
}

/// Convenience for tests and tooling: a store holding one tensor.
pub fn single(path: &str, t: Tensor<f32>) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.insert(path, t).unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = single("w", Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, 0.1);
        let g = p.zeros_like();
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // f(w) = w², w = 1 → g = 2; m̂ = 2, v̂ = 4 → Δ = lr·2/(2+eps)
        let mut p = single("w", Tensor::new([1], vec![1.0]).unwrap());
        let mut opt = OptimizerState::new(&p, 0.1);
        let g = single("w", Tensor::new([1], vec![2.0]).unwrap());
        opt.step(&mut p, &g).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w - 0.9).abs() < 1e-6, "{w}");
        // bias-corrected first moment equals the raw gradient after one step
        let m = opt.first_moment.get("w").unwrap().item();
        assert!((m / (1.0 - ADAM_BETA1 as f32) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn missing_gradient_key_is_rejected() {
        let mut p = single("w", Tensor::zeros([1]));
        let mut opt = OptimizerState::new(&p, 0.1);
        let g = single("other", Tensor::zeros([1]));
        assert!(matches!(opt.step(&mut p, &g), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ema_endpoints_and_geometric_gap() {
        let live = single("w", Tensor::new([1], vec![1.0]).unwrap());
        let mut shadow = single("w", Tensor::new([1], vec![0.0]).unwrap());
        ema_update(&mut shadow, &live, 1.0).unwrap();
        assert_eq!(shadow.get("w").unwrap().item(), 0.0);
        ema_update(&mut shadow, &live, 0.0).unwrap();
        assert_eq!(shadow.get("w").unwrap().item(), 1.0);

        let mut shadow = single("w", Tensor::new([1], vec![0.0]).unwrap());
        let n = 500;
        for _ in 0..n {
            ema_update(&mut shadow, &live, 0.999).unwrap();
        }
        let gap = 1.0 - shadow.get("w").unwrap().item() as f64;
        let expected = 0.999f64.powi(n);
        assert!((gap - expected).abs() / expected < 1e-3, "{gap} vs {expected}");
    }

    #[test]
    fn ema_rejects_mismatched_keys() {
        let live = single("w", Tensor::zeros([1]));
        let mut shadow = single("v", Tensor::zeros([1]));
        assert!(ema_update(&mut shadow, &live, 0.5).is_err());
    }
}
