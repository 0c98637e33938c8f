//! Adaptive-moment gradient descent shared by the toy trainer (over model
//! weights) and the image synthesizer (over pixels).

use ndarray::ArrayD;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state over a fixed, ordered list of tensors. The caller must
/// pass the same tensors in the same order on every step.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update. `grads[i]` of `None` means no gradient path reached
    /// tensor `i`; its moments decay as if the gradient were zero.
    pub fn step(&mut self, params: &mut [&mut ArrayD<f64>], grads: &[Option<&ArrayD<f64>>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.dim())).collect();
        }
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let scale = self.cfg.lr / bc1;
        for i in 0..params.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            match grads[i] {
                Some(g) => {
                    assert_eq!(g.shape(), params[i].shape(), "gradient shape mismatch");
                    ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                    });
                    ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                    });
                }
                None => {
                    m.mapv_inplace(|mi| b1 * mi);
                    v.mapv_inplace(|vi| b2 * vi);
                }
            }
            let eps = self.cfg.eps;
            ndarray::Zip::from(&mut *params[i])
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mi, &vi| {
                    *p -= scale * mi / ((vi / bc2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut x = arr1(&[0.0, 10.0]).into_dyn();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        for _ in 0..500 {
            let g = x.mapv(|xi| 2.0 * (xi - 3.0));
            opt.step(&mut [&mut x], &[Some(&g)]);
        }
        for v in x.iter() {
            assert!((v - 3.0).abs() < 1e-3, "x = {v}");
        }
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut x = arr1(&[1.0, -2.0, 0.5]).into_dyn();
            let mut opt = Adam::new(AdamConfig::with_lr(0.05));
            for k in 0..50 {
                let g = x.mapv(|xi: f64| xi.sin() + k as f64 * 1e-3);
                opt.step(&mut [&mut x], &[Some(&g)]);
            }
            x
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_decays_moments() {
        let mut x = arr1(&[1.0]).into_dyn();
        let mut opt = Adam::new(AdamConfig::with_lr(0.1));
        let g = arr1(&[1.0]).into_dyn();
        opt.step(&mut [&mut x], &[Some(&g)]);
        let after_first = x[[0]];
        assert!(after_first < 1.0);
        // With no new gradient the accumulated momentum still moves x, but
        // the step must shrink.
        let prev = x[[0]];
        opt.step(&mut [&mut x], &[None]);
        let second_step = (x[[0]] - prev).abs();
        assert!(second_step > 0.0 && second_step < (1.0 - after_first).abs());
    }
}
