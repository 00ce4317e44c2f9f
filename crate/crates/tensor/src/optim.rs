use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment estimates are kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .params()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_state(config: AdamConfig, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Self {
        assert_eq!(m.len(), v.len(), "moment lists differ in length");
        Self { config, step, m, v }
    }

    /// Applies one update with learning rate `lr`. A zero rate leaves the
    /// parameters untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "one gradient per parameter tensor"
        );
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                if lr != 0.0 {
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[2], vec![1.0, -1.0]));
        let mut adam = Adam::new(
            &ps,
            AdamConfig {
                beta1: 0.5,
                ..Default::default()
            },
        );
        adam.step(&mut ps, &[Tensor::new(&[2], vec![3.0, -0.5])], 0.1);
        let w = ps.params().next().unwrap().1;
        assert!((w.data()[0] - 0.9).abs() < 1e-6);
        assert!((w.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_rate_is_bitwise_noop() {
        let mut ps = ParamSet::new();
        ps.push("w", Tensor::new(&[3], vec![0.1, -0.0, 7.0]));
        let before = ps.digest();
        let mut adam = Adam::new(&ps, AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut ps, &[Tensor::new(&[3], vec![1.0, 2.0, 3.0])], 0.0);
        }
        assert_eq!(before, ps.digest());
    }
}
