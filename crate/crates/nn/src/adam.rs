use crate::error::shape_err;
use crate::{NnError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(shape_err(
                "adam_step",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.shape() != p.shape() {
                return Err(shape_err("adam_step", format!("parameter {i} shape mismatch")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(beta1), T::lit(beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (pk, gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = b1 * m[k] + one_b1 * *gk;
                v[k] = b2 * v[k] + one_b2 * *gk * *gk;
                *pk -= step_size * m[k] / (v[k].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![Tensor::<f64>::from_fn(&[4], |i| i as f64)];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[Tensor::zeros(&[4])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = vec![Tensor::<f64>::zeros(&[3])];
        let g = Tensor::new(vec![3], vec![0.5, -2.0, 1e-3]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &[g.clone()]).unwrap();
        // m_hat = g, v_hat = g^2 after bias correction, so delta = -lr * g / (|g| + eps)
        for (d, gv) in p[0].data().iter().zip(g.data()) {
            let expect = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((d - expect).abs() < 1e-12);
            assert!((d + 1e-3 * gv.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn identical_state_gives_identical_result() {
        let p0 = vec![Tensor::<f32>::from_fn(&[5], |i| i as f32 * 0.1)];
        let g = vec![Tensor::<f32>::from_fn(&[5], |i| 1.0 - i as f32 * 0.3)];
        let adam = Adam::new(AdamConfig::default(), &p0);
        let (mut a, mut b) = (adam.clone(), adam);
        let (mut pa, mut pb) = (p0.clone(), p0);
        a.step(&mut pa, &g).unwrap();
        b.step(&mut pb, &g).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(&[3])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &[Tensor::zeros(&[4])]).is_err());
    }
}
