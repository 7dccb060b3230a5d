use crate::error::{Error, Result};
use crate::network::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam over a flattened [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, param_count: usize) -> Self {
        Adam {
            lr,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// Applies one update from the accumulated gradients of `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.count() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments for {} parameters",
                self.m.len(),
                params.count()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powf(self.t as f64);
        let bc2 = 1.0 - ADAM_BETA2.powf(self.t as f64);
        let mut offset = 0;
        for tensor in params.tensors_mut() {
            let n = tensor.numel();
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::InvalidArgument("parameter without gradient accumulator".into()))?
                .to_vec();
            let m = &mut self.m[offset..offset + n];
            let v = &mut self.v[offset..offset + n];
            for (((p, g), m), v) in tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
            offset += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        params.get_mut(id).accumulate_grad(&[0.3, -4.0, 0.0]).unwrap();
        let mut adam = Adam::new(0.1, 3);
        adam.step(&mut params).unwrap();
        let p = params.get(id).data();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε).
        assert!((p[0] - (1.0 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[2], 0.5);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn matches_reference_recursion_over_steps() {
        let mut params = ParamSet::new();
        let id = params.add("w", Tensor::scalar(2.0));
        let mut adam = Adam::new(0.05, 1);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        for k in 1..=20 {
            // f(x) = x², g = 2x
            params.zero_grad();
            let g = 2.0 * params.get(id).data()[0];
            params.get_mut(id).accumulate_grad(&[g]).unwrap();
            adam.step(&mut params).unwrap();
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            x -= 0.05 * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((params.get(id).data()[0] - x).abs() < 1e-12);
        }
        assert!(x.abs() < 2.0);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut params = ParamSet::new();
        params.add("w", Tensor::zeros(&[2]));
        assert!(Adam::new(0.1, 3).step(&mut params).is_err());
    }
}
