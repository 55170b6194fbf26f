use super::{Scalar, Tensor};
use crate::error::Error;
use crate::Result;

/// Adam with bias correction. Moments are kept per parameter tensor, in the
/// same order the parameters were registered.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// decoupled weight decay: params shrink by lr * weight_decay per step
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>], lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamState {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let shrink = T::from_f64(1.0 - self.lr * self.weight_decay);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape != g.shape {
                return Err(Error::ShapeMismatch(format!(
                    "adam: param {:?} vs grad {:?}",
                    p.shape, g.shape
                )));
            }
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] = p.data[i] * shrink - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0])];
        let g = vec![Tensor::zeros(&[2])];
        let mut adam = AdamState::new(&[vec![2]], 1e-4, 0.9, 0.98);
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p[0].data, vec![1.0, -2.0]);
    }

    #[test]
    fn positive_gradient_decreases_param() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let g = vec![Tensor::scalar(1.0)];
        let mut adam = AdamState::new(&[vec![1]], 1e-4, 0.9, 0.98);
        adam.step(&mut p, &g).unwrap();
        assert!(p[0].item() < 1.0);
    }

    #[test]
    fn quadratic_converges() {
        // minimize (p - 3)^2 from p = 0 at lr 0.05
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut adam = AdamState::new(&[vec![1]], 0.05, 0.9, 0.98);
        for _ in 0..100 {
            let g = vec![Tensor::scalar(2.0 * (p[0].item() - 3.0))];
            adam.step(&mut p, &g).unwrap();
        }
        assert!((p[0].item() - 3.0).abs() < 0.1, "ended at {}", p[0].item());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let g = vec![Tensor::zeros(&[3])];
        let mut adam = AdamState::new(&[vec![2]], 1e-4, 0.9, 0.98);
        assert!(adam.step(&mut p, &g).is_err());
    }
}
