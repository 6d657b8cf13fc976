//! Adam with per-tensor step counts so that moments can be reset for part
//! of the parameters.

use crate::ndiff::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    /// Updates since the last reset (drives bias correction).
    pub steps: u64,
}

impl<T: Real> Moments<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            steps: 0,
        }
    }

    pub fn reset(&mut self) {
        *self = Self::zeros(self.m.shape());
    }

    /// Zeroes the moments of the given rows, leaving the step count alone.
    pub fn reset_rows(&mut self, rows: &[usize]) {
        for &r in rows {
            self.m.row_mut(r).fill(T::ZERO);
            self.v.row_mut(r).fill(T::ZERO);
        }
    }

    /// One bias-corrected update of `param` against `grad` with rate `lr`.
    pub fn update(&mut self, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, p: &AdamParams) {
        self.steps += 1;
        let (b1, b2) = (T::from_f64(p.beta1), T::from_f64(p.beta2));
        let c1 = T::from_f64(1.0 - p.beta1.powi(self.steps as i32));
        let c2 = T::from_f64(1.0 - p.beta2.powi(self.steps as i32));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(p.eps));
        let m = self.m.data_mut().iter_mut();
        let v = self.v.data_mut().iter_mut();
        for (((x, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::ONE - b1) * g;
            *vi = b2 * *vi + (T::ONE - b2) * g * g;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *x = *x - lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_trace_on_quadratic() {
        // f(x) = (x - 3)^2, x0 = 0, lr 0.1
        let p = AdamParams {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        };
        let mut x = Tensor::<f64>::scalar(0.0);
        let mut mo = Moments::zeros(&[]);
        let (mut m, mut v, mut xs) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (xs - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.99 * v + 0.01 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            xs -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let grad = Tensor::scalar(2.0 * (x.item() - 3.0));
            mo.update(&mut x, &grad, 0.1, &p);
            assert!((mo.m.item() - m).abs() < 1e-7);
            assert!((mo.v.item() - v).abs() < 1e-7);
            assert!((x.item() - xs).abs() < 1e-7);
        }
        // first Adam step moves by lr in the descent direction
        let mut y = Tensor::<f64>::scalar(0.0);
        Moments::zeros(&[]).update(&mut y, &Tensor::scalar(-6.0), 0.1, &p);
        assert!((y.item() - 0.1).abs() < 1e-7);
    }

    #[test]
    fn zero_rate_leaves_parameters() {
        let p = AdamParams {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        };
        let mut x = Tensor::<f32>::matrix(2, 2, vec![1.0, -2.0, 3.5, 0.25]);
        let before = x.clone();
        let mut mo = Moments::zeros(x.shape());
        mo.update(&mut x, &Tensor::full([2, 2], 0.7), 0.0, &p);
        assert_eq!(x, before);
        mo.reset_rows(&[1]);
        assert_eq!(mo.m.row(1), &[0.0, 0.0]);
        assert_ne!(mo.m.row(0), &[0.0, 0.0]);
        mo.reset();
        assert_eq!(mo.steps, 0);
    }
}
