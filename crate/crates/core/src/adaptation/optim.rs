//! Stochastic gradient descent with momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `buf = μ·buf + (g + λ·p)`, then `p -= lr·buf`. Buffers start at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    /// Momentum buffers, one per parameter slot; empty before the first step.
    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Tensor>) {
        self.buffers = buffers;
    }

    /// Applies one update. `grads[i] = None` leaves slot `i` untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "{} parameters but {} gradient slots",
                params.len(),
                grads.len()
            )));
        }
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        if self.buffers.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers for {} parameters",
                self.buffers.len(),
                params.len()
            )));
        }
        for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.buffers) {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() || buf.shape() != p.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(buf.data_mut()) {
                *b = self.momentum * *b + gi + self.weight_decay * *w;
                *w -= self.lr * *b;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_descent_step() {
        let mut p = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut opt = Sgd::new(0.5, 0.0, 0.0);
        let g = Tensor::new(&[2], vec![0.2, 0.4]).unwrap();
        opt.step(vec![&mut p], &[Some(g)]).unwrap();
        assert_eq!(p.data(), &[0.9, -2.2]);
    }

    #[test]
    fn momentum_and_decay_hand_values() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.5);
        let g = || Some(Tensor::scalar(1.0));
        opt.step(vec![&mut p], &[g()]).unwrap();
        // buf = 1 + 0.5 = 1.5, p = 1 - 0.15
        assert!((p.item() - 0.85).abs() < 1e-15);
        opt.step(vec![&mut p], &[g()]).unwrap();
        // buf = 0.9*1.5 + 1 + 0.425 = 2.775, p = 0.85 - 0.2775
        assert!((p.item() - 0.5725).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_leaves_slot_alone() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.1);
        opt.step(vec![&mut a, &mut b], &[None, Some(Tensor::scalar(1.0))]).unwrap();
        assert_eq!(a.item(), 1.0);
        assert_eq!(opt.buffers()[0].item(), 0.0);
        assert!(b.item() < 2.0);
    }
}
