use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// RMSProp with a per-update learning-rate decay
/// `lr = lr0 / (1 + decay * updates)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub lr0: f64,
    pub decay: f64,
    pub rho: f64,
    pub eps: f64,
    /// Completed updates.
    pub updates: u64,
    /// Running mean of squared gradients, one buffer per parameter.
    pub acc: Vec<Vec<T>>,
}

impl<T: Element> RmsProp<T> {
    pub fn new(lr0: f64, decay: f64, shapes: &[&[usize]]) -> Self {
        RmsProp {
            lr0,
            decay,
            rho: 0.9,
            eps: 1e-7,
            updates: 0,
            acc: shapes.iter().map(|s| vec![T::zero(); s.iter().product()]).collect(),
        }
    }

    /// Learning rate of the next update.
    pub fn current_lr(&self) -> f64 {
        effective_lr(self.lr0, self.decay, self.updates)
    }

    /// Applies one update in place. Leaves parameters and state untouched
    /// and reports divergence if any gradient is not finite.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.acc.len() {
            return Err(Error::invalid(format!(
                "{} parameters, {} gradients, {} accumulators",
                params.len(),
                grads.len(),
                self.acc.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.acc[i].len() != g.len() {
                return Err(Error::shape(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Divergence {
                    step: self.updates,
                    reason: format!("non-finite gradient in parameter {i}"),
                });
            }
        }
        let lr = T::of(self.current_lr());
        let rho = T::of(self.rho);
        let one_minus = T::one() - rho;
        let eps = T::of(self.eps);
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.acc) {
            for ((w, &gi), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
                *a = rho * *a + one_minus * gi * gi;
                *w -= lr * gi / (a.sqrt() + eps);
            }
        }
        self.updates += 1;
        Ok(())
    }
}

pub fn effective_lr(lr0: f64, decay: f64, updates: u64) -> f64 {
    lr0 / (1.0 + decay * updates as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_by_hand() {
        let mut p = Tensor::from_vec([1], vec![0.0f64]).unwrap();
        let mut opt = RmsProp::new(1e-3, 0.0, &[&[1]]);
        opt.step(&mut [&mut p], &[Tensor::from_vec([1], vec![1.0]).unwrap()]).unwrap();
        assert!((opt.acc[0][0] - 0.1).abs() < 1e-15);
        let want = -1e-3 / (0.1f64.sqrt() + 1e-7);
        assert!((p.data()[0] - want).abs() < 1e-15);
        assert_eq!(opt.updates, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec([3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut opt = RmsProp::new(1e-3, 1e-6, &[&[3]]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Tensor::zeros([3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn decay_halves_at_one_over_decay() {
        assert_eq!(effective_lr(1e-3, 1e-6, 1_000_000), 5e-4);
        assert_eq!(effective_lr(1e-3, 1e-6, 0), 1e-3);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut p = Tensor::from_vec([2], vec![1.0f64, 2.0]).unwrap();
        let before = p.clone();
        let mut opt = RmsProp::new(1e-3, 0.0, &[&[2]]);
        let err = opt.step(&mut [&mut p], &[Tensor::from_vec([2], vec![0.1, f64::NAN]).unwrap()]);
        assert!(matches!(err, Err(Error::Divergence { .. })));
        assert_eq!(p, before);
        assert_eq!(opt.updates, 0);
        assert_eq!(opt.acc[0], vec![0.0, 0.0]);
    }
}
