use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Mat, ParamSet};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub step: u64,
    #[serde(skip)]
    pub first_moment: Vec<Mat>,
    #[serde(skip)]
    pub second_moment: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        Self::with_betas(params, lr, (0.9, 0.999), 1e-8, weight_decay)
    }

    pub fn with_betas(params: &ParamSet, lr: f64, betas: (f64, f64), epsilon: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|t| Array2::zeros(t.value.dim())).collect::<Vec<_>>();
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            epsilon,
            weight_decay,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One update from the gradients accumulated in `params`: first
    /// `θ ← θ − lr·wd·θ`, then the bias-corrected Adam step. Missing
    /// gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<(), AutodiffError> {
        if params.len() != self.first_moment.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam_step",
                lhs: (params.len(), 0),
                rhs: (self.first_moment.len(), 0),
            });
        }
        for (i, t) in params.iter().enumerate() {
            if t.value.dim() != self.first_moment[i].dim() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adam_step",
                    lhs: t.value.dim(),
                    rhs: self.first_moment[i].dim(),
                });
            }
            if let Some(g) = &t.grad {
                if g.dim() != t.value.dim() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adam_step",
                        lhs: t.value.dim(),
                        rhs: g.dim(),
                    });
                }
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps, wd) = (self.beta1, self.beta2, self.lr, self.epsilon, self.weight_decay);

        for ((p, m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            if !p.requires_grad {
                continue;
            }
            if wd != 0.0 {
                p.value.mapv_inplace(|x| x - lr * wd * x);
            }
            let Some(g) = &p.grad else { continue };
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|theta, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *theta -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use ndarray::array;

    #[test]
    fn zero_gradient_without_decay_leaves_parameters() {
        let mut ps = ParamSet::new();
        let i = ps.push(Tensor::param("w", array![[1.5, -2.0]]));
        ps.get_mut(i).grad = Some(array![[0.0, 0.0]]);
        let mut adam = AdamState::new(&ps, 0.1, 0.0);
        adam.step(&mut ps).unwrap();
        assert_eq!(ps.get(i).value, array![[1.5, -2.0]]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² on step one, so the update is lr·g/(|g| + ε).
        let mut ps = ParamSet::new();
        let i = ps.push(Tensor::param("w", array![[1.0]]));
        ps.get_mut(i).grad = Some(array![[1.0]]);
        let mut adam = AdamState::new(&ps, 0.1, 0.0);
        adam.step(&mut ps).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((ps.get(i).value[[0, 0]] - expected).abs() < 1e-15);
        assert!((ps.get(i).value[[0, 0]] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn pure_decay_scales_parameters() {
        let mut ps = ParamSet::new();
        let i = ps.push(Tensor::param("w", array![[2.0, -4.0]]));
        ps.get_mut(i).grad = Some(array![[0.0, 0.0]]);
        let mut adam = AdamState::new(&ps, 0.1, 0.1);
        adam.step(&mut ps).unwrap();
        assert!((ps.get(i).value[[0, 0]] - 1.98).abs() < 1e-12);
        assert!((ps.get(i).value[[0, 1]] + 3.96).abs() < 1e-12);
    }

    #[test]
    fn mismatched_gradient_shape_is_rejected() {
        let mut ps = ParamSet::new();
        let i = ps.push(Tensor::param("w", array![[1.0, 2.0]]));
        let mut adam = AdamState::new(&ps, 0.1, 0.0);
        ps.get_mut(i).grad = Some(array![[1.0]]);
        assert!(adam.step(&mut ps).is_err());
    }
}
