//! Linear classifiers on fixed-length patient vectors.

use nalgebra::{DMatrix, DVector};

use super::BaselineError;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, n×n).
fn cholesky_solve(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let chol = DMatrix::from_row_slice(n, n, a).cholesky()?;
    Some(chol.solve(&DVector::from_column_slice(b)).iter().copied().collect())
}

/// Weights and unpenalized intercept of a linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn decision(&self, x: &[f64]) -> f64 {
        dot(&self.weights, x) + self.intercept
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }
}

fn check_inputs(x: &[Vec<f64>], y: &[bool]) -> Result<usize, BaselineError> {
    if x.len() != y.len() {
        return Err(BaselineError::InvalidInput(format!("{} rows but {} labels", x.len(), y.len())));
    }
    let d = x.first().map(Vec::len).ok_or(BaselineError::InvalidInput("no training rows".into()))?;
    if x.iter().any(|r| r.len() != d || r.iter().any(|v| !v.is_finite())) {
        return Err(BaselineError::InvalidInput("rows must share one width and be finite".into()));
    }
    Ok(d)
}

/// L2-penalized logistic regression by Newton's method, minimizing
/// `Σ logloss + (l2 / 2)·‖w‖²`. Stops once the gradient norm drops below
/// 1e-6.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64) -> Result<LinearModel, BaselineError> {
    let d = check_inputs(x, y)?;
    let n = d + 1;
    // Parameter vector: weights then intercept.
    let mut theta = vec![0.0; n];
    for _ in 0..100 {
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n * n];
        for (row, &label) in x.iter().zip(y) {
            let z = dot(&theta[..d], row) + theta[d];
            let p = sigmoid(z);
            let r = p - if label { 1.0 } else { 0.0 };
            let w = (p * (1.0 - p)).max(1e-12);
            let xi = |j: usize| if j < d { row[j] } else { 1.0 };
            for j in 0..n {
                grad[j] += r * xi(j);
                for k in 0..=j {
                    hess[j * n + k] += w * xi(j) * xi(k);
                }
            }
        }
        for j in 0..d {
            grad[j] += l2 * theta[j];
            hess[j * n + j] += l2;
        }
        // Tiny ridge on the intercept keeps separable data solvable.
        hess[d * n + d] += 1e-10;
        for j in 0..n {
            for k in 0..j {
                hess[k * n + j] = hess[j * n + k];
            }
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-6 {
            break;
        }
        let step = cholesky_solve(&hess, &grad, n).ok_or_else(|| BaselineError::Numeric("logistic Hessian is not positive definite".into()))?;
        for j in 0..n {
            theta[j] -= step[j];
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(BaselineError::Numeric("logistic regression diverged".into()));
        }
    }
    Ok(LinearModel {
        weights: theta[..d].to_vec(),
        intercept: theta[d],
    })
}

/// Linear support vector classifier minimizing
/// `(1/2)‖w‖² + C·Σ hinge` by full-batch subgradient descent with iterate
/// averaging. Step sizes decay as `1/√t`.
pub fn fit_linear_svc(x: &[Vec<f64>], y: &[bool], c: f64, iterations: usize) -> Result<LinearModel, BaselineError> {
    let d = check_inputs(x, y)?;
    let m = x.len() as f64;
    let lambda = 1.0 / (c * m);
    let sign: Vec<f64> = y.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (mut w_avg, mut b_avg) = (vec![0.0; d], 0.0);
    for t in 1..=iterations {
        let mut gw: Vec<f64> = w.iter().map(|v| lambda * v).collect();
        let mut gb = 0.0;
        for (row, &s) in x.iter().zip(&sign) {
            if s * (dot(&w, row) + b) < 1.0 {
                for (g, v) in gw.iter_mut().zip(row) {
                    *g -= s * v / m;
                }
                gb -= s / m;
            }
        }
        let eta = 1.0 / (t as f64).sqrt();
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= eta * g;
        }
        b -= eta * gb;
        let a = 1.0 / t as f64;
        for (av, wj) in w_avg.iter_mut().zip(&w) {
            *av += a * (wj - *av);
        }
        b_avg += a * (b - b_avg);
    }
    Ok(LinearModel {
        weights: w_avg,
        intercept: b_avg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0], 2).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-12);
        assert!(cholesky_solve(&[0.0], &[1.0], 1).is_none());
    }

    #[test]
    fn logistic_gradient_vanishes_at_solution() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0 - 1.0, ((i * 7) % 5) as f64 / 5.0]).collect();
        let y: Vec<bool> = (0..20).map(|i| (i * 3) % 7 < 3 || i > 15).collect();
        let m = fit_logistic(&x, &y, 0.5).unwrap();
        let mut g = vec![0.0; 3];
        for (row, &l) in x.iter().zip(&y) {
            let r = m.probability(row) - l as u8 as f64;
            g[0] += r * row[0];
            g[1] += r * row[1];
            g[2] += r;
        }
        g[0] += 0.5 * m.weights[0];
        g[1] += 0.5 * m.weights[1];
        assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
    }

    #[test]
    fn svc_separates_separable_data() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![if i < 15 { -1.0 } else { 1.0 } + (i % 5) as f64 * 0.05]).collect();
        let y: Vec<bool> = (0..30).map(|i| i >= 15).collect();
        let m = fit_linear_svc(&x, &y, 1.0, 2000).unwrap();
        for (row, &l) in x.iter().zip(&y) {
            assert_eq!(m.decision(row) > 0.0, l);
        }
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(fit_logistic(&[vec![1.0], vec![1.0, 2.0]], &[true, false], 1.0).is_err());
        assert!(fit_linear_svc(&[], &[], 1.0, 10).is_err());
    }
}
