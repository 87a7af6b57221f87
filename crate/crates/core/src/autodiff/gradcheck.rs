//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::{AutodiffError, ParamSet, Tape, Var};

/// Denominator floor for the relative error. Central differences of an O(1)
/// loss carry about 1e-11 of round-off at the usual steps, so gradients
/// below this floor are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Entries whose ±h perturbation crossed a non-differentiable point
    /// (relu gate, argmax or top-k change) and so have no valid central
    /// difference at this step size.
    pub skipped_at_kinks: usize,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the gradients `backward` produces against central differences
/// `(f(θ+h) − f(θ−h)) / 2h` for every parameter entry.
///
/// `forward` must be deterministic (disable dropout) and return a scalar
/// loss on the tape it is given. Relative error per entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(mut forward: F, params: &ParamSet, step: f64, tolerance: f64) -> Result<GradCheckReport, AutodiffError>
where
    F: FnMut(&mut Tape, &ParamSet) -> Result<Var, AutodiffError>,
{
    let mut work = params.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let loss = forward(&mut tape, &work)?;
    let base_signature = tape.signature();
    tape.backward(loss, &mut work)?;
    let analytic: Vec<_> = work
        .iter()
        .map(|t| t.grad.clone().unwrap_or_else(|| ndarray::Array2::zeros(t.value.dim())))
        .collect();
    work.zero_grad();

    let mut eval = |ps: &ParamSet| -> Result<(f64, u64), AutodiffError> {
        let mut t = Tape::new();
        let l = forward(&mut t, ps)?;
        Ok((t.scalar(l)?, t.signature()))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: None,
        checked: 0,
        skipped_at_kinks: 0,
        step,
        tolerance,
        passed: true,
    };

    for p in 0..work.len() {
        if !work.get(p).requires_grad {
            continue;
        }
        for e in 0..work.get(p).value.len() {
            let original = work.get(p).value.as_slice().expect("standard layout")[e];
            work.get_mut(p).value.as_slice_mut().expect("standard layout")[e] = original + step;
            let (up, sig_up) = eval(&work)?;
            work.get_mut(p).value.as_slice_mut().expect("standard layout")[e] = original - step;
            let (down, sig_down) = eval(&work)?;
            work.get_mut(p).value.as_slice_mut().expect("standard layout")[e] = original;

            if sig_up != base_signature || sig_down != base_signature {
                report.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[p].as_slice().expect("standard layout")[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(work.get(p).name.clone());
                report.worst_index = Some(e);
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{linear, Tensor};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn linear_model_gradients_are_exact_to_round_off() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 6, 4);
        let mut ps = ParamSet::new();
        let w = ps.push(Tensor::param("w", random(&mut rng, 4, 2)));
        let b = ps.push(Tensor::param("b", random(&mut rng, 1, 2)));
        let report = grad_check(
            |tape, ps| {
                let xv = tape.constant(x.clone())?;
                let wv = tape.param(ps, w)?;
                let bv = tape.param(ps, b)?;
                let y = linear(tape, xv, wv, bv)?;
                let m = tape.global_mean(y)?;
                tape.softmax_cross_entropy(m, 1, &[])
            },
            &ps,
            1e-4,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.skipped_at_kinks, 0);
        assert_eq!(report.checked, 10);
    }

    #[test]
    fn composed_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = random(&mut rng, 5, 3);
            let mut ps = ParamSet::new();
            let w = ps.push(Tensor::param("w", random(&mut rng, 3, 3)));
            let s = ps.push(Tensor::param("s", random(&mut rng, 1, 1)));
            let report = grad_check(
                |tape, ps| {
                    let xv = tape.constant(x.clone())?;
                    let wv = tape.param(ps, w)?;
                    let sv = tape.param(ps, s)?;
                    let h = tape.matmul(xv, wv)?;
                    let h = tape.mul_scalar(h, sv)?;
                    let t = tape.tanh(h)?;
                    let g = tape.sigmoid(h)?;
                    let score = tape.gather_rows(t, &[0, 1, 2, 3, 4])?;
                    let col = tape.scatter_sum(score, &[0, 0, 1, 1, 2], 3)?;
                    let gate = tape.gather_rows(g, &[0, 1, 2])?;
                    let gated = tape.concat_cols(col, gate)?;
                    let rows = tape.global_max(gated)?;
                    let r = tape.relu(rows)?;
                    tape.sum(r)
                },
                &ps,
                1e-4,
                1e-4,
            )
            .unwrap();
            assert!(report.passed, "{report:?}");
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // The analytic pass sees f(w) = w, the perturbed passes see w².
        let mut ps = ParamSet::new();
        let w = ps.push(Tensor::param("w", Array2::from_elem((1, 1), 0.7)));
        let mut calls = 0;
        let report = grad_check(
            |tape, ps| {
                calls += 1;
                let wv = tape.param(ps, w)?;
                let sq = tape.mul_scalar(wv, wv)?;
                if calls == 1 {
                    tape.sum(wv)
                } else {
                    tape.sum(sq)
                }
            },
            &ps,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed);
    }
}
