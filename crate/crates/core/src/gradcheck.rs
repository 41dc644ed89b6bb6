//! Finite-difference gradient oracle.
//!
//! Central differences with a 1e-5 step balance truncation against round-off
//! at 64-bit precision; every registered primitive and every composite loss
//! is expected to agree with this oracle to a 1e-4 relative error.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative-error gate used by the gradient suite.
pub const PASS_THRESHOLD: f64 = 1e-4;

/// Max relative gradient errors for every loss component and the composite,
/// differentiated through the softmax at one seeded frozen batch of logits.
/// Rows come back in a fixed order: ce, H, mse, kl, var, composite.
pub fn loss_gradient_suite(
    spec: &crate::multinoulli::MultinoulliSpec,
    weights: &crate::losses::LossWeights,
    batch: usize,
    seed: u64,
) -> Result<Vec<(&'static str, f64)>> {
    use crate::losses;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    let k = spec.classes();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut random_logits = |rows: usize, cols: usize| -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
        )
        .expect("sized data")
    };
    let logits = random_logits(k, batch);
    let logits2 = random_logits(k, batch);
    let mut targets = Matrix::zeros(k, batch);
    for j in 0..batch {
        targets.set(j % spec.labeled(), j, 1.0);
    }

    let mut rows = Vec::with_capacity(6);

    let t = targets.clone();
    rows.push((
        "ce",
        grad_check(
            move |tape, z| {
                let p = tape.softmax_columns(z);
                losses::loss_ce(tape, p, &t)
            },
            &logits,
            DEFAULT_STEP,
        )?,
    ));

    rows.push((
        "H",
        grad_check(
            |tape, z| {
                let p = tape.softmax_columns(z);
                losses::loss_entropy(tape, p)
            },
            &logits,
            DEFAULT_STEP,
        )?,
    ));

    let other = logits2.clone();
    rows.push((
        "mse",
        grad_check(
            move |tape, z| {
                let p = tape.softmax_columns(z);
                let o = tape.leaf(other.clone());
                let p2 = tape.softmax_columns(o);
                losses::loss_consistency(tape, p, p2)
            },
            &logits,
            DEFAULT_STEP,
        )?,
    ));

    let s = spec.clone();
    rows.push((
        "kl",
        grad_check(
            move |tape, z| {
                let p = tape.softmax_columns(z);
                losses::loss_kl_mean(tape, p, &s)
            },
            &logits,
            DEFAULT_STEP,
        )?,
    ));

    let s = spec.clone();
    rows.push((
        "var",
        grad_check(
            move |tape, z| {
                let p = tape.softmax_columns(z);
                losses::loss_covariance(tape, p, &s)
            },
            &logits,
            DEFAULT_STEP,
        )?,
    ));

    let s = spec.clone();
    let other = logits2;
    let w = *weights;
    rows.push((
        "composite",
        grad_check(
            move |tape, z| {
                let p = tape.softmax_columns(z);
                let o = tape.leaf(other.clone());
                let p2 = tape.softmax_columns(o);
                let (total, _) = losses::loss_unlabeled(tape, p, p2, &s, &w)?;
                Ok(total)
            },
            &logits,
            DEFAULT_STEP,
        )?,
    ));

    Ok(rows)
}

/// Compare the tape gradient of a scalar graph function against central
/// finite differences at `at`.
///
/// Returns max over entries of |analytic - numeric| / max(1, |analytic|).
pub fn grad_check<F>(f: F, at: &Matrix, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(at.clone());
        let out = f(&mut tape, x)?;
        let value = tape.scalar(out)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check base evaluation".into(),
                index: 0,
            });
        }
        tape.backward(out)?.wrt(x)
    };

    let eval = |m: &Matrix, index: usize| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(m.clone());
        let out = f(&mut tape, x)?;
        let v = tape.scalar(out)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check perturbed evaluation".into(),
                index,
            });
        }
        Ok(v)
    };

    let mut max_rel = 0.0_f64;
    for idx in 0..at.data().len() {
        let mut plus = at.clone();
        plus.data_mut()[idx] += step;
        let mut minus = at.clone();
        minus.data_mut()[idx] -= step;
        let numeric = (eval(&plus, idx)? - eval(&minus, idx)?) / (2.0 * step);
        let a = analytic.data()[idx];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rows: usize, cols: usize, rng: &mut StdRng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn sum_of_entries_has_all_ones_gradient() {
        let mut rng = StdRng::seed_from_u64(0);
        let at = random_matrix(3, 4, &mut rng);
        let err = grad_check(|t, x| Ok(t.sum(x)), &at, DEFAULT_STEP).unwrap();
        assert!(err < 1e-9, "max rel err {err}");
    }

    #[test]
    fn frobenius_at_identity_matches_closed_form() {
        let at = Matrix::identity(3);
        let err = grad_check(|t, x| Ok(t.frobenius_norm(x)), &at, DEFAULT_STEP).unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn matmul_gradient_wrt_each_side() {
        let mut rng = StdRng::seed_from_u64(1);
        let a0 = random_matrix(3, 4, &mut rng);
        let b0 = random_matrix(4, 2, &mut rng);

        let b_fixed = b0.clone();
        let err_a = grad_check(
            move |t, a| {
                let b = t.leaf(b_fixed.clone());
                let p = t.matmul(a, b)?;
                Ok(t.sum(p))
            },
            &a0,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err_a < 1e-6, "wrt a: {err_a}");

        let a_fixed = a0;
        let err_b = grad_check(
            move |t, b| {
                let a = t.leaf(a_fixed.clone());
                let p = t.matmul(a, b)?;
                Ok(t.sum(p))
            },
            &b0,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err_b < 1e-6, "wrt b: {err_b}");
    }

    #[test]
    fn softmax_jvp_matches_differences() {
        let mut rng = StdRng::seed_from_u64(2);
        let at = random_matrix(5, 3, &mut rng);
        // Weighted sum picks out a nontrivial cotangent through the softmax.
        let w = random_matrix(5, 3, &mut rng);
        let err = grad_check(
            move |t, x| {
                let s = t.softmax_columns(x);
                let wv = t.leaf(w.clone());
                let h = t.hadamard(s, wv)?;
                Ok(t.sum(h))
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn every_primitive_matches_differences() {
        let mut rng = StdRng::seed_from_u64(3);
        let at = random_matrix(4, 6, &mut rng);
        // Keep log away from its clamp kink.
        let at_pos = at.map(|v| v.abs() + 0.5);
        let square = random_matrix(4, 4, &mut rng);

        let checks: Vec<(&str, f64)> = vec![
            (
                "log",
                grad_check(|t, x| { let l = t.log(x); Ok(t.sum(l)) }, &at_pos, DEFAULT_STEP).unwrap(),
            ),
            (
                "add",
                grad_check(|t, x| { let y = t.add(x, x)?; Ok(t.sum(y)) }, &at, DEFAULT_STEP).unwrap(),
            ),
            (
                "sub",
                grad_check(
                    |t, x| {
                        let c = t.leaf(Matrix::filled(4, 6, 0.7));
                        let y = t.sub(x, c)?;
                        Ok(t.sum(y))
                    },
                    &at,
                    DEFAULT_STEP,
                )
                .unwrap(),
            ),
            (
                "scale",
                grad_check(|t, x| { let y = t.scale(x, -1.7); Ok(t.sum(y)) }, &at, DEFAULT_STEP).unwrap(),
            ),
            (
                "hadamard",
                grad_check(|t, x| { let y = t.hadamard(x, x)?; Ok(t.sum(y)) }, &at, DEFAULT_STEP).unwrap(),
            ),
            (
                "mean_columns",
                grad_check(
                    |t, x| {
                        let m = t.mean_columns(x)?;
                        let l = t.log(m);
                        Ok(t.sum(l))
                    },
                    &at_pos,
                    DEFAULT_STEP,
                )
                .unwrap(),
            ),
            (
                "trace",
                grad_check(|t, x| t.trace(x), &square, DEFAULT_STEP).unwrap(),
            ),
            (
                "frobenius_norm",
                grad_check(|t, x| Ok(t.frobenius_norm(x)), &at, DEFAULT_STEP).unwrap(),
            ),
            (
                "transpose",
                grad_check(
                    |t, x| {
                        let y = t.transpose(x);
                        let h = t.hadamard(y, y)?;
                        Ok(t.sum(h))
                    },
                    &at,
                    DEFAULT_STEP,
                )
                .unwrap(),
            ),
            (
                "broadcast_column",
                grad_check(
                    |t, x| {
                        let m = t.mean_columns(x)?;
                        let b = t.broadcast_column(m, 6)?;
                        let d = t.sub(x, b)?;
                        Ok(t.frobenius_norm(d))
                    },
                    &at,
                    DEFAULT_STEP,
                )
                .unwrap(),
            ),
            (
                "concat_columns",
                grad_check(
                    |t, x| {
                        let y = t.scale(x, 0.5);
                        let c = t.concat_columns(x, y)?;
                        Ok(t.frobenius_norm(c))
                    },
                    &at,
                    DEFAULT_STEP,
                )
                .unwrap(),
            ),
            (
                "relu",
                grad_check(|t, x| { let y = t.relu(x); Ok(t.sum(y)) }, &at_pos, DEFAULT_STEP).unwrap(),
            ),
        ];

        for (name, err) in checks {
            assert!(err < 1e-5, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn unlabeled_objective_on_5x20_logits() {
        use crate::losses::{loss_unlabeled, LossWeights};
        use crate::multinoulli::MultinoulliSpec;

        let mut rng = StdRng::seed_from_u64(20);
        let spec = MultinoulliSpec::new(2, vec![0.4, 0.3, 0.3]).unwrap();
        let at = random_matrix(5, 20, &mut rng);
        let other = random_matrix(5, 20, &mut rng);
        let err = grad_check(
            move |t, z| {
                let p = t.softmax_columns(z);
                let o = t.leaf(other.clone());
                let p2 = t.softmax_columns(o);
                let (total, _) = loss_unlabeled(t, p, p2, &spec, &LossWeights::default())?;
                Ok(total)
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn non_finite_evaluation_is_reported_with_index() {
        use crate::error::Error;
        let at = Matrix::filled(2, 2, 1.0);
        let err = grad_check(
            |t, x| {
                let s = t.sum(x);
                let big = t.scale(s, f64::MAX);
                Ok(t.hadamard(big, big)?)
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // Detached-copy bug: the value is sum(x .* x) at every evaluation,
        // but one factor enters as a fresh leaf, so the tape gradient is x
        // instead of 2x.
        let mut rng = StdRng::seed_from_u64(4);
        let at = random_matrix(3, 3, &mut rng);
        let err = grad_check(
            |t, x| {
                let detached = t.leaf(t.value(x).clone());
                let h = t.hadamard(x, detached)?;
                Ok(t.sum(h))
            },
            &at,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err > PASS_THRESHOLD, "fault not detected: {err}");
    }
}
