//! The five loss functions and their weighted combination.
//!
//! Labeled branch: instance-wise cross entropy. Unlabeled branch: entropy
//! minimization and augmentation consistency per instance, plus first-order
//! (mean KL) and second-order (covariance Frobenius) statistics matching
//! against the novel-class Multinoulli prior. The two statistics losses
//! penalize each other's trivial collapse: constant p_U prediction has zero
//! mean-KL but full covariance penalty, one-class collapse has zero entropy
//! but positive mean-KL.
//!
//! Batch statistics (entropy, mean, covariance) are computed over the
//! 2B-column concatenation of the two augmented views; consistency is
//! computed pairwise over aligned columns.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::multinoulli::MultinoulliSpec;
use crate::tape::{Tape, Var};

/// How the loss weights evolve with the epoch counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Fixed,
    Adaptive,
}

/// Weights of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub h: f64,
    pub m: f64,
    pub kl: f64,
    pub v: f64,
    pub u: f64,
    pub schedule: ScheduleMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            ce: 1.0,
            h: 1.0,
            m: 1.0,
            kl: 1.0,
            v: 1.0,
            u: 1.0,
            schedule: ScheduleMode::Fixed,
        }
    }
}

/// Evaluate the weight schedule at epoch `n_ep`.
///
/// Adaptive mode: lambda_kl = lambda_var = 0.2 + 0.5 n_ep, and
/// lambda_ce = max(0, 1 - 0.01 n_ep) + 0.5, with the entropy weight fixed
/// at 1.0. Fixed mode returns the base weights unchanged.
pub fn weights_at_epoch(base: &LossWeights, n_ep: usize) -> LossWeights {
    match base.schedule {
        ScheduleMode::Fixed => *base,
        ScheduleMode::Adaptive => {
            let n = n_ep as f64;
            LossWeights {
                ce: (1.0 - 0.01 * n).max(0.0) + 0.5,
                h: 1.0,
                m: base.m,
                kl: 0.2 + 0.5 * n,
                v: 0.2 + 0.5 * n,
                u: base.u,
                schedule: ScheduleMode::Adaptive,
            }
        }
    }
}

/// Supervised cross entropy -(1/B) tr(P_y^T log P).
pub fn loss_ce(tape: &mut Tape, p: Var, targets: &Matrix) -> Result<Var> {
    let pv = tape.value(p);
    if !pv.same_shape(targets) {
        return Err(Error::ShapeMismatch {
            op: "loss_ce",
            left_rows: pv.rows(),
            left_cols: pv.cols(),
            right_rows: targets.rows(),
            right_cols: targets.cols(),
        });
    }
    let b = pv.cols();
    if b == 0 {
        return Err(Error::EmptyBatch { op: "loss_ce" });
    }
    let t = tape.leaf(targets.clone());
    let logp = tape.log(p);
    let prod = tape.hadamard(t, logp)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Instance-wise entropy -(1/B) tr(P^T log P), in [0, log K].
pub fn loss_entropy(tape: &mut Tape, p: Var) -> Result<Var> {
    let b = tape.value(p).cols();
    if b == 0 {
        return Err(Error::EmptyBatch { op: "loss_entropy" });
    }
    let logp = tape.log(p);
    let prod = tape.hadamard(p, logp)?;
    let total = tape.sum(prod);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Augmentation consistency (1/B) |P - P'|_F over aligned columns.
pub fn loss_consistency(tape: &mut Tape, p: Var, p_prime: Var) -> Result<Var> {
    let (a, b) = (tape.value(p), tape.value(p_prime));
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            op: "loss_consistency",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    let cols = a.cols();
    if cols == 0 {
        return Err(Error::EmptyBatch {
            op: "loss_consistency",
        });
    }
    let diff = tape.sub(p, p_prime)?;
    let norm = tape.frobenius_norm(diff);
    Ok(tape.scale(norm, 1.0 / cols as f64))
}

/// KL divergence from the empirical column mean to the target mean
/// y^U = [0_L ; p_U]: sum_j y_j (log y_j - log m_j). Coordinates with
/// y_j = 0 contribute exactly zero; m is clamped inside the log.
pub fn loss_kl_mean(tape: &mut Tape, p: Var, spec: &MultinoulliSpec) -> Result<Var> {
    let pv = tape.value(p);
    if pv.rows() != spec.classes() {
        return Err(Error::BadShape {
            op: "loss_kl_mean",
            expected: "K-row probability matrix",
            rows: pv.rows(),
            cols: pv.cols(),
        });
    }
    if pv.cols() == 0 {
        return Err(Error::EmptyBatch { op: "loss_kl_mean" });
    }
    let target = spec.target_mean();
    let self_term: f64 = target
        .iter()
        .filter(|&&y| y > 0.0)
        .map(|&y| y * y.ln())
        .sum();

    let mean = tape.mean_columns(p)?;
    let log_mean = tape.log(mean);
    let y = tape.leaf(Matrix::column(&target));
    let weighted = tape.hadamard(y, log_mean)?;
    let cross = tape.sum(weighted);
    let constant = tape.leaf(Matrix::filled(1, 1, self_term));
    tape.sub(constant, cross)
}

/// Covariance matching |Sigma_hat(P) - Sigma|_F with the biased 1/B
/// empirical covariance and the exact Multinoulli target.
pub fn loss_covariance(tape: &mut Tape, p: Var, spec: &MultinoulliSpec) -> Result<Var> {
    let pv = tape.value(p);
    if pv.rows() != spec.classes() {
        return Err(Error::BadShape {
            op: "loss_covariance",
            expected: "K-row probability matrix",
            rows: pv.rows(),
            cols: pv.cols(),
        });
    }
    let b = pv.cols();
    if b < 2 {
        return Err(Error::BatchTooSmall {
            op: "loss_covariance",
            min: 2,
            got: b,
        });
    }
    let mean = tape.mean_columns(p)?;
    let mean_b = tape.broadcast_column(mean, b)?;
    let centered = tape.sub(p, mean_b)?;
    let centered_t = tape.transpose(centered);
    let outer = tape.matmul(centered, centered_t)?;
    let cov = tape.scale(outer, 1.0 / b as f64);
    let target = tape.leaf(spec.target_covariance().sigma().clone());
    let diff = tape.sub(cov, target)?;
    Ok(tape.frobenius_norm(diff))
}

/// Unweighted component values of the unlabeled objective, plus the weighted
/// total, for reporting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnlabeledComponents {
    pub h: f64,
    pub mse: f64,
    pub kl: f64,
    pub var: f64,
    pub total: f64,
}

/// The unlabeled objective L_u = lambda_H L_H + lambda_m L_mse
/// + lambda_kl L_kl + lambda_v L_var.
///
/// Entropy, mean and covariance statistics run on the 2B-column
/// concatenation [P | P']; consistency runs on the aligned pair.
pub fn loss_unlabeled(
    tape: &mut Tape,
    p: Var,
    p_prime: Var,
    spec: &MultinoulliSpec,
    weights: &LossWeights,
) -> Result<(Var, UnlabeledComponents)> {
    let concat = tape.concat_columns(p, p_prime)?;
    let h = loss_entropy(tape, concat)?;
    let mse = loss_consistency(tape, p, p_prime)?;
    let kl = loss_kl_mean(tape, concat, spec)?;
    let var = loss_covariance(tape, concat, spec)?;

    let wh = tape.scale(h, weights.h);
    let wm = tape.scale(mse, weights.m);
    let wkl = tape.scale(kl, weights.kl);
    let wv = tape.scale(var, weights.v);
    let s1 = tape.add(wh, wm)?;
    let s2 = tape.add(s1, wkl)?;
    let total = tape.add(s2, wv)?;

    let components = UnlabeledComponents {
        h: tape.scalar(h)?,
        mse: tape.scalar(mse)?,
        kl: tape.scalar(kl)?,
        var: tape.scalar(var)?,
        total: tape.scalar(total)?,
    };
    Ok((total, components))
}

/// Per-step loss record covering both optimizer sub-steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub h: f64,
    pub mse: f64,
    pub kl: f64,
    pub var: f64,
    /// lambda_ce * L_ce, the labeled sub-step objective.
    pub labeled_total: f64,
    /// lambda_u * L_u, the unlabeled sub-step objective.
    pub unlabeled_total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,step,branch,ce,H,mse,kl,var,total";

    pub fn is_finite(&self) -> bool {
        [
            self.ce,
            self.h,
            self.mse,
            self.kl,
            self.var,
            self.labeled_total,
            self.unlabeled_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// One CSV row per optimizer sub-step: labeled then unlabeled.
    pub fn csv_rows(&self) -> [String; 2] {
        [
            format!(
                "{},{},labeled,{},0,0,0,0,{}",
                self.epoch, self.step, self.ce, self.labeled_total
            ),
            format!(
                "{},{},unlabeled,0,{},{},{},{},{}",
                self.epoch, self.step, self.h, self.mse, self.kl, self.var, self.unlabeled_total
            ),
        ]
    }
}

/// Serialize a run history as CSV, two rows per step.
pub fn history_csv(reports: &[LossReport]) -> String {
    let mut out = String::from(LossReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        for row in r.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

// Plain-value wrappers over a throwaway tape, for evaluation and tests.

pub fn ce_value(p: &Matrix, targets: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let l = loss_ce(&mut tape, pv, targets)?;
    tape.scalar(l)
}

pub fn entropy_value(p: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let l = loss_entropy(&mut tape, pv)?;
    tape.scalar(l)
}

pub fn consistency_value(p: &Matrix, p_prime: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(p.clone());
    let b = tape.leaf(p_prime.clone());
    let l = loss_consistency(&mut tape, a, b)?;
    tape.scalar(l)
}

pub fn kl_mean_value(p: &Matrix, spec: &MultinoulliSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let l = loss_kl_mean(&mut tape, pv, spec)?;
    tape.scalar(l)
}

pub fn covariance_value(p: &Matrix, spec: &MultinoulliSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = tape.leaf(p.clone());
    let l = loss_covariance(&mut tape, pv, spec)?;
    tape.scalar(l)
}

pub fn unlabeled_value(
    p: &Matrix,
    p_prime: &Matrix,
    spec: &MultinoulliSpec,
    weights: &LossWeights,
) -> Result<UnlabeledComponents> {
    let mut tape = Tape::new();
    let a = tape.leaf(p.clone());
    let b = tape.leaf(p_prime.clone());
    let (_, components) = loss_unlabeled(&mut tape, a, b, spec, weights)?;
    Ok(components)
}
