//! Joint optimization: alternating labeled/unlabeled SGD sub-steps, epoch
//! weight schedules, learning-rate decay, deterministic rng streams, and
//! loss logging.
//!
//! Each train step runs the labeled sub-step (cross entropy over both
//! augmented views) and then the unlabeled sub-step (the combined L_u over
//! the view pair), each with its own forward, backward, clip, and SGD
//! update. Unlabeled batches carry no class ids, so the trainer cannot read
//! hidden labels even by accident.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::matrix::Matrix;
use crate::model::MlpModel;
use crate::multinoulli::MultinoulliSpec;
use crate::synthgen::{self, LabeledBatch, SyntheticDataset, UnlabeledBatch};

/// Derive an independent rng stream from the run seed (splitmix64 over the
/// stream id).
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_DATASET: u64 = 0;
const STREAM_MODEL: u64 = 1;
const STREAM_LABELED: u64 = 2;
const STREAM_UNLABELED: u64 = 3;
/// Used by callers producing held-out splits for the same run.
pub const STREAM_TEST: u64 = 4;

/// Mutable state of one run.
pub struct TrainState {
    pub model: MlpModel,
    pub epoch: usize,
    pub step: usize,
    pub history: Vec<LossReport>,
    rng_labeled: StdRng,
    rng_unlabeled: StdRng,
}

/// Scheduled values actually used in one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub mean_total_loss: f64,
}

impl EpochLog {
    /// Progress line `epoch,lr,lambda_ce,lambda_kl,lambda_var,mean_total_loss`.
    pub fn progress_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.weights.ce,
            self.weights.kl,
            self.weights.v,
            self.mean_total_loss
        )
    }
}

pub struct TrainOutcome {
    pub model: MlpModel,
    pub dataset: SyntheticDataset,
    pub history: Vec<LossReport>,
    pub epochs: Vec<EpochLog>,
}

/// Run a full training job from a validated config. Fully deterministic per
/// (config, seed).
pub fn train(config: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with_progress(config, &mut |_| {})
}

/// As [`train`], invoking `progress` with one line per finished epoch.
pub fn train_with_progress(
    config: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.multinoulli_spec()?;
    let seed = config.train.seed;
    let dataset = synthgen::generate(
        config.data.dim,
        &spec,
        config.data.n_labeled,
        config.data.n_unlabeled,
        config.data.separation,
        config.data.scale,
        stream_seed(seed, STREAM_DATASET),
    )?;
    let model = MlpModel::init(&config.model_config(), stream_seed(seed, STREAM_MODEL));
    let policy = config.augmentation_policy();

    let mut state = TrainState {
        model,
        epoch: 0,
        step: 0,
        history: Vec::new(),
        rng_labeled: StdRng::seed_from_u64(stream_seed(seed, STREAM_LABELED)),
        rng_unlabeled: StdRng::seed_from_u64(stream_seed(seed, STREAM_UNLABELED)),
    };

    let base_weights = config.loss_weights();
    let mut epochs = Vec::with_capacity(config.train.epochs);
    for epoch in 0..config.train.epochs {
        state.epoch = epoch;
        let weights = config.apply_component_mask(losses::weights_at_epoch(&base_weights, epoch));
        let lr = lr_at_epoch(config, epoch);
        let mut total = 0.0;
        for step in 0..config.train.steps_per_epoch {
            state.step = step;
            let labeled = dataset.sample_labeled_batch(
                config.train.batch_labeled,
                &policy,
                &mut state.rng_labeled,
            )?;
            let unlabeled = dataset.sample_unlabeled_batch(
                config.train.batch_unlabeled,
                &policy,
                &mut state.rng_unlabeled,
            )?;
            let report = train_step(
                &mut state,
                &labeled,
                &unlabeled,
                &spec,
                &weights,
                lr,
                config.train.grad_clip,
            )?;
            total += report.labeled_total + report.unlabeled_total;
        }
        let log = EpochLog {
            epoch,
            lr,
            weights,
            mean_total_loss: total / config.train.steps_per_epoch as f64,
        };
        progress(&log.progress_line());
        epochs.push(log);
    }

    Ok(TrainOutcome {
        model: state.model,
        dataset,
        history: state.history,
        epochs,
    })
}

/// Learning rate after step decay: lr0 * factor^(epoch / every).
pub fn lr_at_epoch(config: &ExperimentConfig, epoch: usize) -> f64 {
    let k = (epoch / config.train.lr_decay_every) as i32;
    config.train.learning_rate * config.train.lr_decay_factor.powi(k)
}

/// Train, then score the model on a fresh held-out split drawn around the
/// same class means (dedicated rng stream, no augmentation).
pub fn run_experiment(
    config: &ExperimentConfig,
) -> Result<(TrainOutcome, crate::eval::EvalReport)> {
    run_experiment_with_progress(config, &mut |_| {})
}

pub fn run_experiment_with_progress(
    config: &ExperimentConfig,
    progress: &mut dyn FnMut(&str),
) -> Result<(TrainOutcome, crate::eval::EvalReport)> {
    let outcome = train_with_progress(config, progress)?;
    let spec = config.multinoulli_spec()?;
    let split = outcome.dataset.test_split(
        &spec,
        config.data.n_labeled_test,
        config.data.n_novel_test,
        stream_seed(config.train.seed, STREAM_TEST),
    )?;
    let report = crate::eval::evaluate(&outcome.model, &split, &spec)?;
    Ok((outcome, report))
}

/// One alternating optimization step: (a) labeled sub-step with the weighted
/// cross entropy over both views, backward, SGD; then (b) unlabeled
/// sub-step with the weighted L_u, backward, SGD.
pub fn train_step(
    state: &mut TrainState,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    spec: &MultinoulliSpec,
    weights: &LossWeights,
    lr: f64,
    grad_clip: f64,
) -> Result<LossReport> {
    use crate::tape::Tape;

    // (a) labeled: cross entropy on the 2B-column view concatenation with
    // duplicated targets.
    let (ce, labeled_total) = {
        let mut tape = Tape::new();
        let bound = state.model.bind(&mut tape);
        let x0 = tape.leaf(labeled.views[0].clone());
        let x1 = tape.leaf(labeled.views[1].clone());
        let x = tape.concat_columns(x0, x1)?;
        let targets = labeled.targets.concat_columns(&labeled.targets)?;
        let (p, _) = bound.forward(&mut tape, x)?;
        let ce = losses::loss_ce(&mut tape, p, &targets)?;
        let objective = tape.scale(ce, weights.ce);
        let ce_value = tape.scalar(ce)?;
        let total_value = tape.scalar(objective)?;
        if !total_value.is_finite() {
            return Err(non_finite_step(state, "labeled", &labeled.views));
        }
        let grads = tape.backward(objective)?;
        let mut gvec: Vec<Matrix> = bound.params().iter().map(|v| grads.wrt(*v)).collect();
        clip_global_norm(&mut gvec, grad_clip);
        state.model.sgd_step(&gvec, lr)?;
        (ce_value, total_value)
    };

    // (b) unlabeled: combined objective over the aligned view pair.
    let (components, unlabeled_total) = {
        let mut tape = Tape::new();
        let bound = state.model.bind(&mut tape);
        let x0 = tape.leaf(unlabeled.views[0].clone());
        let x1 = tape.leaf(unlabeled.views[1].clone());
        let (p0, _) = bound.forward(&mut tape, x0)?;
        let (p1, _) = bound.forward(&mut tape, x1)?;
        let (lu, components) = losses::loss_unlabeled(&mut tape, p0, p1, spec, weights)?;
        let objective = tape.scale(lu, weights.u);
        let total_value = tape.scalar(objective)?;
        if !total_value.is_finite() {
            return Err(non_finite_step(state, "unlabeled", &unlabeled.views));
        }
        let grads = tape.backward(objective)?;
        let mut gvec: Vec<Matrix> = bound.params().iter().map(|v| grads.wrt(*v)).collect();
        clip_global_norm(&mut gvec, grad_clip);
        state.model.sgd_step(&gvec, lr)?;
        (components, total_value)
    };

    let report = LossReport {
        epoch: state.epoch,
        step: state.step,
        ce,
        h: components.h,
        mse: components.mse,
        kl: components.kl,
        var: components.var,
        labeled_total,
        unlabeled_total,
    };
    if !report.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "loss report at epoch {} step {}",
                state.epoch, state.step
            ),
            index: 0,
        });
    }
    state.history.push(report);
    Ok(report)
}

fn non_finite_step(state: &TrainState, branch: &str, views: &[Matrix; 2]) -> Error {
    // Diagnostic dump of the offending batch: shape plus value range.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in views.iter().flat_map(|m| m.data()) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    Error::NonFinite {
        context: format!(
            "{branch} loss at epoch {} step {} (batch {}x{}, inputs in [{lo:.3}, {hi:.3}])",
            state.epoch,
            state.step,
            views[0].rows(),
            views[0].cols(),
        ),
        index: 0,
    }
}

/// Scale all gradients down so their joint Frobenius norm is at most `max`.
pub fn clip_global_norm(grads: &mut [Matrix], max: f64) {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum();
    let norm = sq.sqrt();
    if norm > max {
        let s = max / norm;
        for g in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
}
