//! Declarative experiment description. One TOML file (key = value under
//! section headers) fully determines a run; see `configs/reference.toml`
//! and the schema table in the README.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, ScheduleMode};
use crate::model::ModelConfig;
use crate::multinoulli::MultinoulliSpec;
use crate::synthgen::{AugmentationKind, AugmentationPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub model: ModelSection,
    pub train: TrainSection,
    #[serde(default)]
    pub weights: WeightsSection,
    #[serde(default)]
    pub inert: InertSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dim: usize,
    pub labeled_classes: usize,
    pub novel_classes: usize,
    /// Novel-class prior; omitted means uniform over `novel_classes`.
    #[serde(default)]
    pub p_u: Option<Vec<f64>>,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    #[serde(default = "default_test_pool")]
    pub n_labeled_test: usize,
    #[serde(default = "default_test_pool")]
    pub n_novel_test: usize,
    pub separation: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_test_pool() -> usize {
    300
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSection {
    /// "weak" (noise only) or "strong" (noise, rotation, dropout, jitter).
    pub kind: String,
    pub noise_sigma: f64,
    #[serde(default)]
    pub max_rotation: f64,
    #[serde(default)]
    pub dropout_prob: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            kind: "strong".into(),
            noise_sigma: 0.3,
            max_rotation: 0.1,
            dropout_prob: 0.01,
            jitter: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub embedding: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: shallow_hidden(),
            embedding: 8,
        }
    }
}

/// Depth presets mirroring the shallow/deep architecture ablation axis.
pub fn shallow_hidden() -> Vec<usize> {
    vec![32]
}

pub fn deep_hidden() -> Vec<usize> {
    vec![128, 64, 32]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every: usize,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    pub seed: u64,
}

fn default_decay_every() -> usize {
    50
}

fn default_decay_factor() -> f64 {
    0.5
}

fn default_grad_clip() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    /// "fixed" or "adaptive" (epoch schedules for ce/kl/var).
    pub schedule: String,
    #[serde(default = "default_lambda")]
    pub lambda_ce: f64,
    #[serde(default = "default_lambda")]
    pub lambda_h: f64,
    #[serde(default = "default_lambda")]
    pub lambda_m: f64,
    #[serde(default = "default_lambda")]
    pub lambda_kl: f64,
    #[serde(default = "default_lambda")]
    pub lambda_v: f64,
    #[serde(default = "default_lambda")]
    pub lambda_u: f64,
    /// Ablation switches; a disabled component is forced to zero after the
    /// schedule is applied.
    #[serde(default = "default_true")]
    pub enable_ce: bool,
    #[serde(default = "default_true")]
    pub enable_h: bool,
    #[serde(default = "default_true")]
    pub enable_m: bool,
    #[serde(default = "default_true")]
    pub enable_kl: bool,
    #[serde(default = "default_true")]
    pub enable_v: bool,
}

fn default_lambda() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

impl Default for WeightsSection {
    fn default() -> Self {
        WeightsSection {
            schedule: "adaptive".into(),
            lambda_ce: 1.0,
            lambda_h: 1.0,
            lambda_m: 1.0,
            lambda_kl: 1.0,
            lambda_v: 1.0,
            lambda_u: 1.0,
            enable_ce: true,
            enable_h: true,
            enable_m: true,
            enable_kl: true,
            enable_v: true,
        }
    }
}

/// Hyper-parameters carried for completeness but applied nowhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InertSection {
    pub tau: f64,
    pub sr: f64,
}

impl Default for InertSection {
    fn default() -> Self {
        InertSection { tau: 0.05, sr: 0.1 }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.dim == 0 {
            return Err(Error::Config("data.dim must be positive".into()));
        }
        if d.labeled_classes == 0 || d.novel_classes == 0 {
            return Err(Error::Config(
                "data.labeled_classes and data.novel_classes must be positive".into(),
            ));
        }
        if let Some(p) = &d.p_u {
            if p.len() != d.novel_classes {
                return Err(Error::Config(format!(
                    "data.p_u has {} entries but data.novel_classes is {}",
                    p.len(),
                    d.novel_classes
                )));
            }
            // Surfaces zero/negative entries and bad sums as data.p_u errors.
            MultinoulliSpec::new(d.labeled_classes, p.clone())
                .map_err(|e| Error::Config(format!("data.p_u: {e}")))?;
        }
        if d.n_labeled == 0 || d.n_unlabeled == 0 || d.n_labeled_test == 0 || d.n_novel_test == 0 {
            return Err(Error::Config("data pool sizes must be positive".into()));
        }
        if !d.separation.is_finite() || d.separation <= 0.0 {
            return Err(Error::Config(format!(
                "data.separation must be positive, got {}",
                d.separation
            )));
        }
        if !d.scale.is_finite() || d.scale <= 0.0 {
            return Err(Error::Config(format!(
                "data.scale must be positive, got {}",
                d.scale
            )));
        }

        match self.augment.kind.as_str() {
            "weak" | "strong" => {}
            other => {
                return Err(Error::Config(format!(
                    "augment.kind must be weak or strong, got {other}"
                )))
            }
        }

        if self.model.hidden.contains(&0) || self.model.embedding == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }

        let t = &self.train;
        if t.batch_labeled == 0 {
            return Err(Error::Config("train.batch_labeled must be positive".into()));
        }
        if t.batch_unlabeled < 10 * d.novel_classes {
            return Err(Error::Config(format!(
                "train.batch_unlabeled = {} violates the batch-size rule: \
                 statistics need at least 10 x U = {} instances",
                t.batch_unlabeled,
                10 * d.novel_classes
            )));
        }
        if t.steps_per_epoch == 0 {
            return Err(Error::Config("train.steps_per_epoch must be positive".into()));
        }
        if !t.learning_rate.is_finite() || t.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "train.learning_rate must be positive, got {}",
                t.learning_rate
            )));
        }
        if t.lr_decay_every == 0 {
            return Err(Error::Config("train.lr_decay_every must be positive".into()));
        }
        if !t.lr_decay_factor.is_finite() || t.lr_decay_factor <= 0.0 || t.lr_decay_factor > 1.0 {
            return Err(Error::Config(format!(
                "train.lr_decay_factor must be in (0, 1], got {}",
                t.lr_decay_factor
            )));
        }
        if !t.grad_clip.is_finite() || t.grad_clip <= 0.0 {
            return Err(Error::Config(format!(
                "train.grad_clip must be positive, got {}",
                t.grad_clip
            )));
        }

        let w = &self.weights;
        match w.schedule.as_str() {
            "fixed" | "adaptive" => {}
            other => {
                return Err(Error::Config(format!(
                    "weights.schedule must be fixed or adaptive, got {other}"
                )))
            }
        }
        for (name, v) in [
            ("lambda_ce", w.lambda_ce),
            ("lambda_h", w.lambda_h),
            ("lambda_m", w.lambda_m),
            ("lambda_kl", w.lambda_kl),
            ("lambda_v", w.lambda_v),
            ("lambda_u", w.lambda_u),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "weights.{name} must be a non-negative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn multinoulli_spec(&self) -> Result<MultinoulliSpec> {
        match &self.data.p_u {
            Some(p) => MultinoulliSpec::new(self.data.labeled_classes, p.clone()),
            None => MultinoulliSpec::uniform(self.data.labeled_classes, self.data.novel_classes),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.dim,
            hidden: self.model.hidden.clone(),
            embedding: self.model.embedding,
            classes: self.data.labeled_classes + self.data.novel_classes,
        }
    }

    pub fn augmentation_policy(&self) -> AugmentationPolicy {
        let a = &self.augment;
        match a.kind.as_str() {
            "weak" => AugmentationPolicy::weak(a.noise_sigma),
            _ => AugmentationPolicy {
                kind: AugmentationKind::Strong,
                noise_sigma: a.noise_sigma,
                max_rotation: a.max_rotation,
                dropout_prob: a.dropout_prob,
                jitter: a.jitter,
            },
        }
    }

    /// Base loss weights before the epoch schedule and ablation mask.
    pub fn loss_weights(&self) -> LossWeights {
        let w = &self.weights;
        LossWeights {
            ce: w.lambda_ce,
            h: w.lambda_h,
            m: w.lambda_m,
            kl: w.lambda_kl,
            v: w.lambda_v,
            u: w.lambda_u,
            schedule: match w.schedule.as_str() {
                "fixed" => ScheduleMode::Fixed,
                _ => ScheduleMode::Adaptive,
            },
        }
    }

    /// Zero out disabled components after scheduling.
    pub fn apply_component_mask(&self, mut weights: LossWeights) -> LossWeights {
        let w = &self.weights;
        if !w.enable_ce {
            weights.ce = 0.0;
        }
        if !w.enable_h {
            weights.h = 0.0;
        }
        if !w.enable_m {
            weights.m = 0.0;
        }
        if !w.enable_kl {
            weights.kl = 0.0;
        }
        if !w.enable_v {
            weights.v = 0.0;
        }
        weights
    }

    /// The reference run: d=8, L=3, U=3 uniform prior, separation 8,
    /// 200 epochs, adaptive schedules.
    pub fn reference() -> ExperimentConfig {
        ExperimentConfig {
            data: DataSection {
                dim: 8,
                labeled_classes: 3,
                novel_classes: 3,
                p_u: None,
                n_labeled: 600,
                n_unlabeled: 600,
                n_labeled_test: 300,
                n_novel_test: 300,
                separation: 8.0,
                scale: 1.0,
            },
            augment: AugmentSection::default(),
            model: ModelSection::default(),
            train: TrainSection {
                batch_labeled: 32,
                batch_unlabeled: 32,
                epochs: 200,
                steps_per_epoch: 10,
                learning_rate: 0.2,
                lr_decay_every: 50,
                lr_decay_factor: 0.5,
                grad_clip: 10.0,
                seed: 1,
            },
            weights: WeightsSection::default(),
            inert: InertSection::default(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> ExperimentConfig {
        self.train.seed = seed;
        self
    }
}
