//! Synthetic benchmark data: class-conditional Gaussian clusters in d
//! dimensions with disjoint labeled/novel class sets, label-preserving
//! augmentations, and Monte-Carlo batch samplers.
//!
//! The method under study operates purely on the probability head, so any
//! data with learnable class structure exercises it; Gaussian mixtures keep
//! every run deterministic and fast.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::multinoulli::MultinoulliSpec;

const PLACEMENT_ATTEMPTS_PER_MEAN: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentationKind {
    Weak,
    Strong,
}

/// Label-preserving perturbation parameters. Weak applies additive noise
/// only; strong additionally rotates the first two coordinates, drops
/// coordinates, and jitters the overall scale. Magnitudes must stay small
/// relative to the inter-class mean separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    pub kind: AugmentationKind,
    pub noise_sigma: f64,
    /// Max rotation angle (radians) applied to coordinates 0 and 1.
    pub max_rotation: f64,
    pub dropout_prob: f64,
    /// Multiplicative jitter drawn from [1 - jitter, 1 + jitter].
    pub jitter: f64,
}

impl AugmentationPolicy {
    pub fn weak(noise_sigma: f64) -> Self {
        AugmentationPolicy {
            kind: AugmentationKind::Weak,
            noise_sigma,
            max_rotation: 0.0,
            dropout_prob: 0.0,
            jitter: 0.0,
        }
    }

    pub fn strong(noise_sigma: f64, max_rotation: f64, dropout_prob: f64, jitter: f64) -> Self {
        AugmentationPolicy {
            kind: AugmentationKind::Strong,
            noise_sigma,
            max_rotation,
            dropout_prob,
            jitter,
        }
    }

    /// No-op policy; augment returns its input unchanged.
    pub fn identity() -> Self {
        AugmentationPolicy::weak(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Instance {
    features: Vec<f64>,
    class: usize,
}

/// Gaussian-mixture dataset with a labeled pool (ids 0..L) and an unlabeled
/// pool whose novel ids (L..K) are hidden from the trainer: batches carry no
/// ids, and [`SyntheticDataset::hidden_class`] exists for evaluation and
/// audits only.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    dim: usize,
    labeled_classes: usize,
    total_classes: usize,
    labeled: Vec<Instance>,
    unlabeled: Vec<Instance>,
    class_means: Vec<Vec<f64>>,
    class_scale: f64,
}

/// Two aligned augmented views of B labeled instances plus their one-hot
/// K x B target matrix.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub views: [Matrix; 2],
    pub targets: Matrix,
}

/// Two aligned augmented views of B unlabeled instances. Carries pool
/// indices for sampling audits but no class information.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub views: [Matrix; 2],
    pub indices: Vec<usize>,
}

/// Held-out instances with readable ground truth, for the evaluator.
#[derive(Debug, Clone)]
pub struct TestSplit {
    /// (features, true id in 0..L)
    pub labeled: Vec<(Vec<f64>, usize)>,
    /// (features, true id in L..K)
    pub novel: Vec<(Vec<f64>, usize)>,
}

/// Generate a dataset: K class means mutually >= `separation` apart (random
/// unit directions scaled to the separation radius, rejection-sampled),
/// labeled instances uniform over labeled classes, unlabeled hidden classes
/// drawn from the prior.
pub fn generate(
    dim: usize,
    spec: &MultinoulliSpec,
    n_labeled: usize,
    n_unlabeled: usize,
    separation: f64,
    scale: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if dim == 0 || n_labeled == 0 || n_unlabeled == 0 {
        return Err(Error::Config("dim and pool sizes must be positive".into()));
    }
    if !separation.is_finite() || separation <= 0.0 {
        return Err(Error::Config(format!(
            "separation must be positive, got {separation}"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let k = spec.classes();
    let class_means = place_means(dim, k, separation, &mut rng)?;

    let mut labeled = Vec::with_capacity(n_labeled);
    for i in 0..n_labeled {
        let class = i % spec.labeled();
        labeled.push(Instance {
            features: sample_around(&class_means[class], scale, &mut rng),
            class,
        });
    }
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let class = spec.sample_category(&mut rng);
        unlabeled.push(Instance {
            features: sample_around(&class_means[class], scale, &mut rng),
            class,
        });
    }
    Ok(SyntheticDataset {
        dim,
        labeled_classes: spec.labeled(),
        total_classes: k,
        labeled,
        unlabeled,
        class_means,
        class_scale: scale,
    })
}

fn place_means(dim: usize, k: usize, separation: f64, rng: &mut StdRng) -> Result<Vec<Vec<f64>>> {
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
    let budget = PLACEMENT_ATTEMPTS_PER_MEAN * k;
    let mut attempts = 0;
    while means.len() < k {
        if attempts >= budget {
            return Err(Error::MeanPlacement { attempts });
        }
        attempts += 1;
        let candidate: Vec<f64> = unit_direction(dim, rng)
            .into_iter()
            .map(|u| u * separation)
            .collect();
        let ok = means.iter().all(|m| euclidean(m, &candidate) >= separation);
        if ok {
            means.push(candidate);
        }
    }
    Ok(means)
}

fn unit_direction(dim: usize, rng: &mut StdRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_around(mean: &[f64], scale: f64, rng: &mut StdRng) -> Vec<f64> {
    mean.iter()
        .map(|m| {
            let z: f64 = StandardNormal.sample(rng);
            m + scale * z
        })
        .collect()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Apply a label-preserving augmentation; the input is left untouched.
/// Transforms with zero-valued parameters are skipped, so the identity
/// policy reproduces the input bit for bit.
pub fn augment(x: &[f64], policy: &AugmentationPolicy, rng: &mut StdRng) -> Vec<f64> {
    let mut out = x.to_vec();
    if policy.noise_sigma > 0.0 {
        for v in &mut out {
            let z: f64 = StandardNormal.sample(rng);
            *v += policy.noise_sigma * z;
        }
    }
    if policy.kind == AugmentationKind::Strong {
        if policy.max_rotation > 0.0 && out.len() >= 2 {
            let angle = rng.random_range(-policy.max_rotation..policy.max_rotation);
            let (s, c) = angle.sin_cos();
            let (x0, x1) = (out[0], out[1]);
            out[0] = c * x0 - s * x1;
            out[1] = s * x0 + c * x1;
        }
        if policy.dropout_prob > 0.0 {
            for v in &mut out {
                if rng.random::<f64>() < policy.dropout_prob {
                    *v = 0.0;
                }
            }
        }
        if policy.jitter > 0.0 {
            let s = rng.random_range(1.0 - policy.jitter..1.0 + policy.jitter);
            for v in &mut out {
                *v *= s;
            }
        }
    }
    out
}

impl SyntheticDataset {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labeled_classes(&self) -> usize {
        self.labeled_classes
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn labeled_len(&self) -> usize {
        self.labeled.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn class_scale(&self) -> f64 {
        self.class_scale
    }

    pub fn labeled_instance(&self, i: usize) -> (&[f64], usize) {
        let inst = &self.labeled[i];
        (&inst.features, inst.class)
    }

    pub fn unlabeled_features(&self, i: usize) -> &[f64] {
        &self.unlabeled[i].features
    }

    /// Ground-truth novel id of an unlabeled instance, in L..K.
    ///
    /// Evaluation and audit use only; the training loop never calls this —
    /// its batches carry no class information.
    pub fn hidden_class(&self, i: usize) -> usize {
        self.unlabeled[i].class
    }

    /// Draw B labeled instances uniformly with replacement and return two
    /// independent augmentations, column-aligned, plus one-hot targets.
    pub fn sample_labeled_batch(
        &self,
        b: usize,
        policy: &AugmentationPolicy,
        rng: &mut StdRng,
    ) -> Result<LabeledBatch> {
        if self.labeled.is_empty() {
            return Err(Error::EmptyBatch {
                op: "sample_labeled_batch",
            });
        }
        let mut view0 = Matrix::zeros(self.dim, b);
        let mut view1 = Matrix::zeros(self.dim, b);
        let mut targets = Matrix::zeros(self.total_classes, b);
        for j in 0..b {
            let inst = &self.labeled[rng.random_range(0..self.labeled.len())];
            let a0 = augment(&inst.features, policy, rng);
            let a1 = augment(&inst.features, policy, rng);
            for i in 0..self.dim {
                view0.set(i, j, a0[i]);
                view1.set(i, j, a1[i]);
            }
            targets.set(inst.class, j, 1.0);
        }
        Ok(LabeledBatch {
            views: [view0, view1],
            targets,
        })
    }

    /// Draw B unlabeled instances uniformly with replacement; two aligned
    /// augmented views, no class information.
    pub fn sample_unlabeled_batch(
        &self,
        b: usize,
        policy: &AugmentationPolicy,
        rng: &mut StdRng,
    ) -> Result<UnlabeledBatch> {
        if self.unlabeled.is_empty() {
            return Err(Error::EmptyBatch {
                op: "sample_unlabeled_batch",
            });
        }
        let mut view0 = Matrix::zeros(self.dim, b);
        let mut view1 = Matrix::zeros(self.dim, b);
        let mut indices = Vec::with_capacity(b);
        for j in 0..b {
            let idx = rng.random_range(0..self.unlabeled.len());
            let inst = &self.unlabeled[idx];
            let a0 = augment(&inst.features, policy, rng);
            let a1 = augment(&inst.features, policy, rng);
            for i in 0..self.dim {
                view0.set(i, j, a0[i]);
                view1.set(i, j, a1[i]);
            }
            indices.push(idx);
        }
        Ok(UnlabeledBatch {
            views: [view0, view1],
            indices,
        })
    }

    /// Fresh held-out instances around the same class means, un-augmented.
    pub fn test_split(
        &self,
        spec: &MultinoulliSpec,
        n_labeled: usize,
        n_novel: usize,
        seed: u64,
    ) -> Result<TestSplit> {
        if spec.classes() != self.total_classes || spec.labeled() != self.labeled_classes {
            return Err(Error::Config(
                "test split spec disagrees with dataset class layout".into(),
            ));
        }
        let mut rng = StdRng::seed_from_u64(seed);
        let labeled = (0..n_labeled)
            .map(|i| {
                let class = i % self.labeled_classes;
                (
                    sample_around(&self.class_means[class], self.class_scale, &mut rng),
                    class,
                )
            })
            .collect();
        let novel = (0..n_novel)
            .map(|_| {
                let class = spec.sample_category(&mut rng);
                (
                    sample_around(&self.class_means[class], self.class_scale, &mut rng),
                    class,
                )
            })
            .collect();
        Ok(TestSplit { labeled, novel })
    }

    /// Flat CSV: header `split,class_id,x0..x{d-1}`, one row per instance,
    /// decimal text with 17 significant digits for bit-exact round-trips.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,class_id");
        for i in 0..self.dim {
            out.push_str(&format!(",x{i}"));
        }
        out.push('\n');
        for inst in &self.labeled {
            push_row(&mut out, "labeled", inst);
        }
        for inst in &self.unlabeled {
            push_row(&mut out, "unlabeled", inst);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SyntheticDataset> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty dataset CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 3 || cols[0] != "split" || cols[1] != "class_id" {
            return Err(Error::Parse(format!("unexpected header: {header}")));
        }
        let dim = cols.len() - 2;

        let mut labeled = Vec::new();
        let mut unlabeled = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 2 {
                return Err(Error::Parse(format!(
                    "row {}: expected {} fields, got {}",
                    lineno + 2,
                    dim + 2,
                    fields.len()
                )));
            }
            let class: usize = fields[1]
                .parse()
                .map_err(|_| Error::Parse(format!("row {}: bad class id", lineno + 2)))?;
            let features: Vec<f64> = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Parse(format!("row {}: bad float {f}", lineno + 2)))
                })
                .collect::<Result<_>>()?;
            match fields[0] {
                "labeled" => labeled.push(Instance { features, class }),
                "unlabeled" => unlabeled.push(Instance { features, class }),
                other => {
                    return Err(Error::Parse(format!(
                        "row {}: unknown split {other}",
                        lineno + 2
                    )))
                }
            }
        }
        if labeled.is_empty() || unlabeled.is_empty() {
            return Err(Error::Parse("dataset CSV needs both splits".into()));
        }

        let labeled_classes = labeled.iter().map(|i| i.class).max().unwrap() + 1;
        let total_classes = unlabeled.iter().map(|i| i.class).max().unwrap() + 1;
        if unlabeled.iter().any(|i| i.class < labeled_classes) {
            return Err(Error::Parse(
                "unlabeled rows carry labeled class ids; splits must be disjoint".into(),
            ));
        }

        // Means are not stored in the flat file; rebuild them empirically.
        let mut sums = vec![vec![0.0; dim]; total_classes];
        let mut counts = vec![0usize; total_classes];
        for inst in labeled.iter().chain(&unlabeled) {
            counts[inst.class] += 1;
            for (s, v) in sums[inst.class].iter_mut().zip(&inst.features) {
                *s += v;
            }
        }
        let class_means: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let denom = c.max(1) as f64;
                s.into_iter().map(|v| v / denom).collect()
            })
            .collect();
        let mut var_sum = 0.0;
        let mut var_n = 0usize;
        for inst in labeled.iter().chain(&unlabeled) {
            for (v, m) in inst.features.iter().zip(&class_means[inst.class]) {
                var_sum += (v - m) * (v - m);
                var_n += 1;
            }
        }
        let class_scale = (var_sum / var_n.max(1) as f64).sqrt();

        Ok(SyntheticDataset {
            dim,
            labeled_classes,
            total_classes,
            labeled,
            unlabeled,
            class_means,
            class_scale,
        })
    }
}

fn push_row(out: &mut String, split: &str, inst: &Instance) {
    out.push_str(split);
    out.push(',');
    out.push_str(&inst.class.to_string());
    for v in &inst.features {
        out.push_str(&format!(",{v:.16e}"));
    }
    out.push('\n');
}
