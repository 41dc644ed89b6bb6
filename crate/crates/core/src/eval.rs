//! Held-out evaluation: top-1 accuracy for labeled classes, Hungarian-matched
//! clustering accuracy (ACC) for novel classes, confusion matrices,
//! distribution-alignment diagnostics, and embedding dumps.
//!
//! Novel instances predicted into labeled neurons are counted as errors:
//! they are excluded from the matching numerator but included in N, and
//! reported separately as a leakage rate.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::MlpModel;
use crate::multinoulli::{tv_distance, MultinoulliSpec};
use crate::synthgen::{SyntheticDataset, TestSplit};
use crate::tape::LOG_EPS;

/// Optimal matching between novel neurons and novel classes.
///
/// Indices are relative to the novel block: neuron j here is absolute
/// neuron L + j.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// assignment[j] = true-class row matched to predicted neuron j;
    /// a bijection on 0..U.
    pub assignment: Vec<usize>,
    pub matched: u64,
    /// matched / total count of the confusion matrix.
    pub acc: f64,
}

/// Maximize the matched count over all neuron-to-class bijections via the
/// O(U^3) assignment algorithm; maximization reduces to minimization with
/// cost = max entry - count. Exact on integer counts.
pub fn hungarian_match(confusion: &[Vec<u64>]) -> Result<AssignmentResult> {
    let n = confusion.len();
    if n == 0 {
        return Err(Error::EmptyBatch {
            op: "hungarian_match",
        });
    }
    if confusion.iter().any(|row| row.len() != n) {
        return Err(Error::BadShape {
            op: "hungarian_match",
            expected: "square",
            rows: n,
            cols: confusion.iter().map(|r| r.len()).max().unwrap_or(0),
        });
    }
    let max_entry = confusion
        .iter()
        .flat_map(|r| r.iter())
        .copied()
        .max()
        .unwrap_or(0);
    let cost: Vec<Vec<i64>> = confusion
        .iter()
        .map(|row| row.iter().map(|&c| (max_entry - c) as i64).collect())
        .collect();
    let assignment = min_cost_assignment(&cost);

    let matched: u64 = assignment
        .iter()
        .enumerate()
        .map(|(col, &row)| confusion[row][col])
        .sum();
    let total: u64 = confusion.iter().flat_map(|r| r.iter()).sum();
    let acc = if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    };
    Ok(AssignmentResult {
        assignment,
        matched,
        acc,
    })
}

/// Shortest-augmenting-path assignment (potentials form), minimizing total
/// cost on a square matrix. Returns the row assigned to each column.
fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (0..n).map(|j| p[j + 1] - 1).collect()
}

/// Full evaluation summary over a held-out split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub n_labeled: usize,
    pub n_novel: usize,
    /// Top-1 accuracy of labeled test instances, argmax over all K neurons.
    pub labeled_accuracy: f64,
    /// Hungarian-matched clustering accuracy; leaked instances count in the
    /// denominator but never the numerator.
    pub novel_acc: f64,
    pub assignment: AssignmentResult,
    /// Fraction of novel instances predicted into labeled neurons.
    pub leakage_rate: f64,
    /// K x K counts, true class by argmax neuron, all test instances.
    pub confusion: Vec<Vec<u64>>,
    /// U x U counts over novel instances that stayed in the novel block.
    pub novel_confusion: Vec<Vec<u64>>,
    /// Empirical mean of the novel-test probability columns (length K).
    pub novel_mean: Vec<f64>,
    /// KL(y^U || novel_mean), zero-target coordinates contributing zero.
    pub mean_kl: f64,
    /// Total variation distance between novel_mean and y^U.
    pub mean_tv: f64,
}

/// Run the model over a test split and score it.
pub fn evaluate(model: &MlpModel, split: &TestSplit, spec: &MultinoulliSpec) -> Result<EvalReport> {
    if split.labeled.is_empty() || split.novel.is_empty() {
        return Err(Error::EmptyBatch { op: "evaluate" });
    }
    let (p_labeled, _) = model.forward_plain(&features_matrix(&split.labeled)?)?;
    let labeled_ids: Vec<usize> = split.labeled.iter().map(|(_, c)| *c).collect();
    let (p_novel, _) = model.forward_plain(&features_matrix(&split.novel)?)?;
    let novel_ids: Vec<usize> = split.novel.iter().map(|(_, c)| *c).collect();
    evaluate_predictions(&p_labeled, &labeled_ids, &p_novel, &novel_ids, spec)
}

/// Score prediction matrices directly; `evaluate` is this plus the forward
/// pass. Ties in argmax break toward the lowest neuron index.
pub fn evaluate_predictions(
    p_labeled: &Matrix,
    labeled_ids: &[usize],
    p_novel: &Matrix,
    novel_ids: &[usize],
    spec: &MultinoulliSpec,
) -> Result<EvalReport> {
    let k = spec.classes();
    let l = spec.labeled();
    let u = spec.novel();
    if p_labeled.rows() != k || p_novel.rows() != k {
        return Err(Error::BadShape {
            op: "evaluate_predictions",
            expected: "K-row probability matrix",
            rows: p_labeled.rows(),
            cols: p_labeled.cols(),
        });
    }
    if p_labeled.cols() != labeled_ids.len() || p_novel.cols() != novel_ids.len() {
        return Err(Error::Config(
            "prediction columns and id list lengths disagree".into(),
        ));
    }
    if labeled_ids.is_empty() || novel_ids.is_empty() {
        return Err(Error::EmptyBatch {
            op: "evaluate_predictions",
        });
    }

    let mut confusion = vec![vec![0u64; k]; k];
    let mut labeled_hits = 0usize;
    for (j, &class) in labeled_ids.iter().enumerate() {
        let pred = argmax_column(p_labeled, j);
        confusion[class][pred] += 1;
        if pred == class {
            labeled_hits += 1;
        }
    }

    let mut novel_confusion = vec![vec![0u64; u]; u];
    let mut leaked = 0usize;
    for (j, &class) in novel_ids.iter().enumerate() {
        let pred = argmax_column(p_novel, j);
        confusion[class][pred] += 1;
        if pred < l {
            leaked += 1;
        } else {
            novel_confusion[class - l][pred - l] += 1;
        }
    }

    let assignment = hungarian_match(&novel_confusion)?;
    let n_novel = novel_ids.len();
    let novel_acc = assignment.matched as f64 / n_novel as f64;

    let novel_mean = crate::multinoulli::empirical_mean(p_novel)?;
    let target = spec.target_mean();
    let mean_kl: f64 = target
        .iter()
        .zip(&novel_mean)
        .filter(|(&y, _)| y > 0.0)
        .map(|(&y, &m)| y * (y.ln() - m.max(LOG_EPS).ln()))
        .sum();
    let mean_tv = tv_distance(&novel_mean, &target);

    Ok(EvalReport {
        n_labeled: labeled_ids.len(),
        n_novel,
        labeled_accuracy: labeled_hits as f64 / labeled_ids.len() as f64,
        novel_acc,
        assignment,
        leakage_rate: leaked as f64 / n_novel as f64,
        confusion,
        novel_confusion,
        novel_mean,
        mean_kl,
        mean_tv,
    })
}

fn argmax_column(p: &Matrix, j: usize) -> usize {
    let mut best = 0;
    let mut best_v = p.get(0, j);
    for i in 1..p.rows() {
        let v = p.get(i, j);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

fn features_matrix(instances: &[(Vec<f64>, usize)]) -> Result<Matrix> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch {
            op: "features_matrix",
        });
    }
    let dim = instances[0].0.len();
    let mut m = Matrix::zeros(dim, instances.len());
    for (j, (x, _)) in instances.iter().enumerate() {
        for (i, v) in x.iter().enumerate() {
            m.set(i, j, *v);
        }
    }
    Ok(m)
}

impl EvalReport {
    /// Flat metric,value CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("n_labeled,{}\n", self.n_labeled));
        out.push_str(&format!("n_novel,{}\n", self.n_novel));
        out.push_str(&format!("labeled_accuracy,{}\n", self.labeled_accuracy));
        out.push_str(&format!("novel_acc,{}\n", self.novel_acc));
        out.push_str(&format!("leakage_rate,{}\n", self.leakage_rate));
        out.push_str(&format!("mean_kl,{}\n", self.mean_kl));
        out.push_str(&format!("mean_tv,{}\n", self.mean_tv));
        for (i, m) in self.novel_mean.iter().enumerate() {
            out.push_str(&format!("novel_mean_{i},{m}\n"));
        }
        out
    }

    /// K x K confusion matrix CSV with neurons named n0..n{K-1}.
    pub fn confusion_csv(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("class");
        for j in 0..k {
            out.push_str(&format!(",n{j}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "labeled accuracy  {:.4}  ({} instances)\n",
            self.labeled_accuracy, self.n_labeled
        ));
        out.push_str(&format!(
            "novel ACC         {:.4}  ({} instances, leakage {:.4})\n",
            self.novel_acc, self.n_novel, self.leakage_rate
        ));
        out.push_str(&format!(
            "novel mean KL {:.6}  TV {:.6}\n",
            self.mean_kl, self.mean_tv
        ));
        out.push_str("neuron -> class assignment: ");
        let pairs: Vec<String> = self
            .assignment
            .assignment
            .iter()
            .enumerate()
            .map(|(neuron, class)| format!("n{neuron}->c{class}"))
            .collect();
        out.push_str(&pairs.join(" "));
        out.push('\n');
        out
    }
}

/// CSV of per-instance embeddings over the whole dataset:
/// `split,true_class,pred_neuron,z0..z{e-1}`. Novel ids here come from the
/// evaluator-side accessor.
pub fn dump_embeddings(model: &MlpModel, dataset: &SyntheticDataset) -> Result<String> {
    let e = model.config().embedding;
    let mut out = String::from("split,true_class,pred_neuron");
    for i in 0..e {
        out.push_str(&format!(",z{i}"));
    }
    out.push('\n');

    let mut write_rows = |split: &str, features: Vec<&[f64]>, classes: Vec<usize>| -> Result<()> {
        if features.is_empty() {
            return Ok(());
        }
        let dim = features[0].len();
        let mut m = Matrix::zeros(dim, features.len());
        for (j, x) in features.iter().enumerate() {
            for (i, v) in x.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        let (p, z) = model.forward_plain(&m)?;
        for (j, class) in classes.iter().enumerate() {
            out.push_str(split);
            out.push_str(&format!(",{},{}", class, argmax_column(&p, j)));
            for i in 0..e {
                out.push_str(&format!(",{:.16e}", z.get(i, j)));
            }
            out.push('\n');
        }
        Ok(())
    };

    let labeled_features: Vec<&[f64]> = (0..dataset.labeled_len())
        .map(|i| dataset.labeled_instance(i).0)
        .collect();
    let labeled_classes: Vec<usize> = (0..dataset.labeled_len())
        .map(|i| dataset.labeled_instance(i).1)
        .collect();
    write_rows("labeled", labeled_features, labeled_classes)?;

    let novel_features: Vec<&[f64]> = (0..dataset.unlabeled_len())
        .map(|i| dataset.unlabeled_features(i))
        .collect();
    let novel_classes: Vec<usize> = (0..dataset.unlabeled_len())
        .map(|i| dataset.hidden_class(i))
        .collect();
    write_rows("unlabeled", novel_features, novel_classes)?;

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn brute_force_best(confusion: &[Vec<u64>]) -> u64 {
        let n = confusion.len();
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = 0;
        permute(&mut cols, 0, &mut |perm| {
            let score: u64 = perm
                .iter()
                .enumerate()
                .map(|(row, &col)| confusion[row][col])
                .sum();
            best = best.max(score);
        });
        best
    }

    fn permute(items: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn diagonal_and_antidiagonal() {
        let diag = vec![vec![5, 0], vec![0, 5]];
        let r = hungarian_match(&diag).unwrap();
        assert_eq!(r.assignment, vec![0, 1]);
        assert_eq!(r.acc, 1.0);

        let anti = vec![vec![0, 5], vec![5, 0]];
        let r = hungarian_match(&anti).unwrap();
        assert_eq!(r.assignment, vec![1, 0]);
        assert_eq!(r.acc, 1.0);
    }

    #[test]
    fn hand_example_matches_brute_force() {
        // preds [0,0,1,2,2,2] vs hidden [0,1,1,2,2,0].
        let confusion = vec![vec![1, 0, 1], vec![1, 1, 0], vec![0, 0, 2]];
        let r = hungarian_match(&confusion).unwrap();
        assert_eq!(r.matched, 4);
        assert!((r.acc - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(r.matched, brute_force_best(&confusion));
    }

    #[test]
    fn non_square_errors() {
        let bad = vec![vec![1, 2, 3], vec![4, 5, 6]];
        assert!(hungarian_match(&bad).is_err());
    }

    #[test]
    fn matches_exhaustive_search_on_random_matrices() {
        let mut rng = StdRng::seed_from_u64(0);
        for u in 2..=6 {
            for _ in 0..150 {
                let confusion: Vec<Vec<u64>> = (0..u)
                    .map(|_| (0..u).map(|_| rng.random_range(0..50u64)).collect())
                    .collect();
                let r = hungarian_match(&confusion).unwrap();
                assert_eq!(r.matched, brute_force_best(&confusion), "{confusion:?}");
            }
        }
    }

    #[test]
    fn acc_invariant_under_hidden_relabeling() {
        let mut rng = StdRng::seed_from_u64(1);
        let confusion: Vec<Vec<u64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.random_range(0..30u64)).collect())
            .collect();
        let base = hungarian_match(&confusion).unwrap();
        // Relabel hidden classes by a fixed permutation of the rows.
        let perm = [2usize, 0, 3, 1];
        let relabeled: Vec<Vec<u64>> = perm.iter().map(|&i| confusion[i].clone()).collect();
        let r = hungarian_match(&relabeled).unwrap();
        assert_eq!(r.matched, base.matched);
    }

    fn one_hot_predictions(ids: &[usize], k: usize) -> Matrix {
        let mut m = Matrix::zeros(k, ids.len());
        for (j, &c) in ids.iter().enumerate() {
            m.set(c, j, 1.0);
        }
        m
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let spec = MultinoulliSpec::new(2, vec![0.5, 0.5]).unwrap();
        let labeled_ids = vec![0, 1, 0, 1];
        let novel_ids = vec![2, 3, 2, 3, 2, 3];
        // Oracle predicts ground truth with the novel ids swapped: ACC must
        // still be 1 by permutation matching.
        let swapped: Vec<usize> = novel_ids
            .iter()
            .map(|&c| if c == 2 { 3 } else { 2 })
            .collect();
        let report = evaluate_predictions(
            &one_hot_predictions(&labeled_ids, 4),
            &labeled_ids,
            &one_hot_predictions(&swapped, 4),
            &novel_ids,
            &spec,
        )
        .unwrap();
        assert_eq!(report.labeled_accuracy, 1.0);
        assert_eq!(report.novel_acc, 1.0);
        assert_eq!(report.leakage_rate, 0.0);
    }

    #[test]
    fn constant_predictor_scores_max_class_share() {
        let prior = vec![0.5, 0.125, 0.125, 0.125, 0.125];
        let spec = MultinoulliSpec::new(1, prior.clone()).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let novel_ids: Vec<usize> = (0..4000).map(|_| spec.sample_category(&mut rng)).collect();
        let constant = one_hot_predictions(&vec![1; novel_ids.len()], 6);
        let labeled_ids = vec![0, 0];
        let report = evaluate_predictions(
            &one_hot_predictions(&labeled_ids, 6),
            &labeled_ids,
            &constant,
            &novel_ids,
            &spec,
        )
        .unwrap();
        let head_share =
            novel_ids.iter().filter(|&&c| c == 1).count() as f64 / novel_ids.len() as f64;
        assert!((report.novel_acc - head_share).abs() < 1e-12);
        assert!((report.novel_acc - 0.5).abs() < 0.03);
    }

    #[test]
    fn uniform_random_predictor_scores_chance() {
        let spec = MultinoulliSpec::uniform(1, 5).unwrap();
        let mut rng = StdRng::seed_from_u64(4);
        let n = 20_000;
        let novel_ids: Vec<usize> = (0..n).map(|i| 1 + (i % 5)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(1..6)).collect();
        let labeled_ids = vec![0];
        let report = evaluate_predictions(
            &one_hot_predictions(&labeled_ids, 6),
            &labeled_ids,
            &one_hot_predictions(&preds, 6),
            &novel_ids,
            &spec,
        )
        .unwrap();
        assert!(
            (report.novel_acc - 0.2).abs() < 0.02,
            "ACC {}",
            report.novel_acc
        );
    }

    #[test]
    fn leaked_novel_instances_count_as_errors() {
        let spec = MultinoulliSpec::new(2, vec![0.5, 0.5]).unwrap();
        let labeled_ids = vec![0, 1];
        let novel_ids = vec![2, 2, 3, 3];
        // Two of four novel instances leak into labeled neuron 0.
        let preds = vec![0, 2, 0, 3];
        let report = evaluate_predictions(
            &one_hot_predictions(&labeled_ids, 4),
            &labeled_ids,
            &one_hot_predictions(&preds, 4),
            &novel_ids,
            &spec,
        )
        .unwrap();
        assert_eq!(report.leakage_rate, 0.5);
        assert_eq!(report.novel_acc, 0.5);
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let spec = MultinoulliSpec::new(1, vec![0.5, 0.5]).unwrap();
        let labeled_ids = vec![0, 0, 0];
        let novel_ids = vec![1, 2, 2, 1, 1];
        let preds = vec![1, 1, 2, 0, 1];
        let report = evaluate_predictions(
            &one_hot_predictions(&labeled_ids, 3),
            &labeled_ids,
            &one_hot_predictions(&preds, 3),
            &novel_ids,
            &spec,
        )
        .unwrap();
        let rows: Vec<u64> = report.confusion.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rows, vec![3, 3, 2]);
        let csv = report.confusion_csv();
        assert!(csv.starts_with("class,n0,n1,n2\n"));
    }

    #[test]
    fn embeddings_dump_covers_dataset() {
        use crate::model::{MlpModel, ModelConfig};
        use crate::synthgen::generate;
        let spec = MultinoulliSpec::new(1, vec![0.5, 0.5]).unwrap();
        let ds = generate(4, &spec, 12, 15, 8.0, 1.0, 5).unwrap();
        let model = MlpModel::init(
            &ModelConfig {
                input_dim: 4,
                hidden: vec![6],
                embedding: 3,
                classes: 3,
            },
            5,
        );
        let csv = dump_embeddings(&model, &ds).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 12 + 15);
        assert_eq!(lines[0], "split,true_class,pred_neuron,z0,z1,z2");
        assert_eq!(lines[1].split(',').count(), 6);
    }

    #[test]
    fn empty_split_errors() {
        use crate::model::{MlpModel, ModelConfig};
        use crate::synthgen::TestSplit;
        let spec = MultinoulliSpec::new(1, vec![0.5, 0.5]).unwrap();
        let model = MlpModel::init(
            &ModelConfig {
                input_dim: 2,
                hidden: vec![4],
                embedding: 2,
                classes: 3,
            },
            1,
        );
        let empty = TestSplit {
            labeled: vec![],
            novel: vec![(vec![0.0, 0.0], 1)],
        };
        assert!(evaluate(&model, &empty, &spec).is_err());
    }

    #[test]
    fn trained_embeddings_cluster_by_class() {
        // After training, within-class embedding distances fall below
        // between-class distances.
        use crate::config::ExperimentConfig;
        use crate::trainer;

        let mut config = ExperimentConfig::reference();
        config.data.dim = 4;
        config.data.labeled_classes = 2;
        config.data.novel_classes = 2;
        config.data.n_labeled = 80;
        config.data.n_unlabeled = 80;
        config.data.separation = 10.0;
        config.model.hidden = vec![8];
        config.model.embedding = 4;
        config.train.batch_labeled = 8;
        config.train.batch_unlabeled = 20;
        config.train.epochs = 40;
        config.train.steps_per_epoch = 5;
        let outcome = trainer::train(&config).unwrap();

        let csv = dump_embeddings(&outcome.model, &outcome.dataset).unwrap();
        let mut points: Vec<(usize, Vec<f64>)> = Vec::new();
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let class: usize = fields[1].parse().unwrap();
            let z: Vec<f64> = fields[3..].iter().map(|v| v.parse().unwrap()).collect();
            points.push((class, z));
        }
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let d: f64 = points[i]
                    .1
                    .iter()
                    .zip(&points[j].1)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                if points[i].0 == points[j].0 {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        let mean_intra = intra.0 / intra.1 as f64;
        let mean_inter = inter.0 / inter.1 as f64;
        assert!(
            mean_intra < mean_inter,
            "intra {mean_intra} not below inter {mean_inter}"
        );
    }
}
