//! Multinoulli (categorical) distribution math: the novel-class prior, its
//! exact mean and covariance over the K = L + U class neurons, sampling, and
//! empirical estimators over probability matrices.

use rand::Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tolerance on sum(p_U) = 1 at construction.
pub const PRIOR_SUM_TOL: f64 = 1e-9;

/// Novel-class prior plus class-count bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinoulliSpec {
    labeled: usize,
    novel: usize,
    p_u: Vec<f64>,
}

impl MultinoulliSpec {
    /// Validates strict positivity and unit sum of the prior.
    pub fn new(labeled: usize, p_u: Vec<f64>) -> Result<Self> {
        if p_u.is_empty() {
            return Err(Error::Config("p_U must have at least one novel class".into()));
        }
        if let Some(i) = p_u.iter().position(|&p| !p.is_finite() || p <= 0.0) {
            return Err(Error::Config(format!(
                "p_U[{i}] = {} is not strictly positive",
                p_u[i]
            )));
        }
        let sum: f64 = p_u.iter().sum();
        if (sum - 1.0).abs() > PRIOR_SUM_TOL {
            return Err(Error::Config(format!("p_U sums to {sum}, expected 1")));
        }
        Ok(MultinoulliSpec {
            labeled,
            novel: p_u.len(),
            p_u,
        })
    }

    pub fn uniform(labeled: usize, novel: usize) -> Result<Self> {
        if novel == 0 {
            return Err(Error::Config("need at least one novel class".into()));
        }
        MultinoulliSpec::new(labeled, vec![1.0 / novel as f64; novel])
    }

    pub fn labeled(&self) -> usize {
        self.labeled
    }

    pub fn novel(&self) -> usize {
        self.novel
    }

    /// K = L + U.
    pub fn classes(&self) -> usize {
        self.labeled + self.novel
    }

    pub fn p_u(&self) -> &[f64] {
        &self.p_u
    }

    /// Target mean y^U = [0_L ; p_U]: zero probability on every labeled
    /// neuron, the prior on the novel ones.
    pub fn target_mean(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.classes()];
        y[self.labeled..].copy_from_slice(&self.p_u);
        y
    }

    /// Target covariance: p_i(1-p_i) on the novel diagonal, -p_i p_j on
    /// novel off-diagonals, zero on every row/column touching a labeled
    /// neuron.
    pub fn target_covariance(&self) -> CovarianceTarget {
        let k = self.classes();
        let l = self.labeled;
        let mut sigma = Matrix::zeros(k, k);
        for i in 0..self.novel {
            for j in 0..self.novel {
                let v = if i == j {
                    self.p_u[i] * (1.0 - self.p_u[i])
                } else {
                    -self.p_u[i] * self.p_u[j]
                };
                sigma.set(l + i, l + j, v);
            }
        }
        CovarianceTarget { sigma }
    }

    /// Draw a novel-class index in {L, ..., K-1} by inverse CDF on a single
    /// uniform variate.
    pub fn sample_category<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cdf = 0.0;
        for (i, p) in self.p_u.iter().enumerate() {
            cdf += p;
            if u < cdf {
                return self.labeled + i;
            }
        }
        // Round-off can leave cdf a hair under 1.
        self.labeled + self.novel - 1
    }
}

/// Exact Multinoulli covariance target over all K neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTarget {
    sigma: Matrix,
}

impl CovarianceTarget {
    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }
}

/// Row-wise average of columns: (1/B) P 1_B.
pub fn empirical_mean(p: &Matrix) -> Result<Vec<f64>> {
    if p.cols() == 0 {
        return Err(Error::EmptyBatch {
            op: "empirical_mean",
        });
    }
    Ok(p.mean_columns()?.data().to_vec())
}

/// Biased (1/B) covariance of the columns about their empirical mean,
/// exactly the estimator the objective matches.
pub fn empirical_covariance(p: &Matrix) -> Result<Matrix> {
    if p.cols() < 2 {
        return Err(Error::BatchTooSmall {
            op: "empirical_covariance",
            min: 2,
            got: p.cols(),
        });
    }
    let mean = p.mean_columns()?;
    let mut centered = p.clone();
    for i in 0..p.rows() {
        let m = mean.get(i, 0);
        for j in 0..p.cols() {
            centered.set(i, j, p.get(i, j) - m);
        }
    }
    let cov = centered.matmul(&centered.transpose())?;
    Ok(cov.scale(1.0 / p.cols() as f64))
}

/// Total variation distance between two distributions of equal length.
pub fn tv_distance(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
