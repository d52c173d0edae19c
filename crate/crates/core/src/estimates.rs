//! Pull counts, sample means and the quantities agents derive from them
//! after a communication round.

use crate::confidence::{self, ConfidenceParams};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::model::WeightMatrix;

/// Per-(arm, agent) pull counts and reward sums.
///
/// Stored arm-major so that the counts of one arm across all agents form a
/// contiguous slice, which is what the confidence radius consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStats {
    arms: usize,
    agents: usize,
    counts: Vec<u64>,
    sums: Vec<f64>,
}

impl SampleStats {
    pub fn new(arms: usize, agents: usize) -> Self {
        Self {
            arms,
            agents,
            counts: vec![0; arms * agents],
            sums: vec![0.0; arms * agents],
        }
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    #[inline]
    pub fn record(&mut self, arm: usize, agent: usize, reward: f64) {
        let i = arm * self.agents + agent;
        self.counts[i] += 1;
        self.sums[i] += reward;
    }

    #[inline]
    pub fn count(&self, arm: usize, agent: usize) -> u64 {
        self.counts[arm * self.agents + agent]
    }

    /// `τ_{k,·}`: the counts of `arm` for every agent.
    pub fn arm_counts(&self, arm: usize) -> &[u64] {
        &self.counts[arm * self.agents..(arm + 1) * self.agents]
    }

    pub fn total_pulls(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn counts_matrix(&self) -> Vec<Vec<u64>> {
        (0..self.arms).map(|k| self.arm_counts(k).to_vec()).collect()
    }

    /// Local sample mean, `None` before the first pull.
    pub fn local_mean(&self, arm: usize, agent: usize) -> Option<f64> {
        let i = arm * self.agents + agent;
        (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64)
    }

    /// `μ̂'_{k,m} = Σ_n w_{n,m} μ̂_{k,n}` for an arm every agent has pulled.
    pub fn mixed_mean(&self, arm: usize, agent: usize, weights: &WeightMatrix) -> Option<f64> {
        let mut total = 0.0;
        for n in 0..self.agents {
            total += weights.get(n, agent) * self.local_mean(arm, n)?;
        }
        Some(total)
    }

    /// All mixed means, or `None` while some count is zero.
    pub fn mixed_means(&self, weights: &WeightMatrix) -> Option<Matrix> {
        if self.counts.contains(&0) {
            return None;
        }
        let mut out = Matrix::zeros(self.arms, self.agents);
        for k in 0..self.arms {
            for m in 0..self.agents {
                out[(k, m)] = self.mixed_mean(k, m, weights)?;
            }
        }
        Some(out)
    }

    /// `Ω^δ_{k,m}` for every entry; every count must be positive.
    pub fn radii(&self, weights: &WeightMatrix, params: &ConfidenceParams) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.arms, self.agents);
        for k in 0..self.arms {
            let counts = self.arm_counts(k);
            let beta = confidence::beta(counts, params)?;
            for m in 0..self.agents {
                let v = confidence::weighted_inverse_counts(counts, &weights.column(m))?;
                out[(k, m)] = (beta * v).sqrt();
            }
        }
        Ok(out)
    }
}

/// Index of the largest value among `candidates`, lowest index on ties.
pub fn argmax_among(values: impl Fn(usize) -> f64, candidates: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in candidates {
        let v = values(k);
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Empirical best arm of each agent (lowest index on ties).
pub fn empirical_best(mixed: &Matrix) -> Vec<usize> {
    (0..mixed.cols())
        .map(|m| argmax_among(|k| mixed[(k, m)], 0..mixed.rows()).unwrap_or(0))
        .collect()
}

/// Estimated gaps in the tilde form: the empirical best arm of each agent
/// gets the gap to the runner-up instead of zero (`+∞` with one arm).
pub fn empirical_gaps(mixed: &Matrix) -> Matrix {
    let best = empirical_best(mixed);
    let mut gaps = Matrix::from_fn(mixed.rows(), mixed.cols(), |k, m| {
        mixed[(best[m], m)] - mixed[(k, m)]
    });
    for (m, &b) in best.iter().enumerate() {
        gaps[(b, m)] = (0..mixed.rows())
            .filter(|&k| k != b)
            .map(|k| gaps[(k, m)])
            .fold(f64::INFINITY, f64::min);
    }
    gaps
}
