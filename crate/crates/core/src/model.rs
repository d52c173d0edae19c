//! Ground-truth problem instances.
//!
//! Agent `m` does not optimise its own local mean `μ_{k,m}` but the mixed
//! mean `μ'_{k,m} = Σ_n w_{n,m} μ_{k,n}`, a weighted average of the local
//! means of arm `k` over all agents. Column `m` of the weight matrix holds
//! agent `m`'s importance weights and sums to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Absolute tolerance on weight-matrix column sums.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-9;

/// Column-stochastic `M × M` weight matrix; row `n` is the source agent,
/// column `m` the target agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct WeightMatrix(Matrix);

impl WeightMatrix {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let matrix = Matrix::from_rows(rows).map_err(|e| Error::InvalidWeights(e.to_string()))?;
        Self::from_matrix(matrix)
    }

    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        let (rows, cols) = matrix.shape();
        if rows == 0 || rows != cols {
            return Err(Error::InvalidWeights(format!(
                "expected a non-empty square matrix, got {rows}x{cols}"
            )));
        }
        for n in 0..rows {
            for m in 0..cols {
                let w = matrix[(n, m)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidWeights(format!(
                        "entry ({n}, {m}) = {w} outside [0, 1]"
                    )));
                }
            }
        }
        for m in 0..cols {
            let sum: f64 = matrix.column(m).iter().sum();
            if (sum - 1.0).abs() > COLUMN_SUM_TOLERANCE {
                return Err(Error::InvalidWeights(format!(
                    "column {m} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(Self(matrix))
    }

    pub fn identity(agents: usize) -> Self {
        Self(Matrix::from_fn(agents, agents, |n, m| f64::from(u8::from(n == m))))
    }

    /// Every agent weighs every agent equally (global-average objective).
    pub fn uniform(agents: usize) -> Self {
        Self(Matrix::filled(agents, agents, 1.0 / agents as f64))
    }

    pub fn agents(&self) -> usize {
        self.0.rows()
    }

    /// Weight `w_{n,m}` of source agent `n` in target agent `m`'s objective.
    pub fn get(&self, source: usize, target: usize) -> f64 {
        self.0[(source, target)]
    }

    /// Column `w_{·,m}`.
    pub fn column(&self, target: usize) -> Vec<f64> {
        self.0.column(target)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

impl TryFrom<Vec<Vec<f64>>> for WeightMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(&rows)
    }
}

impl From<WeightMatrix> for Vec<Vec<f64>> {
    fn from(w: WeightMatrix) -> Self {
        w.0.to_rows()
    }
}

/// The simulated world: local means, a shared noise scale and the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    mu: Matrix,
    sigma: f64,
    weights: WeightMatrix,
}

impl BanditInstance {
    /// Builds and validates an instance. `mu` is `K × M` (arms by agents).
    pub fn new(mu: Matrix, sigma: f64, weights: WeightMatrix) -> Result<Self> {
        let instance = Self { mu, sigma, weights };
        validate_instance(&instance)?;
        Ok(instance)
    }

    pub fn arms(&self) -> usize {
        self.mu.rows()
    }

    pub fn agents(&self) -> usize {
        self.mu.cols()
    }

    pub fn mu(&self) -> &Matrix {
        &self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &WeightMatrix {
        &self.weights
    }

    pub fn mixed_means(&self) -> Matrix {
        mixed_means(&self.mu, &self.weights)
    }

    pub fn gaps(&self) -> GapSummary {
        // An accepted instance always has unique best arms.
        gap_summary(self).expect("validated instance")
    }
}

/// `μ'_{k,m} = Σ_n w_{n,m} μ_{k,n}` for any `K × M` matrix of local values.
///
/// The same map turns local sample means into mixed sample means.
pub fn mixed_means(local: &Matrix, weights: &WeightMatrix) -> Matrix {
    let (arms, agents) = local.shape();
    debug_assert_eq!(agents, weights.agents());
    Matrix::from_fn(arms, agents, |k, m| {
        (0..agents).map(|n| weights.get(n, m) * local[(k, n)]).sum()
    })
}

/// Builds the instance whose mixed means are `mixed`, by solving
/// `Wᵀ μ_k = μ'_k` for every arm. Fails if `W` is singular.
pub fn instance_from_mixed_means(
    mixed: &Matrix,
    sigma: f64,
    weights: WeightMatrix,
) -> Result<BanditInstance> {
    let agents = weights.agents();
    if mixed.cols() != agents {
        return Err(Error::Shape(format!(
            "mixed means have {} agents, weights have {agents}",
            mixed.cols()
        )));
    }
    let wt = nalgebra::DMatrix::from_fn(agents, agents, |m, n| weights.get(n, m));
    let lu = wt.lu();
    let mut mu = Matrix::zeros(mixed.rows(), agents);
    for k in 0..mixed.rows() {
        let rhs = nalgebra::DVector::from_column_slice(mixed.row(k));
        let local = lu
            .solve(&rhs)
            .ok_or_else(|| Error::InvalidWeights("weight matrix is singular".into()))?;
        for n in 0..agents {
            mu[(k, n)] = local[n];
        }
    }
    BanditInstance::new(mu, sigma, weights)
}

/// Index of the strict maximum of `values`, or the tied pair.
fn strict_argmax(values: &[f64]) -> std::result::Result<usize, (usize, usize)> {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    match values
        .iter()
        .enumerate()
        .find(|&(k, &v)| k != best && v == values[best])
    {
        Some((other, _)) => Err((best.min(other), best.max(other))),
        None => Ok(best),
    }
}

/// Mixed means, best arms and gaps of an instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapSummary {
    pub mixed_mu: Matrix,
    /// `k*_m` for each agent.
    pub best_arm: Vec<usize>,
    /// `Δ'_{k,m}`, zero at the best arm.
    pub delta: Matrix,
    /// `Δ̃'_{k,m}`: equal to `delta` except at the best arm, where it is the
    /// smallest gap of the other arms. Infinite when `K = 1`.
    pub tilde_delta: Matrix,
    pub delta_min: f64,
    pub delta_max: f64,
}

pub fn gap_summary(instance: &BanditInstance) -> Result<GapSummary> {
    let mixed_mu = instance.mixed_means();
    let (arms, agents) = mixed_mu.shape();
    let mut best_arm = Vec::with_capacity(agents);
    for m in 0..agents {
        let best = strict_argmax(&mixed_mu.column(m)).map_err(|(first, second)| {
            Error::NonUniqueOptimum {
                agent: m,
                first,
                second,
            }
        })?;
        best_arm.push(best);
    }
    let delta = Matrix::from_fn(arms, agents, |k, m| {
        mixed_mu[(best_arm[m], m)] - mixed_mu[(k, m)]
    });
    let mut tilde_delta = delta.clone();
    for (m, &best) in best_arm.iter().enumerate() {
        tilde_delta[(best, m)] = (0..arms)
            .filter(|&k| k != best)
            .map(|k| delta[(k, m)])
            .fold(f64::INFINITY, f64::min);
    }
    Ok(GapSummary {
        delta_min: tilde_delta.min(),
        delta_max: tilde_delta.max(),
        mixed_mu,
        best_arm,
        delta,
        tilde_delta,
    })
}

/// Checks every instance invariant: dimensions, finite means, `σ > 0` and
/// a unique mixed-mean maximiser for every agent.
///
/// Weight-matrix invariants are enforced when the [`WeightMatrix`] is built.
pub fn validate_instance(instance: &BanditInstance) -> Result<()> {
    let (arms, agents) = instance.mu.shape();
    if arms == 0 || agents == 0 {
        return Err(Error::InvalidInstance(format!(
            "need at least one arm and one agent, got K={arms}, M={agents}"
        )));
    }
    if instance.weights.agents() != agents {
        return Err(Error::InvalidInstance(format!(
            "mu has {agents} agent columns but weights are {0}x{0}",
            instance.weights.agents()
        )));
    }
    if let Some(v) = instance.mu.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInstance(format!("non-finite mean {v}")));
    }
    if !(instance.sigma > 0.0 && instance.sigma.is_finite()) {
        return Err(Error::InvalidInstance(format!(
            "sigma must be positive and finite, got {}",
            instance.sigma
        )));
    }
    gap_summary(instance).map(|_| ())
}
