//! Allocation oracles.
//!
//! All three programs share one shape. For every arm `k` they choose pull
//! allocations `q_{k,n} > 0` minimising a linear cost subject to, for every
//! agent `m`,
//!
//! ```text
//! Σ_n w²_{n,m} / q_{k,n}  ≤  Δ²_{k,m} / 2
//! ```
//!
//! Nothing couples different arms, so each arm is an independent
//! subproblem. With `x = 1/q` the constraints become linear and the cost
//! `Σ c_n / x_n` is convex, which is how the main solver attacks it: a
//! log-barrier Newton method in `x`.
//!
//! * [`solve_relaxed`]: costs `Δ_{k,n}`, every agent is a variable.
//! * [`solve_lower_bound`]: costs `Δ̃'_{k,n}`; `q_{k,n}` with `k = k*_n`
//!   appears nowhere and is dropped from the decision vector.
//! * [`solve_sample_complexity`]: unit costs, same variables as the lower
//!   bound.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{GapSummary, WeightMatrix};

/// Gaps below this are rejected: the allocation would exceed ~1e24.
pub const MIN_GAP: f64 = 1e-12;
/// Relative constraint tolerance accepted on a returned allocation.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-8;
/// Target relative duality gap of the barrier method.
pub const OBJECTIVE_TOLERANCE: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 100_000;

/// Allocation `q_{k,m}` with a mask of the entries that are decision
/// variables. Entries outside the mask are reported as zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationMatrix {
    pub q: Matrix,
    pub active: Vec<Vec<bool>>,
}

impl AllocationMatrix {
    pub fn get(&self, arm: usize, agent: usize) -> f64 {
        self.q[(arm, agent)]
    }

    pub fn is_active(&self, arm: usize, agent: usize) -> bool {
        self.active[arm][agent]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub allocation: AllocationMatrix,
    pub objective_value: f64,
    /// Largest relative violation of stationarity, complementarity or
    /// feasibility over all arms.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// One arm's subproblem in the original `q` variables:
/// minimise `Σ_j costs_j q_j` s.t. `Σ_j a_{i,j} / q_j ≤ b_i` for each row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmProgram {
    /// Agent index of each decision variable.
    pub agents: Vec<usize>,
    pub costs: Vec<f64>,
    /// `(a_i, b_i)` with `a_i` indexed like `agents`.
    pub constraints: Vec<(Vec<f64>, f64)>,
}

impl ArmProgram {
    pub fn objective(&self, q: &[f64]) -> f64 {
        self.costs.iter().zip(q).map(|(c, q)| c * q).sum()
    }

    /// Largest `(Σ a/q − b) / b` over the constraints; `≤ 0` is feasible.
    pub fn max_relative_violation(&self, q: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|(a, b)| (inverse_sum(a, q) - b) / b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Removes vacuous rows and variables that no row constrains. The
    /// latter have infimum zero and are returned separately.
    fn reduced(&self) -> (ArmProgram, Vec<usize>) {
        let involved: Vec<bool> = (0..self.agents.len())
            .map(|j| self.constraints.iter().any(|(a, _)| a[j] > 0.0))
            .collect();
        let keep: Vec<usize> = (0..self.agents.len()).filter(|&j| involved[j]).collect();
        let dropped = (0..self.agents.len()).filter(|&j| !involved[j]).collect();
        let constraints = self
            .constraints
            .iter()
            .filter(|(a, _)| a.iter().any(|&v| v > 0.0))
            .map(|(a, b)| (keep.iter().map(|&j| a[j]).collect(), *b))
            .collect();
        let reduced = ArmProgram {
            agents: keep.iter().map(|&j| self.agents[j]).collect(),
            costs: keep.iter().map(|&j| self.costs[j]).collect(),
            constraints,
        };
        (reduced, dropped)
    }
}

fn inverse_sum(a: &[f64], q: &[f64]) -> f64 {
    a.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(a, q)| a / q)
        .sum()
}

/// Which of the three programs to build from an instance.
#[derive(Debug, Clone, PartialEq)]
pub enum ProgramSpec {
    Relaxed {
        delta: Matrix,
        weights: WeightMatrix,
    },
    LowerBound {
        gaps: GapSummary,
        weights: WeightMatrix,
    },
    SampleComplexity {
        gaps: GapSummary,
        weights: WeightMatrix,
    },
    /// The relaxed program with constraints kept only where `active[k][m]`.
    /// Costs still use every entry of `delta`.
    RelaxedSubset {
        delta: Matrix,
        active: Vec<Vec<bool>>,
        weights: WeightMatrix,
    },
}

impl ProgramSpec {
    fn shape(&self) -> (usize, usize) {
        match self {
            Self::Relaxed { delta, .. } | Self::RelaxedSubset { delta, .. } => delta.shape(),
            Self::LowerBound { gaps, .. } | Self::SampleComplexity { gaps, .. } => {
                gaps.tilde_delta.shape()
            }
        }
    }

    /// Validates inputs and splits the program into per-arm subproblems.
    pub fn arm_programs(&self) -> Result<Vec<ArmProgram>> {
        let (arms, agents) = self.shape();
        let (rhs_gaps, weights, best) = match self {
            Self::Relaxed { delta, weights } => {
                check_gaps(delta.iter().copied())?;
                (delta, weights, None)
            }
            Self::RelaxedSubset {
                delta,
                active,
                weights,
            } => {
                if active.len() != arms || active.iter().any(|row| row.len() != agents) {
                    return Err(Error::Shape(format!("active mask does not match {arms}x{agents}")));
                }
                check_gaps(delta.iter().copied())?;
                (delta, weights, None)
            }
            Self::LowerBound { gaps, weights } | Self::SampleComplexity { gaps, weights } => {
                (&gaps.tilde_delta, weights, Some(&gaps.best_arm))
            }
        };
        if weights.agents() != agents {
            return Err(Error::Shape(format!(
                "gap matrix has {agents} agents, weights have {}",
                weights.agents()
            )));
        }
        let mut programs = Vec::with_capacity(arms);
        for k in 0..arms {
            let vars: Vec<usize> = (0..agents)
                .filter(|&n| best.is_none_or(|b| b[n] != k))
                .collect();
            if best.is_some() {
                check_gaps(vars.iter().map(|&n| rhs_gaps[(k, n)]))?;
                check_gaps((0..agents).map(|m| rhs_gaps[(k, m)]).filter(|d| d.is_finite()))?;
            }
            let costs = vars
                .iter()
                .map(|&n| match self {
                    Self::SampleComplexity { .. } => 1.0,
                    _ => rhs_gaps[(k, n)],
                })
                .collect();
            let constraints = (0..agents)
                .filter(|&m| rhs_gaps[(k, m)].is_finite())
                .filter(|&m| match self {
                    Self::RelaxedSubset { active, .. } => active[k][m],
                    _ => true,
                })
                .map(|m| {
                    let a = vars.iter().map(|&n| weights.get(n, m).powi(2)).collect();
                    (a, rhs_gaps[(k, m)].powi(2) / 2.0)
                })
                .collect();
            programs.push(ArmProgram {
                agents: vars,
                costs,
                constraints,
            });
        }
        Ok(programs)
    }
}

fn check_gaps(values: impl IntoIterator<Item = f64>) -> Result<()> {
    for d in values {
        if !(d >= MIN_GAP && d.is_finite()) {
            return Err(Error::Domain(format!(
                "gap entries must be finite and at least {MIN_GAP:e}, got {d}"
            )));
        }
    }
    Ok(())
}

/// Solution of one arm's subproblem.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSolution {
    /// Allocation for each variable of the [`ArmProgram`].
    pub q: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Solves one arm's subproblem with a log-barrier Newton method in
/// `x = 1/q`, where the constraints are linear.
pub fn solve_arm(program: &ArmProgram) -> Result<ArmSolution> {
    let (reduced, dropped) = program.reduced();
    let mut q = vec![0.0; program.agents.len()];
    let keep: Vec<usize> = (0..program.agents.len())
        .filter(|j| !dropped.contains(j))
        .collect();
    if reduced.agents.is_empty() {
        return Ok(ArmSolution {
            q,
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        });
    }
    let barrier = Barrier::new(&reduced);
    let (x, multipliers, iterations) = barrier.solve()?;
    for (slot, &j) in keep.iter().enumerate() {
        q[j] = 1.0 / x[slot];
    }
    let mut reduced_q: Vec<f64> = keep.iter().map(|&j| q[j]).collect();
    let multipliers = refine_multipliers(&reduced, &reduced_q).unwrap_or(multipliers);
    let mut kkt_residual = kkt_residual(&reduced, &reduced_q, &multipliers);
    if let Some((polished_q, polished_mu)) = polish(&reduced, &reduced_q, &multipliers) {
        let polished = self::kkt_residual(&reduced, &polished_q, &polished_mu);
        if polished < kkt_residual {
            reduced_q = polished_q;
            kkt_residual = polished;
        }
    }
    for (slot, &j) in keep.iter().enumerate() {
        q[j] = reduced_q[slot];
    }
    if !(kkt_residual <= FEASIBILITY_TOLERANCE) {
        return Err(Error::Convergence {
            iterations,
            residual: kkt_residual,
        });
    }
    Ok(ArmSolution {
        objective: program.objective(&q),
        q,
        kkt_residual,
        iterations,
    })
}

/// Multipliers fitted to stationarity over the near-active rows.
///
/// The barrier's own estimates `1/(t·slack)` lose most of their digits to
/// cancellation in the slack once `t` is large, so the final multipliers
/// are recovered by least squares from `c_j q_j² = Σ_i μ_i a_ij`.
fn refine_multipliers(program: &ArmProgram, q: &[f64]) -> Option<Vec<f64>> {
    let active: Vec<usize> = program
        .constraints
        .iter()
        .enumerate()
        .filter(|(_, (a, b))| (b - inverse_sum(a, q)) / b <= 1e-6)
        .map(|(i, _)| i)
        .collect();
    if active.is_empty() {
        return None;
    }
    let n = q.len();
    let design = DMatrix::from_fn(n, active.len(), |j, col| {
        program.constraints[active[col]].0[j] / (q[j] * q[j]) / program.costs[j]
    });
    let target = DVector::from_element(n, 1.0);
    let fitted = design.svd(true, true).solve(&target, 1e-14).ok()?;
    let mut mu = vec![0.0; program.constraints.len()];
    for (col, &i) in active.iter().enumerate() {
        mu[i] = fitted[col].max(0.0);
    }
    Some(mu)
}

/// Newton's method on the KKT equalities of the near-active rows, in
/// `x = 1/q`:
///
/// ```text
/// c_j − x_j² Σ_i μ_i a_ij = 0      Σ_j a_ij x_j − b_i = 0  (i active)
/// ```
///
/// Returns `None` if the iteration leaves the domain or the result is not
/// a valid KKT point (negative multiplier or a violated inactive row).
fn polish(program: &ArmProgram, q: &[f64], mu: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let active: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let n = q.len();
    let size = n + active.len();
    let mut x: Vec<f64> = q.iter().map(|q| 1.0 / q).collect();
    let mut lambda: Vec<f64> = active.iter().map(|&i| mu[i]).collect();
    let row = |i: usize| &program.constraints[active[i]];
    for _ in 0..20 {
        let mut jac = DMatrix::zeros(size, size);
        let mut f = DVector::zeros(size);
        for j in 0..n {
            let pull: f64 = (0..active.len()).map(|i| lambda[i] * row(i).0[j]).sum();
            // Scaled by 1/c_j so every stationarity row is O(1).
            let c = program.costs[j];
            f[j] = (c - x[j] * x[j] * pull) / c;
            jac[(j, j)] = -2.0 * x[j] * pull / c;
            for i in 0..active.len() {
                jac[(j, n + i)] = -x[j] * x[j] * row(i).0[j] / c;
            }
        }
        for i in 0..active.len() {
            let (a, b) = row(i);
            f[n + i] = (a.iter().zip(&x).map(|(a, x)| a * x).sum::<f64>() - b) / b;
            for j in 0..n {
                jac[(n + i, j)] = a[j] / b;
            }
        }
        if f.amax() <= 1e-15 {
            break;
        }
        let step = jac.svd(true, true).solve(&(-f), 1e-14).ok()?;
        for j in 0..n {
            x[j] += step[j];
        }
        for i in 0..active.len() {
            lambda[i] += step[n + i];
        }
        if x.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return None;
        }
    }
    if lambda.iter().any(|&l| l < 0.0) {
        return None;
    }
    let q: Vec<f64> = x.iter().map(|x| 1.0 / x).collect();
    let mut full_mu = vec![0.0; mu.len()];
    for (i, &r) in active.iter().enumerate() {
        full_mu[r] = lambda[i];
    }
    Some((q, full_mu))
}

/// Relative KKT residual of `q` with constraint multipliers `mu`.
fn kkt_residual(program: &ArmProgram, q: &[f64], mu: &[f64]) -> f64 {
    let objective = program.objective(q);
    let stationarity = (0..q.len())
        .map(|j| {
            let pull: f64 = program
                .constraints
                .iter()
                .zip(mu)
                .map(|((a, _), mu)| mu * a[j])
                .sum::<f64>()
                / (q[j] * q[j]);
            (program.costs[j] - pull).abs() / program.costs[j]
        })
        .fold(0.0, f64::max);
    let complementarity = program
        .constraints
        .iter()
        .zip(mu)
        .map(|((a, b), mu)| (mu * (b - inverse_sum(a, q))).abs() / objective)
        .fold(0.0, f64::max);
    let violation = program.max_relative_violation(q).max(0.0);
    stationarity.max(complementarity).max(violation)
}

/// The barrier problem in scaled variables `y`, with `x_j = y_j · scale_j`
/// chosen so that every normalised row satisfies `Σ_j A_ij y_j ≤ 1` and
/// `A_ij ≤ 1`.
struct Barrier {
    costs: Vec<f64>,
    rows: Vec<Vec<f64>>,
    /// Original right-hand sides, to map multipliers back.
    rhs: Vec<f64>,
    scale: Vec<f64>,
}

impl Barrier {
    fn new(program: &ArmProgram) -> Self {
        let n = program.agents.len();
        // In x-space the constraint reads Σ_j (a_ij / b_i) x_j ≤ 1.
        let scale: Vec<f64> = (0..n)
            .map(|j| {
                let largest = program
                    .constraints
                    .iter()
                    .map(|(a, b)| a[j] / b)
                    .fold(0.0, f64::max);
                1.0 / largest
            })
            .collect();
        let rows = program
            .constraints
            .iter()
            .map(|(a, b)| (0..n).map(|j| a[j] / b * scale[j]).collect())
            .collect();
        Self {
            costs: (0..n).map(|j| program.costs[j] / scale[j]).collect(),
            rows,
            rhs: program.constraints.iter().map(|(_, b)| *b).collect(),
            scale,
        }
    }

    fn objective(&self, y: &[f64]) -> f64 {
        self.costs.iter().zip(y).map(|(c, y)| c / y).sum()
    }

    fn slacks(&self, y: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| 1.0 - row.iter().zip(y).map(|(a, y)| a * y).sum::<f64>())
            .collect()
    }

    /// `t·f(y) − Σ log(slack)`, infinite outside the domain.
    fn barrier_value(&self, t: f64, y: &[f64]) -> f64 {
        if y.iter().any(|&v| v <= 0.0) {
            return f64::INFINITY;
        }
        let slacks = self.slacks(y);
        if slacks.iter().any(|&s| s <= 0.0) {
            return f64::INFINITY;
        }
        t * self.objective(y) - slacks.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// Returns `x`, the multipliers of the original constraints and the
    /// number of Newton steps taken.
    fn solve(&self) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let n = self.costs.len();
        let rows = self.rows.len();
        // Each row sums to at most n with entries ≤ 1, so this leaves slack ½.
        let mut y = vec![0.5 / n as f64; n];
        let mut t = rows as f64 / self.objective(&y);
        let mut iterations = 0;
        loop {
            iterations += self.centre(t, &mut y, MAX_ITERATIONS.saturating_sub(iterations))?;
            let gap = rows as f64 / t;
            if gap <= OBJECTIVE_TOLERANCE * self.objective(&y) {
                break;
            }
            t *= 20.0;
        }
        let slacks = self.slacks(&y);
        // Scaled row i is (a_i / b_i)·x ≤ 1 with multiplier 1/(t·s_i); the
        // multiplier of Σ a_ij / q_j ≤ b_i is that divided by b_i.
        let multipliers = slacks
            .iter()
            .zip(&self.rhs)
            .map(|(s, b)| 1.0 / (t * s * b))
            .collect();
        let x = y.iter().zip(&self.scale).map(|(y, s)| y * s).collect();
        Ok((x, multipliers, iterations))
    }

    /// Newton's method on the barrier function for fixed `t`.
    fn centre(&self, t: f64, y: &mut Vec<f64>, budget: usize) -> Result<usize> {
        let n = y.len();
        for step in 0..budget {
            let slacks = self.slacks(y);
            let mut grad = DVector::from_fn(n, |j, _| -t * self.costs[j] / (y[j] * y[j]));
            let mut hess = DMatrix::from_fn(n, n, |i, j| {
                if i == j {
                    2.0 * t * self.costs[j] / y[j].powi(3)
                } else {
                    0.0
                }
            });
            for (row, s) in self.rows.iter().zip(&slacks) {
                for i in 0..n {
                    grad[i] += row[i] / s;
                    for j in 0..n {
                        hess[(i, j)] += row[i] * row[j] / (s * s);
                    }
                }
            }
            let Some(chol) = hess.cholesky() else {
                return Err(Error::Convergence {
                    iterations: step,
                    residual: f64::NAN,
                });
            };
            let dir = chol.solve(&(-&grad));
            let decrement = -grad.dot(&dir);
            let current = self.barrier_value(t, y);
            // Below this the decrement is rounding noise in the barrier value.
            if decrement / 2.0 <= 1e-11f64.max(1e-13 * current.abs()) {
                return Ok(step);
            }
            let mut alpha = 1.0;
            loop {
                let trial: Vec<f64> = (0..n).map(|j| y[j] + alpha * dir[j]).collect();
                let value = self.barrier_value(t, &trial);
                if value <= current - 0.25 * alpha * decrement {
                    if trial == *y || current - value <= 1e-15 * current.abs() {
                        return Ok(step);
                    }
                    *y = trial;
                    break;
                }
                alpha *= 0.5;
                if alpha < 1e-20 {
                    // No progress is possible at machine precision.
                    return Ok(step);
                }
            }
        }
        Err(Error::Convergence {
            iterations: budget,
            residual: f64::NAN,
        })
    }
}

fn assemble(programs: &[ArmProgram], solutions: Vec<ArmSolution>, shape: (usize, usize)) -> OracleResult {
    let mut q = Matrix::zeros(shape.0, shape.1);
    let mut active = vec![vec![false; shape.1]; shape.0];
    let mut objective_value = 0.0;
    let mut kkt = 0.0f64;
    let mut iterations = 0;
    for (k, (program, sol)) in programs.iter().zip(solutions).enumerate() {
        for (&n, &value) in program.agents.iter().zip(&sol.q) {
            q[(k, n)] = value;
            active[k][n] = true;
        }
        objective_value += sol.objective;
        kkt = kkt.max(sol.kkt_residual);
        iterations += sol.iterations;
    }
    OracleResult {
        allocation: AllocationMatrix { q, active },
        objective_value,
        kkt_residual: kkt,
        iterations,
    }
}

/// Solves a program arm by arm with the barrier solver.
pub fn solve(spec: &ProgramSpec) -> Result<OracleResult> {
    let programs = spec.arm_programs()?;
    let solutions = programs.iter().map(solve_arm).collect::<Result<Vec<_>>>()?;
    Ok(assemble(&programs, solutions, spec.shape()))
}

/// Relaxed oracle `P(Δ)`: minimise `Σ q_{k,m} Δ_{k,m}` subject to
/// `Σ_n w²_{n,m}/q_{k,n} ≤ Δ²_{k,m}/2` for all `k, m`.
pub fn solve_relaxed(delta: &Matrix, weights: &WeightMatrix) -> Result<OracleResult> {
    solve(&ProgramSpec::Relaxed {
        delta: delta.clone(),
        weights: weights.clone(),
    })
}

/// Lower-bound complexity `c*`.
pub fn solve_lower_bound(gaps: &GapSummary, weights: &WeightMatrix) -> Result<OracleResult> {
    solve(&ProgramSpec::LowerBound {
        gaps: gaps.clone(),
        weights: weights.clone(),
    })
}

/// Sample-complexity term `s*`.
pub fn solve_sample_complexity(gaps: &GapSummary, weights: &WeightMatrix) -> Result<OracleResult> {
    solve(&ProgramSpec::SampleComplexity {
        gaps: gaps.clone(),
        weights: weights.clone(),
    })
}

/// `Σ q_{k,m} Δ_{k,m}`; zero allocations contribute nothing.
pub fn complexity_value(allocation: &Matrix, delta: &Matrix) -> Result<f64> {
    allocation.ensure_same_shape(delta)?;
    Ok(allocation
        .iter()
        .zip(delta.iter())
        .filter(|(&q, _)| q != 0.0)
        .map(|(q, d)| q * d)
        .sum())
}

/// `max_{k,m} (Σ_n w²_{n,m}/q_{k,n} − Δ²_{k,m}/2)`; `≤ 0` means feasible.
///
/// With `exclude_best`, agents `n` whose best arm is `k` are left out of
/// arm `k`'s sums, as in the lower-bound program.
pub fn check_feasibility(
    allocation: &Matrix,
    delta: &Matrix,
    weights: &WeightMatrix,
    exclude_best: Option<&[usize]>,
) -> Result<f64> {
    allocation.ensure_same_shape(delta)?;
    let (arms, agents) = delta.shape();
    if weights.agents() != agents || exclude_best.is_some_and(|b| b.len() != agents) {
        return Err(Error::Shape("weights or best-arm vector do not match".into()));
    }
    let mut worst = f64::NEG_INFINITY;
    for k in 0..arms {
        for m in 0..agents {
            let lhs: f64 = (0..agents)
                .filter(|&n| exclude_best.is_none_or(|b| b[n] != k))
                .filter(|&n| weights.get(n, m) > 0.0)
                .map(|n| weights.get(n, m).powi(2) / allocation[(k, n)])
                .sum();
            worst = worst.max(lhs - delta[(k, m)].powi(2) / 2.0);
        }
    }
    Ok(worst)
}

/// Largest `K·M` the reference solver accepts.
pub const REFERENCE_MAX_SIZE: usize = 16;

/// Independent reference solver for small programs, used to validate
/// [`solve`].
///
/// Works on the dual of each arm's subproblem,
/// `max_{λ ≥ 0} 2 Σ_j sqrt(c_j Σ_i λ_i a_ij) − Σ_i λ_i b_i`,
/// by exhaustive pattern search over `λ` (axis and pairwise diagonal
/// moves) whose step is halved around the incumbent whenever no move
/// improves. The reported objective is the dual value, a lower bound
/// on the optimum that is tight at convergence; the allocation is the
/// primal point `q_j = sqrt(Σ_i λ_i a_ij / c_j)` rescaled to feasibility.
pub fn solve_reference(spec: &ProgramSpec) -> Result<OracleResult> {
    let (arms, agents) = spec.shape();
    if arms * agents > REFERENCE_MAX_SIZE {
        return Err(Error::TooLarge(format!(
            "K·M = {} exceeds {REFERENCE_MAX_SIZE}",
            arms * agents
        )));
    }
    let programs = spec.arm_programs()?;
    let solutions = programs.iter().map(reference_arm).collect();
    Ok(assemble(&programs, solutions, (arms, agents)))
}

fn reference_arm(program: &ArmProgram) -> ArmSolution {
    let (reduced, dropped) = program.reduced();
    let mut q = vec![0.0; program.agents.len()];
    if reduced.agents.is_empty() {
        return ArmSolution {
            q,
            objective: 0.0,
            kkt_residual: 0.0,
            iterations: 0,
        };
    }
    let n = reduced.agents.len();
    let rows = &reduced.constraints;
    let dual = |lambda: &[f64]| -> f64 {
        let mut value = -lambda.iter().zip(rows).map(|(l, (_, b))| l * b).sum::<f64>();
        for j in 0..n {
            let pull: f64 = lambda.iter().zip(rows).map(|(l, (a, _))| l * a[j]).sum();
            value += 2.0 * (reduced.costs[j] * pull).sqrt();
        }
        value
    };
    // Equal multipliers at their best common value.
    let unit = {
        let root: f64 = (0..n)
            .map(|j| (reduced.costs[j] * rows.iter().map(|(a, _)| a[j]).sum::<f64>()).sqrt())
            .sum();
        let b: f64 = rows.iter().map(|(_, b)| b).sum();
        (root / b).powi(2)
    };
    // The dual is concave in λ, so a pattern search over λ itself (clamped
    // at zero) cannot stall short of the maximum. Axis moves alone crawl
    // along curved ridges, so pairwise diagonal moves are tried as well.
    let r = rows.len();
    let mut directions: Vec<Vec<f64>> = Vec::new();
    for i in 0..r {
        for s in [1.0, -1.0] {
            let mut d = vec![0.0; r];
            d[i] = s;
            directions.push(d);
        }
        for j in i + 1..r {
            for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let mut d = vec![0.0; r];
                d[i] = si;
                d[j] = sj;
                directions.push(d);
            }
        }
    }
    let mut lambda = vec![unit; r];
    let mut best = dual(&lambda);
    let mut iterations = 0;
    let mut step = unit;
    while step > 1e-13 * unit {
        let mut improved = false;
        for d in &directions {
            // Keep moving along a successful direction, doubling the stride.
            let mut stride = step;
            loop {
                let trial: Vec<f64> = lambda.iter().zip(d).map(|(l, d)| (l + d * stride).max(0.0)).collect();
                iterations += 1;
                let value = dual(&trial);
                if value > best {
                    best = value;
                    lambda = trial;
                    improved = true;
                    stride *= 2.0;
                } else {
                    break;
                }
            }
        }
        if !improved {
            step /= 2.0;
        }
    }
    let mut primal: Vec<f64> = (0..n)
        .map(|j| {
            let pull: f64 = lambda.iter().zip(rows).map(|(l, (a, _))| l * a[j]).sum();
            (pull / reduced.costs[j]).sqrt()
        })
        .collect();
    let excess = reduced.max_relative_violation(&primal).max(0.0);
    for v in &mut primal {
        *v *= 1.0 + excess;
    }
    let primal_value = reduced.objective(&primal);
    let mut slot = 0;
    for (j, value) in q.iter_mut().enumerate() {
        if !dropped.contains(&j) {
            *value = primal[slot];
            slot += 1;
        }
    }
    ArmSolution {
        q,
        objective: best,
        // Duality gap between the rescaled primal point and the dual value.
        kkt_residual: (primal_value - best).abs() / primal_value.max(f64::MIN_POSITIVE),
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BanditInstance;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn single_agent() -> BanditInstance {
        let mu = Matrix::from_rows(&[vec![1.0], vec![0.5]]).unwrap();
        BanditInstance::new(mu, 1.0, WeightMatrix::identity(1)).unwrap()
    }

    #[test]
    fn relaxed_single_agent_closed_form() {
        let delta = Matrix::filled(2, 1, 0.5);
        let r = solve_relaxed(&delta, &WeightMatrix::identity(1)).unwrap();
        assert!(rel(r.allocation.get(0, 0), 8.0) < 1e-9);
        assert!(rel(r.allocation.get(1, 0), 8.0) < 1e-9);
        assert!(rel(r.objective_value, 8.0) < 1e-10);
        assert!(r.kkt_residual <= 1e-8);
    }

    #[test]
    fn relaxed_symmetric_two_agents() {
        let delta = Matrix::filled(2, 2, 0.5);
        let r = solve_relaxed(&delta, &WeightMatrix::uniform(2)).unwrap();
        for v in r.allocation.q.iter() {
            assert!(rel(*v, 4.0) < 1e-9, "{v}");
        }
        assert!(rel(r.objective_value, 8.0) < 1e-10);
    }

    #[test]
    fn relaxed_homogeneity() {
        let delta = Matrix::from_rows(&[vec![0.3, 1.1, 0.7], vec![0.9, 0.2, 1.5]]).unwrap();
        let w = WeightMatrix::new(&[
            vec![0.6, 0.1, 0.3],
            vec![0.3, 0.8, 0.3],
            vec![0.1, 0.1, 0.4],
        ])
        .unwrap();
        let base = solve_relaxed(&delta, &w).unwrap();
        let doubled = solve_relaxed(&delta.map(|d| 2.0 * d), &w).unwrap();
        assert!(rel(doubled.objective_value, base.objective_value / 2.0) < 1e-8);
        for (a, b) in doubled.allocation.q.iter().zip(base.allocation.q.iter()) {
            assert!(rel(*a, b / 4.0) < 1e-8);
        }
    }

    #[test]
    fn relaxed_rejects_tiny_gap() {
        let delta = Matrix::from_rows(&[vec![0.5], vec![0.0]]).unwrap();
        assert!(matches!(
            solve_relaxed(&delta, &WeightMatrix::identity(1)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn lower_bound_single_agent() {
        let inst = single_agent();
        let r = solve_lower_bound(&inst.gaps(), inst.weights()).unwrap();
        assert!(rel(r.objective_value, 4.0) < 1e-10);
        assert!(!r.allocation.is_active(0, 0));
        assert_eq!(r.allocation.get(0, 0), 0.0);
        assert!(rel(r.allocation.get(1, 0), 8.0) < 1e-9);
    }

    #[test]
    fn sample_complexity_single_agent() {
        let inst = single_agent();
        let r = solve_sample_complexity(&inst.gaps(), inst.weights()).unwrap();
        assert!(rel(r.objective_value, 8.0) < 1e-10);
    }

    #[test]
    fn shared_best_arm_gives_vacuous_constraints() {
        // Both agents prefer arm 0: arm 0 has no variables at all.
        let mu = Matrix::from_rows(&[vec![1.0, 0.9], vec![0.2, 0.4], vec![0.5, 0.1]]).unwrap();
        let inst = BanditInstance::new(mu, 1.0, WeightMatrix::uniform(2)).unwrap();
        let r = solve_lower_bound(&inst.gaps(), inst.weights()).unwrap();
        assert!(r.objective_value.is_finite() && r.objective_value > 0.0);
        assert!(!r.allocation.is_active(0, 0) && !r.allocation.is_active(0, 1));
    }

    #[test]
    fn complexity_value_arithmetic() {
        let q = Matrix::filled(2, 1, 8.0);
        assert_eq!(complexity_value(&q, &Matrix::filled(2, 1, 0.5)).unwrap(), 8.0);
        let q = Matrix::filled(2, 2, 4.0);
        assert_eq!(complexity_value(&q, &Matrix::filled(2, 2, 0.5)).unwrap(), 8.0);
        assert!(complexity_value(&q, &Matrix::filled(2, 1, 0.5)).is_err());
    }

    #[test]
    fn feasibility_boundary_slack_and_violation() {
        let w = WeightMatrix::identity(1);
        let d = Matrix::filled(1, 1, 0.5);
        let at = |q: f64| check_feasibility(&Matrix::filled(1, 1, q), &d, &w, None).unwrap();
        assert_eq!(at(8.0), 0.0);
        assert_eq!(at(16.0), -0.0625);
        assert_eq!(at(4.0), 0.125);
    }

    #[test]
    fn reference_agrees_on_closed_forms() {
        let relaxed = ProgramSpec::Relaxed {
            delta: Matrix::filled(2, 1, 0.5),
            weights: WeightMatrix::identity(1),
        };
        assert!(rel(solve_reference(&relaxed).unwrap().objective_value, 8.0) < 1e-4);
        let sym = ProgramSpec::Relaxed {
            delta: Matrix::filled(2, 2, 0.5),
            weights: WeightMatrix::uniform(2),
        };
        assert!(rel(solve_reference(&sym).unwrap().objective_value, 8.0) < 1e-4);
        let inst = single_agent();
        let lb = ProgramSpec::LowerBound {
            gaps: inst.gaps(),
            weights: inst.weights().clone(),
        };
        assert!(rel(solve_reference(&lb).unwrap().objective_value, 4.0) < 1e-4);
    }

    #[test]
    fn reference_size_cap() {
        let spec = ProgramSpec::Relaxed {
            delta: Matrix::filled(5, 4, 0.5),
            weights: WeightMatrix::uniform(4),
        };
        assert!(matches!(solve_reference(&spec), Err(Error::TooLarge(_))));
    }
}
