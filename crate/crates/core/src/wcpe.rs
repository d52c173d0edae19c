//! W-CPE-Reg: phased elimination at confidence `δ = 1/T`, after which every
//! agent commits to its surviving arm.
//!
//! Phase `r` works at precision `ε_r = 2^{1−r}`:
//!
//! 1. surrogate gaps `Δ̄ = max(Δ̂', ε_r)` from the last broadcast (`ε_1 = 1`
//!    everywhere in the first phase);
//! 2. `q = P(Δ̄)` with constraints only on active (arm, agent) pairs;
//! 3. every agent tops its counts up to `⌈8 q B(T)⌉`;
//! 4. one communication round;
//! 5. arm `k` leaves `S_m` once its upper bound falls below the best lower
//!    bound in `S_m`.

use serde::Serialize;

use crate::confidence::{horizon_bound, ConfidenceParams};
use crate::error::{Error, Result};
use crate::estimates::{argmax_among, SampleStats};
use crate::matrix::Matrix;
use crate::model::WeightMatrix;
use crate::oracle::{solve, ProgramSpec};
use crate::sim::{Communication, Phase, PhaseMarker, Policy, PolicyReport};

/// Multiplier on the oracle allocation in the per-phase budget.
pub const PHASE_BUDGET_FACTOR: f64 = 8.0;

/// What a W-CPE-Reg run reports beyond the common policy report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WcpeReport {
    /// Completed phases, one communication round each.
    pub phases: usize,
    /// Precision index of the phase in progress (or the last one).
    pub precision_index: u32,
    /// Round after which every agent committed, if it happened.
    pub committed_round: Option<u64>,
    /// Active sets `S_m` after each completed phase, indexed `[phase][agent][arm]`.
    #[serde(skip)]
    pub active_history: Vec<Vec<Vec<bool>>>,
}

/// Phase-`r` surrogate gaps.
///
/// For an active arm the gap is measured inside `S_m`, in the tilde form;
/// an eliminated arm gets its gap to the best active arm. Everything is
/// floored at `ε`. Without estimates every entry is `ε`.
pub fn surrogate_gaps(estimates: Option<&Matrix>, active: &[Vec<bool>], epsilon: f64) -> Matrix {
    let agents = active.len();
    let arms = active.first().map_or(0, Vec::len);
    let Some(mu) = estimates else {
        return Matrix::filled(arms, agents, epsilon);
    };
    let mut out = Matrix::zeros(arms, agents);
    for (m, set) in active.iter().enumerate() {
        let members = || (0..arms).filter(|&k| set[k]);
        let best = argmax_among(|k| mu[(k, m)], members()).expect("active set is never empty");
        for k in 0..arms {
            let gap = if k == best {
                members()
                    .filter(|&j| j != best)
                    .map(|j| mu[(best, m)] - mu[(j, m)])
                    .fold(f64::INFINITY, f64::min)
            } else {
                mu[(best, m)] - mu[(k, m)]
            };
            // A lone survivor has no constraint; its cost entry only needs
            // to be finite.
            out[(k, m)] = if gap.is_finite() { gap.max(epsilon) } else { epsilon };
        }
    }
    out
}

/// Cumulative phase targets `max(τ, ⌈8 q B⌉)`, at least one pull of every
/// arm still active for some agent. Arm-major, like the counts.
pub fn phase_targets(q: &Matrix, budget: f64, counts: &SampleStats, relevant: &[bool]) -> Vec<u64> {
    let (arms, agents) = q.shape();
    let mut targets = Vec::with_capacity(arms * agents);
    for k in 0..arms {
        for n in 0..agents {
            let have = counts.count(k, n);
            let want = if relevant[k] {
                ((PHASE_BUDGET_FACTOR * q[(k, n)] * budget).ceil() as u64).max(1)
            } else {
                0
            };
            targets.push(have.max(want));
        }
    }
    targets
}

/// Removes from each `S_m` the arms whose upper confidence bound is below
/// the best lower bound in `S_m`. Returns the removed `(agent, arm)` pairs.
pub fn eliminate(estimates: &Matrix, radii: &Matrix, active: &mut [Vec<bool>]) -> Vec<(usize, usize)> {
    let mut removed = Vec::new();
    for (m, set) in active.iter_mut().enumerate() {
        let best_lower = (0..set.len())
            .filter(|&k| set[k])
            .map(|k| estimates[(k, m)] - radii[(k, m)])
            .fold(f64::NEG_INFINITY, f64::max);
        for k in 0..set.len() {
            if set[k] && estimates[(k, m)] + radii[(k, m)] < best_lower {
                set[k] = false;
                removed.push((m, k));
            }
        }
    }
    removed
}

/// The W-CPE-Reg policy.
#[derive(Debug, Clone)]
pub struct Wcpe {
    arms: usize,
    agents: usize,
    weights: WeightMatrix,
    params: ConfidenceParams,
    budget: f64,
    precision_index: u32,
    epsilon: f64,
    /// `S_m`, indexed `[agent][arm]`.
    active: Vec<Vec<bool>>,
    stats: SampleStats,
    targets: Vec<u64>,
    estimates: Option<Matrix>,
    committed: Option<Vec<usize>>,
    committed_round: Option<u64>,
    ledger: Vec<Communication>,
    markers: Vec<PhaseMarker>,
    history: Vec<Vec<Vec<bool>>>,
}

impl Wcpe {
    /// A fresh run with no data. `round` is the last round already played
    /// (0 for a standalone run) and stamps the first phase marker.
    pub fn new(arms: usize, weights: WeightMatrix, sigma: f64, horizon: u64, round: u64) -> Result<Self> {
        if horizon < 3 {
            return Err(Error::Config(format!("horizon must be at least 3, got {horizon}")));
        }
        let agents = weights.agents();
        let params = ConfidenceParams::new(arms, agents, 1.0 / horizon as f64, sigma)?;
        let budget = horizon_bound(arms, agents, horizon, sigma)?;
        let mut state = Self {
            arms,
            agents,
            weights,
            params,
            budget,
            precision_index: 1,
            epsilon: 1.0,
            active: vec![vec![true; arms]; agents],
            stats: SampleStats::new(arms, agents),
            targets: vec![0; arms * agents],
            estimates: None,
            committed: None,
            committed_round: None,
            ledger: Vec::new(),
            markers: Vec::new(),
            history: Vec::new(),
        };
        if arms == 1 {
            state.commit(round);
        } else {
            state.begin_phase(round)?;
        }
        Ok(state)
    }

    pub fn active_sets(&self) -> &[Vec<bool>] {
        &self.active
    }

    pub fn precision(&self) -> f64 {
        self.epsilon
    }

    pub fn targets(&self) -> &[u64] {
        &self.targets
    }

    fn commit(&mut self, round: u64) {
        let arms = self
            .active
            .iter()
            .map(|set| set.iter().position(|&a| a).expect("active set is never empty"))
            .collect();
        self.committed = Some(arms);
        self.committed_round = Some(round);
        self.markers.push(PhaseMarker {
            round,
            phase: Phase::Commit,
        });
    }

    fn relevant_arms(&self) -> Vec<bool> {
        (0..self.arms)
            .map(|k| self.active.iter().any(|set| set[k]))
            .collect()
    }

    fn has_deficit(&self, targets: &[u64]) -> bool {
        (0..self.arms).any(|k| (0..self.agents).any(|n| self.stats.count(k, n) < targets[k * self.agents + n]))
    }

    fn begin_phase(&mut self, round: u64) -> Result<()> {
        let relevant = self.relevant_arms();
        let mask: Vec<Vec<bool>> = (0..self.arms)
            .map(|k| (0..self.agents).map(|m| self.active[m][k]).collect())
            .collect();
        // Targets never shrink, so a phase built from unchanged estimates can
        // ask for nothing new. Dropping the estimates and then refining ε
        // guarantees progress.
        let mut use_estimates = true;
        loop {
            let estimates = if use_estimates { self.estimates.as_ref() } else { None };
            let delta = surrogate_gaps(estimates, &self.active, self.epsilon);
            let q = solve(&ProgramSpec::RelaxedSubset {
                delta,
                active: mask.clone(),
                weights: self.weights.clone(),
            })?
            .allocation
            .q;
            let targets = phase_targets(&q, self.budget, &self.stats, &relevant);
            if self.has_deficit(&targets) {
                self.targets = targets;
                break;
            }
            if use_estimates && self.estimates.is_some() {
                use_estimates = false;
            } else {
                self.precision_index += 1;
                self.epsilon /= 2.0;
            }
        }
        self.markers.push(PhaseMarker {
            round,
            phase: Phase::Elimination(self.precision_index),
        });
        Ok(())
    }

    fn phase_done(&self) -> bool {
        !self.has_deficit(&self.targets)
    }

    fn close_phase(&mut self, round: u64) -> Result<()> {
        let estimates = self
            .stats
            .mixed_means(&self.weights)
            .ok_or_else(|| Error::Invariant {
                round,
                reason: "phase ended with an unpulled arm".into(),
            })?;
        self.ledger.push(Communication {
            round,
            payload: self.arms * self.agents,
        });
        let radii = self.stats.radii(&self.weights, &self.params)?;
        eliminate(&estimates, &radii, &mut self.active);
        if self.active.iter().any(|set| !set.contains(&true)) {
            return Err(Error::Invariant {
                round,
                reason: "elimination emptied an active set".into(),
            });
        }
        self.estimates = Some(estimates);
        self.history.push(self.active.clone());
        if self.active.iter().all(|set| set.iter().filter(|&&a| a).count() == 1) {
            self.commit(round);
        } else {
            self.precision_index += 1;
            self.epsilon /= 2.0;
            self.begin_phase(round)?;
        }
        Ok(())
    }

    /// Best arm of `S_m` under the latest broadcast, or under the agent's
    /// own local means before the first one.
    fn preferred_arm(&self, agent: usize) -> usize {
        let set = &self.active[agent];
        let members = (0..self.arms).filter(|&k| set[k]);
        match &self.estimates {
            Some(mu) => argmax_among(|k| mu[(k, agent)], members),
            None => argmax_among(
                |k| self.stats.local_mean(k, agent).unwrap_or(f64::NEG_INFINITY),
                members,
            ),
        }
        .expect("active set is never empty")
    }

    /// Lowest-index arm below its phase target, else the preferred arm.
    pub fn next_action(&self, agent: usize) -> usize {
        if let Some(arms) = &self.committed {
            return arms[agent];
        }
        (0..self.arms)
            .find(|&k| self.stats.count(k, agent) < self.targets[k * self.agents + agent])
            .unwrap_or_else(|| self.preferred_arm(agent))
    }

    pub fn wcpe_report(&self) -> WcpeReport {
        WcpeReport {
            phases: self.ledger.len(),
            precision_index: self.precision_index,
            committed_round: self.committed_round,
            active_history: self.history.clone(),
        }
    }

    pub(crate) fn markers(&self) -> &[PhaseMarker] {
        &self.markers
    }

    pub(crate) fn ledger(&self) -> &[Communication] {
        &self.ledger
    }
}

impl Policy for Wcpe {
    fn select(&mut self, _round: u64, arms: &mut [usize]) -> Result<()> {
        for (m, arm) in arms.iter_mut().enumerate() {
            *arm = self.next_action(m);
        }
        Ok(())
    }

    fn observe(&mut self, round: u64, arms: &[usize], rewards: &[f64]) -> Result<()> {
        for (m, (&k, &x)) in arms.iter().zip(rewards).enumerate() {
            self.stats.record(k, m, x);
        }
        if self.committed.is_none() && self.phase_done() {
            self.close_phase(round)?;
        }
        Ok(())
    }

    fn committed(&self) -> Option<&[usize]> {
        self.committed.as_deref()
    }

    fn ledger_len(&self) -> usize {
        self.ledger.len()
    }

    fn report(&self) -> PolicyReport {
        let (final_arms, horizon_exhausted) = match &self.committed {
            Some(arms) => (arms.clone(), false),
            None => ((0..self.agents).map(|m| self.preferred_arm(m)).collect(), true),
        };
        PolicyReport {
            final_arms,
            horizon_exhausted,
            communications: self.ledger.clone(),
            phases: self.markers.clone(),
            cexp2: None,
            wcpe: Some(self.wcpe_report()),
        }
    }
}
