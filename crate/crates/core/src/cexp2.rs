//! CExp²: explore every arm a few times, run one oracle-guided exploration
//! phase, then either commit or hand over to a fallback policy.
//!
//! ```text
//! initial     each agent plays each arm τ₁ = ⌈√log T⌉ times        → broadcast
//! guided      top counts up to max(τ₁, ⌈18 q^ge B(T)⌉)             → broadcast
//!             where q^ge = P(Δ̂^ge) and Δ̂^ge is the clamped estimate
//! exploit     if Ω^{1/T}_{k,m} < Δ̂'_{k,m}/2 for every (k, m), commit to argmax μ̂'
//! fallback    otherwise drop all data and run W-CPE-Reg
//! ```

use serde::Serialize;

use crate::confidence::{horizon_bound, ConfidenceParams};
use crate::error::{Error, Result};
use crate::estimates::{empirical_best, empirical_gaps, SampleStats};
use crate::matrix::Matrix;
use crate::model::WeightMatrix;
use crate::oracle::solve_relaxed;
use crate::sim::{Communication, Phase, PhaseMarker, Policy, PolicyReport};
use crate::wcpe::Wcpe;

/// Smallest horizon for which the clamp interval is ordered.
pub const MIN_HORIZON: u64 = 16;

/// Multiplier on the oracle allocation in the guided targets.
pub const GUIDED_FACTOR: f64 = 18.0;

/// `τ₁ = ⌈√log T⌉`.
pub fn initial_pulls(horizon: u64) -> u64 {
    ((horizon as f64).ln().max(0.0).sqrt().ceil() as u64).max(1)
}

/// `(1/log log T, log log T)`.
pub fn clamp_interval(horizon: u64) -> Result<(f64, f64)> {
    if horizon < MIN_HORIZON {
        return Err(Error::Config(format!(
            "horizon {horizon} is below {MIN_HORIZON}; the gap clamp interval would be empty"
        )));
    }
    let ll = (horizon as f64).ln().ln();
    Ok((1.0 / ll, ll))
}

/// Entrywise clamp of gap estimates onto `[lo, hi]`.
pub fn project_gaps_onto(raw: &Matrix, lo: f64, hi: f64) -> Matrix {
    raw.map(|g| g.max(lo).min(hi))
}

/// Clamps gap estimates onto the horizon's interval.
pub fn project_gaps(raw: &Matrix, horizon: u64) -> Result<Matrix> {
    let (lo, hi) = clamp_interval(horizon)?;
    Ok(project_gaps_onto(raw, lo, hi))
}

/// `max(τ₁, ⌈18 q B⌉)` entrywise, as `[arm][agent]`.
pub fn guided_targets(q: &Matrix, bound: f64, tau1: u64) -> Vec<Vec<u64>> {
    (0..q.rows())
        .map(|k| {
            (0..q.cols())
                .map(|m| ((GUIDED_FACTOR * q[(k, m)] * bound).ceil() as u64).max(tau1))
                .collect()
        })
        .collect()
}

/// Guided allocation and targets for the projected gaps.
pub fn guided_allocation(
    projected: &Matrix,
    weights: &WeightMatrix,
    horizon: u64,
    sigma: f64,
) -> Result<(Matrix, Vec<Vec<u64>>)> {
    let q = solve_relaxed(projected, weights)?.allocation.q;
    let bound = horizon_bound(projected.rows(), weights.agents(), horizon, sigma)?;
    let targets = guided_targets(&q, bound, initial_pulls(horizon));
    Ok((q, targets))
}

/// Condition `𝒞`: every radius strictly below half the estimated gap.
pub fn switch_condition(gaps: &Matrix, omega: &Matrix) -> bool {
    gaps.iter().zip(omega.iter()).all(|(&g, &w)| w < g / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CExp2Phase {
    InitialExploration,
    GuidedExploration,
    Exploit,
    Fallback,
}

/// Checkpoint data of a CExp² run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CExp2Report {
    pub tau1: u64,
    /// Round ending initial exploration (per-agent clock, `K τ₁`).
    pub t_ie_round: Option<u64>,
    /// Total pulls over all agents at that point (`M K τ₁`).
    pub t_ie_pulls: Option<u64>,
    pub t_ge_round: Option<u64>,
    pub projected_gaps: Option<Matrix>,
    pub targets: Option<Vec<Vec<u64>>>,
    /// Tilde-form gap estimates at `T_ge`.
    pub gaps_at_ge: Option<Matrix>,
    pub omega_at_ge: Option<Matrix>,
    /// `τ_{k,m}(T_ge)`, `[arm][agent]`.
    pub counts_at_ge: Option<Vec<Vec<u64>>>,
    pub condition: Option<bool>,
    pub final_phase: CExp2Phase,
}

/// The CExp² policy.
#[derive(Debug, Clone)]
pub struct CExp2 {
    arms: usize,
    agents: usize,
    weights: WeightMatrix,
    sigma: f64,
    horizon: u64,
    tau1: u64,
    phase: CExp2Phase,
    rounds: u64,
    stats: SampleStats,
    /// Arm-major guided targets.
    targets: Vec<u64>,
    leaders: Vec<usize>,
    committed: Option<Vec<usize>>,
    fallback: Option<Wcpe>,
    ledger: Vec<Communication>,
    markers: Vec<PhaseMarker>,
    report: CExp2Report,
}

impl CExp2 {
    pub fn new(arms: usize, weights: WeightMatrix, sigma: f64, horizon: u64) -> Result<Self> {
        clamp_interval(horizon)?;
        ConfidenceParams::new(arms, weights.agents(), 0.5, sigma)?;
        let agents = weights.agents();
        let tau1 = initial_pulls(horizon);
        Ok(Self {
            arms,
            agents,
            weights,
            sigma,
            horizon,
            tau1,
            phase: CExp2Phase::InitialExploration,
            rounds: 0,
            stats: SampleStats::new(arms, agents),
            targets: Vec::new(),
            leaders: Vec::new(),
            committed: None,
            fallback: None,
            ledger: Vec::new(),
            markers: vec![PhaseMarker {
                round: 0,
                phase: Phase::InitialExploration,
            }],
            report: CExp2Report {
                tau1,
                t_ie_round: None,
                t_ie_pulls: None,
                t_ge_round: None,
                projected_gaps: None,
                targets: None,
                gaps_at_ge: None,
                omega_at_ge: None,
                counts_at_ge: None,
                condition: None,
                final_phase: CExp2Phase::InitialExploration,
            },
        })
    }

    pub fn phase(&self) -> CExp2Phase {
        self.phase
    }

    pub fn tau1(&self) -> u64 {
        self.tau1
    }

    pub fn stats(&self) -> &SampleStats {
        &self.stats
    }

    pub fn cexp2_report(&self) -> &CExp2Report {
        &self.report
    }

    /// Arm agent `m` plays in the coming round.
    pub fn next_action(&self, agent: usize) -> usize {
        match self.phase {
            CExp2Phase::InitialExploration => (self.rounds % self.arms as u64) as usize,
            CExp2Phase::GuidedExploration => (0..self.arms)
                .find(|&k| self.stats.count(k, agent) < self.targets[k * self.agents + agent])
                .unwrap_or(self.leaders[agent]),
            CExp2Phase::Exploit => self.committed.as_ref().expect("exploit has arms")[agent],
            CExp2Phase::Fallback => self.fallback.as_ref().expect("fallback policy").next_action(agent),
        }
    }

    fn communicate(&mut self, round: u64) -> Result<Matrix> {
        self.ledger.push(Communication {
            round,
            payload: self.arms * self.agents,
        });
        self.stats.mixed_means(&self.weights).ok_or_else(|| Error::Invariant {
            round,
            reason: "broadcast with an unpulled arm".into(),
        })
    }

    fn end_initial(&mut self, round: u64) -> Result<()> {
        let mixed = self.communicate(round)?;
        let projected = project_gaps(&empirical_gaps(&mixed), self.horizon)?;
        let (_, targets) = guided_allocation(&projected, &self.weights, self.horizon, self.sigma)?;
        self.targets = targets.iter().flatten().copied().collect();
        self.leaders = empirical_best(&mixed);
        self.report.t_ie_round = Some(round);
        self.report.t_ie_pulls = Some(self.stats.total_pulls());
        self.report.projected_gaps = Some(projected);
        self.report.targets = Some(targets);
        self.enter(round, CExp2Phase::GuidedExploration, Phase::GuidedExploration);
        Ok(())
    }

    fn guided_done(&self) -> bool {
        (0..self.arms).all(|k| (0..self.agents).all(|m| self.stats.count(k, m) >= self.targets[k * self.agents + m]))
    }

    fn end_guided(&mut self, round: u64) -> Result<()> {
        let mixed = self.communicate(round)?;
        let gaps = empirical_gaps(&mixed);
        let params = ConfidenceParams::new(self.arms, self.agents, 1.0 / self.horizon as f64, self.sigma)?;
        let omega = self.stats.radii(&self.weights, &params)?;
        let condition = switch_condition(&gaps, &omega);
        self.report.t_ge_round = Some(round);
        self.report.gaps_at_ge = Some(gaps);
        self.report.omega_at_ge = Some(omega);
        self.report.counts_at_ge = Some(self.stats.counts_matrix());
        self.report.condition = Some(condition);
        if condition {
            self.committed = Some(empirical_best(&mixed));
            self.enter(round, CExp2Phase::Exploit, Phase::Exploit);
        } else {
            self.enter(round, CExp2Phase::Fallback, Phase::Fallback);
            // All data is dropped: the fallback starts from nothing.
            self.fallback = Some(Wcpe::new(self.arms, self.weights.clone(), self.sigma, self.horizon, round)?);
        }
        Ok(())
    }

    fn enter(&mut self, round: u64, phase: CExp2Phase, marker: Phase) {
        self.phase = phase;
        self.report.final_phase = phase;
        self.markers.push(PhaseMarker { round, phase: marker });
    }
}

impl Policy for CExp2 {
    fn select(&mut self, _round: u64, arms: &mut [usize]) -> Result<()> {
        for (m, arm) in arms.iter_mut().enumerate() {
            *arm = self.next_action(m);
        }
        Ok(())
    }

    fn observe(&mut self, round: u64, arms: &[usize], rewards: &[f64]) -> Result<()> {
        self.rounds += 1;
        if let Some(fallback) = &mut self.fallback {
            return fallback.observe(round, arms, rewards);
        }
        for (m, (&k, &x)) in arms.iter().zip(rewards).enumerate() {
            self.stats.record(k, m, x);
        }
        match self.phase {
            CExp2Phase::InitialExploration if self.rounds == self.arms as u64 * self.tau1 => self.end_initial(round),
            CExp2Phase::GuidedExploration if self.guided_done() => self.end_guided(round),
            _ => Ok(()),
        }
    }

    fn committed(&self) -> Option<&[usize]> {
        match self.phase {
            CExp2Phase::Exploit => self.committed.as_deref(),
            CExp2Phase::Fallback => self.fallback.as_ref().and_then(|f| f.committed()),
            _ => None,
        }
    }

    fn ledger_len(&self) -> usize {
        self.ledger.len() + self.fallback.as_ref().map_or(0, |f| f.ledger().len())
    }

    fn report(&self) -> PolicyReport {
        let mut communications = self.ledger.clone();
        let mut phases = self.markers.clone();
        let (final_arms, horizon_exhausted, wcpe) = match self.phase {
            CExp2Phase::Exploit => (self.committed.clone().expect("exploit has arms"), false, None),
            CExp2Phase::Fallback => {
                let inner = self.fallback.as_ref().expect("fallback policy").report();
                communications.extend(inner.communications);
                phases.extend(self.fallback.as_ref().expect("fallback policy").markers().iter().cloned());
                (inner.final_arms, inner.horizon_exhausted, inner.wcpe)
            }
            CExp2Phase::GuidedExploration => (self.leaders.clone(), true, None),
            CExp2Phase::InitialExploration => {
                let arms = (0..self.agents)
                    .map(|m| {
                        crate::estimates::argmax_among(
                            |k| self.stats.local_mean(k, m).unwrap_or(f64::NEG_INFINITY),
                            0..self.arms,
                        )
                        .unwrap_or(0)
                    })
                    .collect();
                (arms, true, None)
            }
        };
        PolicyReport {
            final_arms,
            horizon_exhausted,
            communications,
            phases,
            cexp2: Some(self.report.clone()),
            wcpe,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_clamps() {
        let raw = Matrix::from_rows(&[vec![0.5, 0.1, 5.0]]).unwrap();
        let p = project_gaps_onto(&raw, 0.5, 2.0);
        assert_eq!(p.row(0), &[0.5, 0.5, 2.0]);
        let (lo, hi) = clamp_interval(1619).unwrap();
        assert!((hi - 2.0).abs() < 1e-3 && (lo - 0.5).abs() < 1e-3);
        assert!(matches!(project_gaps(&raw, 15), Err(Error::Config(_))));
        assert!(project_gaps(&raw, 16).is_ok());
    }

    #[test]
    fn targets_take_ceiling_then_floor() {
        // 18 q B = 7.2 and 2.2 with B = 1.
        let q = Matrix::from_rows(&[vec![0.4, 2.2 / 18.0]]).unwrap();
        assert_eq!(guided_targets(&q, 1.0, 5), vec![vec![8, 5]]);
    }

    #[test]
    fn single_agent_guided_targets() {
        let projected = Matrix::from_rows(&[vec![0.5], vec![0.5]]).unwrap();
        let q = solve_relaxed(&projected, &WeightMatrix::identity(1)).unwrap().allocation.q;
        assert!((q[(0, 0)] - 8.0).abs() < 1e-6 && (q[(1, 0)] - 8.0).abs() < 1e-6);
        let targets = guided_targets(&q, 20.0, 4);
        assert_eq!(targets, vec![vec![2880], vec![2880]]);
    }

    #[test]
    fn condition_is_strict() {
        let gaps = Matrix::filled(2, 2, 0.5);
        assert!(switch_condition(&gaps, &Matrix::filled(2, 2, 0.1)));
        let mut omega = Matrix::filled(2, 2, 0.1);
        omega[(1, 0)] = 0.25;
        assert!(!switch_condition(&gaps, &omega));
    }

    #[test]
    fn initial_pulls_and_round_robin() {
        assert_eq!(initial_pulls(100_000), 4);
        assert_eq!(initial_pulls(16), 2);
        let p = CExp2::new(3, WeightMatrix::uniform(2), 1.0, 1000).unwrap();
        assert_eq!(p.next_action(0), 0);
        assert_eq!(p.next_action(1), 0);
        assert!(CExp2::new(3, WeightMatrix::uniform(2), 1.0, 10).is_err());
    }

    #[test]
    fn exploit_commits_to_argmax() {
        let mut p = CExp2::new(2, WeightMatrix::identity(1), 1.0, 1000).unwrap();
        p.committed = Some(vec![0]);
        p.phase = CExp2Phase::Exploit;
        for _ in 0..5 {
            assert_eq!(p.next_action(0), 0);
        }
    }
}
