//! Time-uniform confidence radii for mixed means.
//!
//! The radius for arm `k` and agent `m` combines every agent's pull count of
//! arm `k` through the squared weights of column `m`:
//!
//! ```text
//! Ω_{k,m}(t) = sqrt( β_δ(τ_{k,·}(t)) · Σ_n w²_{n,m} / τ_{k,n}(t) )
//! β_δ(N)     = 2 σ² ( g_M(δ / KM) + 2 Σ_n log(4 + log N_n) )
//! g_M(δ)     = log(1/δ) + M log log(1/δ)
//! ```
//!
//! `g_M` is the standard approximation of the mixture-martingale threshold.
//! The `log log` term is clamped at zero for `δ ≥ 1/e` so that `β` stays
//! defined at loose confidence levels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Confidence level and problem dimensions entering `β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceParams {
    pub arms: usize,
    pub agents: usize,
    pub delta: f64,
    pub sigma: f64,
}

impl ConfidenceParams {
    pub fn new(arms: usize, agents: usize, delta: f64, sigma: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
        }
        if arms == 0 || agents == 0 {
            return Err(Error::Domain("need at least one arm and one agent".into()));
        }
        Ok(Self {
            arms,
            agents,
            delta,
            sigma,
        })
    }

    /// The same dimensions at another confidence level.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.arms, self.agents, delta, self.sigma)
    }
}

/// `g_M(δ) = log(1/δ) + M·max(log log(1/δ), 0)`.
pub fn g_m_approx(delta: f64, agents: usize) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    let log_inv = -delta.ln();
    Ok(log_inv + agents as f64 * log_inv.ln().max(0.0))
}

fn check_counts(counts: &[u64]) -> Result<()> {
    if let Some(n) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Domain(format!(
            "agent {n} has no pulls; the radius needs at least one pull per agent"
        )));
    }
    Ok(())
}

/// Threshold `β_δ(N)` for the pull counts `N` of one arm across all agents.
pub fn beta(counts: &[u64], params: &ConfidenceParams) -> Result<f64> {
    if counts.len() != params.agents {
        return Err(Error::Shape(format!(
            "{} counts for {} agents",
            counts.len(),
            params.agents
        )));
    }
    check_counts(counts)?;
    let g = g_m_approx(params.delta / (params.arms * params.agents) as f64, params.agents)?;
    let count_term: f64 = counts.iter().map(|&n| (4.0 + (n as f64).ln()).ln()).sum();
    Ok(params.sigma * params.sigma * 2.0 * (g + 2.0 * count_term))
}

/// `Σ_n w²_{n,m} / N_n`, the variance proxy of the mixed-mean estimate.
pub fn weighted_inverse_counts(counts: &[u64], weights_col: &[f64]) -> Result<f64> {
    if counts.len() != weights_col.len() {
        return Err(Error::Shape(format!(
            "{} counts for a weight column of length {}",
            counts.len(),
            weights_col.len()
        )));
    }
    check_counts(counts)?;
    Ok(counts
        .iter()
        .zip(weights_col)
        .map(|(&n, &w)| w * w / n as f64)
        .sum())
}

/// Radius `Ω^δ_{k,m}` given arm `k`'s pull counts and column `w_{·,m}`.
pub fn omega(counts: &[u64], weights_col: &[f64], params: &ConfidenceParams) -> Result<f64> {
    let b = beta(counts, params)?;
    Ok((b * weighted_inverse_counts(counts, weights_col)?).sqrt())
}

/// `B(T)`: `β` at `δ = 1/T` with every count equal to `T`, an upper bound on
/// `β_{1/T}` over any run of horizon `T`.
///
/// Equals `σ²(2 log(KMT) + 2M log log(KMT) + 4M log(4 + log T))`.
pub fn horizon_bound(arms: usize, agents: usize, horizon: u64, sigma: f64) -> Result<f64> {
    if horizon < 3 {
        return Err(Error::Domain(format!("horizon must be at least 3, got {horizon}")));
    }
    let params = ConfidenceParams::new(arms, agents, 1.0 / horizon as f64, sigma)?;
    beta(&vec![horizon; agents], &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: f64 = std::f64::consts::E;

    fn params(arms: usize, agents: usize, delta: f64) -> ConfidenceParams {
        ConfidenceParams::new(arms, agents, delta, 1.0).unwrap()
    }

    #[test]
    fn g_m_reference_values() {
        let expected = 100f64.ln() + 2.0 * 100f64.ln().ln();
        assert!((g_m_approx(0.01, 2).unwrap() - expected).abs() < 1e-12);
        assert!((g_m_approx(0.01, 2).unwrap() - 7.65956).abs() < 1e-4);
        assert!((g_m_approx((-E).exp(), 1).unwrap() - (E + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn g_m_monotone_and_clamped() {
        let mut prev = f64::INFINITY;
        for i in 1..100 {
            let d = f64::from(i) / 100.0;
            let g = g_m_approx(d, 3).unwrap();
            assert!(g < prev);
            prev = g;
        }
        // log log(1/δ) < 0 here and is clamped.
        assert_eq!(g_m_approx(0.5, 4).unwrap(), 2f64.ln());
        assert!(g_m_approx(0.0, 1).is_err());
        assert!(g_m_approx(1.0, 1).is_err());
    }

    #[test]
    fn beta_single_agent_reference() {
        let b = beta(&[1], &params(1, 1, 0.01)).unwrap();
        let expected = 2.0 * (100f64.ln() + 100f64.ln().ln() + 2.0 * 4f64.ln());
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 17.8099).abs() < 1e-4);
    }

    #[test]
    fn beta_monotone_in_counts_and_scales_with_sigma() {
        let p = params(3, 2, 0.1);
        for n in 1..200 {
            assert!(beta(&[n + 1, n + 1], &p).unwrap() > beta(&[n, n], &p).unwrap());
        }
        let p2 = ConfidenceParams { sigma: 2.0, ..p };
        let (b1, b2) = (beta(&[5, 9], &p).unwrap(), beta(&[5, 9], &p2).unwrap());
        assert!((b2 / b1 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_count_is_domain_error() {
        assert!(matches!(
            beta(&[3, 0], &params(2, 2, 0.1)),
            Err(Error::Domain(_))
        ));
        assert!(omega(&[0], &[1.0], &params(2, 1, 0.1)).is_err());
    }

    #[test]
    fn omega_arithmetic() {
        // With β fixed at 8: sqrt(8 / 100).
        let radius = (8.0 * weighted_inverse_counts(&[100], &[1.0]).unwrap()).sqrt();
        assert!((radius - 0.28284).abs() < 1e-5);
        let doubled = (8.0 * weighted_inverse_counts(&[200], &[1.0]).unwrap()).sqrt();
        assert!((radius / doubled - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_weight_agent_drops_out_of_variance_term() {
        let p = params(2, 2, 0.1);
        let a = omega(&[10, 1], &[1.0, 0.0], &p).unwrap();
        let b = beta(&[10, 1], &p).unwrap();
        assert!((a - (b / 10.0).sqrt()).abs() < 1e-12);
        assert_eq!(
            weighted_inverse_counts(&[10, 1], &[1.0, 0.0]).unwrap(),
            weighted_inverse_counts(&[10, 1000], &[1.0, 0.0]).unwrap()
        );
    }

    #[test]
    fn omega_uniform_closed_form() {
        for agents in 1..6 {
            let p = params(2, agents, 0.05);
            let col = vec![1.0 / agents as f64; agents];
            for n in [1u64, 7, 100, 12345] {
                let counts = vec![n; agents];
                let b = beta(&counts, &p).unwrap();
                let w = omega(&counts, &col, &p).unwrap();
                let closed = (b / (agents as f64 * n as f64)).sqrt();
                assert!((w - closed).abs() <= 1e-12 * closed);
            }
        }
    }

    #[test]
    fn omega_decreases_with_any_single_count() {
        let p = params(3, 3, 0.1);
        let col = [0.5, 0.3, 0.2];
        for a in 3..40u64 {
            for b in 3..40u64 {
                let base = [a, b, 5];
                let w0 = omega(&base, &col, &p).unwrap();
                for j in 0..3 {
                    for step in [1u64, 2, 10] {
                        let mut bumped = base;
                        bumped[j] += step;
                        assert!(omega(&bumped, &col, &p).unwrap() < w0, "{base:?} +{step} at {j}");
                    }
                }
            }
        }
    }

    #[test]
    fn horizon_bound_matches_expanded_form() {
        for (arms, agents, t) in [(1usize, 1usize, 1000u64), (3, 2, 100_000), (5, 4, 1 << 30)] {
            let kmt = (arms * agents) as f64 * t as f64;
            let m = agents as f64;
            let expected = 2.0 * kmt.ln() + 2.0 * m * kmt.ln().ln() + 4.0 * m * (4.0 + (t as f64).ln()).ln();
            let got = horizon_bound(arms, agents, t, 1.0).unwrap();
            assert!((got - expected).abs() < 1e-9 * expected);
        }
        let t = E.powi(10).round() as u64;
        let got = horizon_bound(1, 1, t, 1.0).unwrap();
        let expected = 2.0 * (t as f64).ln() + 2.0 * (t as f64).ln().ln() + 4.0 * (4.0 + (t as f64).ln()).ln();
        assert!((got - expected).abs() < 1e-9);
        assert!((got - 35.161).abs() < 1e-2);
        assert!(horizon_bound(1, 1, 2, 1.0).is_err());
    }

    #[test]
    fn horizon_bound_dominates_beta() {
        let horizon = 5000;
        let p = params(3, 2, 1.0 / horizon as f64);
        let bound = horizon_bound(3, 2, horizon, 1.0).unwrap();
        for a in (1..=horizon).step_by(97) {
            for b in (1..=horizon).step_by(211) {
                assert!(beta(&[a, b], &p).unwrap() <= bound);
            }
        }
    }

    #[test]
    fn horizon_bound_ratio_to_log_decreases_towards_two() {
        let ratio = |t: u64| horizon_bound(1, 1, t, 1.0).unwrap() / (t as f64).ln();
        let mut prev = f64::INFINITY;
        for exp in [4, 6, 9, 12, 15, 18] {
            let r = ratio(10u64.pow(exp));
            assert!(r > 2.0 && r < prev);
            prev = r;
        }
        assert!((ratio(1_000_000_000) - 2.912).abs() < 1e-3);
        let mut prev_nd = horizon_bound(2, 2, 3, 1.0).unwrap();
        for t in 4..2000 {
            let b = horizon_bound(2, 2, t, 1.0).unwrap();
            assert!(b >= prev_nd);
            prev_nd = b;
        }
    }
}
