use collab_bandit::cexp2::CExp2Phase;
use collab_bandit::sim::{
    aggregate, run_experiment, run_policy, Algorithm, Policy, PolicyReport, RunTrace, SimConfig,
};
use collab_bandit::{BanditInstance, Matrix, Result, WeightMatrix};
use proptest::prelude::*;

/// Mixed means [[1, 0.5], [0.5, 1]]: agent 0 prefers arm 0, agent 1 arm 1,
/// every Δ̃' is 0.5.
fn crossed(sigma: f64) -> BanditInstance {
    let w = WeightMatrix::new(&[vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap();
    let mu = Matrix::from_rows(&[vec![1.25, 0.25], vec![0.25, 1.25]]).unwrap();
    BanditInstance::new(mu, sigma, w).unwrap()
}

fn recorded(horizon: u64, seed: u64) -> SimConfig {
    SimConfig {
        record_actions: true,
        ..SimConfig::new(horizon, seed)
    }
}

fn check_accounting(inst: &BanditInstance, trace: &RunTrace) {
    assert!(trace.error.is_none(), "{:?}", trace.error);
    let (arms, agents) = (inst.arms(), inst.agents());
    let t = trace.horizon;
    let actions = trace.actions.as_ref().unwrap();
    // One pull per agent per round.
    assert_eq!(actions.len() as u64, t * agents as u64);
    assert!(actions.iter().all(|&k| (k as usize) < arms));
    let total: u64 = trace.pulls.iter().flatten().sum();
    assert_eq!(total, agents as u64 * t);
    // Regret two ways: accumulated per round, and from the final counts.
    let gaps = inst.gaps();
    let from_counts: f64 = (0..arms)
        .flat_map(|k| (0..agents).map(move |m| (k, m)))
        .map(|(k, m)| trace.pulls[k][m] as f64 * gaps.delta[(k, m)])
        .sum();
    assert!((from_counts - trace.total_regret).abs() <= 1e-9 * from_counts.max(1.0));
    // And from the recorded actions.
    let replay: f64 = actions
        .chunks(agents)
        .flat_map(|row| row.iter().enumerate().map(|(m, &k)| gaps.delta[(k as usize, m)]))
        .sum();
    assert!((replay - trace.total_regret).abs() <= 1e-9 * replay.max(1.0));
    for pair in trace.checkpoints.windows(2) {
        assert!(pair[0].round < pair[1].round);
        for m in 0..agents {
            assert!(pair[0].regret[m] <= pair[1].regret[m]);
        }
    }
    assert!(trace.communications.windows(2).all(|w| w[0].round < w[1].round));
}

#[test]
fn cexp2_accounting_and_ledger() {
    let inst = crossed(1.0);
    for seed in 0..5 {
        let trace = run_experiment(&inst, Algorithm::CExp2, &recorded(20_000, seed)).unwrap();
        check_accounting(&inst, &trace);
        let report = trace.cexp2.as_ref().unwrap();
        if report.condition == Some(true) {
            assert_eq!(trace.ledger(), 2);
            assert_eq!(report.final_phase, CExp2Phase::Exploit);
        }
        assert_eq!(report.t_ie_round, Some(2 * report.tau1));
        assert_eq!(report.t_ie_pulls, Some(4 * report.tau1));
    }
}

#[test]
fn wcpe_accounting() {
    let inst = crossed(1.0);
    for seed in 0..5 {
        let trace = run_experiment(&inst, Algorithm::WcpeReg, &recorded(20_000, seed)).unwrap();
        check_accounting(&inst, &trace);
        assert_eq!(trace.ledger(), trace.wcpe.as_ref().unwrap().phases);
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let inst = crossed(1.0);
    for alg in [Algorithm::CExp2, Algorithm::WcpeReg] {
        let a = run_experiment(&inst, alg, &recorded(5_000, 42)).unwrap();
        let b = run_experiment(&inst, alg, &recorded(5_000, 42)).unwrap();
        assert_eq!(a, b);
        let c = run_experiment(&inst, alg, &recorded(5_000, 43)).unwrap();
        assert_ne!(a.actions, c.actions);
    }
}

#[test]
fn single_arm_has_no_regret() {
    let inst = BanditInstance::new(
        Matrix::from_rows(&[vec![0.3, 0.9, 0.1]]).unwrap(),
        1.0,
        WeightMatrix::uniform(3),
    )
    .unwrap();
    for alg in [Algorithm::CExp2, Algorithm::WcpeReg] {
        let trace = run_experiment(&inst, alg, &SimConfig::new(1000, 1)).unwrap();
        assert!(trace.error.is_none());
        assert_eq!(trace.total_regret, 0.0);
        assert!(trace.checkpoints.iter().all(|c| c.regret.iter().all(|&r| r == 0.0)));
        assert!(trace.success);
    }
    let wcpe = run_experiment(&inst, Algorithm::WcpeReg, &SimConfig::new(1000, 1)).unwrap();
    assert_eq!(wcpe.ledger(), 0);
}

/// Always plays the true best arms.
struct Oracle(Vec<usize>);

impl Policy for Oracle {
    fn select(&mut self, _round: u64, arms: &mut [usize]) -> Result<()> {
        arms.copy_from_slice(&self.0);
        Ok(())
    }
    fn observe(&mut self, _round: u64, _arms: &[usize], _rewards: &[f64]) -> Result<()> {
        Ok(())
    }
    fn committed(&self) -> Option<&[usize]> {
        None
    }
    fn ledger_len(&self) -> usize {
        0
    }
    fn report(&self) -> PolicyReport {
        PolicyReport {
            final_arms: self.0.clone(),
            horizon_exhausted: false,
            communications: vec![],
            phases: vec![],
            cexp2: None,
            wcpe: None,
        }
    }
}

#[test]
fn best_arm_policy_has_no_regret() {
    let inst = crossed(1.0);
    let mut policy = Oracle(inst.gaps().best_arm);
    let trace = run_policy(&inst, &mut policy, &recorded(3000, 5)).unwrap();
    check_accounting(&inst, &trace);
    assert_eq!(trace.total_regret, 0.0);
    assert!(trace.success);
}

/// A policy that fails part-way; the trace survives up to that round.
struct Faulty;

impl Policy for Faulty {
    fn select(&mut self, round: u64, arms: &mut [usize]) -> Result<()> {
        if round == 50 {
            return Err(collab_bandit::Error::Invariant {
                round,
                reason: "boom".into(),
            });
        }
        arms.fill(0);
        Ok(())
    }
    fn observe(&mut self, _: u64, _: &[usize], _: &[f64]) -> Result<()> {
        Ok(())
    }
    fn committed(&self) -> Option<&[usize]> {
        None
    }
    fn ledger_len(&self) -> usize {
        0
    }
    fn report(&self) -> PolicyReport {
        PolicyReport {
            final_arms: vec![0, 0],
            horizon_exhausted: true,
            communications: vec![],
            phases: vec![],
            cexp2: None,
            wcpe: None,
        }
    }
}

#[test]
fn policy_errors_keep_partial_trace() {
    let inst = crossed(1.0);
    let trace = run_policy(&inst, &mut Faulty, &SimConfig::new(1000, 0)).unwrap();
    assert_eq!(trace.rounds_completed, 49);
    assert!(trace.error.as_deref().unwrap().contains("boom"));
    assert_eq!(trace.pulls.iter().flatten().sum::<u64>(), 98);
}

#[test]
fn guided_counts_meet_targets() {
    let inst = crossed(1.0);
    for seed in 0..10 {
        let trace = run_experiment(&inst, Algorithm::CExp2, &SimConfig::new(100_000, seed)).unwrap();
        let report = trace.cexp2.unwrap();
        let targets = report.targets.unwrap();
        let counts = report.counts_at_ge.unwrap();
        for k in 0..2 {
            for m in 0..2 {
                assert!(targets[k][m] >= report.tau1);
                assert!(counts[k][m] >= targets[k][m]);
            }
        }
        let (lo, hi) = collab_bandit::cexp2::clamp_interval(100_000).unwrap();
        assert!(report.projected_gaps.unwrap().iter().all(|&g| (lo..=hi).contains(&g)));
    }
}

/// With σ = 0.05 the radius at the end of initial exploration under 𝓔_T is
/// about 0.1 ≤ Δ̃'/4, so T = 10⁵ is inside the regime where the gap
/// sandwich and (𝓔_T ∧ 𝓑_T) ⇒ 𝒞 are guaranteed.
#[test]
fn gap_sandwich_and_condition_in_low_noise_regime() {
    let inst = crossed(0.05);
    let tilde = inst.gaps().tilde_delta;
    let mut checked = 0;
    for seed in 0..200 {
        let trace = run_experiment(&inst, Algorithm::CExp2, &SimConfig::new(100_000, seed)).unwrap();
        let d = trace.diagnostics;
        if !d.e_t {
            continue;
        }
        checked += 1;
        let projected = trace.cexp2.as_ref().unwrap().projected_gaps.clone().unwrap();
        for (g, t) in projected.iter().zip(tilde.iter()) {
            assert!(0.5 * t <= *g && *g <= 1.5 * t, "seed {seed}: {g} vs {t}");
        }
        if d.b_t {
            assert_eq!(trace.condition(), Some(true), "seed {seed}");
            assert!(trace.success);
        }
    }
    assert!(checked > 150);
}

#[test]
fn exploit_is_correct_under_b() {
    let inst = crossed(1.0);
    for seed in 0..100 {
        let trace = run_experiment(&inst, Algorithm::CExp2, &SimConfig::new(50_000, seed)).unwrap();
        if trace.condition() == Some(true) && trace.diagnostics.b_t {
            assert!(trace.success, "seed {seed}");
        }
    }
}

#[test]
fn wcpe_elimination_is_monotone_and_safe() {
    let inst = crossed(1.0);
    let gaps = inst.gaps();
    let bound = (8.0 / gaps.delta_min).log2().ceil() as usize;
    for seed in 0..100 {
        let trace = run_experiment(&inst, Algorithm::WcpeReg, &SimConfig::new(100_000, seed)).unwrap();
        let report = trace.wcpe.as_ref().unwrap();
        let mut prev = vec![vec![true; 2]; 2];
        for sets in &report.active_history {
            for m in 0..2 {
                for k in 0..2 {
                    assert!(prev[m][k] || !sets[m][k], "arm re-entered");
                }
                assert!(sets[m].iter().any(|&a| a));
            }
            prev = sets.clone();
        }
        // 𝓑_T is 𝓕 at δ = 1/T.
        if trace.diagnostics.b_t {
            for sets in &report.active_history {
                for (m, &best) in gaps.best_arm.iter().enumerate() {
                    assert!(sets[m][best]);
                }
            }
            assert!(report.phases <= bound);
            assert!(trace.success);
        }
    }
}

#[test]
fn short_horizon_is_flagged() {
    let inst = crossed(1.0);
    let wcpe = run_experiment(&inst, Algorithm::WcpeReg, &SimConfig::new(100, 0)).unwrap();
    assert!(wcpe.horizon_exhausted);
    assert!(wcpe.wcpe.unwrap().committed_round.is_none());
    let cexp2 = run_experiment(&inst, Algorithm::CExp2, &SimConfig::new(100, 0)).unwrap();
    assert!(cexp2.horizon_exhausted);
    assert_eq!(cexp2.ledger(), 1);
}

#[test]
fn aggregate_statistics() {
    let inst = crossed(1.0);
    let one = run_experiment(&inst, Algorithm::CExp2, &SimConfig::new(2000, 3)).unwrap();
    let s = aggregate(std::slice::from_ref(&one)).unwrap();
    assert_eq!(s.final_regret.mean, one.total_regret);
    assert_eq!(s.final_regret.stderr, 0.0);
    let s = aggregate(&[one.clone(), one.clone()]).unwrap();
    assert_eq!(s.final_regret.stderr, 0.0);
    assert_eq!(s.regret.len(), 100);
    assert_eq!(s.ledger_distribution.values().sum::<usize>(), 2);
    let other = run_experiment(&inst, Algorithm::WcpeReg, &SimConfig::new(2000, 3)).unwrap();
    assert!(aggregate(&[one.clone(), other]).is_err());
    let longer = run_experiment(&inst, Algorithm::CExp2, &SimConfig::new(3000, 3)).unwrap();
    assert!(aggregate(&[one, longer]).is_err());
    assert!(aggregate(&[]).is_err());
}

fn arb_instance() -> impl Strategy<Value = BanditInstance> {
    (2usize..=3, 1usize..=3, any::<u64>()).prop_map(|(arms, agents, seed)| {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let mut w = Matrix::from_fn(agents, agents, |_, _| rng.random_range(0.05..1.0));
        for c in 0..agents {
            let s: f64 = w.column(c).iter().sum();
            for r in 0..agents {
                w[(r, c)] /= s;
            }
        }
        let mu = Matrix::from_fn(arms, agents, |_, _| rng.random_range(0.0..1.0));
        BanditInstance::new(mu, 0.5, WeightMatrix::from_matrix(w).unwrap()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn invariants_hold_on_random_instances(inst in arb_instance(), seed in any::<u64>(), wcpe in any::<bool>()) {
        let alg = if wcpe { Algorithm::WcpeReg } else { Algorithm::CExp2 };
        let trace = run_experiment(&inst, alg, &recorded(3000, seed)).unwrap();
        check_accounting(&inst, &trace);
        prop_assert_eq!(trace.best_arms.len(), inst.agents());
    }
}
