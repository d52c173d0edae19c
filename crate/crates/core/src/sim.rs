//! Synchronous round loop, reward sampling, regret accounting and the
//! ground-truth confidence diagnostics.
//!
//! Rewards come from a counter-based generator: the draw of agent `m` on arm
//! `k` at round `t` depends only on `(seed, m, k, t)`, so runs are
//! reproducible regardless of what the policy does or in which order seeds
//! execute.

use std::collections::BTreeMap;

use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cexp2::{CExp2, CExp2Report};
use crate::confidence::g_m_approx;
use crate::error::{Error, Result};
use crate::estimates::SampleStats;
use crate::matrix::Matrix;
use crate::model::BanditInstance;
use crate::wcpe::{Wcpe, WcpeReport};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// SplitMix64 output stream; used as the per-draw generator.
#[derive(Debug, Clone)]
pub struct SampleStream {
    state: u64,
}

impl SampleStream {
    pub fn new(state: u64) -> Self {
        Self { state }
    }
}

impl RngCore for SampleStream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        rand_core::impls::fill_bytes_via_next(self, dst)
    }
}

/// Key of the `(agent, arm)` substream.
pub fn stream_key(seed: u64, agent: usize, arm: usize) -> u64 {
    let a = mix64(seed.wrapping_add(GOLDEN));
    let b = mix64(a ^ (agent as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    mix64(b ^ (arm as u64).wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
}

/// One Gaussian draw at `round` from the substream `key`. `sigma = 0`
/// returns `mean` exactly.
#[inline]
pub fn draw(key: u64, round: u64, mean: f64, sigma: f64) -> f64 {
    let mut stream = SampleStream::new(mix64(key ^ round.wrapping_mul(GOLDEN)));
    let z: f64 = StandardNormal.sample(&mut stream);
    mean + sigma * z
}

/// An instance plus the seeded reward source.
#[derive(Debug, Clone)]
pub struct Environment {
    instance: BanditInstance,
    seed: u64,
    /// Arm-major substream keys.
    keys: Vec<u64>,
}

impl Environment {
    pub fn new(instance: BanditInstance, seed: u64) -> Self {
        let (arms, agents) = (instance.arms(), instance.agents());
        let keys = (0..arms)
            .flat_map(|k| (0..agents).map(move |m| stream_key(seed, m, k)))
            .collect();
        Self { instance, seed, keys }
    }

    pub fn instance(&self) -> &BanditInstance {
        &self.instance
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `X_{k,m}(t) ~ N(μ_{k,m}, σ²)`.
    #[inline]
    pub fn sample_reward(&self, arm: usize, agent: usize, round: u64) -> f64 {
        let key = self.keys[arm * self.instance.agents() + agent];
        draw(key, round, self.instance.mu()[(arm, agent)], self.instance.sigma())
    }
}

/// One synchronous broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Communication {
    /// Round at whose end the broadcast happens.
    pub round: u64,
    /// Number of (sample mean, count) pairs sent, `K M`.
    pub payload: usize,
}

/// Phase labels of both algorithms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    InitialExploration,
    GuidedExploration,
    Exploit,
    Fallback,
    /// Elimination phase at precision `2^{1−r}`.
    Elimination(u32),
    Commit,
}

/// The phase that starts after `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PhaseMarker {
    pub round: u64,
    pub phase: Phase,
}

/// A multi-agent policy driven by the round loop.
pub trait Policy {
    /// Fills one arm per agent for `round`.
    fn select(&mut self, round: u64, arms: &mut [usize]) -> Result<()>;
    /// Feeds back the local rewards of `round`; communication happens here.
    fn observe(&mut self, round: u64, arms: &[usize], rewards: &[f64]) -> Result<()>;
    /// Arms every agent will play for the rest of the run, once fixed.
    fn committed(&self) -> Option<&[usize]>;
    fn ledger_len(&self) -> usize;
    fn report(&self) -> PolicyReport;
}

/// What a policy reports at the end of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    pub final_arms: Vec<usize>,
    pub horizon_exhausted: bool,
    pub communications: Vec<Communication>,
    pub phases: Vec<PhaseMarker>,
    pub cexp2: Option<CExp2Report>,
    pub wcpe: Option<WcpeReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "cexp2")]
    CExp2,
    #[serde(rename = "wcpe-reg")]
    WcpeReg,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::CExp2 => "cexp2",
            Self::WcpeReg => "wcpe-reg",
        }
    }

    pub fn build(self, instance: &BanditInstance, horizon: u64) -> Result<Box<dyn Policy>> {
        let (arms, w, sigma) = (instance.arms(), instance.weights().clone(), instance.sigma());
        Ok(match self {
            Self::CExp2 => Box::new(CExp2::new(arms, w, sigma, horizon)?),
            Self::WcpeReg => Box::new(Wcpe::new(arms, w, sigma, horizon, 0)?),
        })
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cexp2" => Ok(Self::CExp2),
            "wcpe-reg" => Ok(Self::WcpeReg),
            other => Err(Error::Config(format!(
                "unknown algorithm {other:?}; expected \"cexp2\" or \"wcpe-reg\""
            ))),
        }
    }
}

/// Settings of one simulated run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub horizon: u64,
    pub seed: u64,
    /// Confidence level of the diagnostic event `𝓕`.
    pub coverage_delta: f64,
    /// Evaluate the diagnostics after every round instead of on the grid.
    pub full_events: bool,
    /// Keep every agent's arm at every round.
    pub record_actions: bool,
}

impl SimConfig {
    pub fn new(horizon: u64, seed: u64) -> Self {
        Self {
            horizon,
            seed,
            coverage_delta: 0.1,
            full_events: false,
            record_actions: false,
        }
    }
}

/// Rounds `⌈iT/100⌉`, `i = 1..100`, without duplicates.
pub fn checkpoint_grid(horizon: u64) -> Vec<u64> {
    let mut grid: Vec<u64> = (1..=100u64).map(|i| (i * horizon).div_ceil(100)).collect();
    grid.dedup();
    grid
}

/// Whether the ground-truth confidence events held at every evaluated round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Diagnostics {
    /// `𝓔_T`, at `δ = 1/log T`.
    pub e_t: bool,
    /// `𝓑_T`, at `δ = 1/T`.
    pub b_t: bool,
    /// `𝓕`, at the configured level.
    pub f: bool,
    pub evaluated_rounds: u64,
}

/// Checks `|μ̂' − μ'| ≤ Ω^δ` for three levels at once.
struct EventChecker {
    truth: Matrix,
    /// Columns of `W`.
    weights: Vec<Vec<f64>>,
    sigma2: f64,
    /// `g_M(δ/KM)` for `𝓔_T`, `𝓑_T`, `𝓕`.
    g: [f64; 3],
    held: [bool; 3],
    evaluated: u64,
}

impl EventChecker {
    fn new(instance: &BanditInstance, horizon: u64, coverage_delta: f64) -> Result<Self> {
        let (arms, agents) = (instance.arms(), instance.agents());
        let km = (arms * agents) as f64;
        let t = horizon as f64;
        let g = [1.0 / t.ln(), 1.0 / t, coverage_delta].map(|d| g_m_approx(d / km, agents));
        let [a, b, c] = g;
        Ok(Self {
            truth: instance.mixed_means(),
            weights: (0..agents).map(|m| instance.weights().column(m)).collect(),
            sigma2: instance.sigma().powi(2),
            g: [a?, b?, c?],
            held: [true; 3],
            evaluated: 0,
        })
    }

    fn evaluate(&mut self, stats: &SampleStats) {
        self.evaluated += 1;
        let agents = stats.agents();
        for k in 0..stats.arms() {
            let counts = stats.arm_counts(k);
            if counts.contains(&0) {
                continue;
            }
            let count_term: f64 = counts.iter().map(|&n| (4.0 + (n as f64).ln()).ln()).sum();
            let means: Vec<f64> = (0..agents)
                .map(|n| stats.local_mean(k, n).expect("count is positive"))
                .collect();
            for m in 0..agents {
                let col = &self.weights[m];
                let mut v = 0.0;
                let mut est = 0.0;
                for n in 0..agents {
                    v += col[n] * col[n] / counts[n] as f64;
                    est += col[n] * means[n];
                }
                let dev2 = (est - self.truth[(k, m)]).powi(2);
                for (held, g) in self.held.iter_mut().zip(self.g) {
                    if dev2 > 2.0 * self.sigma2 * (g + 2.0 * count_term) * v {
                        *held = false;
                    }
                }
            }
        }
    }

    fn diagnostics(&self) -> Diagnostics {
        Diagnostics {
            e_t: self.held[0],
            b_t: self.held[1],
            f: self.held[2],
            evaluated_rounds: self.evaluated,
        }
    }
}

/// Arms and per-agent cumulative regret at a grid round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Checkpoint {
    pub round: u64,
    pub arms: Vec<usize>,
    pub regret: Vec<f64>,
}

/// Everything recorded about one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub horizon: u64,
    pub agents: usize,
    pub rounds_completed: u64,
    pub checkpoints: Vec<Checkpoint>,
    /// Round-major arms, `M` per round, when recording was requested.
    #[serde(skip)]
    pub actions: Option<Vec<u32>>,
    /// Per-agent cumulative pseudo-regret at the last completed round.
    pub regret: Vec<f64>,
    pub total_regret: f64,
    /// `τ_{k,m}` at the end, `[arm][agent]`.
    pub pulls: Vec<Vec<u64>>,
    pub phases: Vec<PhaseMarker>,
    pub communications: Vec<Communication>,
    pub final_arms: Vec<usize>,
    pub best_arms: Vec<usize>,
    pub success: bool,
    pub horizon_exhausted: bool,
    pub diagnostics: Diagnostics,
    pub cexp2: Option<CExp2Report>,
    pub wcpe: Option<WcpeReport>,
    pub error: Option<String>,
}

impl RunTrace {
    pub fn ledger(&self) -> usize {
        self.communications.len()
    }

    /// `𝒞` for CExp² runs that reached the end of guided exploration.
    pub fn condition(&self) -> Option<bool> {
        self.cexp2.as_ref().and_then(|r| r.condition)
    }

    pub fn switched(&self) -> bool {
        self.condition() == Some(false)
    }
}

/// Runs `algorithm` on `instance`.
pub fn run_experiment(instance: &BanditInstance, algorithm: Algorithm, config: &SimConfig) -> Result<RunTrace> {
    let mut policy = algorithm.build(instance, config.horizon)?;
    let mut trace = run_policy(instance, policy.as_mut(), config)?;
    trace.algorithm = algorithm;
    Ok(trace)
}

/// Round loop for any policy. Errors raised by the policy end the run early
/// and are stored in the trace; only invalid settings are returned as `Err`.
pub fn run_policy(instance: &BanditInstance, policy: &mut dyn Policy, config: &SimConfig) -> Result<RunTrace> {
    if config.horizon < 3 {
        return Err(Error::Config(format!("horizon must be at least 3, got {}", config.horizon)));
    }
    let gaps = instance.gaps();
    let (arms, agents) = (instance.arms(), instance.agents());
    let env = Environment::new(instance.clone(), config.seed);
    let mut checker = EventChecker::new(instance, config.horizon, config.coverage_delta)?;
    let mut stats = SampleStats::new(arms, agents);
    let grid = checkpoint_grid(config.horizon);
    let mut next_grid = 0;
    let mut checkpoints = Vec::with_capacity(grid.len());
    let mut actions = config
        .record_actions
        .then(|| Vec::with_capacity((config.horizon as usize).saturating_mul(agents)));
    let mut regret = vec![0.0; agents];
    let mut chosen = vec![0usize; agents];
    let mut rewards = vec![0.0; agents];
    let mut committed: Option<Vec<usize>> = None;
    let mut error = None;
    let mut rounds_completed = 0;

    for t in 1..=config.horizon {
        let mut communicated = false;
        if let Some(arms_fixed) = &committed {
            chosen.copy_from_slice(arms_fixed);
        } else if let Err(e) = policy.select(t, &mut chosen) {
            error = Some(e);
            break;
        }
        if let Some(&bad) = chosen.iter().find(|&&k| k >= arms) {
            error = Some(Error::Invariant {
                round: t,
                reason: format!("policy chose arm {bad} of {arms}"),
            });
            break;
        }
        for m in 0..agents {
            let k = chosen[m];
            let x = env.sample_reward(k, m, t);
            rewards[m] = x;
            stats.record(k, m, x);
            regret[m] += gaps.delta[(k, m)];
        }
        if let Some(a) = actions.as_mut() {
            a.extend(chosen.iter().map(|&k| k as u32));
        }
        if committed.is_none() {
            let before = policy.ledger_len();
            if let Err(e) = policy.observe(t, &chosen, &rewards) {
                error = Some(e);
                break;
            }
            communicated = policy.ledger_len() > before;
            committed = policy.committed().map(<[usize]>::to_vec);
        }
        rounds_completed = t;
        let on_grid = next_grid < grid.len() && grid[next_grid] == t;
        if on_grid || communicated || config.full_events {
            checker.evaluate(&stats);
        }
        if on_grid {
            checkpoints.push(Checkpoint {
                round: t,
                arms: chosen.clone(),
                regret: regret.clone(),
            });
            next_grid += 1;
        }
    }

    let report = policy.report();
    if error.is_none() {
        if let Some(pair) = report.communications.windows(2).find(|w| w[0].round >= w[1].round) {
            error = Some(Error::Invariant {
                round: pair[1].round,
                reason: "communication rounds are not strictly increasing".into(),
            });
        } else if stats.total_pulls() != rounds_completed * agents as u64 {
            error = Some(Error::Invariant {
                round: rounds_completed,
                reason: "pull counts do not add up to one pull per agent per round".into(),
            });
        }
    }
    let success = report.final_arms == gaps.best_arm;
    Ok(RunTrace {
        algorithm: Algorithm::CExp2,
        seed: config.seed,
        horizon: config.horizon,
        agents,
        rounds_completed,
        checkpoints,
        actions,
        total_regret: regret.iter().sum(),
        regret,
        pulls: stats.counts_matrix(),
        phases: report.phases,
        communications: report.communications,
        final_arms: report.final_arms,
        best_arms: gaps.best_arm,
        success,
        horizon_exhausted: report.horizon_exhausted,
        diagnostics: checker.diagnostics(),
        cexp2: report.cexp2,
        wcpe: report.wcpe,
        error: error.map(|e| e.to_string()),
    })
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretPoint {
    pub round: u64,
    #[serde(flatten)]
    pub regret: MeanStderr,
}

/// Statistics over a batch of runs sharing one configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub algorithm: Algorithm,
    pub horizon: u64,
    pub runs: usize,
    pub aborted: usize,
    pub regret: Vec<RegretPoint>,
    pub final_regret: MeanStderr,
    /// Fraction of CExp² runs whose switch test failed.
    pub switch_frequency: Option<MeanStderr>,
    /// Number of runs per ledger size.
    pub ledger_distribution: BTreeMap<usize, usize>,
    pub ledger: MeanStderr,
    pub success_rate: MeanStderr,
    pub event_e_t: f64,
    pub event_b_t: f64,
    pub event_f: f64,
}

/// Folds a batch of traces; traces must share algorithm, horizon and agent
/// count.
pub fn aggregate(traces: &[RunTrace]) -> Result<Summary> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate an empty batch".into()))?;
    if let Some(t) = traces.iter().find(|t| {
        t.algorithm != first.algorithm || t.horizon != first.horizon || t.agents != first.agents
    }) {
        return Err(Error::Config(format!(
            "mixed configurations: seed {} ran {} with T = {}, seed {} ran {} with T = {}",
            first.seed,
            first.algorithm.name(),
            first.horizon,
            t.seed,
            t.algorithm.name(),
            t.horizon
        )));
    }
    let n = traces.len() as f64;
    let indicator = |f: &dyn Fn(&RunTrace) -> bool| -> Vec<f64> {
        traces.iter().map(|t| if f(t) { 1.0 } else { 0.0 }).collect()
    };
    let regret = first
        .checkpoints
        .iter()
        .enumerate()
        .filter_map(|(i, c)| {
            let values: Option<Vec<f64>> = traces
                .iter()
                .map(|t| t.checkpoints.get(i).map(|p| p.regret.iter().sum()))
                .collect();
            values.map(|v| RegretPoint {
                round: c.round,
                regret: MeanStderr::of(&v),
            })
        })
        .collect();
    let mut ledger_distribution = BTreeMap::new();
    for t in traces {
        *ledger_distribution.entry(t.ledger()).or_insert(0) += 1;
    }
    let ledgers: Vec<f64> = traces.iter().map(|t| t.ledger() as f64).collect();
    let finals: Vec<f64> = traces.iter().map(|t| t.total_regret).collect();
    let frac = |f: &dyn Fn(&RunTrace) -> bool| traces.iter().filter(|t| f(t)).count() as f64 / n;
    Ok(Summary {
        algorithm: first.algorithm,
        horizon: first.horizon,
        runs: traces.len(),
        aborted: traces.iter().filter(|t| t.error.is_some()).count(),
        regret,
        final_regret: MeanStderr::of(&finals),
        switch_frequency: (first.algorithm == Algorithm::CExp2).then(|| MeanStderr::of(&indicator(&|t| t.switched()))),
        ledger_distribution,
        ledger: MeanStderr::of(&ledgers),
        success_rate: MeanStderr::of(&indicator(&|t| t.success)),
        event_e_t: frac(&|t| t.diagnostics.e_t),
        event_b_t: frac(&|t| t.diagnostics.b_t),
        event_f: frac(&|t| t.diagnostics.f),
    })
}
