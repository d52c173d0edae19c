//! The four subcommands, as functions returning their results.

use std::path::PathBuf;

use anyhow::{Context, Result};
use collab_bandit::oracle::{solve_lower_bound, solve_relaxed, solve_sample_complexity, OracleResult};
use collab_bandit::sim::{aggregate, run_experiment, RunTrace, SimConfig, Summary};
use collab_bandit::{BanditInstance, Matrix, WeightMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ExperimentConfig, InstanceDocument, TraceGranularity};
use crate::generate::generate_instance;
use crate::output::write_outputs;

/// One run per seed, in seed order regardless of `workers`.
pub fn run_batch(config: &ExperimentConfig) -> Result<Vec<RunTrace>> {
    let sim = |seed: u64| {
        let cfg = SimConfig {
            coverage_delta: config.coverage_delta,
            full_events: config.full_events,
            record_actions: config.trace == TraceGranularity::Full,
            ..SimConfig::new(config.horizon, seed)
        };
        run_experiment(&config.instance, config.algorithm, &cfg)
            .with_context(|| format!("seed {seed}"))
    };
    if config.workers == 1 {
        return config.seeds.iter().map(|&s| sim(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .context("building worker pool")?;
    pool.install(|| config.seeds.par_iter().map(|&s| sim(s)).collect())
}

pub struct RunOutcome {
    pub summary: Summary,
    pub written: Vec<PathBuf>,
}

/// Runs the batch and writes traces and the summary.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    let traces = run_batch(config)?;
    let summary = aggregate(&traces)?;
    let written = write_outputs(config, &traces, &summary)?;
    Ok(RunOutcome { summary, written })
}

/// Input of the `oracle` subcommand: a weight matrix and a `K × M` gap
/// matrix.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleInput {
    pub weights: Vec<Vec<f64>>,
    pub gaps: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize)]
pub struct OracleOutput {
    pub objective: f64,
    pub allocation: Vec<Vec<f64>>,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl From<OracleResult> for OracleOutput {
    fn from(r: OracleResult) -> Self {
        Self {
            objective: r.objective_value,
            allocation: r.allocation.q.to_rows(),
            kkt_residual: r.kkt_residual,
            iterations: r.iterations,
        }
    }
}

/// Solves the relaxed program for the gaps in `document`.
pub fn oracle(document: &str) -> Result<OracleOutput> {
    let input: OracleInput =
        toml::from_str(document).map_err(|e| ConfigError::new("document", e.message().to_string()))?;
    let weights = WeightMatrix::new(&input.weights).map_err(|e| ConfigError::new("weights", e.to_string()))?;
    let gaps = Matrix::from_rows(&input.gaps).map_err(|e| ConfigError::new("gaps", e.to_string()))?;
    Ok(solve_relaxed(&gaps, &weights)?.into())
}

#[derive(Debug, Serialize)]
pub struct LowerBounds {
    pub c_star: f64,
    pub c_tilde_star: f64,
    pub s_star: f64,
    pub delta_min: f64,
    pub best_arms: Vec<usize>,
    /// `c* ≤ c̃* ≤ 4c*`.
    pub sandwich_holds: bool,
    /// `4c*/Δ'_min`.
    pub s_star_bound: f64,
    pub s_star_within_bound: bool,
    pub allocations: Allocations,
}

#[derive(Debug, Serialize)]
pub struct Allocations {
    pub lower_bound: Vec<Vec<f64>>,
    pub relaxed: Vec<Vec<f64>>,
    pub sample_complexity: Vec<Vec<f64>>,
}

/// Relative slack allowed in the sandwich checks for solver error.
const CHECK_SLACK: f64 = 1e-6;

pub fn lower_bounds(instance: &BanditInstance) -> Result<LowerBounds> {
    anyhow::ensure!(instance.arms() >= 2, "lower bounds need at least two arms");
    let gaps = instance.gaps();
    let w = instance.weights();
    let c = solve_lower_bound(&gaps, w)?;
    let ct = solve_relaxed(&gaps.tilde_delta, w)?;
    let s = solve_sample_complexity(&gaps, w)?;
    let (c_star, c_tilde_star, s_star) = (c.objective_value, ct.objective_value, s.objective_value);
    let le = |a: f64, b: f64| a <= b * (1.0 + CHECK_SLACK);
    let s_star_bound = 4.0 * c_star / gaps.delta_min;
    Ok(LowerBounds {
        c_star,
        c_tilde_star,
        s_star,
        delta_min: gaps.delta_min,
        best_arms: gaps.best_arm.clone(),
        sandwich_holds: le(c_star, c_tilde_star) && le(c_tilde_star, 4.0 * c_star),
        s_star_bound,
        s_star_within_bound: le(s_star, s_star_bound),
        allocations: Allocations {
            lower_bound: c.allocation.q.to_rows(),
            relaxed: ct.allocation.q.to_rows(),
            sample_complexity: s.allocation.q.to_rows(),
        },
    })
}

/// Reads an instance from either an instance document or an experiment
/// document.
pub fn instance_from_document(document: &str, base_dir: Option<&std::path::Path>) -> Result<BanditInstance> {
    match crate::config::parse_instance(document) {
        Ok(inst) => Ok(inst),
        Err(first) => {
            let table: toml::Table = toml::from_str(document).map_err(|_| first.clone())?;
            if !table.contains_key("instance") && !table.contains_key("instance_file") {
                return Err(first.into());
            }
            if let Some(doc) = table.get("instance") {
                let doc: InstanceDocument = doc
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| ConfigError::new("instance", e.message().to_string()))?;
                return Ok(doc.build("instance.")?);
            }
            let path = table["instance_file"]
                .as_str()
                .ok_or_else(|| ConfigError::new("instance_file", "expected a path"))?;
            let path = base_dir.map_or_else(|| PathBuf::from(path), |d| d.join(path));
            crate::config::load_instance(&path)
        }
    }
}

/// A generated instance as a TOML instance document.
pub fn generate(arms: usize, agents: usize, gap_floor: f64, sigma: f64, seed: u64) -> Result<String> {
    let instance = generate_instance(arms, agents, gap_floor, sigma, seed)?;
    Ok(InstanceDocument::from_instance(&instance).to_toml())
}
