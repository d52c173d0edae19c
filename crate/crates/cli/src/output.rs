//! Trace CSV files and the batch summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use collab_bandit::sim::{Algorithm, Diagnostics, PhaseMarker, RunTrace, Summary};
use collab_bandit::Matrix;
use serde::Serialize;

use crate::config::{ExperimentConfig, InstanceDocument, TraceGranularity};

pub const TRACE_HEADER: [&str; 4] = ["round", "agent", "arm", "cumulative_regret"];
pub const SUMMARY_FILE: &str = "summary.json";

pub fn trace_file_name(algorithm: Algorithm, seed: u64) -> String {
    format!("trace_{}_seed{seed}.csv", algorithm.name())
}

/// Writes `trace` as `round,agent,arm,cumulative_regret` rows. `delta` is
/// the instance's gap matrix, needed to rebuild full traces from actions.
pub fn write_trace<W: Write>(out: W, trace: &RunTrace, delta: &Matrix, granularity: TraceGranularity) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    match (granularity, &trace.actions) {
        (TraceGranularity::Full, Some(actions)) => {
            let agents = trace.agents;
            let mut regret = vec![0.0; agents];
            for (i, round_arms) in actions.chunks(agents).enumerate() {
                for (m, &arm) in round_arms.iter().enumerate() {
                    regret[m] += delta[(arm as usize, m)];
                    w.serialize((i + 1, m, arm, regret[m]))?;
                }
            }
        }
        (TraceGranularity::Full, None) => anyhow::bail!("full trace requested but actions were not recorded"),
        (TraceGranularity::Summary, _) => {
            for c in &trace.checkpoints {
                for (m, (arm, regret)) in c.arms.iter().zip(&c.regret).enumerate() {
                    w.serialize((c.round, m, arm, regret))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(path: &Path, trace: &RunTrace, delta: &Matrix, granularity: TraceGranularity) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(BufWriter::new(file), trace, delta, granularity)
}

#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub trace_file: String,
    pub rounds_completed: u64,
    pub total_regret: f64,
    pub regret: Vec<f64>,
    pub final_arms: Vec<usize>,
    pub success: bool,
    pub horizon_exhausted: bool,
    pub ledger: Vec<u64>,
    pub switched: Option<bool>,
    pub phases: Vec<PhaseMarker>,
    pub pulls: Vec<Vec<u64>>,
    pub diagnostics: Diagnostics,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(trace: &RunTrace) -> Self {
        Self {
            seed: trace.seed,
            trace_file: trace_file_name(trace.algorithm, trace.seed),
            rounds_completed: trace.rounds_completed,
            total_regret: trace.total_regret,
            regret: trace.regret.clone(),
            final_arms: trace.final_arms.clone(),
            success: trace.success,
            horizon_exhausted: trace.horizon_exhausted,
            ledger: trace.communications.iter().map(|c| c.round).collect(),
            switched: trace.condition().map(|c| !c),
            phases: trace.phases.clone(),
            pulls: trace.pulls.clone(),
            diagnostics: trace.diagnostics,
            error: trace.error.clone(),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Serialize)]
pub struct SummaryDocument<'a> {
    pub algorithm: Algorithm,
    pub horizon: u64,
    pub seeds: &'a [u64],
    pub trace: TraceGranularity,
    pub full_events: bool,
    pub coverage_delta: f64,
    pub instance: InstanceDocument,
    pub best_arms: Vec<usize>,
    pub delta_min: f64,
    pub summary: &'a Summary,
    pub runs: Vec<RunRecord>,
}

impl<'a> SummaryDocument<'a> {
    pub fn new(config: &'a ExperimentConfig, summary: &'a Summary, traces: &[RunTrace]) -> Self {
        let gaps = config.instance.gaps();
        Self {
            algorithm: config.algorithm,
            horizon: config.horizon,
            seeds: &config.seeds,
            trace: config.trace,
            full_events: config.full_events,
            coverage_delta: config.coverage_delta,
            instance: InstanceDocument::from_instance(&config.instance),
            best_arms: gaps.best_arm,
            delta_min: gaps.delta_min,
            summary,
            runs: traces.iter().map(RunRecord::new).collect(),
        }
    }
}

/// Writes every trace and the summary into `config.out`; returns the paths
/// written, summary last.
pub fn write_outputs(config: &ExperimentConfig, traces: &[RunTrace], summary: &Summary) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let delta = config.instance.gaps().delta;
    let mut written = Vec::with_capacity(traces.len() + 1);
    for trace in traces {
        let path = config.out.join(trace_file_name(trace.algorithm, trace.seed));
        write_trace_file(&path, trace, &delta, config.trace)?;
        written.push(path);
    }
    let path = config.out.join(SUMMARY_FILE);
    let mut text = serde_json::to_string_pretty(&SummaryDocument::new(config, summary, traces))?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    written.push(path);
    Ok(written)
}
