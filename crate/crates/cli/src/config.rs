//! Experiment and instance documents (TOML).
//!
//! ```toml
//! algorithm = "cexp2"          # or "wcpe-reg"
//! horizon = 100000             # at least 16
//! seeds = [1, 2, 3]            # or: seed_base = 0, runs = 100
//! out = "results"
//! trace = "summary"            # or "full"
//! full_events = false
//! workers = 1
//! coverage_delta = 0.1
//!
//! [instance]                   # or: instance_file = "instance.toml"
//! sigma = 1.0
//! weights = [[0.75, 0.25], [0.25, 0.75]]   # row n = source agent
//! mu = [[1.25, 0.25], [0.25, 1.25]]        # row k = arm
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use collab_bandit::cexp2::MIN_HORIZON;
use collab_bandit::sim::Algorithm;
use collab_bandit::{BanditInstance, Matrix, WeightMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Overrides `out` when `--out` is not given.
pub const OUT_DIR_ENV: &str = "COLLAB_BANDIT_OUT";

pub const DEFAULT_OUT: &str = "results";

/// A configuration problem, located by the offending field.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceGranularity {
    /// Rows at the 100 grid rounds only.
    #[default]
    Summary,
    /// One row per agent per round.
    Full,
}

/// An instance as written in a document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDocument {
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<usize>,
    #[serde(rename = "M", default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<Vec<f64>>>,
}

impl InstanceDocument {
    pub fn from_instance(instance: &BanditInstance) -> Self {
        Self {
            arms: Some(instance.arms()),
            agents: Some(instance.agents()),
            sigma: Some(instance.sigma()),
            weights: Some(instance.weights().as_matrix().to_rows()),
            mu: Some(instance.mu().to_rows()),
        }
    }

    /// Validates the document; `prefix` locates it in error messages.
    pub fn build(&self, prefix: &str) -> Result<BanditInstance> {
        let field = |name: &str| format!("{prefix}{name}");
        let weights = self
            .weights
            .as_ref()
            .ok_or_else(|| ConfigError::new(field("weights"), "missing field"))?;
        let mu = self
            .mu
            .as_ref()
            .ok_or_else(|| ConfigError::new(field("mu"), "missing field"))?;
        let weights = WeightMatrix::new(weights).map_err(|e| ConfigError::new(field("weights"), e.to_string()))?;
        let agents = weights.agents();
        if let Some(m) = self.agents.filter(|&m| m != agents) {
            return Err(ConfigError::new(field("M"), format!("M = {m} but weights are {agents}x{agents}")));
        }
        if let Some(k) = self.arms.filter(|&k| k != mu.len()) {
            return Err(ConfigError::new(field("mu"), format!("K = {k} but mu has {} rows", mu.len())));
        }
        if mu.is_empty() {
            return Err(ConfigError::new(field("mu"), "needs at least one arm"));
        }
        if let Some((k, row)) = mu.iter().enumerate().find(|(_, r)| r.len() != agents) {
            return Err(ConfigError::new(
                format!("{}[{k}]", field("mu")),
                format!("has {} entries, expected one per agent ({agents})", row.len()),
            ));
        }
        let sigma = self.sigma.unwrap_or(1.0);
        let mu = Matrix::from_rows(mu).map_err(|e| ConfigError::new(field("mu"), e.to_string()))?;
        BanditInstance::new(mu, sigma, weights).map_err(|e| {
            let name = if !(sigma > 0.0 && sigma.is_finite()) { "sigma" } else { "mu" };
            ConfigError::new(field(name), e.to_string())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("instance documents always serialize")
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algorithm: Option<String>,
    horizon: Option<i64>,
    seeds: Option<Vec<u64>>,
    seed_base: Option<u64>,
    runs: Option<u64>,
    out: Option<PathBuf>,
    workers: Option<usize>,
    full_events: Option<bool>,
    trace: Option<TraceGranularity>,
    coverage_delta: Option<f64>,
    instance: Option<InstanceDocument>,
    instance_file: Option<PathBuf>,
}

/// Command-line values that take precedence over the document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub algorithm: Option<String>,
    pub horizon: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub seed_base: Option<u64>,
    pub runs: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub full_events: bool,
}

/// A fully validated experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub instance: BanditInstance,
    pub algorithm: Algorithm,
    pub horizon: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub workers: usize,
    pub full_events: bool,
    pub trace: TraceGranularity,
    pub coverage_delta: f64,
}

fn parse_toml<T: serde::de::DeserializeOwned>(document: &str) -> Result<T> {
    toml::from_str(document).map_err(|e| ConfigError::new("document", e.message().to_string()))
}

/// Parses an experiment document with no overrides. `base_dir` resolves a
/// relative `instance_file`.
pub fn parse_config(document: &str, base_dir: Option<&Path>) -> Result<ExperimentConfig> {
    parse_config_with(document, base_dir, &Overrides::default())
}

pub fn parse_config_with(document: &str, base_dir: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let raw: RawConfig = parse_toml(document)?;

    let instance = match (&raw.instance, &raw.instance_file) {
        (Some(_), Some(_)) => {
            return Err(ConfigError::new("instance_file", "give either [instance] or instance_file, not both"))
        }
        (Some(doc), None) => doc.build("instance.")?,
        (None, Some(path)) => {
            let path = base_dir.map_or_else(|| path.clone(), |d| d.join(path));
            load_instance(&path).map_err(|e| ConfigError::new(format!("instance_file ({})", path.display()), e.to_string()))?
        }
        (None, None) => return Err(ConfigError::new("instance", "missing; give [instance] or instance_file")),
    };

    let algorithm = overrides
        .algorithm
        .clone()
        .or(raw.algorithm)
        .unwrap_or_else(|| Algorithm::CExp2.name().to_string());
    let algorithm = algorithm
        .parse::<Algorithm>()
        .map_err(|e| ConfigError::new("algorithm", e.to_string()))?;

    let horizon = match overrides.horizon {
        Some(h) => h as i64,
        None => raw.horizon.ok_or_else(|| ConfigError::new("horizon", "missing field"))?,
    };
    if horizon < MIN_HORIZON as i64 {
        return Err(ConfigError::new(
            "horizon",
            format!("horizon {horizon} is too small; it must be at least {MIN_HORIZON}"),
        ));
    }

    if raw.seeds.is_some() && (raw.seed_base.is_some() || raw.runs.is_some()) {
        return Err(ConfigError::new("seeds", "give either seeds or seed_base/runs, not both"));
    }
    let seeds = if let Some(list) = &overrides.seeds {
        list.clone()
    } else if overrides.seed_base.is_some() || overrides.runs.is_some() {
        let base = overrides.seed_base.or(raw.seed_base).unwrap_or(0);
        let runs = overrides.runs.or(raw.runs).unwrap_or(1);
        (0..runs).map(|i| base + i).collect()
    } else if let Some(list) = raw.seeds {
        list
    } else {
        let base = raw.seed_base.unwrap_or(0);
        (0..raw.runs.unwrap_or(1)).map(|i| base + i).collect()
    };
    if seeds.is_empty() {
        return Err(ConfigError::new("seeds", "at least one seed is required"));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = seeds.iter().find(|s| !seen.insert(**s)) {
        return Err(ConfigError::new("seeds", format!("seed {dup} appears twice")));
    }

    let workers = overrides.workers.or(raw.workers).unwrap_or(1);
    if workers == 0 {
        return Err(ConfigError::new("workers", "must be at least 1"));
    }
    let coverage_delta = raw.coverage_delta.unwrap_or(0.1);
    if !(coverage_delta > 0.0 && coverage_delta < 1.0) {
        return Err(ConfigError::new("coverage_delta", format!("must lie in (0, 1), got {coverage_delta}")));
    }

    Ok(ExperimentConfig {
        instance,
        algorithm,
        horizon: horizon as u64,
        seeds,
        out: overrides
            .out
            .clone()
            .or(raw.out)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
        workers,
        full_events: overrides.full_events || raw.full_events.unwrap_or(false),
        trace: raw.trace.unwrap_or_default(),
        coverage_delta,
    })
}

/// Reads an experiment document from disk.
pub fn load_config(path: &Path, overrides: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(parse_config_with(&text, path.parent(), overrides)?)
}

/// Parses a standalone instance document.
pub fn parse_instance(document: &str) -> Result<BanditInstance> {
    parse_toml::<InstanceDocument>(document)?.build("")
}

pub fn load_instance(path: &Path) -> anyhow::Result<BanditInstance> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(parse_instance(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
horizon = 1000

[instance]
weights = [[1.0]]
mu = [[0.5], [0.0]]
"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let c = parse_config(MINIMAL, None).unwrap();
        assert_eq!(c.algorithm, Algorithm::CExp2);
        assert_eq!(c.trace, TraceGranularity::Summary);
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.workers, 1);
        assert_eq!(c.out, PathBuf::from(DEFAULT_OUT));
        assert!(!c.full_events);
        assert_eq!(c.instance.sigma(), 1.0);
    }

    #[test]
    fn bad_weight_column_is_named() {
        let doc = r#"
horizon = 1000
[instance]
weights = [[0.5, 0.5], [0.4, 0.5]]
mu = [[1.0, 0.0], [0.0, 1.0]]
"#;
        let e = parse_config(doc, None).unwrap_err();
        assert_eq!(e.path, "instance.weights");
        assert!(e.message.contains("column 0"), "{e}");
    }

    #[test]
    fn small_horizon_rejected() {
        let doc = MINIMAL.replace("1000", "10");
        let e = parse_config(&doc, None).unwrap_err();
        assert_eq!(e.path, "horizon");
        assert!(e.message.contains("too small"));
    }

    #[test]
    fn missing_and_unknown_fields() {
        let e = parse_config("[instance]\nweights = [[1.0]]\nmu = [[1.0], [0.0]]\n", None).unwrap_err();
        assert_eq!(e.path, "horizon");
        let e = parse_config("horizon = 100\n[instance]\nweights = [[1.0]]\n", None).unwrap_err();
        assert_eq!(e.path, "instance.mu");
        let e = parse_config(&format!("colour = 3\n{MINIMAL}"), None).unwrap_err();
        assert!(e.message.contains("colour"), "{e}");
    }

    #[test]
    fn dimension_errors() {
        let doc = r#"
horizon = 100
[instance]
M = 2
weights = [[1.0]]
mu = [[1.0], [0.0]]
"#;
        assert_eq!(parse_config(doc, None).unwrap_err().path, "instance.M");
        let doc = r#"
horizon = 100
[instance]
weights = [[1.0]]
mu = [[1.0], [0.0, 2.0]]
"#;
        assert_eq!(parse_config(doc, None).unwrap_err().path, "instance.mu[1]");
    }

    #[test]
    fn seeds_and_overrides() {
        let doc = format!("seed_base = 10\nruns = 3\n{MINIMAL}");
        assert_eq!(parse_config(&doc, None).unwrap().seeds, vec![10, 11, 12]);
        let over = Overrides {
            seeds: Some(vec![4, 5]),
            horizon: Some(5000),
            algorithm: Some("wcpe-reg".into()),
            out: Some("elsewhere".into()),
            full_events: true,
            ..Overrides::default()
        };
        let c = parse_config_with(&doc, None, &over).unwrap();
        assert_eq!(c.seeds, vec![4, 5]);
        assert_eq!(c.horizon, 5000);
        assert_eq!(c.algorithm, Algorithm::WcpeReg);
        assert_eq!(c.out, PathBuf::from("elsewhere"));
        assert!(c.full_events);
        let both = format!("seeds = [1]\nruns = 3\n{MINIMAL}");
        assert_eq!(parse_config(&both, None).unwrap_err().path, "seeds");
        let empty = format!("seeds = []\n{MINIMAL}");
        assert_eq!(parse_config(&empty, None).unwrap_err().path, "seeds");
        let dup = format!("seeds = [1, 1]\n{MINIMAL}");
        assert_eq!(parse_config(&dup, None).unwrap_err().path, "seeds");
        let bad = format!("algorithm = \"ucb\"\n{MINIMAL}");
        assert_eq!(parse_config(&bad, None).unwrap_err().path, "algorithm");
    }

    #[test]
    fn instance_round_trip() {
        let c = parse_config(MINIMAL, None).unwrap();
        let text = InstanceDocument::from_instance(&c.instance).to_toml();
        assert_eq!(parse_instance(&text).unwrap(), c.instance);
    }
}
