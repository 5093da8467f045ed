//! Experiment configuration: one TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use cvr_core::coordinator::AdmmConfig;
use cvr_core::generator::{generate_synthetic_feeder, reference_feeder, FeederSpec};
use cvr_core::network::{validate, Feeder};
use cvr_core::simbus::{FailureWindow, LatencyPolicy};
use cvr_core::CvrError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchmark::Strategy;
use crate::scenario::ScenarioTimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Seeds the scenario fluctuations and every message bus. Required.
    pub seed: u64,
    #[serde(default)]
    pub feeder: FeederSource,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub admm: AdmmConfig,
    #[serde(default)]
    pub bus: LatencyPolicy,
    #[serde(default = "Strategy::all")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub ccvr: CcvrConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeederSource {
    /// The bundled 13-bus primary with 8 secondaries.
    #[default]
    Reference,
    Generate { spec: FeederSpec },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// CSV with `minute,load_p,load_q,pv`; the bundled day when absent.
    pub series: Option<PathBuf>,
    pub start: usize,
    /// Number of steps from `start`; the rest of the series when absent.
    pub steps: Option<usize>,
    pub load_noise: f64,
    pub pv_noise: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig { series: None, start: 0, steps: None, load_noise: 0.01, pv_noise: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CcvrConfig {
    /// Voltage margin, p.u. magnitude, inside the band of the centralized
    /// loss-free model.
    pub v_margin: f64,
}

impl Default for CcvrConfig {
    fn default() -> Self {
        CcvrConfig { v_margin: 0.008 }
    }
}

/// Single operating point experiments sweeping the partial barrier and
/// the uplink latency.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Empty means 25, 50, 75 and 100% of the followers.
    pub partial_barriers: Vec<usize>,
    /// Constant uplink latencies in clocks; empty means `[0]`.
    pub latencies: Vec<u64>,
    /// Series step of the operating point; the peak-load step when absent.
    pub step: Option<usize>,
    /// Draw the barrier's followers at random each clock.
    pub random_subset: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// Every follower when absent.
    pub partial_barrier: Option<usize>,
    pub failures: Vec<FailureWindow>,
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("out") }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside a TOML table, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CvrError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CvrError::Config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CvrError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CvrError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Config, CvrError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CvrError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CvrError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Config, CvrError> {
        let text = std::fs::read_to_string(path).map_err(|e| CvrError::io(path, e))?;
        Config::from_toml(&text, overrides).map_err(|e| match e {
            CvrError::Parse(m) | CvrError::Config(m) => CvrError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn check(&self) -> Result<(), CvrError> {
        self.bus.check()?;
        if self.scenario.load_noise < 0.0 || self.scenario.pv_noise < 0.0 {
            return Err(CvrError::Config("scenario noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn feeder(&self) -> Result<Feeder, CvrError> {
        let feeder = match &self.feeder {
            FeederSource::Reference => reference_feeder(),
            FeederSource::Generate { spec } => generate_synthetic_feeder(spec)?,
            FeederSource::File { path } => Feeder::load(path)?,
        };
        let problems = validate(&feeder);
        if !problems.is_empty() {
            let list: Vec<String> = problems.iter().map(|v| v.to_string()).collect();
            return Err(CvrError::Structural(list.join("; ")));
        }
        Ok(feeder)
    }

    /// The configured window of the scenario series.
    pub fn series(&self) -> Result<ScenarioTimeSeries, CvrError> {
        let full = match &self.scenario.series {
            Some(p) => {
                let f = std::fs::File::open(p).map_err(|e| CvrError::io(p, e))?;
                ScenarioTimeSeries::read_csv(f)?
            }
            None => ScenarioTimeSeries::daily(self.seed, self.scenario.load_noise, self.scenario.pv_noise)?,
        };
        let len = self.scenario.steps.unwrap_or(full.len());
        Ok(full.window(self.scenario.start, len))
    }

    /// SHA-256 of the resolved configuration and feeder, hex encoded.
    pub fn hash(&self, feeder: &Feeder) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        h.update(feeder.to_toml().as_bytes());
        hex::encode(h.finalize())
    }
}
