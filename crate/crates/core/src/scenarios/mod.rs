//! End-to-end scenarios: configuration, execution and run summaries.
//!
//! A scenario produces a labeled trace. Columns named `cost` and
//! `viol:<row>` are recognized when summarizing: the summary's cost
//! statistics and per-row violations are computed from exactly the rows that
//! are emitted, so the two always agree.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::sim::{Status, Trajectory};
use crate::{Matrix, Vector};

pub mod checks;
pub mod congestion;
pub mod dispatch;
pub mod frequency;
pub mod tutorial;

/// Free-form parameter table of a config section.
pub type Params = BTreeMap<String, Value>;

/// Time-stamped step change of a named scenario quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub t: f64,
    pub target: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    /// Step size; scenario default when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    /// Horizon; scenario default when absent.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

/// Scenario configuration as read from JSON or TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default)]
    pub plant: Params,
    #[serde(default)]
    pub controller: Params,
    #[serde(default)]
    pub disturbances: Vec<Event>,
    #[serde(default)]
    pub sim: SimSettings,
    /// Trace columns to emit; all when empty.
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl ScenarioConfig {
    /// Minimal config for a built-in scenario with all defaults.
    pub fn named(name: &str) -> Self {
        Self {
            scenario: name.into(),
            plant: Params::new(),
            controller: Params::new(),
            disturbances: Vec::new(),
            sim: SimSettings::default(),
            outputs: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a `.json` or `.toml` file.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            Some("toml") => Self::from_toml(&text),
            _ => Err(Error::Config(format!("{}: expected a .json or .toml file", path.display()))),
        }
    }

    /// Sets a controller parameter (builder helper for programmatic use).
    pub fn with_controller(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.controller.insert(key.into(), value.into());
        self
    }

    /// Sets a plant parameter.
    pub fn with_plant(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.plant.insert(key.into(), value.into());
        self
    }

    pub fn with_event(mut self, t: f64, target: &str, value: f64) -> Self {
        self.disturbances.push(Event {
            t,
            target: target.into(),
            value,
        });
        self
    }

    pub fn with_horizon(mut self, dt: f64, t_end: f64) -> Self {
        self.sim.dt = Some(dt);
        self.sim.t_end = Some(t_end);
        self
    }
}

/// Typed access to a parameter table; unknown keys are rejected by
/// [`ParamReader::finish`].
pub struct ParamReader<'a> {
    section: &'static str,
    params: &'a Params,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> ParamReader<'a> {
    pub fn new(section: &'static str, params: &'a Params) -> Self {
        Self {
            section,
            params,
            used: RefCell::new(BTreeSet::new()),
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.into());
        self.params.get(key)
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        Error::Config(format!("{}.{key}: expected {what}", self.section))
    }

    pub fn f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.as_f64().ok_or_else(|| self.bad(key, "a number")),
        }
    }

    pub fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(self.bad(key, "a positive number"))
        }
    }

    pub fn usize(&self, key: &str, default: usize) -> Result<usize> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .map(|n| n as usize)
                .ok_or_else(|| self.bad(key, "a nonnegative integer")),
        }
    }

    pub fn string(&self, key: &str, default: &str) -> Result<String> {
        match self.get(key) {
            None => Ok(default.into()),
            Some(v) => v.as_str().map(str::to_owned).ok_or_else(|| self.bad(key, "a string")),
        }
    }

    pub fn opt_string(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v.as_str().map(|s| Some(s.to_owned())).ok_or_else(|| self.bad(key, "a string")),
        }
    }

    fn numbers(&self, key: &str, v: &Value) -> Result<Vec<f64>> {
        v.as_array()
            .ok_or_else(|| self.bad(key, "an array of numbers"))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| self.bad(key, "an array of numbers")))
            .collect()
    }

    pub fn vector(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(default.to_vec()),
            Some(v) => self.numbers(key, v),
        }
    }

    pub fn opt_vector(&self, key: &str) -> Result<Option<Vec<f64>>> {
        self.get(key).map(|v| self.numbers(key, v)).transpose()
    }

    /// A scalar broadcast to `n` entries, or an array of length `n`.
    pub fn per_item(&self, key: &str, default: f64, n: usize) -> Result<Vec<f64>> {
        match self.get(key) {
            None => Ok(vec![default; n]),
            Some(Value::Number(x)) => Ok(vec![x.as_f64().expect("finite JSON number"); n]),
            Some(v) => {
                let xs = self.numbers(key, v)?;
                if xs.len() == n {
                    Ok(xs)
                } else {
                    Err(self.bad(key, &format!("a number or an array of {n} numbers")))
                }
            }
        }
    }

    /// Row-major matrix given as an array of equal-length rows.
    pub fn matrix(&self, key: &str, default: &Matrix) -> Result<Matrix> {
        match self.get(key) {
            None => Ok(default.clone()),
            Some(v) => {
                let rows = v.as_array().ok_or_else(|| self.bad(key, "an array of rows"))?;
                let parsed: Vec<Vec<f64>> = rows.iter().map(|r| self.numbers(key, r)).collect::<Result<_>>()?;
                let cols = parsed.first().map_or(0, Vec::len);
                if parsed.iter().any(|r| r.len() != cols) {
                    return Err(self.bad(key, "rows of equal length"));
                }
                Ok(Matrix::from_fn(parsed.len(), cols, |i, j| parsed[i][j]))
            }
        }
    }

    pub fn finish(self) -> Result<()> {
        let used = self.used.into_inner();
        match self.params.keys().find(|k| !used.contains(*k)) {
            Some(k) => Err(Error::Config(format!("{}.{k}: unknown parameter", self.section))),
            None => Ok(()),
        }
    }
}

/// Raw outcome of a scenario before decimation and summarizing.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trajectory,
    pub status: Status,
    pub kkt_residual: Option<f64>,
    /// Scenario-specific scalar results.
    pub metrics: BTreeMap<String, f64>,
}

impl RunOutput {
    pub fn new(trace: Trajectory, status: Status) -> Self {
        Self {
            trace,
            status,
            kkt_residual: None,
            metrics: BTreeMap::new(),
        }
    }

    pub fn metric(mut self, key: &str, value: f64) -> Self {
        self.metrics.insert(key.into(), value);
        self
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.trace.labels.iter().position(|l| l == label)
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        self.column_index(label).map(|i| self.trace.column(i))
    }

    /// Keeps every `every`-th row and the last row, summarizes, then keeps
    /// only the requested columns.
    pub fn finish(self, scenario: &str, every: usize, outputs: &[String]) -> Result<(Trajectory, RunSummary)> {
        let every = every.max(1);
        let n = self.trace.len();
        let mut trace = Trajectory {
            labels: self.trace.labels.clone(),
            ..Trajectory::default()
        };
        for (i, (t, x)) in self.trace.times.iter().zip(&self.trace.states).enumerate() {
            if i % every == 0 || i + 1 == n {
                trace.push(*t, x.clone());
            }
        }
        let summary = RunSummary::from_trace(scenario, &trace, self.status, self.kkt_residual, self.metrics);
        if outputs.is_empty() {
            return Ok((trace, summary));
        }
        let idx: Vec<usize> = outputs
            .iter()
            .map(|o| {
                trace
                    .labels
                    .iter()
                    .position(|l| l == o)
                    .ok_or_else(|| Error::Config(format!("outputs: unknown column {o}")))
            })
            .collect::<Result<_>>()?;
        let selected = Trajectory {
            times: trace.times.clone(),
            states: trace
                .states
                .iter()
                .map(|x| Vector::from_iterator(idx.len(), idx.iter().map(|&i| x[i])))
                .collect(),
            labels: outputs.to_vec(),
        };
        Ok((selected, summary))
    }
}

/// Statistics of the `cost` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostStats {
    pub initial: f64,
    #[serde(rename = "final")]
    pub last: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Machine-readable result of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub status: Status,
    pub final_time: f64,
    pub state_labels: Vec<String>,
    pub final_state: Vec<f64>,
    pub kkt_residual: Option<f64>,
    pub constraint_labels: Vec<String>,
    pub max_violation: Vec<f64>,
    pub final_violation: Vec<f64>,
    pub cost: Option<CostStats>,
    pub metrics: BTreeMap<String, f64>,
}

/// Prefix of violation columns.
pub const VIOLATION_PREFIX: &str = "viol:";

impl RunSummary {
    pub fn from_trace(
        scenario: &str,
        trace: &Trajectory,
        status: Status,
        kkt_residual: Option<f64>,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        let last = trace.states.last();
        let mut summary = RunSummary {
            scenario: scenario.into(),
            status,
            final_time: trace.times.last().copied().unwrap_or(0.0),
            state_labels: Vec::new(),
            final_state: Vec::new(),
            kkt_residual,
            constraint_labels: Vec::new(),
            max_violation: Vec::new(),
            final_violation: Vec::new(),
            cost: None,
            metrics,
        };
        for (i, label) in trace.labels.iter().enumerate() {
            let col = trace.column(i);
            let fin = last.map_or(f64::NAN, |x| x[i]);
            if let Some(name) = label.strip_prefix(VIOLATION_PREFIX) {
                summary.constraint_labels.push(name.into());
                summary.max_violation.push(col.iter().copied().fold(0.0, f64::max));
                summary.final_violation.push(fin);
            } else if label == "cost" && !col.is_empty() {
                summary.cost = Some(CostStats {
                    initial: col[0],
                    last: fin,
                    min: col.iter().copied().fold(f64::INFINITY, f64::min),
                    max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean: col.iter().sum::<f64>() / col.len() as f64,
                });
            } else {
                summary.state_labels.push(label.clone());
                summary.final_state.push(fin);
            }
        }
        summary
    }
}

/// Built-in scenario names with one-line descriptions.
pub const SCENARIOS: &[(&str, &str)] = &[
    ("gain_threshold", "quartic objective with a second-order plant under gradient feedback"),
    ("mechanisms", "constraint enforcement mechanisms on a two-variable quadratic"),
    ("metric_flows", "gradient, metric and Newton flows from several starting points"),
    ("extremum_seeking", "dither-based extremum seeking on a scalar quadratic"),
    ("modifier_adaptation", "filtered modifier adaptation with a plant/model gain mismatch"),
    ("anti_windup", "anti-windup gradient feedback against the projected gradient flow"),
    ("tracking", "running and predictive controllers under a sinusoidal disturbance"),
    ("congestion", "primal-dual congestion control with log utilities"),
    ("frequency", "automatic generation control after a load step"),
    ("dispatch", "feedback dispatch on the six-bus network with wind and outage events"),
];

/// Runs a scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput> {
    match config.scenario.as_str() {
        "gain_threshold" => tutorial::gain_threshold_scenario(config),
        "mechanisms" => tutorial::mechanisms_scenario(config),
        "metric_flows" => tutorial::metric_flows_scenario(config),
        "extremum_seeking" => tutorial::extremum_seeking_scenario(config),
        "modifier_adaptation" => tutorial::modifier_adaptation_scenario(config),
        "anti_windup" => tutorial::anti_windup_scenario(config),
        "tracking" => tutorial::tracking_scenario(config),
        "congestion" => congestion::congestion_scenario(config),
        "frequency" => frequency::frequency_scenario(config),
        "dispatch" => dispatch::dispatch_scenario(config),
        other => Err(Error::Config(format!("unknown scenario {other}"))),
    }
}

/// Rejects disturbance events for scenarios that take none.
pub(crate) fn no_events(config: &ScenarioConfig) -> Result<()> {
    if config.disturbances.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("scenario {} takes no disturbances", config.scenario)))
    }
}

/// Step size and horizon with scenario defaults.
pub(crate) fn horizon(config: &ScenarioConfig, dt: f64, t_end: f64) -> Result<(f64, f64)> {
    let dt = config.sim.dt.unwrap_or(dt);
    let t_end = config.sim.t_end.unwrap_or(t_end);
    if !(dt > 0.0) || !(t_end > 0.0) {
        return Err(Error::Config("sim.dt and sim.t_end must be positive".into()));
    }
    Ok((dt, t_end))
}

/// Builds a labeled trace from rows.
pub(crate) fn labeled(labels: Vec<String>) -> Trajectory {
    Trajectory {
        labels,
        ..Trajectory::default()
    }
}
