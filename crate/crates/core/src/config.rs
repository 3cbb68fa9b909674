//! Run configuration: one JSON document drives schedules, data, training,
//! sampling, and reporting. Unknown keys are rejected everywhere, and CLI
//! overrides are dotted paths applied to the raw document before it is
//! validated, so `train.steps=200` behaves exactly like editing the file.

use crate::analysis::ToyConfig;
use crate::paths::{SyntheticProcess, TimeGrid};
use crate::sample::SampleConfig;
use crate::schedule::{ScheduleKind, ScheduleTable, VolatilitySchedule};
use crate::train::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Schedule declaration. Built-in kinds carry their parameters inline;
/// custom schedules reference a 3-column CSV `t,a,sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { sigma: f64 },
    ExponentialDecay { a: f64, b: f64, k: f64 },
    Periodic { alpha: f64, k: f64, eps: f64 },
    CosineDecay { alpha: f64, eps: f64 },
    Custom { csv: PathBuf },
}

impl ScheduleSpec {
    pub fn resolve(&self, horizon: f64, base_dir: &Path) -> Result<VolatilitySchedule> {
        let kind = match self {
            ScheduleSpec::Constant { sigma } => ScheduleKind::Constant { sigma: *sigma },
            ScheduleSpec::ExponentialDecay { a, b, k } => {
                ScheduleKind::ExponentialDecay { a: *a, b: *b, k: *k }
            }
            ScheduleSpec::Periodic { alpha, k, eps } => {
                ScheduleKind::Periodic { alpha: *alpha, k: *k, eps: *eps }
            }
            ScheduleSpec::CosineDecay { alpha, eps } => {
                ScheduleKind::CosineDecay { alpha: *alpha, eps: *eps }
            }
            ScheduleSpec::Custom { csv } => {
                let path = if csv.is_absolute() { csv.clone() } else { base_dir.join(csv) };
                ScheduleKind::Custom { table: read_schedule_csv(&path)? }
            }
        };
        VolatilitySchedule::new(kind, horizon)
    }
}

/// Parse a `t,a,sigma` CSV (header optional).
pub fn read_schedule_csv(path: &Path) -> Result<ScheduleTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read schedule csv {}: {e}", path.display())))?;
    let mut times = Vec::new();
    let mut drift = Vec::new();
    let mut sigma = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!("schedule csv row {} needs 3 columns", i + 1)));
        }
        if i == 0 && fields[0].parse::<f64>().is_err() {
            continue; // header row
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number {s:?} in schedule csv row {}", i + 1)))
        };
        times.push(parse(fields[0])?);
        drift.push(parse(fields[1])?);
        sigma.push(parse(fields[2])?);
    }
    Ok(ScheduleTable { times, drift, sigma })
}

/// An extra observed waypoint for sampling, beyond the always-observed
/// initial condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinSpec {
    pub time: f64,
    pub value: Vec<f64>,
}

/// Grid and conditioning used by `sample` and `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Waypoint times; defaults to the process's natural grid.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    /// Observed future/interior waypoints (non-causal conditioning).
    #[serde(default)]
    pub pins: Vec<PinSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Reference sample count; defaults to the generated count.
    #[serde(default)]
    pub n_reference: Option<usize>,
    #[serde(default = "default_permutations")]
    pub n_permutations: usize,
}

fn default_permutations() -> usize {
    200
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig { n_reference: None, n_permutations: default_permutations() }
    }
}

/// The whole run document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schedule: ScheduleSpec,
    pub process: SyntheticProcess,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sample: Option<SampleConfig>,
    #[serde(default)]
    pub eval: Option<EvalSpec>,
    #[serde(default)]
    pub report: Option<ReportConfig>,
    #[serde(default)]
    pub toy: Option<ToyConfig>,
}

impl RunConfig {
    /// Load, apply `key.path=value` overrides, and validate.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config is not valid json: {e}")))?;
        for ov in overrides {
            apply_override(&mut doc, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("config schema: {e}")))?;
        if let Some(train) = &cfg.train {
            train.validate()?;
        }
        Ok(cfg)
    }

    /// Output directory honoring the root override environment variable.
    pub fn resolved_out_dir(&self) -> PathBuf {
        match std::env::var_os("SDEBRIDGE_OUT_ROOT") {
            Some(root) => PathBuf::from(root).join(&self.out_dir),
            None => self.out_dir.clone(),
        }
    }

    /// Evaluation grid: the explicit one, else the process's natural grid.
    pub fn eval_grid(&self) -> Result<TimeGrid> {
        if let Some(eval) = &self.eval {
            if let Some(times) = &eval.grid {
                return TimeGrid::new(times.clone());
            }
        }
        self.process
            .natural_grid()
            .ok_or_else(|| Error::Config("this process needs an explicit eval.grid".into()))
    }

    /// Horizon that the schedule must cover.
    pub fn horizon(&self) -> f64 {
        let mut h: f64 = 1.0;
        if let Ok(grid) = self.eval_grid() {
            h = h.max(grid.horizon());
        }
        if let Some(train) = &self.train {
            if let crate::train::GridSampler::Fixed { times } = &train.grid {
                if let Some(last) = times.last() {
                    h = h.max(*last);
                }
            }
        }
        h
    }
}

/// Apply one `path.to.key=value` override (a leading `--` is accepted).
/// Values parse as JSON when possible and fall back to strings.
pub fn apply_override(doc: &mut serde_json::Value, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("override {spec:?} is not key=value")))?;
    if path.is_empty() {
        return Err(Error::Usage("override has an empty key path".into()));
    }
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Usage(format!("override path {path:?} crosses a non-object")))?;
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// The lock file: resolved configuration plus the code version, written
/// before any artifact so every run is reproducible from it alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockFile {
    pub code_version: String,
    pub config: RunConfig,
}

pub fn write_lock_file(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let lock = LockFile {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&lock)?;
    std::fs::write(dir.join("config.lock.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::Method;

    fn write_temp(name: &str, content: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("sdebridge_config_tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(name);
        std::fs::write(&path, content).unwrap();
        path
    }

    const MINIMAL: &str = r#"{
        "seed": 7,
        "out_dir": "runs/demo",
        "schedule": {"kind": "constant", "sigma": 1.0},
        "process": {"kind": "mixture_non_markov", "jitter": 0.01},
        "train": {"method": "abc", "grid": {"kind": "fixed", "times": [0.0, 0.3333333333333333, 0.6666666666666666, 1.0]}}
    }"#;

    #[test]
    fn minimal_config_round_trips_with_defaults() {
        let path = write_temp("minimal.json", MINIMAL);
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        let train = cfg.train.unwrap();
        assert_eq!(train.method, Method::Abc);
        assert_eq!(train.steps, 5000);
        assert_eq!(train.batch, 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL.replace("\"seed\": 7", "\"seed\": 7, \"sede\": 8");
        let path = write_temp("unknown.json", &bad);
        let err = RunConfig::load(&path, &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let path = write_temp("override.json", MINIMAL);
        let cfg = RunConfig::load(
            &path,
            &["train.steps=123".into(), "--schedule.sigma=0.4".into(), "seed=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.unwrap().steps, 123);
        assert_eq!(cfg.schedule, ScheduleSpec::Constant { sigma: 0.4 });
    }

    #[test]
    fn bad_override_is_a_usage_error() {
        let path = write_temp("bad_override.json", MINIMAL);
        let err = RunConfig::load(&path, &["train.steps".into()]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn custom_schedule_csv_resolves() {
        let csv = write_temp("sched.csv", "t,a,sigma\n0,0,1\n0.5,0,1\n1,0,1\n");
        let spec = ScheduleSpec::Custom { csv: csv.clone() };
        let sched = spec.resolve(1.0, csv.parent().unwrap()).unwrap();
        assert!((sched.sigma(0.3) - 1.0).abs() < 1e-15);
        let c = sched.cov_kernel(0.0, 0.7, 0.7).unwrap();
        assert!((c - 0.7).abs() < 1e-8);
    }

    #[test]
    fn eval_grid_defaults_to_the_natural_grid() {
        let path = write_temp("natural.json", MINIMAL);
        let cfg = RunConfig::load(&path, &[]).unwrap();
        let grid = cfg.eval_grid().unwrap();
        assert_eq!(grid.times().len(), 4);
    }
}
