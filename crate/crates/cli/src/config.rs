//! Run configuration: built-in defaults, a TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};
use tsddp::ddp::SolverOptions;
use tsddp::montecarlo::McMode;
use tsddp::problems::{DoubleIntegratorConfig, LowThrustConfig};
use tsddp::transcription::TranscriptionOptions;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file is not valid TOML: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    DoubleIntegrator,
    LowThrust,
}

impl ProblemKind {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "double_integrator" => Ok(Self::DoubleIntegrator),
            "low_thrust" => Ok(Self::LowThrust),
            other => Err(invalid("problem", format!("unknown problem `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Ddp,
    Tsddp,
}

impl SolveMode {
    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "ddp" => Ok(Self::Ddp),
            "tsddp" => Ok(Self::Tsddp),
            other => Err(invalid("solve.mode", format!("expected ddp or tsddp, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub mode: SolveMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSection {
    pub samples: usize,
    pub mode: McMode,
    pub saturate: bool,
    pub parallel: bool,
}

/// Everything a run depends on. Serialized into every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub double_integrator: DoubleIntegratorConfig,
    pub low_thrust: LowThrustConfig,
    pub solver: SolverOptions,
    pub transcription: TranscriptionOptions,
    pub solve: SolveSection,
    pub montecarlo: MonteCarloSection,
}

/// Command-line overrides; `None` keeps the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub problem: Option<String>,
    pub mode: Option<String>,
    pub duty: Option<f64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub saturate: bool,
}

impl RunConfig {
    /// Defaults for `problem`, before any file or flag.
    pub fn defaults(problem: ProblemKind) -> Self {
        let di = DoubleIntegratorConfig::default();
        let lt = LowThrustConfig::default();
        let (solver, transcription) = match problem {
            ProblemKind::DoubleIntegrator => (di.solver(), di.transcription()),
            ProblemKind::LowThrust => (lt.solver(), lt.transcription()),
        };
        Self {
            problem,
            seed: 0,
            out_dir: PathBuf::from("out"),
            double_integrator: di,
            low_thrust: lt,
            solver,
            transcription,
            solve: SolveSection { mode: SolveMode::Tsddp },
            montecarlo: MonteCarloSection {
                samples: 500,
                mode: McMode::TsddpPolicy,
                saturate: false,
                parallel: true,
            },
        }
    }

    /// Resolves defaults, then the optional file, then `mode_is_mc`-aware flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides, mode_is_mc: bool) -> Result<Self, ConfigError> {
        let user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_path_buf(),
                    source,
                })?;
                text.parse::<Table>().map_err(|e| ConfigError::Syntax(e.to_string()))?
            }
            None => Table::new(),
        };
        let problem = match (&flags.problem, user.get("problem")) {
            (Some(p), _) => ProblemKind::parse(p)?,
            (None, Some(Value::String(p))) => ProblemKind::parse(p)?,
            (None, Some(_)) => return Err(invalid("problem", "expected a string")),
            (None, None) => ProblemKind::DoubleIntegrator,
        };

        // Transcription defaults depend on the problem section, so that section
        // is merged first.
        let mut base = Self::defaults(problem);
        let mut merged = to_table(&base);
        if let Some(v) = user.get("double_integrator") {
            merge(&mut merged, "double_integrator", v)?;
        }
        if let Some(v) = user.get("low_thrust") {
            merge(&mut merged, "low_thrust", v)?;
        }
        let partial: RunConfig = from_table(merged)?;
        base.double_integrator = partial.double_integrator;
        base.low_thrust = partial.low_thrust;
        base.transcription = match problem {
            ProblemKind::DoubleIntegrator => base.double_integrator.transcription(),
            ProblemKind::LowThrust => base.low_thrust.transcription(),
        };

        let mut merged = to_table(&base);
        for (key, value) in &user {
            if key == "problem" {
                continue;
            }
            merge(&mut merged, key, value)?;
        }
        let mut cfg: RunConfig = from_table(merged)?;
        cfg.problem = problem;
        cfg.apply(flags, mode_is_mc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, flags: &Overrides, mode_is_mc: bool) -> Result<(), ConfigError> {
        if let Some(m) = &flags.mode {
            if mode_is_mc {
                self.montecarlo.mode = m.parse().map_err(|_| {
                    invalid("montecarlo.mode", format!("expected ddp_reopt, tsddp_reopt or tsddp_policy, got `{m}`"))
                })?;
            } else {
                self.solve.mode = SolveMode::parse(m)?;
            }
        }
        if let Some(d) = flags.duty {
            match self.problem {
                ProblemKind::DoubleIntegrator => self.double_integrator.duty_cycle = d,
                ProblemKind::LowThrust => self.low_thrust.duty_cycle = d,
            }
        }
        if let Some(n) = flags.samples {
            self.montecarlo.samples = n;
        }
        if let Some(s) = flags.seed {
            self.seed = s;
        }
        if let Some(o) = &flags.out_dir {
            self.out_dir = o.clone();
        }
        if flags.saturate {
            self.montecarlo.saturate = true;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.double_integrator
            .validate()
            .map_err(|r| invalid("double_integrator", r))?;
        self.low_thrust.validate().map_err(|r| invalid("low_thrust", r))?;
        self.solver.validate().map_err(|e| invalid("solver", e.to_string()))?;
        self.transcription
            .validate()
            .map_err(|e| invalid("transcription", e.to_string()))?;
        if self.montecarlo.samples == 0 {
            return Err(invalid("montecarlo.samples", "must be at least 1"));
        }
        Ok(())
    }

    /// Duty cycle of the selected problem.
    pub fn duty(&self) -> f64 {
        match self.problem {
            ProblemKind::DoubleIntegrator => self.double_integrator.duty_cycle,
            ProblemKind::LowThrust => self.low_thrust.duty_cycle,
        }
    }

    /// Single-line JSON of the resolved configuration.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

fn to_table<T: Serialize>(v: &T) -> Table {
    match Value::try_from(v).expect("config serializes to TOML") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

fn from_table<T: for<'de> Deserialize<'de>>(t: Table) -> Result<T, ConfigError> {
    Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| invalid("config", e.message().to_string()))
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Overlays `value` onto `base[key]`, rejecting keys the defaults do not have
/// and values whose type differs from the default's.
fn merge(base: &mut Table, key: &str, value: &Value) -> Result<(), ConfigError> {
    merge_at(base, key, key, value)
}

fn merge_at(base: &mut Table, key: &str, path: &str, value: &Value) -> Result<(), ConfigError> {
    let Some(slot) = base.get_mut(key) else {
        return Err(ConfigError::UnknownKey(path.to_string()));
    };
    match (slot, value) {
        (Value::Table(inner), Value::Table(user)) => {
            for (k, v) in user {
                merge_at(inner, k, &format!("{path}.{k}"), v)?;
            }
            Ok(())
        }
        (slot @ Value::Float(_), Value::Integer(i)) => {
            *slot = Value::Float(*i as f64);
            Ok(())
        }
        (Value::Array(old), Value::Array(new)) => {
            if !old.is_empty() && old.len() != new.len() {
                return Err(invalid(path, format!("expected {} elements, got {}", old.len(), new.len())));
            }
            let mut out = Vec::with_capacity(new.len());
            for (i, v) in new.iter().enumerate() {
                let v = match (old.get(i), v) {
                    (Some(Value::Float(_)), Value::Integer(n)) => Value::Float(*n as f64),
                    (Some(o), v) if kind(o) != kind(v) => {
                        return Err(invalid(path, format!("expected {} elements, got {}", kind(o), kind(v))));
                    }
                    (_, v) => v.clone(),
                };
                out.push(v);
            }
            *old = out;
            Ok(())
        }
        (slot, v) if kind(slot) == kind(v) => {
            *slot = v.clone();
            Ok(())
        }
        (slot, v) => Err(invalid(path, format!("expected {}, got {}", kind(slot), kind(v)))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_file(text: &str) -> Result<RunConfig, ConfigError> {
        let dir = std::env::temp_dir().join(format!("tsddp-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join(format!("{:x}.toml", text.len() * 7919 + text.bytes().map(|b| b as usize).sum::<usize>()));
        std::fs::write(&path, text).unwrap();
        let r = RunConfig::resolve(Some(&path), &Overrides::default(), false);
        std::fs::remove_file(&path).ok();
        r
    }

    #[test]
    fn defaults_validate() {
        for p in [ProblemKind::DoubleIntegrator, ProblemKind::LowThrust] {
            RunConfig::defaults(p).validate().unwrap();
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let e = with_file("[solver]\nmax_iterz = 3\n").unwrap_err();
        assert!(e.to_string().contains("solver.max_iterz"), "{e}");
        let e = with_file("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn type_mismatch_is_named() {
        let e = with_file("[double_integrator]\ndt = \"fast\"\n").unwrap_err();
        assert!(e.to_string().contains("double_integrator.dt"), "{e}");
    }

    #[test]
    fn integers_are_accepted_for_floats() {
        let c = with_file("[double_integrator]\nterminal_weight = 100\n").unwrap();
        assert_eq!(c.double_integrator.terminal_weight, 100.0);
    }

    #[test]
    fn flags_win_over_file() {
        let dir = std::env::temp_dir().join(format!("tsddp-cfg-flags-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        std::fs::write(&path, "seed = 3\n[montecarlo]\nsamples = 9\n").unwrap();
        let flags = Overrides {
            samples: Some(4),
            ..Overrides::default()
        };
        let c = RunConfig::resolve(Some(&path), &flags, true).unwrap();
        assert_eq!(c.montecarlo.samples, 4);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn transcription_default_follows_problem_section() {
        let c = with_file("problem = \"low_thrust\"\n[low_thrust]\nthrust_bound = 2e-7\n").unwrap();
        let b = c.low_thrust.scaled_thrust_bound();
        assert!((c.transcription.epsilon - 1e-4 * b.powi(4)).abs() < 1e-30);
    }
}
