//! Run configuration assembled from defaults, flags and an optional JSON
//! file. Keys present in the file win over flags.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::{Map, Value};
use spj_core::design::NoiseKind;
use spj_core::{LambdaChoice, RunConfig, SimConfig};

use crate::args::{RunFlags, SimulateArgs};

/// Invalid flags or configuration file; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub input: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub nodewise: Option<PathBuf>,
}

/// Parsed `--config` file, split into its sections.
#[derive(Debug, Default)]
pub struct FileConfig {
    pub mode: Option<String>,
    pub replications: Option<usize>,
    pub shards: Option<usize>,
    pub sim: Map<String, Value>,
    pub paths: Paths,
    pub run: Map<String, Value>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| ConfigError::new(format!("config {}: {}", path.display(), e.0)))
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::new(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(ConfigError::new("top level must be a JSON object"));
        };
        let take_usize = |map: &mut Map<String, Value>, key: &str| -> Result<Option<usize>, ConfigError> {
            map.remove(key)
                .map(|v| serde_json::from_value(v).map_err(|e| ConfigError::new(format!("{key}: {e}"))))
                .transpose()
        };
        let mode = map
            .remove("mode")
            .map(|v| match v {
                Value::String(s) => Ok(s),
                _ => Err(ConfigError::new("mode must be a string")),
            })
            .transpose()?;
        let replications = take_usize(&mut map, "replications")?;
        let shards = take_usize(&mut map, "shards")?;
        let sim = match map.remove("sim") {
            None => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => return Err(ConfigError::new("sim must be an object")),
        };
        let paths = map
            .remove("paths")
            .map(|v| serde_json::from_value(v).map_err(|e| ConfigError::new(format!("paths: {e}"))))
            .transpose()?
            .unwrap_or_default();
        Ok(Self {
            mode,
            replications,
            shards,
            sim,
            paths,
            run: map,
        })
    }

    /// Rejects a file written for a different subcommand.
    pub fn check_mode(&self, mode: &str) -> Result<(), ConfigError> {
        match &self.mode {
            Some(m) if m != mode => Err(ConfigError::new(format!(
                "config file is for mode '{m}' but the command is '{mode}'"
            ))),
            _ => Ok(()),
        }
    }
}

fn object<T: serde::Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value).expect("config types serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config types serialize to objects"),
    }
}

fn set<T: serde::Serialize>(map: &mut Map<String, Value>, key: &str, value: Option<T>) {
    if let Some(v) = value {
        map.insert(key.to_owned(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

pub fn build_run_config(flags: &RunFlags, file: &FileConfig) -> Result<RunConfig, ConfigError> {
    let mut map = object(&RunConfig::default());
    set(&mut map, "a_n", flags.a_n);
    if let Some(l) = &flags.lambda {
        let choice: LambdaChoice = l.parse().map_err(|e: spj_core::SpjError| ConfigError::new(e.to_string()))?;
        set(&mut map, "lambda", Some(choice));
    }
    set(&mut map, "lambda_select_multiplier", flags.lambda_select_multiplier);
    set(&mut map, "draws", flags.draws);
    set(&mut map, "alpha", flags.alpha);
    set(&mut map, "seed", flags.seed);
    set(&mut map, "workers", flags.workers);
    set(&mut map, "cv_folds", flags.cv_folds);
    set(&mut map, "cv_rule", flags.cv_rule.as_deref());
    if flags.no_debias {
        set(&mut map, "debias", Some(false));
    }
    set(&mut map, "coords", flags.coords.as_ref());
    set(&mut map, "lambda_x", flags.lambda_x);
    set(&mut map, "lambda_sigma", flags.lambda_sigma);
    set(&mut map, "threshold", flags.threshold);
    set(&mut map, "ellipsoid_model", flags.ellipsoid_model.as_deref());
    set(&mut map, "interval_kind", flags.interval_kind.as_deref());
    set(&mut map, "sigma0_sq", flags.sigma0_sq);
    if flags.timings {
        set(&mut map, "record_timings", Some(true));
    }
    for (k, v) in &file.run {
        map.insert(k.clone(), v.clone());
    }
    let cfg: RunConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError::new(format!("run configuration: {e}")))?;
    cfg.validate().map_err(|e| ConfigError::new(e.to_string()))?;
    Ok(cfg)
}

pub fn build_sim_config(args: &SimulateArgs, file: &FileConfig, seed: u64) -> Result<SimConfig, ConfigError> {
    let mut map = object(&SimConfig {
        seed,
        ..SimConfig::default()
    });
    set(&mut map, "n", args.n);
    set(&mut map, "p", args.p);
    set(&mut map, "s0", args.s0);
    set(&mut map, "signal_value", args.signal);
    set(&mut map, "rho", args.rho);
    if let Some(noise) = &args.noise {
        let kind: NoiseKind = noise
            .parse()
            .map_err(|e: spj_core::SpjError| ConfigError::new(e.to_string()))?;
        set(&mut map, "noise_kind", Some(kind));
    }
    set(&mut map, "sigma0", args.sigma0);
    for (k, v) in &file.sim {
        map.insert(k.clone(), v.clone());
    }
    let sim: SimConfig =
        serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError::new(format!("sim configuration: {e}")))?;
    sim.validate().map_err(|e| ConfigError::new(e.to_string()))?;
    Ok(sim)
}
