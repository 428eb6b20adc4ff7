//! Run configuration: preset defaults, overridden by a flat `key = value`
//! file and then by `--set key=value` flags.
//!
//! Keys are section-prefixed field names (`model.base_width`,
//! `schedule.steps`, `train.lr_main`) plus the top-level `preset`. Values
//! take the type of the preset default; lists are comma-separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nucleidiff_core::ScheduleParams;
use nucleidiff_nn::{DenoiserConfig, Preset, TrainConfig};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub const SECTIONS: [&str; 3] = ["model", "schedule", "train"];

/// Fully resolved settings for one command invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub preset: Preset,
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub train: TrainConfig,
    /// Command-specific arguments, recorded verbatim for re-runs.
    pub args: BTreeMap<String, String>,
}

/// One `key = value` assignment with where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub origin: String,
}

/// Parses the flat config format. Blank lines and `#` comments are skipped.
pub fn parse_assignments(text: &str, source: &str) -> CliResult<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{source}:{}", i + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}: expected `key = value`, found {:?}", raw.trim())))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(CliError::Usage(format!("{origin}: empty key")));
        }
        out.push(Assignment { key: key.to_string(), value: v.trim().to_string(), origin });
    }
    Ok(out)
}

/// Parses one `--set key=value` flag.
pub fn parse_override(s: &str) -> CliResult<Assignment> {
    let (k, v) = s.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    Ok(Assignment { key: k.trim().to_string(), value: v.trim().to_string(), origin: format!("--set {s}") })
}

fn defaults(preset: Preset) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("model".into(), serde_json::to_value(preset.denoiser()).expect("serializable"));
    m.insert("schedule".into(), serde_json::to_value(preset.schedule()).expect("serializable"));
    m.insert("train".into(), serde_json::to_value(preset.train()).expect("serializable"));
    m
}

fn typed_value(template: &Value, raw: &str, origin: &str, key: &str) -> CliResult<Value> {
    let bad = |what: &str| CliError::Usage(format!("{origin}: {key} expects {what}, got {raw:?}"));
    match template {
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| bad("true or false")),
        Value::Number(n) if n.is_u64() => {
            raw.parse::<u64>().map(Value::from).map_err(|_| bad("a non-negative integer"))
        }
        Value::Number(_) => {
            let x: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(x).map(Value::Number).ok_or_else(|| bad("a finite number"))
        }
        Value::Array(_) => {
            if raw.is_empty() {
                return Ok(Value::Array(Vec::new()));
            }
            raw.split(',')
                .map(|s| s.trim().parse::<u64>().map(Value::from).map_err(|_| bad("a comma-separated integer list")))
                .collect::<CliResult<Vec<_>>>()
                .map(Value::Array)
        }
        Value::String(_) => Ok(Value::String(raw.to_string())),
        _ => Err(bad("a value of a supported type")),
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Array(a) => a.iter().map(render_value).collect::<Vec<_>>().join(","),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Resolves preset, then config file, then overrides. The preset is
    /// taken from `preset_flag`, else from a `preset` key in the file,
    /// else `paper`.
    pub fn resolve(
        command: &str,
        preset_flag: Option<Preset>,
        config_file: Option<&Path>,
        overrides: &[Assignment],
    ) -> CliResult<Self> {
        let mut assignments = Vec::new();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            assignments.extend(parse_assignments(&text, &path.display().to_string())?);
        }
        assignments.extend(overrides.iter().cloned());

        let mut preset = Preset::Paper;
        for a in assignments.iter().filter(|a| a.key == "preset") {
            preset = a.value.parse().map_err(|_| {
                CliError::Usage(format!("{}: preset must be paper or tiny, got {:?}", a.origin, a.value))
            })?;
        }
        if let Some(p) = preset_flag {
            preset = p;
        }

        let mut tree = defaults(preset);
        for a in assignments.iter().filter(|a| a.key != "preset") {
            let unknown = || CliError::Usage(format!("{}: unknown config key {:?}", a.origin, a.key));
            let (section, field) = a.key.split_once('.').ok_or_else(unknown)?;
            let slot = tree
                .get_mut(section)
                .and_then(Value::as_object_mut)
                .and_then(|m| m.get_mut(field))
                .ok_or_else(unknown)?;
            *slot = typed_value(slot, &a.value, &a.origin, &a.key)?;
        }
        let take = |name: &str| tree.get(name).cloned().expect("section present");
        let model: DenoiserConfig =
            serde_json::from_value(take("model")).map_err(|e| CliError::Usage(format!("model config: {e}")))?;
        let schedule: ScheduleParams =
            serde_json::from_value(take("schedule")).map_err(|e| CliError::Usage(format!("schedule config: {e}")))?;
        let train: TrainConfig =
            serde_json::from_value(take("train")).map_err(|e| CliError::Usage(format!("train config: {e}")))?;
        model.validate()?;
        train.validate()?;
        schedule.build::<f64>()?;
        Ok(Self { command: command.to_string(), preset, model, schedule, train, args: BTreeMap::new() })
    }

    pub fn with_arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    /// Every resolved key in file order, ready to be read back with `--config`.
    pub fn flat(&self) -> Vec<(String, String)> {
        let mut out = vec![("preset".to_string(), self.preset.to_string())];
        let sections = [
            ("model", serde_json::to_value(&self.model).expect("serializable")),
            ("schedule", serde_json::to_value(self.schedule).expect("serializable")),
            ("train", serde_json::to_value(&self.train).expect("serializable")),
        ];
        for (name, v) in sections {
            for (k, x) in v.as_object().expect("struct serializes to an object") {
                out.push((format!("{name}.{k}"), render_value(x)));
            }
        }
        out
    }

    /// The recorded form: command arguments as comments, then every key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# command: {}", self.command);
        for (k, v) in &self.args {
            let _ = writeln!(s, "# arg.{k}: {v}");
        }
        for (k, v) in self.flat() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
