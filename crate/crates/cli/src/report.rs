//! One-line JSON records of an evaluation run.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use advgrad::config::AttackConfig;

/// `MAJOR.MINOR` of this build.
pub fn toolbox_version() -> String {
    let mut parts = env!("CARGO_PKG_VERSION").split('.');
    format!("{}.{}", parts.next().unwrap(), parts.next().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInfo {
    pub path: String,
    pub sha256: String,
    pub architecture: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetInfo {
    pub images: String,
    pub labels: String,
    pub images_sha256: String,
    pub size: usize,
}

/// Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackReport {
    pub version: String,
    pub command: String,
    pub attack: Option<String>,
    pub config: Option<AttackConfig>,
    pub defense: String,
    pub bpda: bool,
    pub model: ModelInfo,
    pub dataset: DatasetInfo,
    pub seed: u64,
    pub clean_acc: f64,
    pub adv_acc: Option<f64>,
    pub wall_time_s: f64,
}

impl AttackReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// The report with wall time zeroed, for comparing reruns.
    pub fn without_wall_time(&self) -> Self {
        AttackReport {
            wall_time_s: 0.0,
            ..self.clone()
        }
    }
}

const KEYS: [&str; 12] = [
    "version",
    "command",
    "attack",
    "config",
    "defense",
    "bpda",
    "model",
    "dataset",
    "seed",
    "clean_acc",
    "adv_acc",
    "wall_time_s",
];

fn is_hex_digest(v: &Value) -> bool {
    v.as_str()
        .is_some_and(|s| s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit()))
}

fn is_fraction(v: &Value) -> bool {
    v.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f))
}

/// Checks one report line: key set and order, value types and ranges, and
/// that the attack name agrees with its config.
pub fn validate_report(line: &str) -> Result<AttackReport, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("not JSON: {e}"))?;
    let obj = value.as_object().ok_or("report is not an object")?;
    let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    if keys != KEYS {
        return Err(format!("keys {keys:?} differ from {KEYS:?}"));
    }
    let version = obj["version"].as_str().ok_or("version is not a string")?;
    let mut parts = version.split('.');
    let well_formed = parts.clone().count() == 2 && parts.all(|p| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()));
    if !well_formed {
        return Err(format!("version {version:?} is not MAJOR.MINOR"));
    }
    if !["attack", "defend-eval", "eval"].contains(&obj["command"].as_str().unwrap_or("")) {
        return Err(format!("unknown command {}", obj["command"]));
    }
    if !is_hex_digest(&obj["model"]["sha256"]) || !is_hex_digest(&obj["dataset"]["images_sha256"]) {
        return Err("digests must be 64 hex characters".into());
    }
    if !is_fraction(&obj["clean_acc"]) {
        return Err("clean_acc must be in [0, 1]".into());
    }
    if !obj["adv_acc"].is_null() && !is_fraction(&obj["adv_acc"]) {
        return Err("adv_acc must be null or in [0, 1]".into());
    }
    if !obj["wall_time_s"].as_f64().is_some_and(|t| t >= 0.0) {
        return Err("wall_time_s must be a non-negative number".into());
    }
    let report: AttackReport = serde_json::from_value(value.clone()).map_err(|e| format!("schema: {e}"))?;
    match (&report.attack, &report.config, report.adv_acc) {
        (None, None, None) => {}
        (Some(name), Some(cfg), Some(_)) if name == cfg.name() => {}
        _ => return Err("attack, config and adv_acc must be all present and consistent, or all null".into()),
    }
    if report.dataset.size == 0 {
        return Err("dataset size must be positive".into());
    }
    Ok(report)
}
