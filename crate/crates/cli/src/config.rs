//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sipcond::condensate::CondensedView;
use sipcond::model::ModelParams;
use sipcond::suite::SuiteConfig;

use crate::CliError;

/// Environment variable that overrides the output directory.
pub const OUTPUT_DIR_ENV: &str = "SIPCOND_OUTPUT_DIR";

/// `d_N = c·N^{−α}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerLaw {
    pub c: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub n: u32,
    pub l: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_rule: Option<PowerLaw>,
    pub k: usize,
    /// Initial condensates as `[site, mass]` pairs.
    pub condensates: Vec<(usize, u32)>,
    pub t_end: f64,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub probes: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Keep raw jumps in `events.jsonl`.
    #[serde(default)]
    pub record_events: bool,
    /// Starting points of the CBM sampler; defaults to condensate sites / L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u0: Option<Vec<f64>>,
    /// Diffusivity of the CBM sampler; defaults to N/L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
}

fn one() -> usize {
    1
}

fn default_dt() -> f64 {
    sipcond::cbm::CBMParams::DEFAULT_DT
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A validated configuration with its model.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub params: ModelParams,
    pub start: CondensedView,
}

impl RunConfig {
    /// Checks every constraint and fills in `d` from `d_rule`.
    pub fn resolve(mut self) -> Result<Resolved, CliError> {
        let d = match (self.d, self.d_rule) {
            (Some(d), None) => d,
            (None, Some(rule)) => rule_value(self.n, rule)?,
            (Some(d), Some(rule)) => {
                let r = rule_value(self.n, rule)?;
                if (d - r).abs() > 1e-12 * r.abs() {
                    return Err(CliError::Config(format!("d = {d} disagrees with d_rule, which gives {r}")));
                }
                d
            }
            (None, None) => return Err(CliError::Config("one of d or d_rule is required".into())),
        };
        self.d = Some(d);
        let params = ModelParams::new(self.n, self.l, d, self.k).map_err(|e| CliError::Config(e.to_string()))?;
        let start = CondensedView::from_condensates(&params, &self.condensates)
            .map_err(|e| CliError::Config(format!("initial condensates: {e}")))?;
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(CliError::Config(format!("t_end must be finite and non-negative (got {})", self.t_end)));
        }
        if self.replicas == 0 {
            return Err(CliError::Config("replicas must be positive".into()));
        }
        if self.probes.windows(2).any(|w| w[0] > w[1]) || self.probes.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return Err(CliError::Config("probes must be finite, non-negative and ascending".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(CliError::Config(format!("dt must be positive (got {})", self.dt)));
        }
        Ok(Resolved {
            config: self,
            params,
            start,
        })
    }
}

fn rule_value(n: u32, rule: PowerLaw) -> Result<f64, CliError> {
    let d = rule.c * f64::from(n).powf(-rule.alpha);
    if d > 0.0 && d.is_finite() {
        Ok(d)
    } else {
        Err(CliError::Config(format!("d_rule gives an invalid d = {d}")))
    }
}

/// Settings of the `verify` command. Unknown keys are ignored so that a run
/// configuration with a `verify` section can be passed as is.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub verify: SuiteConfig,
}

/// Reads a JSON document; a `summary.json` written by an earlier run is
/// accepted in place of the configuration it records.
pub fn read_document(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let is_summary = value
        .get("schema")
        .and_then(Value::as_str)
        .is_some_and(|s| s.starts_with("sipcond/summary/"));
    if is_summary {
        return value
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Config("summary has no config".into()));
    }
    Ok(value)
}

pub fn parse<T: serde::de::DeserializeOwned>(value: Value) -> Result<T, CliError> {
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// Output directory after the environment override.
pub fn output_dir(configured: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> RunConfig {
        serde_json::from_str(r#"{"n": 8, "l": 8, "d": 1e-4, "k": 1, "condensates": [[0, 8]], "t_end": 0.1}"#).unwrap()
    }

    #[test]
    fn defaults_fill_in() {
        let c = base();
        assert_eq!(c.replicas, 1);
        assert_eq!(c.output_dir, PathBuf::from("out"));
        assert!(c.resolve().is_ok());
    }

    #[test]
    fn power_law_rule() {
        let mut c = base();
        c.d = None;
        c.d_rule = Some(PowerLaw { c: 1.0, alpha: 4.0 });
        let r = c.resolve().unwrap();
        assert!((r.params.d() - 8f64.powi(-4)).abs() < 1e-18);
        assert_eq!(r.config.d, Some(r.params.d()));
        // the resolved document resolves again
        assert!(r.config.clone().resolve().is_ok());
    }

    #[test]
    fn adjacent_condensates_name_the_constraint() {
        let mut c = base();
        c.k = 2;
        c.condensates = vec![(0, 4), (1, 4)];
        let err = c.resolve().unwrap_err();
        assert!(err.to_string().contains("isolation constraint"), "{err}");
    }

    #[test]
    fn missing_d_is_rejected() {
        let mut c = base();
        c.d = None;
        assert!(matches!(c.resolve(), Err(CliError::Config(_))));
    }
}
