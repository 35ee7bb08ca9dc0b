//! Experiment configuration: one JSON document per experiment, hashed for
//! reproducibility, with dotted-path overrides for the command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use safe_core::baselines::{BaselineConfig, BaselineMethod};
use safe_core::{SaliencyMode, Schedule, SparsityTarget};
use safe_models::MlpSpec;

use crate::error::{HarnessError, Result};

/// Plain (optionally sharpness-aware) training with no sparsity pressure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseConfig {
    pub steps: usize,
    pub lr: Schedule,
    #[serde(default)]
    pub rho: f64,
    /// Sparsity used to report a magnitude-pruned copy of the final iterate.
    #[serde(default)]
    pub target: Option<SparsityTarget>,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
}

fn default_trace_every() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodConfig {
    Safe(safe_core::SafeConfig),
    Baseline(BaselineConfig),
    Dense(DenseConfig),
}

impl MethodConfig {
    /// Short label used in reports: `safe`, `safe+`, `admm`, `imp-sam`, `cram+`, `dense`...
    pub fn label(&self) -> String {
        match self {
            MethodConfig::Safe(c) => {
                let base = if c.rho == Schedule::constant(0.0) { "admm" } else { "safe" };
                let mut s = base.to_string();
                if c.variant.plus != SaliencyMode::Identity {
                    s.push('+');
                }
                if c.variant.sg {
                    s.push_str("-sg");
                }
                if c.variant.multi.is_some() {
                    s.push_str("-multi");
                }
                s
            }
            MethodConfig::Baseline(b) => match b.method {
                BaselineMethod::MagnitudeOneshot => "magnitude".into(),
                BaselineMethod::ImpSam => "imp-sam".into(),
                BaselineMethod::Cram => "cram".into(),
                BaselineMethod::CramPlus => "cram+".into(),
                BaselineMethod::CramMulti => "cram-multi".into(),
                BaselineMethod::CramPlusMulti => "cram+-multi".into(),
            },
            MethodConfig::Dense(_) => "dense".into(),
        }
    }

    pub fn target(&self) -> Option<&SparsityTarget> {
        match self {
            MethodConfig::Safe(c) => Some(&c.target),
            MethodConfig::Baseline(b) => Some(&b.target),
            MethodConfig::Dense(d) => d.target.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::Safe(c) => c.validate()?,
            MethodConfig::Baseline(b) => b.validate()?,
            MethodConfig::Dense(d) => {
                if d.trace_every == 0 {
                    return Err(HarnessError::Config("trace_every must be at least 1".into()));
                }
                if d.rho < 0.0 {
                    return Err(HarnessError::Config("rho must be non-negative".into()));
                }
                if let Some(t) = &d.target {
                    t.validate()?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DataSpec {
    /// IDX files (optionally gzipped) in `dir`.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        /// Per-pixel standardization with training-set statistics.
        #[serde(default)]
        standardize: bool,
    },
    Blobs {
        train: usize,
        test: usize,
        features: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianDiagnostic {
    /// Leading training samples the Hessian is taken over.
    #[serde(default = "default_diag_samples")]
    pub samples: usize,
    #[serde(default = "default_power_iters")]
    pub iters: usize,
    #[serde(default = "default_power_tol")]
    pub tol: f64,
}

impl Default for HessianDiagnostic {
    fn default() -> Self {
        Self {
            samples: default_diag_samples(),
            iters: default_power_iters(),
            tol: default_power_tol(),
        }
    }
}

fn default_diag_samples() -> usize {
    1000
}
fn default_power_iters() -> usize {
    200
}
fn default_power_tol() -> f64 {
    1e-4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeDiagnostic {
    #[serde(default = "default_axes")]
    pub axes: usize,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_diag_samples")]
    pub samples: usize,
}

impl Default for LandscapeDiagnostic {
    fn default() -> Self {
        Self {
            axes: default_axes(),
            grid_points: default_grid(),
            radius: default_radius(),
            samples: default_diag_samples(),
        }
    }
}

fn default_axes() -> usize {
    1
}
fn default_grid() -> usize {
    21
}
fn default_radius() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(default)]
    pub hessian: Option<HessianDiagnostic>,
    #[serde(default)]
    pub landscape: Option<LandscapeDiagnostic>,
    /// δ for the stationarity gap of the sparse solution.
    #[serde(default)]
    pub stationarity_delta: Option<f64>,
    /// Sample budget for batch-norm tuning before evaluation.
    #[serde(default = "default_bn_samples")]
    pub bn_tune_samples: usize,
    /// Magnitude below which a dense weight counts as "near zero".
    #[serde(default = "default_small")]
    pub small_threshold: f64,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            hessian: None,
            landscape: None,
            stationarity_delta: None,
            bn_tune_samples: default_bn_samples(),
            small_threshold: default_small(),
        }
    }
}

fn default_bn_samples() -> usize {
    10_000
}
fn default_small() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: MethodConfig,
    #[serde(default)]
    pub model: MlpSpec,
    pub data: DataSpec,
    /// Fraction of training labels to corrupt (per seed).
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Evaluate on the test set every this many steps (0: final only).
    #[serde(default)]
    pub eval_every: usize,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

fn default_batch() -> usize {
    128
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String");
    }
    s
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Loads and applies `key=value` overrides before parsing into the typed config.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut v: Value =
            serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        serde_json::from_value(v).map_err(|e| HarnessError::Config(format!("invalid config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(HarnessError::Config(format!("label_noise {} outside [0, 1]", self.label_noise)));
        }
        if let Some(d) = self.diagnostics.stationarity_delta {
            if d <= 0.0 {
                return Err(HarnessError::Config("stationarity delta must be positive".into()));
            }
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.method.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if let DataSpec::Blobs { features, classes, .. } = &self.data {
            if *features != self.model.sizes[0] || *classes > *self.model.sizes.last().unwrap() {
                return Err(HarnessError::Config("blob dimensions do not match the model".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, excluding the output location.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(m) = &mut v {
            m.remove("output_dir");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    /// Hash of model and data alone; runs are only comparable when it matches.
    pub fn model_data_hash(&self) -> String {
        let v = serde_json::json!({
            "model": self.model,
            "data": self.data,
            "label_noise": self.label_noise,
        });
        sha256_hex(v.to_string().as_bytes())
    }
}

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON when
/// possible and taken as a string otherwise; missing objects are created.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{spec}` is not key=value")))?;
    if path.is_empty() {
        return Err(HarnessError::Config(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| HarnessError::Config(format!("`{key}` is not an array index in `{path}`")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| HarnessError::Config(format!("index {idx} out of range ({len}) in `{path}`")))?
            }
            Value::Object(map) => {
                if last {
                    map.insert((*key).to_string(), value);
                    return Ok(());
                }
                map.entry((*key).to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(HarnessError::Config(format!("`{path}` descends into a scalar"))),
        };
        if last {
            *cur = value;
            return Ok(());
        }
    }
    unreachable!("non-empty path")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_and_replace() {
        let mut v = json!({"a": {"b": 1}, "s": [1, 2]});
        apply_override(&mut v, "a.b=2.5").unwrap();
        apply_override(&mut v, "a.c.d=hello").unwrap();
        apply_override(&mut v, "s.1=[3]").unwrap();
        assert_eq!(v, json!({"a": {"b": 2.5, "c": {"d": "hello"}}, "s": [1, [3]]}));
        assert!(apply_override(&mut v, "nokey").is_err());
        assert!(apply_override(&mut v, "a.b.c=1").is_err());
        assert!(apply_override(&mut v, "s.9=1").is_err());
    }
}
