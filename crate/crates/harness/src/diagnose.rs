//! Diagnostics of a saved checkpoint against the model and data of a config.

use std::path::Path;

use serde::Serialize;

use safe_core::io::load_params;
use safe_core::safe::stationarity_gap;
use safe_core::sharpness::{landscape_slice, max_hessian_eigenvalue, LandscapeGrid, PowerIteration};
use safe_core::ParamVector;
use safe_models::{batchnorm_tune, Mlp};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::run::load_data;

#[derive(Clone, Debug, Serialize)]
pub struct CheckpointDiagnosis {
    pub checkpoint: String,
    pub sparsity: f64,
    pub test_acc: f64,
    pub test_loss: f64,
    pub lambda_max: Option<f64>,
    pub lambda_max_converged: Option<bool>,
    pub stationarity_gap: Option<f64>,
    #[serde(skip)]
    pub landscape: Option<LandscapeGrid<f64>>,
}

/// Loads `checkpoint` into the model described by `cfg` and runs the
/// diagnostics enabled there. Data for seed `seed` (label noise) is used.
pub fn diagnose_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, seed: u64) -> Result<CheckpointDiagnosis> {
    cfg.validate()?;
    let (x_raw, header) = load_params::<f64>(checkpoint)?;
    if let Some(h) = header.get("model_data_hash").and_then(|v| v.as_str()) {
        if h != cfg.model_data_hash() {
            return Err(HarnessError::Config(format!(
                "{} was trained on model/data {h}, config describes {}",
                checkpoint.display(),
                cfg.model_data_hash()
            )));
        }
    }
    let (train, test) = load_data(cfg, seed)?;
    let mlp = Mlp::<f64>::new(cfg.model.clone(), &train)?;
    let x: ParamVector<f64> = mlp.init(seed).with_values(x_raw.into_vec()).map_err(|_| {
        HarnessError::Config(format!("{} does not match the configured architecture", checkpoint.display()))
    })?;
    let diag = &cfg.diagnostics;
    let stats = mlp
        .has_batch_norm()
        .then(|| batchnorm_tune(&mlp, &x, &train, diag.bn_tune_samples))
        .flatten();
    let m = mlp.evaluate(&x, &test, stats.as_ref());

    let mut out = CheckpointDiagnosis {
        checkpoint: checkpoint.display().to_string(),
        sparsity: x.sparsity(),
        test_acc: m.accuracy,
        test_loss: m.loss,
        lambda_max: None,
        lambda_max_converged: None,
        stationarity_gap: None,
        landscape: None,
    };
    if let Some(h) = &diag.hessian {
        let batch: Vec<usize> = (0..h.samples.min(train.len())).collect();
        let est = max_hessian_eigenvalue(
            &mlp,
            &x,
            &batch,
            &PowerIteration {
                iters: h.iters,
                tol: h.tol,
                seed,
            },
        )?;
        out.lambda_max = Some(est.value);
        out.lambda_max_converged = Some(est.converged);
    }
    if let Some(l) = &diag.landscape {
        let batch: Vec<usize> = (0..l.samples.min(train.len())).collect();
        out.landscape = Some(landscape_slice(&mlp, &x, l.axes, l.grid_points, l.radius, &batch, seed)?);
    }
    if let (Some(delta), Some(t)) = (diag.stationarity_delta, cfg.method.target()) {
        let batch: Vec<usize> = (0..1000.min(train.len())).collect();
        out.stationarity_gap = Some(stationarity_gap(&mlp, &x, delta, t, &batch)?);
    }
    Ok(out)
}
