//! Layer-wise reconstruction-error pruning.
//!
//! For a linear layer `W` (`d_in × d_out`) and calibration activations `A`
//! (`N × d_in`) the reconstruction error is `‖AW − AW₀‖²_F / N`. As an
//! [`Objective`] the weight is flattened output-major (segment `"weight"` of
//! shape `[d_out, d_in]`), so `n:m` groups run along input features.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{invalid, Error, Result};
use crate::io::{read_container_file, write_container_file};
use crate::objective::{check_dim, BatchRef, FullBatch, Objective};
use crate::param::{Layout, ParamVector};
use crate::projection::{is_feasible, project, top_k_indices, TieBreak};
use crate::safe::{run_safe_with, BaseStep, NoEval, RunExtras, SafeConfig, Variant};
use crate::saliency::{ActivationMap, SaliencyDiagonal, SaliencyMode};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::sparsity::{sparsity_to_count, Pattern, SparsityTarget};

/// Calibration inputs `A` (`N × d_in`).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBatch<T> {
    a: Array2<T>,
    pub provenance: String,
}

impl<T: Scalar> ActivationBatch<T> {
    pub fn new(a: Array2<T>) -> Result<Self> {
        Self::with_provenance(a, "inline")
    }

    pub fn with_provenance(a: Array2<T>, provenance: impl Into<String>) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(invalid("activation batch must be non-empty"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(invalid("activation batch has non-finite entries"));
        }
        Ok(Self {
            a,
            provenance: provenance.into(),
        })
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.a
    }

    pub fn samples(&self) -> usize {
        self.a.nrows()
    }

    pub fn features(&self) -> usize {
        self.a.ncols()
    }

    /// `Σ_n A²_{n,i}` per feature.
    pub fn column_energy(&self) -> Vec<T> {
        self.a
            .axis_iter(Axis(1))
            .map(|c| c.iter().map(|&v| v * v).sum())
            .collect()
    }

    pub fn column_norms(&self) -> Vec<T> {
        self.column_energy().into_iter().map(|e| e.sqrt()).collect()
    }

    /// `AᵀA / N`.
    pub fn gram(&self) -> Array2<T> {
        let n = T::of_usize(self.samples());
        self.a.t().dot(&self.a) / n
    }
}

/// Gaussian activations with covariance `diag(1/i)`, `i = 1..=d`.
pub fn synthetic_anisotropic_activations<T: Scalar>(n: usize, d: usize, seed: u64) -> Result<ActivationBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Array2::from_shape_fn((n, d), |(_, i)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        T::of_f64(z / ((i + 1) as f64).sqrt())
    });
    ActivationBatch::with_provenance(a, format!("synthetic:anisotropic:n={n}:d={d}:seed={seed}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T> {
    /// `d_in × d_out`.
    pub w: Array2<T>,
    /// Never sparsified.
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(w: Array2<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(invalid("layer weights must be finite"));
        }
        if let Some(b) = &bias {
            if b.len() != w.ncols() {
                return Err(Error::DimensionMismatch {
                    expected: w.ncols(),
                    got: b.len(),
                });
            }
        }
        Ok(Self { w, bias })
    }

    /// Uniform `±1/√d_in` weights.
    pub fn random(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_in as f64).sqrt();
        let dist = rand_distr::Uniform::new_inclusive(-bound, bound).unwrap();
        let w = Array2::from_shape_fn((d_in, d_out), |_| T::of_f64(dist.sample(&mut rng)));
        Self { w, bias: None }
    }

    pub fn d_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn layout(&self) -> Layout {
        rem_layout(self.d_in(), self.d_out())
    }

    /// Output-major flattening: entry `(i, o)` goes to `o·d_in + i`.
    pub fn to_params(&self) -> ParamVector<T> {
        let flat: Vec<T> = self.w.t().iter().copied().collect();
        ParamVector::new(flat, Arc::new(self.layout())).expect("layout matches")
    }

    pub fn with_params(&self, x: &ParamVector<T>) -> Result<Self> {
        let (d_in, d_out) = (self.d_in(), self.d_out());
        if x.dim() != d_in * d_out {
            return Err(Error::DimensionMismatch {
                expected: d_in * d_out,
                got: x.dim(),
            });
        }
        let wt = Array2::from_shape_vec((d_out, d_in), x.as_slice().to_vec()).expect("shape");
        Ok(Self {
            w: wt.reversed_axes().as_standard_layout().to_owned(),
            bias: self.bias.clone(),
        })
    }

    pub fn nnz(&self) -> usize {
        self.w.iter().filter(|v| **v != T::zero()).count()
    }

    /// Container with header `shape = [d_in, d_out]`, payload `W` row-major then bias.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut h = Map::new();
        h.insert("kind".into(), Value::from("linear-layer"));
        h.insert("shape".into(), serde_json::json!([self.d_in(), self.d_out()]));
        h.insert("has_bias".into(), Value::from(self.bias.is_some()));
        let mut data: Vec<f64> = self.w.iter().map(|v| v.into_f64()).collect();
        if let Some(b) = &self.bias {
            data.extend(b.iter().map(|v| v.into_f64()));
        }
        write_container_file(path, &h, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, data) = read_container_file(path)?;
        let shape: Vec<usize> = serde_json::from_value(
            h.get("shape")
                .cloned()
                .ok_or_else(|| Error::Format {
                    field: "shape".into(),
                    reason: "missing".into(),
                })?,
        )?;
        let [d_in, d_out] = shape[..] else {
            return Err(Error::Format {
                field: "shape".into(),
                reason: "expected [d_in, d_out]".into(),
            });
        };
        let has_bias = h.get("has_bias").and_then(Value::as_bool).unwrap_or(false);
        let expect = d_in * d_out + if has_bias { d_out } else { 0 };
        if data.len() != expect {
            return Err(Error::Format {
                field: "len".into(),
                reason: format!("expected {expect} values, found {}", data.len()),
            });
        }
        let vals: Vec<T> = data.iter().map(|&v| T::of_f64(v)).collect();
        let w = Array2::from_shape_vec((d_in, d_out), vals[..d_in * d_out].to_vec()).expect("shape");
        let bias = has_bias.then(|| vals[d_in * d_out..].to_vec());
        Self::new(w, bias)
    }
}

pub fn rem_layout(d_in: usize, d_out: usize) -> Layout {
    Layout::builder().push("weight", vec![d_out, d_in], true).build()
}

/// `(‖AW − AW₀‖²_F / N, 2Aᵀ(AW − AW₀)/N)` computed directly from `A`.
pub fn rem_objective<T: Scalar>(
    w: ArrayView2<'_, T>,
    w0: ArrayView2<'_, T>,
    a: &ActivationBatch<T>,
) -> Result<(T, Array2<T>)> {
    if w.dim() != w0.dim() {
        return Err(invalid(format!("W is {:?} but W0 is {:?}", w.dim(), w0.dim())));
    }
    if w.nrows() != a.features() {
        return Err(invalid(format!(
            "W has {} rows but activations have {} features",
            w.nrows(),
            a.features()
        )));
    }
    let n = T::of_usize(a.samples());
    let r = a.matrix().dot(&(&w - &w0));
    let value = r.iter().map(|&v| v * v).sum::<T>() / n;
    let grad = a.matrix().t().dot(&r) * (T::of_f64(2.0) / n);
    Ok((value, grad))
}

/// Reconstruction error as an objective over the flattened weight, using the
/// Gram matrix `G = AᵀA/N`: value `Σ_o d_oᵀ G d_o`, gradient `2 G d_o` where
/// `d_o` is output column `o` of `W − W₀`. The batch argument is ignored.
#[derive(Clone, Debug)]
pub struct RemObjective<T> {
    gram: Array2<T>,
    /// `W₀ᵀ` (`d_out × d_in`), matching the flat order.
    w0t: Array2<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> RemObjective<T> {
    pub fn new(layer: &LinearLayer<T>, a: &ActivationBatch<T>) -> Result<Self> {
        if layer.d_in() != a.features() {
            return Err(invalid(format!(
                "layer has {} inputs but activations have {} features",
                layer.d_in(),
                a.features()
            )));
        }
        Ok(Self {
            gram: a.gram(),
            w0t: layer.w.t().to_owned(),
            layout: Arc::new(layer.layout()),
        })
    }

    fn diff(&self, x: &ParamVector<T>) -> Array2<T> {
        let (d_out, d_in) = self.w0t.dim();
        let xt = ArrayView2::from_shape((d_out, d_in), x.as_slice()).expect("checked dim");
        &xt - &self.w0t
    }
}

impl<T: Scalar> Objective<T> for RemObjective<T> {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn value(&self, x: &ParamVector<T>, _batch: BatchRef<'_>) -> Result<T> {
        check_dim(self, x)?;
        let d = self.diff(x);
        let dg = d.dot(&self.gram);
        Ok(d.iter().zip(dg.iter()).map(|(&a, &b)| a * b).sum())
    }

    fn gradient(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<ParamVector<T>> {
        Ok(self.value_and_gradient(x, batch)?.1)
    }

    fn value_and_gradient(&self, x: &ParamVector<T>, _batch: BatchRef<'_>) -> Result<(T, ParamVector<T>)> {
        check_dim(self, x)?;
        let d = self.diff(x);
        let dg = d.dot(&self.gram);
        let value = d.iter().zip(dg.iter()).map(|(&a, &b)| a * b).sum();
        let two = T::of_f64(2.0);
        let g: Vec<T> = dg.iter().map(|&v| two * v).collect();
        Ok((value, x.with_values(g)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneMethod {
    Magnitude,
    WandaOneshot,
    Safe,
    SafePlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemConfig {
    /// Optimizer settings for `safe` / `safe-plus`; its `target` and
    /// `variant.plus` are overridden by [`prune_layer`].
    pub safe: SafeConfig,
    /// Rank Wanda scores within each output row instead of over the whole matrix.
    #[serde(default)]
    pub wanda_per_row: bool,
}

impl Default for RemConfig {
    fn default() -> Self {
        Self {
            safe: SafeConfig {
                rho: Schedule::constant(1e-3),
                lambda: Schedule::CosineWarmup {
                    start: 0.0,
                    end: 1.0,
                },
                dual_interval: 50,
                steps: 1000,
                lr: Schedule::CosineDecay {
                    start: 1e-2,
                    end: 1e-4,
                },
                target: SparsityTarget::fraction(0.5),
                variant: Variant::default(),
                base: BaseStep::adam(),
                seed: 0,
                trace_every: 50,
            },
            wanda_per_row: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub method: PruneMethod,
    /// Reconstruction error of the returned sparse layer.
    pub rem: f64,
    pub sparsity: f64,
    pub feasible: bool,
    pub steps: usize,
}

fn wanda_saliency<T: Scalar>(layer: &LinearLayer<T>, a: &ActivationBatch<T>) -> Result<SaliencyDiagonal<T>> {
    let mut acts = ActivationMap::new();
    acts.insert("weight".to_string(), a.clone());
    SaliencyDiagonal::wanda(&layer.layout(), &acts)
}

/// Per-output-row top-k by `P_ii x_i²` for unstructured targets.
fn project_per_row<T: Scalar>(
    x: &ParamVector<T>,
    d_in: usize,
    target: &SparsityTarget,
    p: &SaliencyDiagonal<T>,
) -> Result<ParamVector<T>> {
    let k = sparsity_to_count(target, d_in)?;
    let mut out = x.zeros_like();
    for (r, (row, w)) in x.chunks(d_in).zip(p.entries().chunks(d_in)).enumerate() {
        let scores: Vec<T> = row.iter().zip(w).map(|(&v, &pi)| pi * v * v).collect();
        for j in top_k_indices(&scores, k, TieBreak::LowestIndex) {
            out[r * d_in + j] = row[j];
        }
    }
    Ok(out)
}

/// Prunes `layer` to `target` and reports the resulting reconstruction error.
pub fn prune_layer<T: Scalar>(
    layer: &LinearLayer<T>,
    a: &ActivationBatch<T>,
    target: &SparsityTarget,
    method: PruneMethod,
    config: &RemConfig,
) -> Result<(LinearLayer<T>, PruneReport)> {
    target.validate()?;
    let objective = RemObjective::new(layer, a)?;
    let x0 = layer.to_params();
    let (x, steps) = match method {
        PruneMethod::Magnitude => (project(&x0, target, None)?, 0),
        PruneMethod::WandaOneshot => {
            let p = wanda_saliency(layer, a)?;
            let x = if config.wanda_per_row && target.pattern == Pattern::Unstructured {
                project_per_row(&x0, layer.d_in(), target, &p)?
            } else {
                project(&x0, target, Some(&p))?
            };
            (x, 0)
        }
        PruneMethod::Safe | PruneMethod::SafePlus => {
            let mut cfg = config.safe.clone();
            cfg.target = *target;
            cfg.variant.plus = if method == PruneMethod::SafePlus {
                SaliencyMode::Wanda
            } else {
                SaliencyMode::Identity
            };
            let mut acts = ActivationMap::new();
            acts.insert("weight".to_string(), a.clone());
            let r = run_safe_with(
                &objective,
                x0.clone(),
                &mut FullBatch { n: 0 },
                &cfg,
                &mut NoEval,
                RunExtras {
                    activations: Some(&acts),
                },
            )?;
            (r.x_sparse, cfg.steps)
        }
    };
    let rem = objective.value(&x, &[])?.into_f64();
    let report = PruneReport {
        method,
        rem,
        sparsity: x.sparsity(),
        feasible: is_feasible(&x, target)?,
        steps,
    };
    Ok((layer.with_params(&x)?, report))
}
