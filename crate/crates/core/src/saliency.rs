//! Positive diagonal metrics `P` for the generalized projection.
//!
//! | mode     | entry `P_ii`                                  |
//! |----------|-----------------------------------------------|
//! | identity | 1                                             |
//! | snip     | `(∂f/∂x_i)² + floor`                          |
//! | obd      | `max(∂²f/∂x_i², floor)` by finite differences |
//! | wanda    | `Σ_n A²_{n,i} + floor` for input feature `i`  |

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::objective::{BatchRef, Objective};
use crate::param::{Layout, ParamVector};
use crate::rem::ActivationBatch;
use crate::scalar::{norm_inf, Scalar};
use crate::sharpness::hvp;

/// Added to (or used as a lower bound for) every entry so that `P` stays positive definite.
pub const SALIENCY_FLOOR: f64 = 1e-12;

/// Default number of structured probes for the OBD diagonal estimate.
pub const DEFAULT_OBD_PROBES: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SaliencyMode {
    #[default]
    Identity,
    Obd,
    Snip,
    Wanda,
}

/// Calibration activations keyed by the weight segment they feed.
pub type ActivationMap<T> = BTreeMap<String, ActivationBatch<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyDiagonal<T> {
    entries: Vec<T>,
    mode: SaliencyMode,
}

impl<T: Scalar> SaliencyDiagonal<T> {
    /// Wraps explicit entries; every entry must be strictly positive.
    pub fn new(entries: Vec<T>, mode: SaliencyMode) -> Result<Self> {
        if let Some(i) = entries.iter().position(|w| !(*w > T::zero() && w.is_finite())) {
            return Err(invalid(format!("saliency entry {i} is not positive and finite")));
        }
        Ok(Self { entries, mode })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            entries: vec![T::one(); n],
            mode: SaliencyMode::Identity,
        }
    }

    pub fn entries(&self) -> &[T] {
        &self.entries
    }

    pub fn mode(&self) -> SaliencyMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `c · P`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            entries: self.entries.iter().map(|&w| c * w).collect(),
            mode: self.mode,
        }
    }

    /// SNIP-style: squared gradient at `x` on `batch`.
    pub fn snip<O: Objective<T> + ?Sized>(
        oracle: &O,
        x: &ParamVector<T>,
        batch: BatchRef<'_>,
    ) -> Result<Self> {
        let g = oracle.gradient(x, batch)?;
        let floor = T::of_f64(SALIENCY_FLOOR);
        Ok(Self {
            entries: g.iter().map(|&gi| gi * gi + floor).collect(),
            mode: SaliencyMode::Snip,
        })
    }

    /// OBD-style: diagonal Hessian by central differences of the gradient.
    ///
    /// Coordinates are split into `probes` strided groups (`i mod probes`);
    /// each group is probed with its indicator vector and `diag_i` is read off
    /// `(Hv)_i`. With `probes ≥ n` this is exact for quadratics; with fewer
    /// probes it is exact whenever the Hessian is diagonal.
    pub fn obd<O: Objective<T> + ?Sized>(
        oracle: &O,
        x: &ParamVector<T>,
        batch: BatchRef<'_>,
        probes: usize,
    ) -> Result<Self> {
        let n = x.dim();
        let groups = probes.clamp(1, n.max(1));
        let h = T::of_f64(1e-4) * (T::one() + norm_inf(x));
        let floor = T::of_f64(SALIENCY_FLOOR);
        let mut entries = vec![floor; n];
        for k in 0..groups {
            let mut v = x.zeros_like();
            for i in (k..n).step_by(groups) {
                v[i] = T::one();
            }
            let hv = hvp(oracle, x, &v, h, batch)?;
            for i in (k..n).step_by(groups) {
                entries[i] = hv[i].max(floor);
            }
        }
        Ok(Self {
            entries,
            mode: SaliencyMode::Obd,
        })
    }

    /// Wanda-style: `P = diag(AᵀA)` per weight segment.
    ///
    /// Sparsifiable segments must have shape `[out, in]` and a matching entry in
    /// `activations` with `in` columns; entry `(o, i)` gets the energy of input
    /// feature `i`. Other segments get 1.
    pub fn wanda(layout: &Layout, activations: &ActivationMap<T>) -> Result<Self> {
        let floor = T::of_f64(SALIENCY_FLOOR);
        let mut entries = vec![T::one(); layout.dim()];
        for seg in layout.sparsifiable_segments() {
            let acts = activations.get(&seg.name).ok_or_else(|| {
                invalid(format!("no activations supplied for segment `{}`", seg.name))
            })?;
            let [_, d_in] = seg.shape[..] else {
                return Err(invalid(format!("segment `{}` is not a matrix", seg.name)));
            };
            if acts.features() != d_in {
                return Err(invalid(format!(
                    "segment `{}` has {d_in} inputs but activations have {} features",
                    seg.name,
                    acts.features()
                )));
            }
            let energy = acts.column_energy();
            for (k, e) in entries[seg.range()].iter_mut().enumerate() {
                *e = energy[k % d_in] + floor;
            }
        }
        Ok(Self {
            entries,
            mode: SaliencyMode::Wanda,
        })
    }
}

/// Builds `P` for `mode`, failing when the mode's inputs are missing.
pub fn build_saliency<T: Scalar>(
    mode: SaliencyMode,
    oracle: Option<&dyn Objective<T>>,
    x: &ParamVector<T>,
    batch: BatchRef<'_>,
    activations: Option<&ActivationMap<T>>,
) -> Result<SaliencyDiagonal<T>> {
    match mode {
        SaliencyMode::Identity => Ok(SaliencyDiagonal::identity(x.dim())),
        SaliencyMode::Snip => {
            let oracle = oracle.ok_or_else(|| invalid("snip saliency needs an objective"))?;
            SaliencyDiagonal::snip(oracle, x, batch)
        }
        SaliencyMode::Obd => {
            let oracle = oracle.ok_or_else(|| invalid("obd saliency needs an objective"))?;
            SaliencyDiagonal::obd(oracle, x, batch, DEFAULT_OBD_PROBES)
        }
        SaliencyMode::Wanda => {
            let acts = activations.ok_or_else(|| invalid("wanda saliency needs activations"))?;
            SaliencyDiagonal::wanda(x.layout(), acts)
        }
    }
}
