//! Sparse training with flatness enforcement.
//!
//! The optimizer splits a dense iterate `x` from a sparse copy `z` through an
//! augmented Lagrangian, takes sharpness-aware descent steps on `x`, and
//! periodically projects onto an L0 (or n:m) constraint, optionally in a
//! saliency-weighted metric. Diagnostics (Hessian spectrum, landscape slices,
//! stationarity), gradual-pruning baselines and layer-wise reconstruction
//! pruning are built on the same [`Objective`] interface.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the common double-precision case.

pub mod baselines;
pub mod error;
pub mod io;
pub mod objective;
pub mod param;
pub mod projection;
pub mod rem;
pub mod safe;
pub mod saliency;
pub mod scalar;
pub mod schedule;
pub mod sharpness;
pub mod sparsity;
pub mod trace;

pub use error::{Error, Result};
pub use objective::{BatchRef, DataStream, FullBatch, Objective, ShuffledBatches};
pub use param::{Layout, ParamVector, Segment};
pub use projection::{hard_threshold, nm_projection, p_weighted_projection, project};
pub use safe::{run_safe, DualState, EvalHook, NoEval, SafeConfig, TrainResult, Variant};
pub use saliency::{SaliencyDiagonal, SaliencyMode};
pub use scalar::Scalar;
pub use schedule::Schedule;
pub use sparsity::{Pattern, SparsityTarget};
pub use trace::TraceRecord;

pub type Params = ParamVector<f64>;
pub type Params32 = ParamVector<f32>;
pub type Saliency = SaliencyDiagonal<f64>;
pub type Saliency32 = SaliencyDiagonal<f32>;
pub type Dual = DualState<f64>;
pub type Dual32 = DualState<f32>;
pub type Run = TrainResult<f64>;
pub type Run32 = TrainResult<f32>;
