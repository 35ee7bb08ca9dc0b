//! SAFE / SAFE⁺: augmented-Lagrangian sparse training with sharpness-aware x-steps.
//!
//! The iterate `x` is split from a sparse copy `z` coupled through the scaled
//! dual `u`. Every `K` steps `z` is refreshed by projecting `x + u` onto the
//! sparsity constraint (in the `P` metric for SAFE⁺) and `u` takes one ascent
//! step. In between, `x` descends on the sharpness-aware gradient plus the
//! penalty `λ (x − z + u)`. The returned sparse model is a final projection
//! of the last iterate.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objective::{check_dim, BatchRef, DataStream, Objective};
use crate::param::ParamVector;
use crate::projection::project;
use crate::saliency::{build_saliency, ActivationMap, SaliencyDiagonal, SaliencyMode};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::sharpness::sam_gradient_from;
use crate::sparsity::{Pattern, SparsityTarget};
use crate::trace::TraceRecord;

/// Split variable and scaled dual of the augmented Lagrangian.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState<T> {
    pub z: ParamVector<T>,
    pub u: ParamVector<T>,
    pub last_update_step: usize,
}

impl<T: Scalar> DualState<T> {
    /// `z = 0`, `u = 0`.
    pub fn zeros_like(x: &ParamVector<T>) -> Self {
        Self {
            z: x.zeros_like(),
            u: x.zeros_like(),
            last_update_step: 0,
        }
    }
}

/// Base update rule applied to the combined x-direction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaseStep {
    #[default]
    Sgd,
    /// Bias-corrected moment scaling.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl BaseStep {
    pub fn adam() -> Self {
        BaseStep::Adam {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    /// Saliency metric for the z-projection; `identity` is plain SAFE.
    #[serde(default)]
    pub plus: SaliencyMode,
    /// Also descend on `∇f(proj(x))` (the "+SG" variant).
    #[serde(default)]
    pub sg: bool,
    /// Sparsity fractions to redraw the target from at every projection.
    #[serde(default)]
    pub multi: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeConfig {
    /// Perturbation radius ρ.
    pub rho: Schedule,
    /// Penalty parameter λ.
    pub lambda: Schedule,
    /// Dual-update interval K.
    pub dual_interval: usize,
    /// Total steps T.
    pub steps: usize,
    /// Learning rate η.
    pub lr: Schedule,
    pub target: SparsityTarget,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub base: BaseStep,
    #[serde(default)]
    pub seed: u64,
    /// Trace every this many steps (dual-update steps are always traced).
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
}

fn default_trace_every() -> usize {
    50
}

impl Default for SafeConfig {
    /// Vision-style defaults: ρ = 0.1, K = 32, cosine-warmup λ, cosine-decayed η.
    fn default() -> Self {
        Self {
            rho: Schedule::constant(0.1),
            lambda: Schedule::cosine_warmup(1e-3),
            dual_interval: 32,
            steps: 1000,
            lr: Schedule::CosineDecay {
                start: 0.1,
                end: 0.0,
            },
            target: SparsityTarget::fraction(0.9),
            variant: Variant::default(),
            base: BaseStep::Sgd,
            seed: 0,
            trace_every: default_trace_every(),
        }
    }
}

impl SafeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dual_interval == 0 {
            return Err(invalid("dual interval K must be at least 1"));
        }
        if self.trace_every == 0 {
            return Err(invalid("trace_every must be at least 1"));
        }
        if !self.rho.is_nonnegative() {
            return Err(invalid("perturbation radius must be non-negative"));
        }
        if !self.lambda.is_nonnegative() {
            return Err(invalid("penalty must be non-negative"));
        }
        self.target.validate()?;
        if let Some(set) = &self.variant.multi {
            if set.is_empty() {
                return Err(invalid("multi sparsity set is empty"));
            }
            if self.target.pattern != Pattern::Unstructured {
                return Err(invalid("multi targets require unstructured sparsity"));
            }
            for &s in set {
                SparsityTarget::fraction(s).validate()?;
            }
        }
        Ok(())
    }

    /// The ADMM baseline: this configuration with ρ = 0.
    pub fn admm(&self) -> Self {
        Self {
            rho: Schedule::constant(0.0),
            ..self.clone()
        }
    }
}

/// Per-evaluation callback used during training.
pub trait EvalHook<T> {
    /// Evaluate every this many steps; 0 means only on the final iterate.
    fn every(&self) -> usize {
        0
    }

    fn evaluate(
        &mut self,
        step: usize,
        dense: &ParamVector<T>,
        sparse: &ParamVector<T>,
    ) -> Result<BTreeMap<String, f64>>;
}

/// Hook that records nothing.
pub struct NoEval;

impl<T> EvalHook<T> for NoEval {
    fn evaluate(
        &mut self,
        _step: usize,
        _dense: &ParamVector<T>,
        _sparse: &ParamVector<T>,
    ) -> Result<BTreeMap<String, f64>> {
        Ok(BTreeMap::new())
    }
}

/// Record of a pruning event in gradual-pruning baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub scheduled_sparsity: f64,
    pub achieved_sparsity: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T> {
    /// Final iterate.
    pub x_dense: ParamVector<T>,
    /// Final projection of `x_dense`.
    pub x_sparse: ParamVector<T>,
    pub trace: Vec<TraceRecord>,
    /// Metric used for the final projection (`None` = Euclidean).
    pub final_saliency: Option<SaliencyDiagonal<T>>,
    pub final_metrics: BTreeMap<String, f64>,
    pub dual: Option<DualState<T>>,
    pub prune_events: Vec<PruneEvent>,
}

/// `z' = proj(x + u)`, `u' = u + x − z'`.
pub fn dual_update<T: Scalar>(
    x: &ParamVector<T>,
    state: &DualState<T>,
    target: &SparsityTarget,
    saliency: Option<&SaliencyDiagonal<T>>,
    step: usize,
) -> Result<DualState<T>> {
    if x.dim() != state.z.dim() || x.dim() != state.u.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            got: state.u.dim(),
        });
    }
    let mut shifted = x.clone();
    shifted.axpy(T::one(), &state.u);
    let z = project(&shifted, target, saliency)?;
    let mut u = state.u.clone();
    for ((ui, &xi), &zi) in u.iter_mut().zip(x.iter()).zip(z.iter()) {
        *ui += xi - zi;
    }
    Ok(DualState {
        z,
        u,
        last_update_step: step,
    })
}

/// One plain-descent x-step:
/// `x½ = x − η ∇f(x + ε*)`, then `x⁺ = x½ − η λ (x − z + u)` with the penalty
/// at the pre-step iterate; with `sg_target` also `− η ∇f(proj(x))`.
#[allow(clippy::too_many_arguments)]
pub fn x_step<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    state: &DualState<T>,
    lambda: T,
    eta: T,
    rho: T,
    batch: BatchRef<'_>,
    sg_target: Option<&SparsityTarget>,
) -> Result<ParamVector<T>> {
    let (_, dir) = x_direction(oracle, x, state, lambda, rho, batch, sg_target)?;
    let mut out = x.clone();
    // same two sub-steps, accumulated in one pass
    out.axpy(-eta, &dir.sam);
    for (o, &p) in out.iter_mut().zip(dir.penalty.iter()) {
        *o -= eta * (lambda * p);
    }
    if let Some(sg) = &dir.sparse_grad {
        out.axpy(-eta, sg);
    }
    Ok(out)
}

struct Direction<T> {
    sam: ParamVector<T>,
    /// `x − z + u` (not yet multiplied by λ).
    penalty: ParamVector<T>,
    sparse_grad: Option<ParamVector<T>>,
}

fn x_direction<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    state: &DualState<T>,
    _lambda: T,
    rho: T,
    batch: BatchRef<'_>,
    sg_target: Option<&SparsityTarget>,
) -> Result<(T, Direction<T>)> {
    check_dim(oracle, x)?;
    let (loss, g) = oracle.value_and_gradient(x, batch)?;
    let sam = sam_gradient_from(oracle, x, &g, rho, batch)?;
    let mut penalty = x.clone();
    for ((p, &zi), &ui) in penalty.iter_mut().zip(state.z.iter()).zip(state.u.iter()) {
        *p = *p - zi + ui;
    }
    let sparse_grad = match sg_target {
        Some(t) => Some(oracle.gradient(&project(x, t, None)?, batch)?),
        None => None,
    };
    Ok((
        loss,
        Direction {
            sam,
            penalty,
            sparse_grad,
        },
    ))
}

struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

fn draw_target(base: &SparsityTarget, multi: Option<&[f64]>, rng: &mut ChaCha8Rng) -> SparsityTarget {
    match multi {
        Some(set) => SparsityTarget::fraction(set[rng.random_range(0..set.len())]),
        None => *base,
    }
}

/// Optional inputs to [`run_safe`] beyond the objective and data.
#[derive(Default)]
pub struct RunExtras<'a, T> {
    /// Calibration activations for Wanda saliency.
    pub activations: Option<&'a ActivationMap<T>>,
}

/// Runs SAFE / SAFE⁺ for `config.steps` steps from `x_init`.
pub fn run_safe<T: Scalar, O: Objective<T>>(
    oracle: &O,
    x_init: ParamVector<T>,
    stream: &mut dyn DataStream,
    config: &SafeConfig,
    hooks: &mut dyn EvalHook<T>,
) -> Result<TrainResult<T>> {
    run_safe_with(oracle, x_init, stream, config, hooks, RunExtras::default())
}

pub fn run_safe_with<T: Scalar, O: Objective<T>>(
    oracle: &O,
    x_init: ParamVector<T>,
    stream: &mut dyn DataStream,
    config: &SafeConfig,
    hooks: &mut dyn EvalHook<T>,
    extras: RunExtras<'_, T>,
) -> Result<TrainResult<T>> {
    config.validate()?;
    check_dim(oracle, &x_init)?;
    let total = config.steps;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let multi = config.variant.multi.as_deref();
    let build_p = |x: &ParamVector<T>, batch: BatchRef<'_>| -> Result<Option<SaliencyDiagonal<T>>> {
        match config.variant.plus {
            SaliencyMode::Identity => Ok(None),
            mode => build_saliency(
                mode,
                Some(oracle as &dyn Objective<T>),
                x,
                batch,
                extras.activations,
            )
            .map(Some),
        }
    };

    let mut x = x_init;
    let mut state = DualState::zeros_like(&x);
    let mut saliency: Option<SaliencyDiagonal<T>> = None;
    let mut adam = match config.base {
        BaseStep::Adam { .. } => Some(AdamState {
            m: vec![T::zero(); x.dim()],
            v: vec![T::zero(); x.dim()],
            t: 0,
        }),
        BaseStep::Sgd => None,
    };
    let mut trace = Vec::new();
    let eval_every = hooks.every();

    for t in 0..total {
        let batch = stream.next_batch();
        let lambda = T::of_f64(config.lambda.eval_unchecked(t, total));
        let eta = T::of_f64(config.lr.eval_unchecked(t, total));
        let rho = T::of_f64(config.rho.eval_unchecked(t, total));

        let fired = t % config.dual_interval == 0;
        if fired {
            let target = draw_target(&config.target, multi, &mut rng);
            saliency = build_p(&x, &batch)?;
            state = dual_update(&x, &state, &target, saliency.as_ref(), t)?;
        }

        let sg_target = config
            .variant
            .sg
            .then(|| draw_target(&config.target, multi, &mut rng));
        let (loss, dir) = x_direction(oracle, &x, &state, lambda, rho, &batch, sg_target.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: t,
                snapshot: Some(x.to_f64_vec()),
            });
        }

        let traced = t % config.trace_every == 0 || fired || t + 1 == total;
        let evaluated = eval_every > 0 && t % eval_every == 0;
        if traced || evaluated {
            let proj = project(&x, &config.target, saliency.as_ref())?;
            let mut rec = TraceRecord::new(t, loss.into_f64());
            rec.dist_to_z = x.dist2(&state.z).into_f64();
            rec.dist_to_constraint = x.dist2(&proj).into_f64();
            rec.lambda = lambda.into_f64();
            rec.lr = eta.into_f64();
            rec.rho = rho.into_f64();
            rec.sparsity = x.sparsity();
            rec.dual_update = fired;
            if evaluated {
                rec.metrics = hooks.evaluate(t, &x, &proj)?;
            }
            trace.push(rec);
        }

        let mut next = x.clone();
        match (&config.base, adam.as_mut()) {
            (BaseStep::Adam { beta1, beta2, eps }, Some(st)) => {
                st.t += 1;
                let (b1, b2, e) = (T::of_f64(*beta1), T::of_f64(*beta2), T::of_f64(*eps));
                let c1 = T::one() - b1.powi(st.t);
                let c2 = T::one() - b2.powi(st.t);
                for i in 0..next.dim() {
                    let mut g = dir.sam[i] + lambda * dir.penalty[i];
                    if let Some(sg) = &dir.sparse_grad {
                        g += sg[i];
                    }
                    st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                    st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                    let mhat = st.m[i] / c1;
                    let vhat = st.v[i] / c2;
                    next[i] -= eta * mhat / (vhat.sqrt() + e);
                }
            }
            _ => {
                next.axpy(-eta, &dir.sam);
                for (o, &p) in next.iter_mut().zip(dir.penalty.iter()) {
                    *o -= eta * (lambda * p);
                }
                if let Some(sg) = &dir.sparse_grad {
                    next.axpy(-eta, sg);
                }
            }
        }
        if !next.is_finite() {
            return Err(Error::NonFinite {
                what: "iterate".into(),
                step: t,
                snapshot: Some(x.to_f64_vec()),
            });
        }
        x = next;
    }

    let final_saliency = if total == 0 && config.variant.plus == SaliencyMode::Identity {
        None
    } else {
        let batch = stream.next_batch();
        build_p(&x, &batch)?
    };
    let x_sparse = project(&x, &config.target, final_saliency.as_ref())?;
    let final_metrics = hooks.evaluate(total, &x, &x_sparse)?;
    Ok(TrainResult {
        x_dense: x,
        x_sparse,
        trace,
        final_saliency,
        final_metrics,
        dual: Some(state),
        prune_events: Vec::new(),
    })
}

/// `‖x − proj(x − ∇f(x)/δ)‖₂`: zero exactly when `x` is a δ-stationary point.
pub fn stationarity_gap<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    delta: T,
    target: &SparsityTarget,
    batch: BatchRef<'_>,
) -> Result<T> {
    if !(delta > T::zero()) {
        return Err(invalid("delta must be positive"));
    }
    let g = oracle.gradient(x, batch)?;
    let mut y = x.clone();
    y.axpy(-T::one() / delta, &g);
    let p = project(&y, target, None)?;
    Ok(x.dist2(&p))
}

/// Outcome of one analytic schedule condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Pass,
    Fail,
    Unknown,
}

/// Classification of the step-size / radius conditions that guarantee
/// convergence of the sharpness-aware x-iterates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    /// `Σ η_t = ∞`.
    pub sum_eta_diverges: Condition,
    /// `Σ η_t ρ_t < ∞`.
    pub sum_eta_rho_converges: Condition,
    /// `limsup ρ_t < 1/β`.
    pub limsup_rho_below_inverse_beta: Condition,
}

impl LemmaReport {
    pub fn all_pass(&self) -> bool {
        [
            self.sum_eta_diverges,
            self.sum_eta_rho_converges,
            self.limsup_rho_below_inverse_beta,
        ]
        .iter()
        .all(|c| *c == Condition::Pass)
    }
}

/// `c · t^(−p)` tail of a schedule, if it is of a classifiable kind.
fn tail(s: &Schedule) -> Option<(f64, f64)> {
    match *s {
        Schedule::Constant { value } => Some((value, 0.0)),
        Schedule::PowerLaw { start, exponent } => Some((start, exponent)),
        _ => None,
    }
}

/// Symbolically checks the step-size / radius conditions for power-law and
/// constant schedules; other kinds are reported as unknown.
pub fn lemma_schedule_check(eta: &Schedule, rho: &Schedule, beta: f64) -> LemmaReport {
    use Condition::*;
    let te = tail(eta);
    let tr = tail(rho);

    let sum_eta_diverges = match te {
        Some((c, p)) => {
            if c > 0.0 && p <= 1.0 {
                Pass
            } else {
                Fail
            }
        }
        None => Unknown,
    };

    let sum_eta_rho_converges = match (te, tr) {
        (Some((ce, _)), _) if ce == 0.0 => Pass,
        (_, Some((cr, _))) if cr == 0.0 => Pass,
        (Some((_, p)), Some((_, q))) => {
            if p + q > 1.0 {
                Pass
            } else {
                Fail
            }
        }
        _ => Unknown,
    };

    let limsup_rho_below_inverse_beta = match tr {
        _ if !(beta > 0.0) => Unknown,
        Some((c, q)) => {
            let limsup = if c == 0.0 || q > 0.0 {
                0.0
            } else if q == 0.0 {
                c
            } else {
                f64::INFINITY
            };
            if limsup < 1.0 / beta {
                Pass
            } else {
                Fail
            }
        }
        None => Unknown,
    };

    LemmaReport {
        sum_eta_diverges,
        sum_eta_rho_converges,
        limsup_rho_below_inverse_beta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{FullBatch, QuadraticObjective};

    #[test]
    fn dual_update_fixed_point() {
        let x = ParamVector::from_vec(vec![3.0, 0.0, -1.0]);
        let state = DualState::zeros_like(&x);
        let next = dual_update(&x, &state, &SparsityTarget::count(2), None, 0).unwrap();
        assert_eq!(next.z, x);
        assert_eq!(next.u.as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn dual_update_hand_computed() {
        let x = ParamVector::from_vec(vec![3.0, 1.0]);
        let state = DualState::zeros_like(&x);
        let next = dual_update(&x, &state, &SparsityTarget::count(1), None, 5).unwrap();
        assert_eq!(next.z.as_slice(), &[3.0, 0.0]);
        assert_eq!(next.u.as_slice(), &[0.0, 1.0]);
        assert_eq!(next.last_update_step, 5);
    }

    #[test]
    fn x_step_hand_evaluated() {
        let f = QuadraticObjective::isotropic(vec![0.0, 0.0]);
        let x = ParamVector::from_vec(vec![1.0f64, 0.0]);
        let state = DualState::zeros_like(&x);
        let out = x_step(&f, &x, &state, 1.0, 0.1, 0.0, &[], None).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-15 && out[1] == 0.0);
    }

    #[test]
    fn x_step_reduces_to_sam_step() {
        let f = QuadraticObjective::diagonal(&[1.0, 3.0], vec![0.5, -0.5]).unwrap();
        let x = ParamVector::from_vec(vec![1.0, 2.0]);
        let sam = crate::sharpness::sam_gradient(&f, &x, 0.2, &[]).unwrap();
        let mut expect = x.clone();
        expect.axpy(-0.1, &sam);
        let state = DualState::zeros_like(&x);
        assert_eq!(x_step(&f, &x, &state, 0.0, 0.1, 0.2, &[], None).unwrap(), expect);
        let pinned = DualState {
            z: x.clone(),
            u: x.zeros_like(),
            last_update_step: 0,
        };
        assert_eq!(x_step(&f, &x, &pinned, 5.0, 0.1, 0.2, &[], None).unwrap(), expect);
    }

    #[test]
    fn zero_step_run_projects_initial_point() {
        let f = QuadraticObjective::isotropic(vec![0.0; 3]);
        let x0 = ParamVector::from_vec(vec![1.0, -3.0, 2.0]);
        let cfg = SafeConfig {
            steps: 0,
            target: SparsityTarget::count(1),
            ..SafeConfig::default()
        };
        let r = run_safe(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
        assert!(r.trace.is_empty());
        assert_eq!(r.x_sparse.as_slice(), &[0.0, -3.0, 0.0]);
    }

    #[test]
    fn separable_quadratic_reaches_sparse_minimizer() {
        let f = QuadraticObjective::isotropic(vec![5.0, 0.1, 4.0]);
        let cfg = SafeConfig {
            rho: Schedule::PowerLaw {
                start: 0.05,
                exponent: 2.0,
            },
            lambda: Schedule::constant(1.0),
            dual_interval: 1,
            steps: 3000,
            lr: Schedule::constant(0.1),
            target: SparsityTarget::count(2),
            ..SafeConfig::default()
        };
        let x0 = ParamVector::from_vec(vec![0.0; 3]);
        let r = run_safe(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
        let expect = [5.0f64, 0.0, 4.0];
        for (a, b) in r.x_sparse.iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{:?}", r.x_sparse);
        }
        let gap = stationarity_gap(&f, &r.x_dense, 2.0, &cfg.target, &[]).unwrap();
        assert!(gap < 1e-6, "gap {gap}");
    }

    #[test]
    fn nonfinite_loss_aborts_with_snapshot() {
        let f = QuadraticObjective::isotropic(vec![0.0; 2]);
        let cfg = SafeConfig {
            rho: Schedule::constant(0.0),
            lr: Schedule::constant(1e200),
            steps: 10,
            target: SparsityTarget::count(1),
            ..SafeConfig::default()
        };
        let x0 = ParamVector::from_vec(vec![1e200, 1.0]);
        match run_safe(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval) {
            Err(Error::NonFinite { snapshot, .. }) => assert!(snapshot.is_some()),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn stationarity_gap_examples() {
        let c = vec![5.0, 0.1, 4.0];
        let f = QuadraticObjective::isotropic(c.clone());
        let target = SparsityTarget::count(2);
        let opt = ParamVector::from_vec(vec![5.0, 0.0, 4.0]);
        assert!(stationarity_gap(&f, &opt, 1.0, &target, &[]).unwrap() < 1e-10);
        assert!(stationarity_gap(&f, &opt, 3.0, &target, &[]).unwrap() < 1e-10);
        let zero = ParamVector::from_vec(vec![0.0; 3]);
        assert!(stationarity_gap(&f, &zero, 1.0, &target, &[]).unwrap() > 0.0);
        assert!(stationarity_gap(&f, &zero, 0.0, &target, &[]).is_err());
    }

    #[test]
    fn lemma_table() {
        let beta = 2.0;
        let r = lemma_schedule_check(&Schedule::constant(0.1), &Schedule::constant(0.1), beta);
        assert_eq!(r.sum_eta_diverges, Condition::Pass);
        assert_eq!(r.sum_eta_rho_converges, Condition::Fail);
        assert_eq!(r.limsup_rho_below_inverse_beta, Condition::Pass);

        let inv = |c| Schedule::PowerLaw { start: c, exponent: 1.0 };
        let r = lemma_schedule_check(&inv(0.5), &inv(0.3), beta);
        assert!(r.all_pass());

        let r = lemma_schedule_check(
            &Schedule::PowerLaw { start: 1.0, exponent: 2.0 },
            &Schedule::constant(0.1),
            beta,
        );
        assert_eq!(r.sum_eta_diverges, Condition::Fail);

        let r = lemma_schedule_check(&Schedule::cosine_warmup(1.0), &Schedule::constant(0.1), beta);
        assert_eq!(r.sum_eta_diverges, Condition::Unknown);
        let r = lemma_schedule_check(&Schedule::constant(0.1), &Schedule::constant(0.6), beta);
        assert_eq!(r.limsup_rho_below_inverse_beta, Condition::Fail);
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = SafeConfig {
            variant: Variant {
                plus: SaliencyMode::Wanda,
                sg: true,
                multi: Some(vec![0.5, 0.9]),
            },
            base: BaseStep::adam(),
            ..SafeConfig::default()
        };
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SafeConfig>(&s).unwrap(), cfg);
    }
}
