//! Comparison methods: one-shot magnitude pruning, IMP with SAM steps, and CrAM.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objective::{check_dim, BatchRef, DataStream, Objective};
use crate::param::ParamVector;
use crate::projection::{apply_mask, project, support_mask};
use crate::safe::{EvalHook, PruneEvent, TrainResult};
use crate::scalar::Scalar;
use crate::schedule::Schedule;
use crate::sharpness::sam_gradient_from;
use crate::sparsity::{Pattern, SparsityTarget};
use crate::trace::TraceRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    MagnitudeOneshot,
    ImpSam,
    Cram,
    CramPlus,
    CramMulti,
    CramPlusMulti,
}

impl BaselineMethod {
    fn is_cram(self) -> bool {
        matches!(
            self,
            Self::Cram | Self::CramPlus | Self::CramMulti | Self::CramPlusMulti
        )
    }

    fn plus(self) -> bool {
        matches!(self, Self::CramPlus | Self::CramPlusMulti)
    }

    fn multi(self) -> bool {
        matches!(self, Self::CramMulti | Self::CramPlusMulti)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Linear,
    Cubic,
}

/// Sparsity after `t` of `t_prune` pruning steps.
///
/// Linear: `s·t/T`. Cubic (gradual magnitude pruning): `s·(1 − (1 − t/T)³)`.
pub fn sparsity_schedule(kind: ScheduleKind, t: usize, t_prune: usize, s_final: f64) -> Result<f64> {
    if t_prune == 0 || t > t_prune {
        return Err(invalid(format!("step {t} outside pruning horizon {t_prune}")));
    }
    if t == t_prune {
        return Ok(s_final);
    }
    let r = t as f64 / t_prune as f64;
    Ok(match kind {
        ScheduleKind::Linear => s_final * r,
        ScheduleKind::Cubic => s_final * (1.0 - (1.0 - r).powi(3)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    /// Gradual-pruning schedule; IMP+SAM only.
    #[serde(default)]
    pub schedule: Option<ScheduleKind>,
    #[serde(default = "default_prune_interval")]
    pub prune_interval: usize,
    /// SAM radius for IMP+SAM, compression-perturbation radius for CrAM.
    pub rho: f64,
    pub lr: Schedule,
    pub steps: usize,
    pub target: SparsityTarget,
    #[serde(default)]
    pub seed: u64,
    /// Sparsity fractions to draw the compression target from (multi variants).
    #[serde(default)]
    pub multi: Option<Vec<f64>>,
    #[serde(default = "default_trace_every")]
    pub trace_every: usize,
}

fn default_prune_interval() -> usize {
    1
}

fn default_trace_every() -> usize {
    50
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod, target: SparsityTarget) -> Self {
        Self {
            method,
            schedule: (method == BaselineMethod::ImpSam).then_some(ScheduleKind::Cubic),
            prune_interval: 1,
            rho: 0.1,
            lr: Schedule::constant(0.1),
            steps: 1000,
            target,
            seed: 0,
            multi: None,
            trace_every: default_trace_every(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prune_interval == 0 {
            return Err(invalid("prune interval must be at least 1"));
        }
        if self.trace_every == 0 {
            return Err(invalid("trace_every must be at least 1"));
        }
        if !(self.rho >= 0.0) {
            return Err(invalid("rho must be non-negative"));
        }
        self.target.validate()?;
        match self.method {
            BaselineMethod::ImpSam => {
                if self.schedule.is_none() {
                    return Err(invalid("imp-sam needs a sparsity schedule"));
                }
                if self.target.pattern != Pattern::Unstructured {
                    return Err(invalid("imp-sam prunes unstructured only"));
                }
            }
            _ if self.schedule.is_some() => {
                return Err(invalid("sparsity schedule is only meaningful for imp-sam"))
            }
            _ => {}
        }
        if self.method.multi() {
            let set = self
                .multi
                .as_ref()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| invalid("multi variant needs a non-empty sparsity set"))?;
            for &s in set {
                SparsityTarget::fraction(s).validate()?;
            }
        }
        Ok(())
    }
}

/// Euclidean projection onto `target`.
pub fn magnitude_prune_oneshot<T: Scalar>(x: &ParamVector<T>, target: &SparsityTarget) -> Result<ParamVector<T>> {
    project(x, target, None)
}

/// Keeps the largest `1 − s` fraction of sparsifiable entries; `s` may be 0.
fn prune_to_fraction<T: Scalar>(x: &ParamVector<T>, s: f64) -> Result<Vec<bool>> {
    let n = x.layout().sparsifiable_len();
    let keep = ((1.0 - s) * n as f64).round().clamp(1.0, n as f64) as usize;
    if keep >= n {
        return Ok(vec![true; x.dim()]);
    }
    support_mask(x, &SparsityTarget::count(keep), None)
}

fn mask_in_place<T: Scalar>(v: &mut ParamVector<T>, mask: &[bool]) {
    for (a, &keep) in v.iter_mut().zip(mask) {
        if !keep {
            *a = T::zero();
        }
    }
}

fn non_finite<T: Scalar>(what: &str, step: usize, x: &ParamVector<T>) -> Error {
    Error::NonFinite {
        what: what.into(),
        step,
        snapshot: Some(x.to_f64_vec()),
    }
}

/// SAM training with gradual magnitude pruning; pruned coordinates are frozen.
///
/// Prune events fire at `t = k·prune_interval` (`k ≥ 1`, `t < T`) at the
/// scheduled sparsity over the horizon `T`; the returned sparse model is a
/// final prune at the target.
pub fn run_imp_sam<T: Scalar, O: Objective<T>>(
    oracle: &O,
    x_init: ParamVector<T>,
    stream: &mut dyn DataStream,
    config: &BaselineConfig,
    hooks: &mut dyn EvalHook<T>,
) -> Result<TrainResult<T>> {
    config.validate()?;
    if config.method != BaselineMethod::ImpSam {
        return Err(invalid("run_imp_sam called with a non imp-sam config"));
    }
    check_dim(oracle, &x_init)?;
    let kind = config.schedule.unwrap_or(ScheduleKind::Cubic);
    let total = config.steps;
    let n = x_init.layout().sparsifiable_len();
    let s_final = config.target.nominal_sparsity(n);
    let rho = T::of_f64(config.rho);
    let eval_every = hooks.every();

    let mut x = x_init;
    let mut mask = vec![true; x.dim()];
    let mut events = Vec::new();
    let mut trace = Vec::new();
    for t in 0..total {
        let batch = stream.next_batch();
        let pruned = t > 0 && t % config.prune_interval == 0;
        if pruned {
            let s = sparsity_schedule(kind, t, total, s_final)?;
            let m = prune_to_fraction(&x, s)?;
            for (a, b) in mask.iter_mut().zip(m) {
                *a = *a && b;
            }
            mask_in_place(&mut x, &mask);
            events.push(PruneEvent {
                step: t,
                scheduled_sparsity: s,
                achieved_sparsity: x.sparsity(),
            });
        }
        let eta = T::of_f64(config.lr.eval_unchecked(t, total));
        let (loss, mut g) = oracle.value_and_gradient(&x, &batch)?;
        if !loss.is_finite() {
            return Err(non_finite("loss", t, &x));
        }
        mask_in_place(&mut g, &mask);
        let mut d = sam_gradient_from(oracle, &x, &g, rho, &batch)?;
        mask_in_place(&mut d, &mask);

        let evaluated = eval_every > 0 && t % eval_every == 0;
        if t % config.trace_every == 0 || pruned || evaluated || t + 1 == total {
            let mut rec = TraceRecord::new(t, loss.into_f64());
            let proj = project(&x, &config.target, None)?;
            rec.dist_to_constraint = x.dist2(&proj).into_f64();
            rec.lr = eta.into_f64();
            rec.rho = config.rho;
            rec.sparsity = x.sparsity();
            if evaluated {
                rec.metrics = hooks.evaluate(t, &x, &proj)?;
            }
            trace.push(rec);
        }

        x.axpy(-eta, &d);
        if !x.is_finite() {
            return Err(non_finite("iterate", t, &x));
        }
    }
    let x_sparse = magnitude_prune_oneshot(&apply_mask(&x, &mask), &config.target)?;
    let final_metrics = hooks.evaluate(total, &x, &x_sparse)?;
    Ok(TrainResult {
        x_dense: x,
        x_sparse,
        trace,
        final_saliency: None,
        final_metrics,
        dual: None,
        prune_events: events,
    })
}

/// One CrAM step: `x − η ∇f(C(x + ρ ∇f(x)))`, plus `− η ∇f(x)` when `plus`.
///
/// `C` is magnitude projection onto `target`; its Jacobian is ignored
/// (straight-through). The perturbation `ρ ∇f(x)` is not normalized.
pub fn cram_update<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    rho: T,
    eta: T,
    target: &SparsityTarget,
    plus: bool,
    batch: BatchRef<'_>,
) -> Result<ParamVector<T>> {
    let g = oracle.gradient(x, batch)?;
    cram_update_from(oracle, x, &g, rho, eta, target, plus, batch)
}

#[allow(clippy::too_many_arguments)]
fn cram_update_from<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    g: &ParamVector<T>,
    rho: T,
    eta: T,
    target: &SparsityTarget,
    plus: bool,
    batch: BatchRef<'_>,
) -> Result<ParamVector<T>> {
    let mut probe = x.clone();
    probe.axpy(rho, g);
    let compressed = project(&probe, target, None)?;
    let gc = oracle.gradient(&compressed, batch)?;
    let mut out = x.clone();
    out.axpy(-eta, &gc);
    if plus {
        out.axpy(-eta, g);
    }
    Ok(out)
}

pub fn run_cram<T: Scalar, O: Objective<T>>(
    oracle: &O,
    x_init: ParamVector<T>,
    stream: &mut dyn DataStream,
    config: &BaselineConfig,
    hooks: &mut dyn EvalHook<T>,
) -> Result<TrainResult<T>> {
    config.validate()?;
    if !config.method.is_cram() {
        return Err(invalid("run_cram called with a non-CrAM config"));
    }
    check_dim(oracle, &x_init)?;
    let total = config.steps;
    let rho = T::of_f64(config.rho);
    let plus = config.method.plus();
    let set = if config.method.multi() {
        config.multi.clone()
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let eval_every = hooks.every();
    let mut x = x_init;
    let mut trace = Vec::new();
    for t in 0..total {
        let batch = stream.next_batch();
        let eta = T::of_f64(config.lr.eval_unchecked(t, total));
        let target = match &set {
            Some(s) => SparsityTarget::fraction(s[rng.random_range(0..s.len())]),
            None => config.target,
        };
        let (loss, g) = oracle.value_and_gradient(&x, &batch)?;
        if !loss.is_finite() {
            return Err(non_finite("loss", t, &x));
        }
        let evaluated = eval_every > 0 && t % eval_every == 0;
        if t % config.trace_every == 0 || evaluated || t + 1 == total {
            let mut rec = TraceRecord::new(t, loss.into_f64());
            let proj = project(&x, &config.target, None)?;
            rec.dist_to_constraint = x.dist2(&proj).into_f64();
            rec.lr = eta.into_f64();
            rec.rho = config.rho;
            rec.sparsity = x.sparsity();
            if evaluated {
                rec.metrics = hooks.evaluate(t, &x, &proj)?;
            }
            trace.push(rec);
        }
        let next = cram_update_from(oracle, &x, &g, rho, eta, &target, plus, &batch)?;
        if !next.is_finite() {
            return Err(non_finite("iterate", t, &x));
        }
        x = next;
    }
    let x_sparse = magnitude_prune_oneshot(&x, &config.target)?;
    let final_metrics = hooks.evaluate(total, &x, &x_sparse)?;
    Ok(TrainResult {
        x_dense: x,
        x_sparse,
        trace,
        final_saliency: None,
        final_metrics,
        dual: None,
        prune_events: Vec::new(),
    })
}

/// Dispatches on `config.method`. Magnitude one-shot ignores the data.
pub fn run_baseline<T: Scalar, O: Objective<T>>(
    oracle: &O,
    x_init: ParamVector<T>,
    stream: &mut dyn DataStream,
    config: &BaselineConfig,
    hooks: &mut dyn EvalHook<T>,
) -> Result<TrainResult<T>> {
    match config.method {
        BaselineMethod::MagnitudeOneshot => {
            config.validate()?;
            let x_sparse = magnitude_prune_oneshot(&x_init, &config.target)?;
            let final_metrics = hooks.evaluate(0, &x_init, &x_sparse)?;
            Ok(TrainResult {
                x_dense: x_init,
                x_sparse,
                trace: Vec::new(),
                final_saliency: None,
                final_metrics,
                dual: None,
                prune_events: Vec::new(),
            })
        }
        BaselineMethod::ImpSam => run_imp_sam(oracle, x_init, stream, config, hooks),
        _ => run_cram(oracle, x_init, stream, config, hooks),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::{FullBatch, QuadraticObjective};
    use crate::safe::NoEval;

    #[test]
    fn oneshot_examples() {
        let x = ParamVector::from_vec(vec![3.0, -1.0, 2.0]);
        let out = magnitude_prune_oneshot(&x, &SparsityTarget::fraction(0.5)).unwrap();
        assert_eq!(out.as_slice(), &[3.0, 0.0, 2.0]);
        assert_eq!(magnitude_prune_oneshot(&out, &SparsityTarget::count(2)).unwrap(), out);
    }

    #[test]
    fn schedule_examples() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cubic] {
            assert_eq!(sparsity_schedule(kind, 0, 10, 0.9).unwrap(), 0.0);
            assert_eq!(sparsity_schedule(kind, 10, 10, 0.9).unwrap(), 0.9);
        }
        let c = sparsity_schedule(ScheduleKind::Cubic, 5, 10, 0.9).unwrap();
        assert!((c - 0.7875).abs() < 1e-15);
        assert!(sparsity_schedule(ScheduleKind::Linear, 11, 10, 0.9).is_err());
    }

    #[test]
    fn cram_plain_step_when_compression_is_identity() {
        let f = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], vec![1.0, -1.0, 0.5]).unwrap();
        let x = ParamVector::from_vec(vec![0.2, 0.0, -0.3]);
        let out = cram_update(&f, &x, 0.0, 0.1, &SparsityTarget::count(2), false, &[]).unwrap();
        let mut expect = x.clone();
        expect.axpy(-0.1, &f.gradient(&x, &[]).unwrap());
        assert_eq!(out, expect);
    }

    #[test]
    fn cram_plus_adds_dense_gradient() {
        let f = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], vec![1.0, -1.0, 0.5]).unwrap();
        let x = ParamVector::from_vec(vec![0.2f64, 0.7, -0.3]);
        let t = SparsityTarget::count(1);
        let a = cram_update(&f, &x, 0.3, 0.1, &t, false, &[]).unwrap();
        let b = cram_update(&f, &x, 0.3, 0.1, &t, true, &[]).unwrap();
        let g = f.gradient(&x, &[]).unwrap();
        for i in 0..3 {
            assert!((a[i] - b[i] - 0.1 * g[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cram_hand_computed() {
        // f = ½‖x − c‖², c = (1, 0); x = (0.5, 0.4), ρ = 1, η = 0.5, keep 1
        // ∇f(x) = (−0.5, 0.4); x + ρ∇f = (0, 0.8); C → (0, 0.8); ∇f(C) = (−1, 0.8)
        let f = QuadraticObjective::isotropic(vec![1.0, 0.0]);
        let x = ParamVector::from_vec(vec![0.5f64, 0.4]);
        let out = cram_update(&f, &x, 1.0, 0.5, &SparsityTarget::count(1), false, &[]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[1] - 0.0).abs() < 1e-15);
    }

    #[test]
    fn imp_without_prune_events_is_sam_then_prune() {
        let f = QuadraticObjective::isotropic(vec![3.0, -2.0, 1.0, 0.5]);
        let mut cfg = BaselineConfig::new(BaselineMethod::ImpSam, SparsityTarget::count(2));
        cfg.steps = 20;
        cfg.prune_interval = 100;
        let x0 = ParamVector::from_vec(vec![0.0; 4]);
        let r = run_imp_sam(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
        assert!(r.prune_events.is_empty());
        assert_eq!(r.x_sparse, magnitude_prune_oneshot(&r.x_dense, &cfg.target).unwrap());
    }

    #[test]
    fn imp_pruned_coordinates_stay_zero() {
        let f = QuadraticObjective::isotropic(vec![3.0, -2.0, 1.0, 0.5, 0.2, -0.1]);
        let mut cfg = BaselineConfig::new(BaselineMethod::ImpSam, SparsityTarget::count(2));
        cfg.steps = 30;
        cfg.prune_interval = 5;
        let x0 = ParamVector::from_vec(vec![0.1; 6]);
        let r = run_imp_sam(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
        assert_eq!(r.prune_events.len(), 5);
        let mut prev = 0.0;
        for e in &r.prune_events {
            assert!(e.scheduled_sparsity >= prev);
            prev = e.scheduled_sparsity;
        }
        assert!(r.x_dense.iter().filter(|v| **v == 0.0).count() >= 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = BaselineConfig::new(BaselineMethod::Cram, SparsityTarget::fraction(0.5));
        assert!(cfg.validate().is_ok());
        cfg.schedule = Some(ScheduleKind::Linear);
        assert!(cfg.validate().is_err());
        let mut cfg = BaselineConfig::new(BaselineMethod::CramMulti, SparsityTarget::fraction(0.5));
        assert!(cfg.validate().is_err());
        cfg.multi = Some(vec![0.5, 0.7]);
        assert!(cfg.validate().is_ok());
        cfg.prune_interval = 0;
        assert!(cfg.validate().is_err());
    }
}
