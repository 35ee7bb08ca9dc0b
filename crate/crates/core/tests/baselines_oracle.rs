use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_core::baselines::{
    cram_update, magnitude_prune_oneshot, run_baseline, run_imp_sam, sparsity_schedule,
    BaselineConfig, BaselineMethod, ScheduleKind,
};
use safe_core::objective::{QuadraticObjective, SoftQuadraticObjective};
use safe_core::{
    hard_threshold, nm_projection, DataStream, FullBatch, Layout, NoEval, Objective, ParamVector,
    Schedule, SparsityTarget,
};

fn soft(n: usize, seed: u64) -> SoftQuadraticObjective<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let q = b.t().dot(&b) / n as f64;
    let lin = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = Array2::from_shape_fn((3, n), |_| rng.random_range(-1.0..1.0));
    SoftQuadraticObjective::new(q, lin, a).unwrap()
}

proptest! {
    #[test]
    fn oneshot_equals_projection_module(v in prop::collection::vec(-5.0f64..5.0, 8..40), s in 0.05f64..0.95) {
        let x = ParamVector::from_vec(v.clone());
        let target = SparsityTarget::fraction(s);
        let d = safe_core::sparsity::sparsity_to_count(&target, v.len()).unwrap();
        let a = magnitude_prune_oneshot(&x, &target).unwrap();
        prop_assert_eq!(a.into_vec(), hard_threshold(&v, d).unwrap());
        let w = v[..v.len() / 4 * 4].to_vec();
        let y = ParamVector::from_vec(w.clone());
        let b = magnitude_prune_oneshot(&y, &SparsityTarget::n_of_m(2, 4)).unwrap();
        prop_assert_eq!(b.into_vec(), nm_projection(&w, 2, 4, None).unwrap());
    }

    #[test]
    fn schedules_are_monotone_and_bounded(t in 0usize..=100, s in 0.0f64..1.0) {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cubic] {
            let a = sparsity_schedule(kind, t, 100, s).unwrap();
            prop_assert!((0.0..=s).contains(&a));
            if t < 100 {
                prop_assert!(sparsity_schedule(kind, t + 1, 100, s).unwrap() >= a);
            }
        }
    }
}

#[test]
fn cram_dense_target_is_plain_gradient_step() {
    let f = soft(6, 1);
    let x = ParamVector::from_vec(vec![0.3, -0.2, 0.9, 0.0, 0.4, -0.6]);
    let out = cram_update(&f, &x, 0.0, 0.05, &SparsityTarget::count(6), false, &[]).unwrap();
    let mut expect = x.clone();
    expect.axpy(-0.05, &f.gradient(&x, &[]).unwrap());
    assert_eq!(out, expect);
}

#[test]
fn cram_matches_hand_composition() {
    // f = ½ xᵀ diag(1, 2, 3) x − cᵀx; C keeps one entry
    let f = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]).unwrap();
    let x = ParamVector::from_vec(vec![0.0, 0.0, 0.0]);
    // ∇f(0) = −Qc = (−1, −2, −3); x + 0.1∇f = (−0.1, −0.2, −0.3) → C = (0, 0, −0.3)
    // ∇f(C) = Q(C − c) = (−1, −2, −3.9); step η = 0.1
    let out = cram_update(&f, &x, 0.1, 0.1, &SparsityTarget::count(1), false, &[]).unwrap();
    let expect = [0.1f64, 0.2, 0.39];
    for (a, b) in out.iter().zip(expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn imp_sam_sparsity_trace_follows_schedule() {
    let f = soft(20, 3);
    let mut cfg = BaselineConfig::new(BaselineMethod::ImpSam, SparsityTarget::fraction(0.8));
    cfg.steps = 100;
    cfg.prune_interval = 10;
    cfg.lr = Schedule::constant(0.05);
    let x0 = ParamVector::from_vec(vec![0.5; 20]);
    let r = run_imp_sam(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
    assert_eq!(r.prune_events.len(), 9);
    let mut prev = 0.0;
    for e in &r.prune_events {
        let s = sparsity_schedule(ScheduleKind::Cubic, e.step, 100, 0.8).unwrap();
        assert_eq!(e.scheduled_sparsity, s);
        let expect = 1.0 - ((1.0 - s) * 20.0).round().clamp(1.0, 20.0) / 20.0;
        assert!((e.achieved_sparsity - expect).abs() < 1e-12);
        assert!(e.achieved_sparsity >= prev);
        prev = e.achieved_sparsity;
    }
    assert_eq!(r.x_sparse.iter().filter(|v| **v != 0.0).count(), 4);
}

#[test]
fn pruned_weights_never_regrow() {
    let f = soft(16, 4);
    let mut cfg = BaselineConfig::new(BaselineMethod::ImpSam, SparsityTarget::fraction(0.75));
    cfg.steps = 60;
    cfg.prune_interval = 5;
    cfg.schedule = Some(ScheduleKind::Linear);
    cfg.trace_every = 1;
    let x0 = ParamVector::from_vec((0..16).map(|i| 0.1 * i as f64 - 0.7).collect());
    let r = run_imp_sam(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
    let mut prev = 0.0;
    for rec in &r.trace {
        assert!(rec.sparsity >= prev);
        prev = rec.sparsity;
    }
}

struct Recording {
    inner: safe_core::ShuffledBatches,
    log: Rc<RefCell<Vec<Vec<usize>>>>,
}

impl DataStream for Recording {
    fn next_batch(&mut self) -> Vec<usize> {
        let b = self.inner.next_batch();
        self.log.borrow_mut().push(b.clone());
        b
    }
}

#[test]
fn baselines_consume_identical_streams() {
    let f = soft(8, 5);
    let mut logs = Vec::new();
    for method in [BaselineMethod::ImpSam, BaselineMethod::Cram, BaselineMethod::CramPlus] {
        let mut cfg = BaselineConfig::new(method, SparsityTarget::fraction(0.5));
        cfg.steps = 25;
        let log = Rc::new(RefCell::new(Vec::new()));
        let mut s = Recording {
            inner: safe_core::ShuffledBatches::new(50, 8, 42).unwrap(),
            log: log.clone(),
        };
        run_baseline(&f, ParamVector::from_vec(vec![0.1; 8]), &mut s, &cfg, &mut NoEval).unwrap();
        logs.push(log.borrow().clone());
    }
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[1], logs[2]);
}

#[test]
fn cram_multi_output_meets_final_target() {
    let f = soft(12, 6);
    let mut cfg = BaselineConfig::new(BaselineMethod::CramPlusMulti, SparsityTarget::fraction(0.5));
    cfg.multi = Some(vec![0.25, 0.5, 0.75]);
    cfg.steps = 40;
    let layout = Arc::new(Layout::single(12));
    let x0 = ParamVector::new(vec![0.2; 12], layout).unwrap();
    let r = run_baseline(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
    assert_eq!(r.x_sparse.iter().filter(|v| **v != 0.0).count(), 6);
    assert!(f.value(&r.x_dense, &[]).unwrap().is_finite());
}
