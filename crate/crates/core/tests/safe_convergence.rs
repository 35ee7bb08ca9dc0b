use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_core::objective::{QuadraticObjective, ShuffledBatches};
use safe_core::safe::{
    dual_update, lemma_schedule_check, run_safe, stationarity_gap, BaseStep, Condition, DualState,
    NoEval, SafeConfig, Variant,
};
use safe_core::{
    hard_threshold, project, FullBatch, Objective, ParamVector, SaliencyMode, Schedule, SparsityTarget,
};

struct Instance {
    f: QuadraticObjective<f64>,
    beta: f64,
    d: usize,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..=12);
    let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let mut q = b.t().dot(&b) / n as f64;
    for i in 0..n {
        q[[i, i]] += 0.1;
    }
    let c = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let beta = SymmetricEigen::new(DMatrix::from_fn(n, n, |i, j| q[[i, j]]))
        .eigenvalues
        .max();
    Instance {
        f: QuadraticObjective::new(q, c).unwrap(),
        beta,
        d: rng.random_range(1..n),
    }
}

fn quadratic_config(beta: f64, d: usize) -> SafeConfig {
    let lambda = beta;
    SafeConfig {
        rho: Schedule::PowerLaw {
            start: 0.05,
            exponent: 2.0,
        },
        lambda: Schedule::constant(lambda),
        dual_interval: 1,
        steps: 10_000,
        lr: Schedule::constant(1.0 / (beta + lambda)),
        target: SparsityTarget::count(d),
        ..SafeConfig::default()
    }
}

/// Projected gradient descent `x ← proj(x − ∇f(x)/δ)`; a δ-stationary point is a fixed point.
fn pgd_step(f: &QuadraticObjective<f64>, x: &ParamVector<f64>, delta: f64, d: usize) -> Vec<f64> {
    let g = f.gradient(x, &[]).unwrap();
    let y: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a - b / delta).collect();
    hard_threshold(&y, d).unwrap()
}

#[test]
fn converges_to_stationary_point_on_quadratic_family() {
    for seed in 0..12 {
        let inst = instance(seed);
        let cfg = quadratic_config(inst.beta, inst.d);
        let x0 = ParamVector::from_vec(vec![0.0; inst.f.dimension()]);
        let r = run_safe(&inst.f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
        let delta = 2.0 * inst.beta;
        let gap = stationarity_gap(&inst.f, &r.x_dense, delta, &cfg.target, &[]).unwrap();
        assert!(gap < 1e-6, "seed {seed}: gap {gap}");
        let z = &r.dual.as_ref().unwrap().z;
        let linf = r.x_dense.iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(linf < 1e-6, "seed {seed}: |x - z| {linf}");
        let fixed = pgd_step(&inst.f, &r.x_sparse, delta, inst.d);
        let moved = fixed.iter().zip(r.x_sparse.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-6, "seed {seed}: PGD moved {moved}");
    }
}

#[test]
fn admm_is_safe_with_zero_radius() {
    let inst = instance(99);
    let mut cfg = quadratic_config(inst.beta, inst.d);
    cfg.steps = 200;
    let x0 = ParamVector::from_vec(vec![0.5; inst.f.dimension()]);
    let a = run_safe(&inst.f, x0.clone(), &mut FullBatch { n: 0 }, &cfg.admm(), &mut NoEval).unwrap();
    cfg.rho = Schedule::constant(0.0);
    let b = run_safe(&inst.f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
    assert_eq!(a.x_dense, b.x_dense);
}

#[test]
fn first_dual_update_projects_the_initial_point() {
    let x0 = ParamVector::from_vec(vec![0.3, -2.0, 1.0, 0.1]);
    let state = dual_update(&x0, &DualState::zeros_like(&x0), &SparsityTarget::count(2), None, 0).unwrap();
    assert_eq!(state.z, project(&x0, &SparsityTarget::count(2), None).unwrap());
    let mut sum = state.z.clone();
    sum.axpy(1.0, &state.u);
    assert_eq!(sum, x0);
}

#[test]
fn runs_are_deterministic_in_seed() {
    let inst = instance(5);
    let mut cfg = quadratic_config(inst.beta, inst.d);
    cfg.steps = 300;
    cfg.dual_interval = 7;
    cfg.variant = Variant {
        plus: SaliencyMode::Obd,
        sg: true,
        multi: None,
    };
    let n = inst.f.dimension();
    let go = || {
        let mut s = ShuffledBatches::new(10, 3, 4).unwrap();
        run_safe(&inst.f, ParamVector::from_vec(vec![0.1; n]), &mut s, &cfg, &mut NoEval).unwrap()
    };
    let (a, b) = (go(), go());
    assert_eq!(a.x_dense, b.x_dense);
    assert_eq!(a.trace, b.trace);
}

#[test]
fn every_variant_returns_exactly_feasible_output() {
    let inst = instance(17);
    let n = inst.f.dimension();
    let variants = [
        (SaliencyMode::Identity, false, None),
        (SaliencyMode::Snip, false, None),
        (SaliencyMode::Obd, true, None),
        (SaliencyMode::Identity, true, Some(vec![0.3, 0.6])),
    ];
    for (plus, sg, multi) in variants {
        let mut cfg = quadratic_config(inst.beta, inst.d);
        cfg.steps = 400;
        cfg.dual_interval = 8;
        cfg.variant = Variant { plus, sg, multi };
        for base in [BaseStep::Sgd, BaseStep::adam()] {
            cfg.base = base;
            let r = run_safe(&inst.f, ParamVector::from_vec(vec![0.2; n]), &mut FullBatch { n: 0 }, &cfg, &mut NoEval)
                .unwrap();
            assert!(r.x_sparse.iter().filter(|v| **v != 0.0).count() <= inst.d);
            assert_eq!(r.final_saliency.as_ref().map(|p| p.mode()).unwrap_or(SaliencyMode::Identity), plus);
        }
    }
}

#[test]
fn trace_captures_every_dual_update_and_the_last_step() {
    let inst = instance(3);
    let mut cfg = quadratic_config(inst.beta, inst.d);
    cfg.steps = 230;
    cfg.dual_interval = 32;
    let n = inst.f.dimension();
    let r = run_safe(&inst.f, ParamVector::from_vec(vec![0.0; n]), &mut FullBatch { n: 0 }, &cfg, &mut NoEval).unwrap();
    let steps: Vec<usize> = r.trace.iter().map(|t| t.step).collect();
    for k in (0..230).step_by(32) {
        assert!(steps.contains(&k));
    }
    for k in (0..230).step_by(50) {
        assert!(steps.contains(&k));
    }
    assert_eq!(*steps.last().unwrap(), 229);
    assert!(r.trace.iter().filter(|t| t.dual_update).count() == 8);
}

#[test]
fn schedule_classifier_table() {
    let beta = 4.0;
    let r = lemma_schedule_check(&Schedule::constant(0.1), &Schedule::constant(0.01), beta);
    assert_eq!(r.sum_eta_rho_converges, Condition::Fail);
    let inv = |c| Schedule::PowerLaw { start: c, exponent: 1.0 };
    let r = lemma_schedule_check(&inv(0.1), &inv(0.1), beta);
    assert!(r.all_pass());
    // ρ decaying faster than η keeps the product summable
    let r = lemma_schedule_check(
        &Schedule::constant(0.1),
        &Schedule::PowerLaw { start: 0.05, exponent: 2.0 },
        beta,
    );
    assert!(r.all_pass());
    let r = lemma_schedule_check(&Schedule::constant(0.1), &Schedule::constant(0.0), beta);
    assert!(r.all_pass());
}
