use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use safe_core::objective::{QuadraticObjective, SoftQuadraticObjective};
use safe_core::sharpness::{
    default_hvp_step, epsilon_star, hvp, landscape_slice, max_hessian_eigenvalue, sam_gradient,
    PowerIteration,
};
use safe_core::{Objective, ParamVector};

fn random_soft_quadratic(n: usize, k: usize, seed: u64) -> SoftQuadraticObjective<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let q = b.t().dot(&b) / n as f64;
    let lin = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = Array2::from_shape_fn((k, n), |_| rng.random_range(-1.0..1.0));
    SoftQuadraticObjective::new(q, lin, a).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

/// Central differences of `x ↦ f(x + e)` with the perturbation `e` frozen.
fn frozen_fd_gradient(f: &dyn Objective<f64>, x: &ParamVector<f64>, e: &ParamVector<f64>) -> Vec<f64> {
    let h = 1e-5;
    (0..x.dim())
        .map(|i| {
            let mut p = x.clone();
            p.axpy(1.0, e);
            let mut m = p.clone();
            p[i] += h;
            m[i] -= h;
            (f.value(&p, &[]).unwrap() - f.value(&m, &[]).unwrap()) / (2.0 * h)
        })
        .collect()
}

#[test]
fn sam_gradient_matches_frozen_perturbation_differences() {
    for seed in 0..5 {
        let f = random_soft_quadratic(10, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = ParamVector::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
        let g = f.gradient(&x, &[]).unwrap();
        for rho in [0.0, 0.05, 0.1] {
            let e = epsilon_star(&g, rho);
            let fd = frozen_fd_gradient(&f, &x, &e);
            let sam = sam_gradient(&f, &x, rho, &[]).unwrap();
            assert!(rel_err(&sam, &fd) < 1e-5, "seed {seed} rho {rho}");
        }
        assert_eq!(sam_gradient(&f, &x, 0.0, &[]).unwrap(), g);
    }
}

fn dense_max_eig(q: &Array2<f64>) -> f64 {
    let n = q.nrows();
    let m = DMatrix::from_fn(n, n, |i, j| q[[i, j]]);
    SymmetricEigen::new(m).eigenvalues.max()
}

#[test]
fn power_iteration_matches_dense_eigensolver() {
    let cfg = PowerIteration {
        iters: 20_000,
        tol: 1e-12,
        seed: 3,
    };
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Array2::from_shape_fn((50, 50), |_| rng.random_range(-1.0..1.0));
        let q = b.t().dot(&b) / 50.0;
        let f = QuadraticObjective::new(q.clone(), vec![0.0; 50]).unwrap();
        let x = ParamVector::from_vec((0..50).map(|_| rng.random_range(-1.0..1.0)).collect());
        let est = max_hessian_eigenvalue(&f, &x, &[], &cfg).unwrap();
        let truth = dense_max_eig(&q);
        assert!((est.value - truth).abs() <= 1e-4 * truth.abs(), "{} vs {truth}", est.value);
    }
}

#[test]
fn negative_dominant_eigenvalue_is_shifted_away() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = Array2::from_shape_fn((20, 20), |_| rng.random_range(-1.0..1.0));
    let mut q = b.t().dot(&b) / 20.0;
    // push the bottom of the spectrum far negative
    for i in 0..20 {
        q[[i, i]] -= 6.0;
    }
    let f = QuadraticObjective::new(q.clone(), vec![0.0; 20]).unwrap();
    let x = ParamVector::from_vec(vec![0.1; 20]);
    let cfg = PowerIteration {
        iters: 50_000,
        tol: 1e-13,
        seed: 1,
    };
    let est = max_hessian_eigenvalue(&f, &x, &[], &cfg).unwrap();
    let truth = dense_max_eig(&q);
    assert!((est.value - truth).abs() <= 1e-4 * truth.abs().max(1.0), "{} vs {truth}", est.value);
}

#[test]
fn hvp_is_linear() {
    let f = random_soft_quadratic(12, 4, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = ParamVector::from_vec((0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
    let h = default_hvp_step(&x);
    let u: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect();
    let lhs = hvp(&f, &x, &combo, h, &[]).unwrap();
    let hu = hvp(&f, &x, &u, h, &[]).unwrap();
    let hv = hvp(&f, &x, &v, h, &[]).unwrap();
    let rhs: Vec<f64> = hu.iter().zip(hv.iter()).map(|(p, q)| a * p + b * q).collect();
    assert!(rel_err(&lhs, &rhs) < 1e-6);
}

#[test]
fn landscape_center_is_the_loss_at_x() {
    let f = random_soft_quadratic(6, 3, 2);
    let x = ParamVector::from_vec(vec![0.3, -0.1, 0.5, 0.0, 0.2, -0.4]);
    let fx = f.value(&x, &[]).unwrap();
    for axes in [1, 2] {
        let grid = landscape_slice(&f, &x, axes, 5, 1.0, &[], 4).unwrap();
        assert_eq!(grid.center_loss(), fx);
        assert_eq!(grid.losses.len(), 5usize.pow(axes as u32));
    }
    assert!(landscape_slice(&f, &x, 1, 4, 1.0, &[], 4).is_err());
}
