//! Sharpness-aware gradients and flatness diagnostics.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::objective::{check_dim, BatchRef, Objective};
use crate::param::ParamVector;
use crate::scalar::{dot, norm2, norm_inf, Scalar};

/// Gradients with norm at or below this are treated as zero.
pub const ZERO_GRADIENT_GUARD: f64 = 1e-16;

/// Worst-case first-order perturbation `ρ · g / ‖g‖₂` (zero when `g` vanishes).
pub fn epsilon_star<T: Scalar>(g: &ParamVector<T>, rho: T) -> ParamVector<T> {
    let norm = g.norm2();
    if norm <= T::of_f64(ZERO_GRADIENT_GUARD) {
        return g.zeros_like();
    }
    g.scaled(rho / norm)
}

/// Gradient at the perturbed point `x + ε*(x)`, both evaluations on `batch`.
pub fn sam_gradient<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    rho: T,
    batch: BatchRef<'_>,
) -> Result<ParamVector<T>> {
    let g = oracle.gradient(x, batch)?;
    sam_gradient_from(oracle, x, &g, rho, batch)
}

/// As [`sam_gradient`], reusing an already computed `∇f(x)`.
pub fn sam_gradient_from<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    g: &ParamVector<T>,
    rho: T,
    batch: BatchRef<'_>,
) -> Result<ParamVector<T>> {
    if rho < T::zero() {
        return Err(invalid("perturbation radius must be non-negative"));
    }
    if rho.is_zero() {
        return Ok(g.clone());
    }
    let eps = epsilon_star(g, rho);
    let mut perturbed = x.clone();
    perturbed.axpy(T::one(), &eps);
    oracle.gradient(&perturbed, batch)
}

/// Finite-difference step used for Hessian-vector products at `x`.
pub fn default_hvp_step<T: Scalar>(x: &[T]) -> T {
    T::of_f64(1e-4) * (T::one() + norm_inf(x))
}

/// Hessian-vector product by central differences of the gradient along `v/‖v‖`.
pub fn hvp<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    v: &[T],
    h: T,
    batch: BatchRef<'_>,
) -> Result<ParamVector<T>> {
    if !(h > T::zero()) {
        return Err(invalid("finite-difference step must be positive"));
    }
    check_dim(oracle, x)?;
    if v.len() != x.dim() {
        return Err(invalid("direction dimension mismatch"));
    }
    let vnorm = norm2(v);
    if vnorm.is_zero() {
        return Err(invalid("direction must be nonzero"));
    }
    let step = h / vnorm;
    let mut plus = x.clone();
    plus.axpy(step, v);
    let mut minus = x.clone();
    minus.axpy(-step, v);
    let gp = oracle.gradient(&plus, batch)?;
    let gm = oracle.gradient(&minus, batch)?;
    let scale = vnorm / (T::of_f64(2.0) * h);
    x.with_values(gp.iter().zip(gm.iter()).map(|(&a, &b)| (a - b) * scale).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration {
    pub iters: usize,
    /// Stop once the Rayleigh quotient changes by less than `tol` relative.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            iters: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on `v ↦ Hv − shift·v`, returning the Rayleigh quotient of the
/// dominant eigenvector (with the shift added back).
fn power_iterate<T: Scalar>(
    n: usize,
    mut apply: impl FnMut(&[T]) -> Result<Vec<T>>,
    shift: T,
    cfg: &PowerIteration,
    start: Vec<T>,
) -> Result<EigenEstimate> {
    let mut v = start;
    let nv = norm2(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let mut prev: Option<T> = None;
    let mut rq = T::zero();
    for it in 1..=cfg.iters {
        let mut w = apply(&v)?;
        for (wi, &vi) in w.iter_mut().zip(&v) {
            *wi -= shift * vi;
        }
        rq = dot(&v, &w);
        let wn = norm2(&w);
        if wn.is_zero() || !wn.is_finite() {
            return Ok(EigenEstimate {
                value: (rq + shift).into_f64(),
                iterations: it,
                converged: wn.is_zero(),
            });
        }
        if let Some(p) = prev {
            if (rq - p).abs() <= T::of_f64(cfg.tol) * rq.abs() {
                return Ok(EigenEstimate {
                    value: (rq + shift).into_f64(),
                    iterations: it,
                    converged: true,
                });
            }
        }
        prev = Some(rq);
        v = w.into_iter().map(|a| a / wn).collect();
    }
    debug_assert_eq!(v.len(), n);
    Ok(EigenEstimate {
        value: (rq + shift).into_f64(),
        iterations: cfg.iters,
        converged: false,
    })
}

/// Largest (algebraic) Hessian eigenvalue at `x` by power iteration on
/// Hessian-vector products (exact when the oracle provides them, central
/// differences otherwise).
///
/// Power iteration finds the eigenvalue of largest magnitude; if that one is
/// negative a second, shifted run recovers the top of the spectrum.
pub fn max_hessian_eigenvalue<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    batch: BatchRef<'_>,
    cfg: &PowerIteration,
) -> Result<EigenEstimate> {
    if cfg.iters == 0 {
        return Err(invalid("power iteration needs at least one iteration"));
    }
    check_dim(oracle, x)?;
    let n = x.dim();
    let h = default_hvp_step(x);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start: Vec<T> = (0..n)
        .map(|_| T::of_f64(StandardNormal.sample(&mut rng)))
        .collect();
    let apply = |v: &[T]| match oracle.exact_hvp(x, v, batch) {
        Some(r) => r.map(|p| p.into_vec()),
        None => hvp(oracle, x, v, h, batch).map(|p| p.into_vec()),
    };
    let dominant = power_iterate(n, apply, T::zero(), cfg, start.clone())?;
    if dominant.value >= 0.0 {
        return Ok(dominant);
    }
    let shifted = power_iterate(n, apply, T::of_f64(dominant.value), cfg, start)?;
    Ok(EigenEstimate {
        value: shifted.value,
        iterations: dominant.iterations + shifted.iterations,
        converged: shifted.converged,
    })
}

/// Loss values on a 1-D or 2-D slice through parameter space.
#[derive(Clone, Debug)]
pub struct LandscapeGrid<T> {
    /// Offsets along each axis (same grid for both axes).
    pub offsets: Vec<f64>,
    pub axes: usize,
    /// Row-major `offsets.len()^axes` losses; index `[i]` or `[i * g + j]`.
    pub losses: Vec<f64>,
    pub directions: Vec<ParamVector<T>>,
}

impl<T: Scalar> LandscapeGrid<T> {
    pub fn center_index(&self) -> usize {
        let c = self.offsets.len() / 2;
        if self.axes == 1 {
            c
        } else {
            c * self.offsets.len() + c
        }
    }

    pub fn center_loss(&self) -> f64 {
        self.losses[self.center_index()]
    }

    /// CSV with header `alpha,loss` or `alpha,beta,loss`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        if self.axes == 1 {
            writeln!(w, "alpha,loss")?;
            for (a, l) in self.offsets.iter().zip(&self.losses) {
                writeln!(w, "{a},{l}")?;
            }
        } else {
            writeln!(w, "alpha,beta,loss")?;
            let g = self.offsets.len();
            for i in 0..g {
                for j in 0..g {
                    writeln!(w, "{},{},{}", self.offsets[i], self.offsets[j], self.losses[i * g + j])?;
                }
            }
        }
        Ok(())
    }
}

/// Random direction scaled filter-wise to `x`: each row of a matrix segment
/// (one output unit) and each vector segment gets the norm of the matching
/// part of `x`. When `x` is entirely zero the direction is unit-normalized.
pub fn filter_normalized_direction<T: Scalar>(x: &ParamVector<T>, rng: &mut ChaCha8Rng) -> ParamVector<T> {
    let mut d: Vec<T> = (0..x.dim())
        .map(|_| T::of_f64(StandardNormal.sample(rng)))
        .collect();
    if x.norm2().is_zero() {
        let n = norm2(&d);
        d.iter_mut().for_each(|a| *a /= n);
        return x.with_values(d).expect("same dimension");
    }
    for seg in x.layout().segments() {
        let row = match seg.shape.as_slice() {
            [_, cols] if *cols > 0 => *cols,
            _ => seg.len.max(1),
        };
        for start in (seg.offset..seg.offset + seg.len).step_by(row) {
            let r = start..start + row;
            let target = norm2(&x[r.clone()]);
            let cur = norm2(&d[r.clone()]);
            let s = if cur.is_zero() { T::zero() } else { target / cur };
            d[r].iter_mut().for_each(|a| *a *= s);
        }
    }
    x.with_values(d).expect("same dimension")
}

/// Evaluates `f(x + α·d₁ [+ β·d₂])` on a `grid_points`-per-axis grid over `[−radius, radius]`.
pub fn landscape_slice<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
    axes: usize,
    grid_points: usize,
    radius: f64,
    batch: BatchRef<'_>,
    seed: u64,
) -> Result<LandscapeGrid<T>> {
    if !(axes == 1 || axes == 2) {
        return Err(invalid("landscape slices have one or two axes"));
    }
    if grid_points % 2 == 0 {
        return Err(invalid("grid_points must be odd so the center is x itself"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let directions: Vec<ParamVector<T>> = (0..axes)
        .map(|_| filter_normalized_direction(x, &mut rng))
        .collect();
    let offsets: Vec<f64> = if grid_points == 1 {
        vec![0.0]
    } else {
        (0..grid_points)
            .map(|i| radius * (2.0 * i as f64 / (grid_points - 1) as f64 - 1.0))
            .collect()
    };
    let eval = |coef: &[f64]| -> Result<f64> {
        let mut p = x.clone();
        for (c, d) in coef.iter().zip(&directions) {
            if *c != 0.0 {
                p.axpy(T::of_f64(*c), d);
            }
        }
        Ok(oracle.value(&p, batch)?.into_f64())
    };
    let mut losses = Vec::with_capacity(grid_points.pow(axes as u32));
    if axes == 1 {
        for &a in &offsets {
            losses.push(eval(&[a])?);
        }
    } else {
        for &a in &offsets {
            for &b in &offsets {
                losses.push(eval(&[a, b])?);
            }
        }
    }
    Ok(LandscapeGrid {
        offsets,
        axes,
        losses,
        directions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::QuadraticObjective;

    #[test]
    fn epsilon_star_examples() {
        let g = ParamVector::from_vec(vec![3.0f64, 4.0]);
        let e = epsilon_star(&g, 1.0);
        assert!((e[0] - 0.6).abs() < 1e-15 && (e[1] - 0.8).abs() < 1e-15);
        let zero = ParamVector::from_vec(vec![0.0, 0.0]);
        assert_eq!(epsilon_star(&zero, 0.1).as_slice(), &[0.0, 0.0]);
        let scaled = g.scaled(7.3);
        let e2 = epsilon_star(&scaled, 1.0);
        assert!((e2[0] - e[0]).abs() < 1e-15 && (e2[1] - e[1]).abs() < 1e-15);
    }

    #[test]
    fn sam_gradient_isotropic_quadratic() {
        let f = QuadraticObjective::isotropic(vec![0.0, 0.0]);
        let x = ParamVector::from_vec(vec![3.0f64, 4.0]);
        let g = sam_gradient(&f, &x, 1.0, &[]).unwrap();
        assert!((g[0] - 3.6).abs() < 1e-12 && (g[1] - 4.8).abs() < 1e-12);
        assert_eq!(sam_gradient(&f, &x, 0.0, &[]).unwrap(), f.gradient(&x, &[]).unwrap());
        assert!(sam_gradient(&f, &x, -1.0, &[]).is_err());
    }

    #[test]
    fn hvp_examples() {
        let f = QuadraticObjective::diagonal(&[1.0, 2.0], vec![0.0, 0.0]).unwrap();
        let x = ParamVector::from_vec(vec![0.5f64, -0.5]);
        let h = default_hvp_step(&x);
        let a = hvp(&f, &x, &[1.0, 0.0], h, &[]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-9 && a[1].abs() < 1e-9);
        let b = hvp(&f, &x, &[0.0, 3.0], h, &[]).unwrap();
        assert!(b[0].abs() < 1e-9 && (b[1] - 6.0).abs() < 1e-9);
        assert!(hvp(&f, &x, &[1.0, 0.0], 0.0, &[]).is_err());
        assert!(hvp(&f, &x, &[0.0, 0.0], h, &[]).is_err());
    }

    #[test]
    fn eigenvalue_known_spectra() {
        let f = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        let x = ParamVector::from_vec(vec![0.1, 0.2, 0.3]);
        let e = max_hessian_eigenvalue(&f, &x, &[], &PowerIteration::default()).unwrap();
        assert!((e.value - 3.0).abs() < 1e-4, "{e:?}");
        let iso = QuadraticObjective::isotropic(vec![0.0; 4]);
        let e = max_hessian_eigenvalue(&iso, &x_of(4), &[], &PowerIteration::default()).unwrap();
        assert!((e.value - 1.0).abs() < 1e-6);
    }

    #[test]
    fn eigenvalue_with_negative_dominant() {
        let f = QuadraticObjective::diagonal(&[-5.0, 1.0, 2.0], vec![0.0; 3]).unwrap();
        let cfg = PowerIteration { iters: 500, tol: 1e-12, seed: 3 };
        let e = max_hessian_eigenvalue(&f, &x_of(3), &[], &cfg).unwrap();
        assert!((e.value - 2.0).abs() < 1e-6, "{e:?}");
    }

    #[test]
    fn eigenvalue_seed_invariance() {
        let f = QuadraticObjective::diagonal(&[1.0, 2.0, 3.0], vec![0.0; 3]).unwrap();
        let cfg = PowerIteration::default();
        let a = max_hessian_eigenvalue(&f, &x_of(3), &[], &cfg).unwrap().value;
        for seed in 1..5 {
            let b = max_hessian_eigenvalue(&f, &x_of(3), &[], &PowerIteration { seed, ..cfg.clone() })
                .unwrap()
                .value;
            assert!((a - b).abs() <= 10.0 * cfg.tol * 3.0, "{a} vs {b}");
        }
    }

    fn x_of(n: usize) -> ParamVector<f64> {
        ParamVector::from_vec((0..n).map(|i| 0.1 * i as f64).collect())
    }

    #[test]
    fn landscape_examples() {
        let f = QuadraticObjective::isotropic(vec![0.0; 3]);
        let x = ParamVector::from_vec(vec![0.0; 3]);
        let g = landscape_slice(&f, &x, 1, 5, 1.0, &[], 0).unwrap();
        assert_eq!(g.losses.len(), 5);
        assert!((g.losses[0] - g.losses[4]).abs() < 1e-12);
        assert!((g.losses[1] - g.losses[3]).abs() < 1e-12);
        assert_eq!(g.center_loss(), 0.0);
        for w in g.losses.windows(3) {
            assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-8);
        }

        let x = ParamVector::from_vec(vec![1.0, -2.0, 0.5]);
        let flat = landscape_slice(&f, &x, 2, 3, 0.0, &[], 1).unwrap();
        let fx = f.value(&x, &[]).unwrap();
        assert!(flat.losses.iter().all(|&l| l == fx));
        let g2 = landscape_slice(&f, &x, 2, 7, 0.5, &[], 1).unwrap();
        assert_eq!(g2.center_loss(), fx);
        assert!(landscape_slice(&f, &x, 1, 4, 1.0, &[], 0).is_err());
    }

    #[test]
    fn filter_normalization_matches_row_norms() {
        let layout = std::sync::Arc::new(
            crate::param::Layout::builder()
                .push("w", vec![2, 3], true)
                .push("b", vec![2], false)
                .build(),
        );
        let x = ParamVector::new(vec![1.0f64, 2.0, 2.0, 0.0, 0.0, 4.0, 3.0, 4.0], layout).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = filter_normalized_direction(&x, &mut rng);
        assert!((norm2(&d[0..3]) - 3.0).abs() < 1e-12);
        assert!((norm2(&d[3..6]) - 4.0).abs() < 1e-12);
        assert!((norm2(&d[6..8]) - 5.0).abs() < 1e-12);
    }
}
