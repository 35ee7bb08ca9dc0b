//! Sparse quadratic test problems with optima known by exhaustive search.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use safe_core::objective::QuadraticObjective;
use safe_core::{SafeConfig, Schedule, SparsityTarget};

use crate::error::{HarnessError, Result};

/// Largest dimension for which supports are enumerated.
pub const MAX_ENUMERATION_DIM: usize = 12;

/// `f(x) = ½ (x − c)ᵀ Q (x − c)` subject to `‖x‖₀ ≤ d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestProblemSpec {
    /// Row-major `n × n` curvature.
    pub q: Vec<f64>,
    pub center: Vec<f64>,
    /// Smoothness `λ_max(Q)`.
    pub beta: f64,
    /// Curvature lower bound `λ_min(Q)` (zero for singular Q).
    pub mu: f64,
    pub d: usize,
    /// Global sparse minimizer (`None` only above [`MAX_ENUMERATION_DIM`]).
    pub optimum: Option<Vec<f64>>,
    pub optimum_value: Option<f64>,
}

fn eig_bounds(q: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(q.clone()).eigenvalues;
    (e.max(), e.min().max(0.0))
}

fn value(q: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let r = x - c;
    0.5 * r.dot(&(q * &r))
}

/// Best point supported on exactly `d` coordinates, over all supports
/// (supersets never hurt, so size `d` suffices). Ties keep the first support
/// in bitmask order.
fn enumerate_optimum(q: &DMatrix<f64>, c: &DVector<f64>, d: usize) -> (Vec<f64>, f64) {
    let n = c.len();
    let qc = q * c;
    let mut best = (vec![0.0; n], f64::INFINITY);
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != d {
            continue;
        }
        let s: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
        let qss = DMatrix::from_fn(d, d, |i, j| q[(s[i], s[j])]);
        let rhs = DVector::from_fn(d, |i, _| qc[s[i]]);
        // least squares handles singular blocks
        let sol = qss.svd(true, true).solve(&rhs, 1e-12).expect("SVD computed with U and V");
        let mut x = DVector::zeros(n);
        for (k, &i) in s.iter().enumerate() {
            x[i] = sol[k];
        }
        let v = value(q, c, &x);
        if !best.1.is_finite() || v < best.1 - 1e-15 * best.1.abs().max(1.0) {
            best = (x.iter().copied().collect(), v);
        }
    }
    best
}

impl TestProblemSpec {
    /// Builds the problem, computing its optimum by enumeration when `n ≤ 12`.
    pub fn new(q: Array2<f64>, center: Vec<f64>, d: usize) -> Result<Self> {
        let n = center.len();
        if q.dim() != (n, n) {
            return Err(HarnessError::Config(format!("curvature is {:?}, expected {n}×{n}", q.dim())));
        }
        if d == 0 || d > n {
            return Err(HarnessError::Config(format!("kept count {d} outside [1, {n}]")));
        }
        let qm = DMatrix::from_fn(n, n, |i, j| q[[i, j]]);
        if (&qm - qm.transpose()).abs().max() > 1e-12 {
            return Err(HarnessError::Config("curvature must be symmetric".into()));
        }
        let (beta, mu) = eig_bounds(&qm);
        if SymmetricEigen::new(qm.clone()).eigenvalues.min() < -1e-10 {
            return Err(HarnessError::Config("curvature must be positive semidefinite".into()));
        }
        let (optimum, optimum_value) = if n <= MAX_ENUMERATION_DIM {
            let (x, v) = enumerate_optimum(&qm, &DVector::from_vec(center.clone()), d);
            (Some(x), Some(v))
        } else {
            (None, None)
        };
        Ok(Self {
            q: q.iter().copied().collect(),
            center,
            beta,
            mu,
            d,
            optimum,
            optimum_value,
        })
    }

    /// As [`TestProblemSpec::new`], additionally checking a claimed optimum
    /// against enumeration (objective values within `1e-9`).
    pub fn with_claimed_optimum(q: Array2<f64>, center: Vec<f64>, d: usize, claimed: Vec<f64>) -> Result<Self> {
        let p = Self::new(q, center, d)?;
        let Some(best) = p.optimum_value else {
            return Err(HarnessError::Config("claimed optima can only be checked for n ≤ 12".into()));
        };
        if claimed.len() != p.dim() || claimed.iter().filter(|v| **v != 0.0).count() > d {
            return Err(HarnessError::Config("claimed optimum is not feasible".into()));
        }
        let v = p.value(&claimed);
        if (v - best).abs() > 1e-9 * best.abs().max(1.0) {
            return Err(HarnessError::Config(format!(
                "claimed optimum has value {v}, enumeration finds {best}"
            )));
        }
        Ok(p)
    }

    /// Random instance: `Q = BᵀB/n + 0.1 I`, `c ~ U(−2, 2)`, `n ∈ [3, 12]`, `d ∈ [1, n)`.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=MAX_ENUMERATION_DIM);
        let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut q = b.t().dot(&b) / n as f64;
        // symmetrize exactly
        let qt = q.t().to_owned();
        q = (&q + &qt) * 0.5;
        for i in 0..n {
            q[[i, i]] += 0.1;
        }
        let c = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d = rng.random_range(1..n);
        Self::new(q, c, d).expect("random instance is valid")
    }

    pub fn family(count: usize, seed: u64) -> Vec<Self> {
        (0..count as u64).map(|i| Self::random(seed.wrapping_add(i))).collect()
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn curvature(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.dim(), self.dim()), self.q.clone()).expect("square")
    }

    pub fn objective(&self) -> QuadraticObjective<f64> {
        QuadraticObjective::new(self.curvature(), self.center.clone()).expect("validated at construction")
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let q = DMatrix::from_row_slice(self.dim(), self.dim(), &self.q);
        value(&q, &DVector::from_vec(self.center.clone()), &DVector::from_row_slice(x))
    }

    pub fn target(&self) -> SparsityTarget {
        SparsityTarget::count(self.d)
    }

    /// Configuration that drives SAFE to a `2β`-stationary point: penalty
    /// `λ = β`, step `1/(β + λ)`, dual update every step and a summable
    /// radius `ρ_t = 0.05 t⁻²`.
    pub fn convergence_config(&self) -> SafeConfig {
        SafeConfig {
            rho: Schedule::PowerLaw {
                start: 0.05,
                exponent: 2.0,
            },
            lambda: Schedule::constant(self.beta),
            dual_interval: 1,
            steps: 10_000,
            lr: Schedule::constant(1.0 / (2.0 * self.beta)),
            target: self.target(),
            trace_every: 1000,
            ..SafeConfig::default()
        }
    }

    /// δ at which convergence is assessed.
    pub fn stationarity_delta(&self) -> f64 {
        2.0 * self.beta
    }
}
