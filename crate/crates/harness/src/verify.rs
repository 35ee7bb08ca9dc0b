//! Seed-pinned self-checks against brute-force, finite-difference and
//! analytic oracles.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use safe_core::objective::SoftQuadraticObjective;
use safe_core::projection::{hard_threshold_with, nm_projection, p_weighted_projection, TieBreak};
use safe_core::safe::{lemma_schedule_check, run_safe, stationarity_gap, Condition};
use safe_core::sharpness::{epsilon_star, hvp, sam_gradient};
use safe_core::{FullBatch, NoEval, Objective, ParamVector, Schedule};
use safe_models::{synth_blobs, Mlp, MlpSpec};

use crate::problems::TestProblemSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Projection,
    Gradients,
    Convergence,
    All,
}

impl Scope {
    fn includes(self, other: Scope) -> bool {
        self == Scope::All || self == other
    }
}

/// Switches for negative controls.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Break score ties toward the highest index in the projection under test.
    pub corrupt_tie_break: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// First failing case, when any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn push(&mut self, suite: &str, name: impl Into<String>, measured: f64, tolerance: f64, detail: Option<String>) {
        self.checks.push(Check {
            suite: suite.into(),
            name: name.into(),
            measured,
            tolerance,
            passed: measured <= tolerance,
            detail,
        });
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            write!(
                f,
                "[{}] {}/{}: measured {:.3e} tolerance {:.3e}",
                if c.passed { "PASS" } else { "FAIL" },
                c.suite,
                c.name,
                c.measured,
                c.tolerance
            )?;
            if let Some(d) = &c.detail {
                write!(f, " ({d})")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

pub fn verify_suite(scope: Scope, opts: VerifyOptions) -> VerifyReport {
    let mut r = VerifyReport::default();
    if scope.includes(Scope::Projection) {
        projection_suite(&mut r, opts);
    }
    if scope.includes(Scope::Gradients) {
        gradient_suite(&mut r);
    }
    if scope.includes(Scope::Convergence) {
        convergence_suite(&mut r);
    }
    r
}

// ---------------------------------------------------------------------------
// projection

/// Support of minimal pruned weighted energy among all size-`d` subsets; the
/// first optimal bitmask wins, which prefers lower indices on ties.
pub fn brute_force_support(v: &[f64], d: usize, w: &[f64]) -> (Vec<bool>, f64) {
    let n = v.len();
    let mut best = (vec![false; n], f64::INFINITY);
    for bits in 0u32..(1 << n) {
        if bits.count_ones() as usize != d {
            continue;
        }
        let cost: f64 = (0..n).filter(|i| bits & (1 << i) == 0).map(|i| w[i] * v[i] * v[i]).sum();
        if cost < best.1 {
            best = ((0..n).map(|i| bits & (1 << i) != 0).collect(), cost);
        }
    }
    best
}

fn residual(v: &[f64], p: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(p).zip(w).map(|((a, b), c)| c * (a - b) * (a - b)).sum()
}

/// Support of a projection result; zero entries of `v` are ambiguous, so the
/// kept set is recovered from `v ≠ 0 ∧ p = v` plus zeros kept by count.
fn support_of(v: &[f64], p: &[f64], kept: &[bool]) -> bool {
    v.iter()
        .zip(p)
        .zip(kept)
        .all(|((a, b), &k)| if k { a == b } else { *b == 0.0 })
}

struct Instance {
    v: Vec<f64>,
    w: Vec<f64>,
}

fn projection_instances(seed: u64, count: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(1..=12);
            // every other instance draws from a small integer grid so that ties occur
            if i % 2 == 0 {
                Instance {
                    v: (0..n).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    w: (0..n).map(|_| rng.random_range(0.05..5.0)).collect(),
                }
            } else {
                Instance {
                    v: (0..n).map(|_| rng.random_range(-2i32..=2) as f64).collect(),
                    w: (0..n).map(|_| rng.random_range(1i32..=2) as f64).collect(),
                }
            }
        })
        .collect()
}

fn projection_suite(r: &mut VerifyReport, opts: VerifyOptions) {
    let tie = if opts.corrupt_tie_break {
        TieBreak::HighestIndex
    } else {
        TieBreak::LowestIndex
    };
    let instances = projection_instances(0x5AFE, 200);
    let ones = |n| vec![1.0; n];

    let (mut bad, mut worst, mut first) = (0usize, 0.0f64, None);
    for (k, inst) in instances.iter().enumerate() {
        let n = inst.v.len();
        for d in 1..=n {
            let (mask, cost) = brute_force_support(&inst.v, d, &ones(n));
            let p = hard_threshold_with(&inst.v, d, tie).expect("valid d");
            let err = (residual(&inst.v, &p, &ones(n)) - cost).abs();
            worst = worst.max(err);
            if !support_of(&inst.v, &p, &mask) || err > 1e-12 {
                bad += 1;
                first.get_or_insert_with(|| format!("instance {k}, n={n}, d={d}, v={:?}", inst.v));
            }
        }
    }
    r.push("projection", "hard-threshold support mismatches", bad as f64, 0.0, first);
    r.push("projection", "hard-threshold value error", worst, 1e-12, None);

    let (mut bad, mut worst, mut first) = (0usize, 0.0f64, None);
    for (k, inst) in instances.iter().enumerate() {
        let n = inst.v.len();
        for d in 1..=n {
            let (mask, cost) = brute_force_support(&inst.v, d, &inst.w);
            let p = p_weighted_projection(&inst.v, d, &inst.w).expect("valid d");
            let err = (residual(&inst.v, &p, &inst.w) - cost).abs();
            worst = worst.max(err);
            if !support_of(&inst.v, &p, &mask) || err > 1e-12 {
                bad += 1;
                first.get_or_insert_with(|| format!("instance {k}, n={n}, d={d}"));
            }
        }
    }
    r.push("projection", "p-weighted support mismatches", bad as f64, 0.0, first);
    r.push("projection", "p-weighted value error", worst, 1e-12, None);

    let (mut bad, mut first) = (0usize, None);
    let mut groups = 0usize;
    for (k, inst) in instances.iter().enumerate() {
        for m in [2usize, 3, 4] {
            let len = inst.v.len() / m * m;
            if len == 0 {
                continue;
            }
            let (v, w) = (&inst.v[..len], &inst.w[..len]);
            for keep in 1..m {
                let p = nm_projection(v, keep, m, Some(w)).expect("valid pattern");
                for g in 0..len / m {
                    let r = g * m..(g + 1) * m;
                    let (mask, _) = brute_force_support(&v[r.clone()], keep, &w[r.clone()]);
                    groups += 1;
                    if !support_of(&v[r.clone()], &p[r], &mask) {
                        bad += 1;
                        first.get_or_insert_with(|| format!("instance {k}, {keep}:{m}, group {g}"));
                    }
                }
            }
        }
    }
    r.push(
        "projection",
        format!("n:m group support mismatches ({groups} groups)"),
        bad as f64,
        0.0,
        first,
    );
}

// ---------------------------------------------------------------------------
// gradients

fn soft_objective(n: usize, seed: u64) -> SoftQuadraticObjective<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
    let q = b.t().dot(&b) / n as f64;
    let lin = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = Array2::from_shape_fn((4, n), |_| rng.random_range(-1.0..1.0));
    SoftQuadraticObjective::new(q, lin, a).expect("consistent shapes")
}

/// Central difference of `f` at `at` along coordinate `i`.
fn partial<O: Objective<f64>>(f: &O, at: &ParamVector<f64>, i: usize, h: f64) -> f64 {
    let mut p = at.clone();
    p[i] += h;
    let mut m = at.clone();
    m[i] -= h;
    (f.value(&p, &[]).unwrap() - f.value(&m, &[]).unwrap()) / (2.0 * h)
}

fn gradient_suite(r: &mut VerifyReport) {
    let f = soft_objective(10, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = ParamVector::from_vec((0..10).map(|_| rng.random_range(-1.0..1.0)).collect());
    for rho in [0.0, 0.05, 0.1] {
        let sam = sam_gradient(&f, &x, rho, &[]).unwrap();
        // perturbation frozen at ε*(x), differentiated at x + ε
        let mut at = x.clone();
        at.axpy(1.0, &epsilon_star(&f.gradient(&x, &[]).unwrap(), rho));
        let worst = (0..10)
            .map(|i| {
                let fd = partial(&f, &at, i, 1e-6);
                (fd - sam[i]).abs() / fd.abs().max(sam[i].abs()).max(1e-8)
            })
            .fold(0.0, f64::max);
        r.push("gradients", format!("sam gradient rho={rho} (relative)"), worst, 1e-5, None);
    }
    let plain = f.gradient(&x, &[]).unwrap();
    let sam0 = sam_gradient(&f, &x, 0.0, &[]).unwrap();
    let same = plain.iter().zip(sam0.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    r.push("gradients", "sam rho=0 equals gradient bitwise", if same { 0.0 } else { 1.0 }, 0.0, None);

    // hvp linearity
    let u: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (a, b) = (0.7, -1.3);
    let combo: Vec<f64> = u.iter().zip(&v).map(|(p, q)| a * p + b * q).collect();
    let h = 1e-4;
    let lhs = hvp(&f, &x, &combo, h, &[]).unwrap();
    let hu = hvp(&f, &x, &u, h, &[]).unwrap();
    let hv = hvp(&f, &x, &v, h, &[]).unwrap();
    let err = (0..10)
        .map(|i| (lhs[i] - (a * hu[i] + b * hv[i])).abs())
        .fold(0.0, f64::max);
    r.push("gradients", "hvp linearity", err, 1e-6, None);

    // MLP backprop against central differences on 20 coordinates
    let ds = synth_blobs(40, 12, 4, 2.0, 1).expect("valid blobs");
    for bn in [false, true] {
        let spec = MlpSpec {
            sizes: vec![12, 9, 7, 4],
            batch_norm: bn,
            bn_sparsifiable: false,
        };
        let mlp = Mlp::<f64>::new(spec, &ds).expect("consistent spec");
        let x = mlp.init(3);
        let batch: Vec<usize> = (0..16).collect();
        let g = mlp.gradient(&x, &batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut checked, mut worst, mut tries) = (0, 0.0f64, 0);
        while checked < 20 && tries < 10_000 {
            tries += 1;
            let i = rng.random_range(0..x.dim());
            let h = 1e-6;
            let mut p = x.clone();
            p[i] += h;
            let mut m = x.clone();
            m[i] -= h;
            let fd = (mlp.value(&p, &batch).unwrap() - mlp.value(&m, &batch).unwrap()) / (2.0 * h);
            if fd.abs() < 1e-7 && g[i].abs() < 1e-7 {
                continue;
            }
            worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()));
            checked += 1;
        }
        let name = if bn { "mlp+bn gradient (relative)" } else { "mlp gradient (relative)" };
        r.push("gradients", name, worst, 1e-5, None);
    }
}

// ---------------------------------------------------------------------------
// convergence

fn convergence_suite(r: &mut VerifyReport) {
    let family = TestProblemSpec::family(8, 0xC0);
    let (mut worst_gap, mut worst_split, mut worst_excess) = (0.0f64, 0.0f64, 0.0f64);
    let mut first = None;
    for (k, p) in family.iter().enumerate() {
        let f = p.objective();
        let cfg = p.convergence_config();
        let x0 = ParamVector::from_vec(vec![0.0; p.dim()]);
        let res = run_safe(&f, x0, &mut FullBatch { n: 0 }, &cfg, &mut NoEval).expect("valid config");
        let gap = stationarity_gap(&f, &res.x_dense, p.stationarity_delta(), &cfg.target, &[]).unwrap();
        let z = &res.dual.as_ref().expect("SAFE keeps a dual state").z;
        let split = res.x_dense.iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        // a stationary point can be a local optimum, never better than the global one
        let excess = (p.optimum_value.unwrap() - p.value(&res.x_sparse)).max(0.0);
        if gap > 1e-6 || split > 1e-6 {
            first.get_or_insert_with(|| format!("instance {k} (n={}, d={})", p.dim(), p.d));
        }
        worst_gap = worst_gap.max(gap);
        worst_split = worst_split.max(split);
        worst_excess = worst_excess.max(excess);
    }
    r.push("convergence", "stationarity gap at delta=2beta", worst_gap, 1e-6, first.clone());
    r.push("convergence", "max |x - z|", worst_split, 1e-6, first);
    r.push("convergence", "value below enumerated optimum", worst_excess, 1e-9, None);

    let beta = 2.0;
    let fails = |c: Condition| if c == Condition::Fail { 0.0 } else { 1.0 };
    let passes = |c: Condition| if c == Condition::Pass { 0.0 } else { 1.0 };
    let constant = lemma_schedule_check(&Schedule::constant(0.1), &Schedule::constant(0.1), beta);
    r.push(
        "convergence",
        "lemma: constant eta/rho fails sum(eta*rho) < inf",
        fails(constant.sum_eta_rho_converges),
        0.0,
        None,
    );
    let inv = Schedule::PowerLaw {
        start: 0.1,
        exponent: 1.0,
    };
    let decaying = lemma_schedule_check(&inv, &inv, beta);
    r.push(
        "convergence",
        "lemma: 1/t eta/rho passes all conditions",
        passes(decaying.sum_eta_diverges)
            + passes(decaying.sum_eta_rho_converges)
            + passes(decaying.limsup_rho_below_inverse_beta),
        0.0,
        None,
    );
}
