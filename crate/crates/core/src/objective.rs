//! The differentiable-objective interface and deterministic batch streams.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param::{Layout, ParamVector};
use crate::scalar::Scalar;

/// Sample indices selecting a minibatch. Objectives without data ignore it.
pub type BatchRef<'a> = &'a [usize];

/// Value/gradient oracle over a flat parameter vector.
///
/// Implementations must be deterministic in `(x, batch)` and return gradients
/// with the same layout as `x`.
pub trait Objective<T: Scalar> {
    fn layout(&self) -> &Arc<Layout>;

    fn dimension(&self) -> usize {
        self.layout().dim()
    }

    fn value(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<T>;

    fn gradient(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<ParamVector<T>>;

    fn value_and_gradient(
        &self,
        x: &ParamVector<T>,
        batch: BatchRef<'_>,
    ) -> Result<(T, ParamVector<T>)> {
        Ok((self.value(x, batch)?, self.gradient(x, batch)?))
    }

    /// Exact Hessian-vector product, for oracles that can compute one.
    /// Curvature diagnostics fall back to finite differences on `None`.
    fn exact_hvp(
        &self,
        _x: &ParamVector<T>,
        _v: &[T],
        _batch: BatchRef<'_>,
    ) -> Option<Result<ParamVector<T>>> {
        None
    }
}

impl<T: Scalar, O: Objective<T> + ?Sized> Objective<T> for &O {
    fn layout(&self) -> &Arc<Layout> {
        (**self).layout()
    }
    fn value(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<T> {
        (**self).value(x, batch)
    }
    fn gradient(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<ParamVector<T>> {
        (**self).gradient(x, batch)
    }
    fn value_and_gradient(
        &self,
        x: &ParamVector<T>,
        batch: BatchRef<'_>,
    ) -> Result<(T, ParamVector<T>)> {
        (**self).value_and_gradient(x, batch)
    }
    fn exact_hvp(
        &self,
        x: &ParamVector<T>,
        v: &[T],
        batch: BatchRef<'_>,
    ) -> Option<Result<ParamVector<T>>> {
        (**self).exact_hvp(x, v, batch)
    }
}

pub(crate) fn check_dim<T: Scalar, O: Objective<T> + ?Sized>(
    oracle: &O,
    x: &ParamVector<T>,
) -> Result<()> {
    if x.dim() != oracle.dimension() {
        return Err(Error::DimensionMismatch {
            expected: oracle.dimension(),
            got: x.dim(),
        });
    }
    Ok(())
}

/// `f(x) = ½ (x − c)ᵀ Q (x − c)` with symmetric `Q`.
#[derive(Clone, Debug)]
pub struct QuadraticObjective<T> {
    q: Array2<T>,
    center: Array1<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> QuadraticObjective<T> {
    pub fn new(q: Array2<T>, center: Vec<T>) -> Result<Self> {
        let n = center.len();
        if q.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: q.nrows(),
            });
        }
        Ok(Self {
            q,
            center: Array1::from(center),
            layout: Arc::new(Layout::single(n)),
        })
    }

    /// Diagonal curvature `Q = diag(diag)`.
    pub fn diagonal(diag: &[T], center: Vec<T>) -> Result<Self> {
        Self::new(Array2::from_diag(&Array1::from(diag.to_vec())), center)
    }

    /// `½‖x − c‖²`.
    pub fn isotropic(center: Vec<T>) -> Self {
        let n = center.len();
        Self::new(Array2::eye(n), center).expect("square by construction")
    }

    pub fn curvature(&self) -> &Array2<T> {
        &self.q
    }

    pub fn center(&self) -> &[T] {
        self.center.as_slice().expect("contiguous")
    }

    fn residual(&self, x: &ParamVector<T>) -> Array1<T> {
        Array1::from(x.as_slice().to_vec()) - &self.center
    }
}

impl<T: Scalar> Objective<T> for QuadraticObjective<T> {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn value(&self, x: &ParamVector<T>, _batch: BatchRef<'_>) -> Result<T> {
        check_dim(self, x)?;
        let r = self.residual(x);
        Ok(T::of_f64(0.5) * r.dot(&self.q.dot(&r)))
    }

    fn gradient(&self, x: &ParamVector<T>, _batch: BatchRef<'_>) -> Result<ParamVector<T>> {
        check_dim(self, x)?;
        let g = self.q.dot(&self.residual(x));
        x.with_values(g.to_vec())
    }
}

/// Smooth non-quadratic test objective:
/// `f(x) = ½ xᵀQx + bᵀx + Σ_k softplus(a_kᵀx)`.
#[derive(Clone, Debug)]
pub struct SoftQuadraticObjective<T> {
    q: Array2<T>,
    linear: Array1<T>,
    features: Array2<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> SoftQuadraticObjective<T> {
    pub fn new(q: Array2<T>, linear: Vec<T>, features: Array2<T>) -> Result<Self> {
        let n = linear.len();
        if q.dim() != (n, n) || features.ncols() != n {
            return Err(Error::InvalidArgument("inconsistent shapes".into()));
        }
        Ok(Self {
            q,
            linear: Array1::from(linear),
            features,
            layout: Arc::new(Layout::single(n)),
        })
    }
}

fn softplus<T: Scalar>(t: T) -> T {
    // log(1 + e^t), stable for large |t|
    t.max(T::zero()) + (-t.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(t: T) -> T {
    T::one() / (T::one() + (-t).exp())
}

impl<T: Scalar> Objective<T> for SoftQuadraticObjective<T> {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn value(&self, x: &ParamVector<T>, _batch: BatchRef<'_>) -> Result<T> {
        check_dim(self, x)?;
        let xv = Array1::from(x.as_slice().to_vec());
        let quad = T::of_f64(0.5) * xv.dot(&self.q.dot(&xv)) + self.linear.dot(&xv);
        let soft: T = self.features.dot(&xv).iter().map(|&t| softplus(t)).sum();
        Ok(quad + soft)
    }

    fn gradient(&self, x: &ParamVector<T>, _batch: BatchRef<'_>) -> Result<ParamVector<T>> {
        check_dim(self, x)?;
        let xv = Array1::from(x.as_slice().to_vec());
        let s = self.features.dot(&xv).mapv(sigmoid);
        let g = self.q.dot(&xv) + &self.linear + self.features.t().dot(&s);
        x.with_values(g.to_vec())
    }
}

/// Source of minibatches for a training run.
pub trait DataStream {
    fn next_batch(&mut self) -> Vec<usize>;
}

/// Always returns every sample index `0..n` (an empty batch when `n = 0`).
#[derive(Clone, Debug)]
pub struct FullBatch {
    pub n: usize,
}

impl DataStream for FullBatch {
    fn next_batch(&mut self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

/// Epoch-wise shuffled minibatches, deterministic in the seed. Each epoch
/// drops the trailing partial batch.
#[derive(Clone, Debug)]
pub struct ShuffledBatches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ShuffledBatches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 || batch_size > n {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} invalid for {n} samples"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(Self {
            order,
            batch_size,
            pos: 0,
            rng,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl DataStream for ShuffledBatches {
    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_value_and_gradient() {
        let f = QuadraticObjective::diagonal(&[1.0, 4.0], vec![0.0, 0.0]).unwrap();
        let x = ParamVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(f.value(&x, &[]).unwrap(), 2.5);
        assert_eq!(f.gradient(&x, &[]).unwrap().as_slice(), &[1.0, 4.0]);
    }

    #[test]
    fn soft_quadratic_gradient_matches_differences() {
        let q = Array2::from_shape_vec((2, 2), vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let a = Array2::from_shape_vec((1, 2), vec![1.0, -2.0]).unwrap();
        let f = SoftQuadraticObjective::new(q, vec![0.3, -0.1], a).unwrap();
        let x = ParamVector::from_vec(vec![0.4f64, -0.7]);
        let g = f.gradient(&x, &[]).unwrap();
        for i in 0..2 {
            let h = 1e-6;
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (f.value(&xp, &[]).unwrap() - f.value(&xm, &[]).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn shuffled_batches_deterministic_and_cover_epoch() {
        let mut a = ShuffledBatches::new(10, 3, 7).unwrap();
        let mut b = ShuffledBatches::new(10, 3, 7).unwrap();
        let mut seen = Vec::new();
        for _ in 0..3 {
            let ba = a.next_batch();
            assert_eq!(ba, b.next_batch());
            seen.extend(ba);
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
}
