//! Fully connected ReLU network with softmax cross-entropy and optional batch norm.
//!
//! Layer `l` owns segments `l{l}.weight` (`[out, in]`, sparsifiable) and
//! `l{l}.bias`; with batch norm every hidden layer also owns `l{l}.bn_gamma`
//! and `l{l}.bn_beta`, placed between the affine map and the ReLU. Gradients
//! use batch statistics of the current minibatch; evaluation uses running
//! statistics produced by [`batchnorm_tune`].

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use safe_core::{BatchRef, EvalHook, Error, Layout, Objective, ParamVector, Result, Scalar};

use crate::data::Dataset;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input, hidden and output widths.
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub batch_norm: bool,
    /// Whether batch-norm scale/shift count toward the sparsity target.
    #[serde(default)]
    pub bn_sparsifiable: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            sizes: vec![784, 300, 100, 10],
            batch_norm: false,
            bn_sparsifiable: false,
        }
    }
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>) -> Self {
        Self {
            sizes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(Error::InvalidArgument("an MLP needs at least input and output sizes".into()));
        }
        if self.sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!("layer sizes must be positive: {:?}", self.sizes)));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        let mut b = Layout::builder();
        let last = self.sizes.len() - 2;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (inp, out) = (w[0], w[1]);
            b = b
                .push(format!("l{l}.weight"), vec![out, inp], true)
                .push(format!("l{l}.bias"), vec![out], false);
            if self.batch_norm && l < last {
                b = b
                    .push(format!("l{l}.bn_gamma"), vec![out], self.bn_sparsifiable)
                    .push(format!("l{l}.bn_beta"), vec![out], self.bn_sparsifiable);
            }
        }
        b.build()
    }
}

/// Running batch-norm statistics, one entry per hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct LayerRanges {
    inp: usize,
    out: usize,
    w: Range<usize>,
    b: Range<usize>,
    bn: Option<(Range<usize>, Range<usize>)>,
}

/// Loss/gradient oracle of an MLP on a fixed training set.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    spec: MlpSpec,
    layout: Arc<Layout>,
    layers: Vec<LayerRanges>,
    inputs: Array2<T>,
    labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

struct HiddenCache<T> {
    /// Normalized pre-activation (batch norm only).
    zhat: Option<Array2<T>>,
    invstd: Option<Array1<T>>,
    /// ReLU output.
    act: Array2<T>,
}

enum Norm<'a> {
    Batch,
    Running(&'a BnStats),
}

fn range_of(layout: &Layout, name: &str) -> Range<usize> {
    layout.segment(name).expect("segment registered by spec").range()
}

impl<T: Scalar> Mlp<T> {
    pub fn new(spec: MlpSpec, train: &Dataset) -> Result<Self> {
        spec.validate()?;
        if train.features() != spec.sizes[0] {
            return Err(Error::DimensionMismatch {
                expected: spec.sizes[0],
                got: train.features(),
            });
        }
        let classes = *spec.sizes.last().unwrap();
        if train.classes > classes {
            return Err(Error::InvalidArgument(format!(
                "{} classes but only {classes} outputs",
                train.classes
            )));
        }
        let layout = spec.layout();
        let last = spec.sizes.len() - 2;
        let layers = spec
            .sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerRanges {
                inp: w[0],
                out: w[1],
                w: range_of(&layout, &format!("l{l}.weight")),
                b: range_of(&layout, &format!("l{l}.bias")),
                bn: (spec.batch_norm && l < last).then(|| {
                    (
                        range_of(&layout, &format!("l{l}.bn_gamma")),
                        range_of(&layout, &format!("l{l}.bn_beta")),
                    )
                }),
            })
            .collect();
        Ok(Self {
            spec,
            layout: Arc::new(layout),
            layers,
            inputs: train.inputs.mapv(T::of_f64),
            labels: train.labels.clone(),
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn has_batch_norm(&self) -> bool {
        self.spec.batch_norm && self.layers.len() > 1
    }

    /// Fan-in uniform initialization `U(−1/√in, 1/√in)`; batch-norm scale 1, shift 0.
    pub fn init(&self, seed: u64) -> ParamVector<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = ParamVector::zeros(self.layout.clone());
        for layer in &self.layers {
            let bound = 1.0 / (layer.inp as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for i in layer.w.clone().chain(layer.b.clone()) {
                x[i] = T::of_f64(dist.sample(&mut rng));
            }
            if let Some((g, _)) = &layer.bn {
                for i in g.clone() {
                    x[i] = T::one();
                }
            }
        }
        x
    }

    fn weight<'a>(&self, x: &'a [T], l: usize) -> ArrayView2<'a, T> {
        let layer = &self.layers[l];
        ArrayView2::from_shape((layer.out, layer.inp), &x[layer.w.clone()]).expect("segment shape")
    }

    fn batch_inputs(&self, batch: BatchRef<'_>) -> Result<Array2<T>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty minibatch".into()));
        }
        if let Some(&i) = batch.iter().find(|&&i| i >= self.samples()) {
            return Err(Error::InvalidArgument(format!("sample index {i} out of range")));
        }
        Ok(self.inputs.select(Axis(0), batch))
    }

    /// Forward pass; returns logits and per-hidden-layer caches.
    fn forward(&self, x: &[T], input: &Array2<T>, norm: &Norm<'_>) -> (Array2<T>, Vec<HiddenCache<T>>) {
        let eps = T::of_f64(BN_EPS);
        let mut caches = Vec::with_capacity(self.layers.len() - 1);
        let mut h: Option<Array2<T>> = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let src = h.as_ref().unwrap_or(input);
            let mut z = src.dot(&self.weight(x, l).t());
            z += &ArrayView2::from_shape((1, layer.out), &x[layer.b.clone()]).unwrap();
            if l + 1 == self.layers.len() {
                return (z, caches);
            }
            let (zhat, invstd) = match &layer.bn {
                Some((g, b)) => {
                    let (mean, var) = match norm {
                        Norm::Batch => {
                            let m = z.mean_axis(Axis(0)).unwrap();
                            let v = z.var_axis(Axis(0), T::zero());
                            (m, v)
                        }
                        Norm::Running(s) => {
                            let k = caches.len();
                            (
                                Array1::from_iter(s.mean[k].iter().map(|&v| T::of_f64(v))),
                                Array1::from_iter(s.var[k].iter().map(|&v| T::of_f64(v))),
                            )
                        }
                    };
                    let invstd = var.mapv(|v| T::one() / (v + eps).sqrt());
                    let zhat = (&z - &mean) * &invstd;
                    let gamma = ArrayView2::from_shape((1, layer.out), &x[g.clone()]).unwrap();
                    let beta = ArrayView2::from_shape((1, layer.out), &x[b.clone()]).unwrap();
                    z = &zhat * &gamma + &beta;
                    (Some(zhat), Some(invstd))
                }
                None => (None, None),
            };
            z.mapv_inplace(|v| v.max(T::zero()));
            caches.push(HiddenCache { zhat, invstd, act: z });
            h = Some(caches.last().unwrap().act.clone());
        }
        unreachable!("the output layer returns")
    }

    /// Mean cross-entropy and the gradient with respect to the logits.
    fn softmax_xent(logits: &Array2<T>, labels: &[usize], want_grad: bool) -> (T, Option<Array2<T>>) {
        let b = T::of_usize(labels.len());
        let mut loss = T::zero();
        let mut grad = want_grad.then(|| Array2::zeros(logits.dim()));
        for (r, (row, &y)) in logits.rows().into_iter().zip(labels).enumerate() {
            let m = row.fold(T::neg_infinity(), |a, &v| a.max(v));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[y];
            if let Some(g) = grad.as_mut() {
                for (c, &v) in row.iter().enumerate() {
                    g[[r, c]] = (v - lse).exp() / b;
                }
                g[[r, y]] -= T::one() / b;
            }
        }
        (loss / b, grad)
    }

    fn loss_and_grad(&self, x: &ParamVector<T>, batch: BatchRef<'_>, want_grad: bool) -> Result<(T, Option<ParamVector<T>>)> {
        if x.dim() != self.layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.dim(),
                got: x.dim(),
            });
        }
        let input = self.batch_inputs(batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let (logits, caches) = self.forward(x, &input, &Norm::Batch);
        let (loss, dlogits) = Self::softmax_xent(&logits, &labels, want_grad);
        let Some(mut dz) = dlogits else {
            return Ok((loss, None));
        };
        let bsz = T::of_usize(batch.len());
        let mut g = vec![T::zero(); x.dim()];
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let src = if l == 0 { &input } else { &caches[l - 1].act };
            let dw = dz.t().dot(src);
            g[layer.w.clone()].copy_from_slice(dw.as_slice().expect("standard layout"));
            for (gi, s) in g[layer.b.clone()].iter_mut().zip(dz.sum_axis(Axis(0))) {
                *gi = s;
            }
            if l == 0 {
                break;
            }
            let dh = dz.dot(&self.weight(x, l));
            let prev = &self.layers[l - 1];
            let cache = &caches[l - 1];
            // through ReLU
            let mut dy = dh;
            dy.zip_mut_with(&cache.act, |d, &a| {
                if a <= T::zero() {
                    *d = T::zero();
                }
            });
            dz = match (&prev.bn, &cache.zhat, &cache.invstd) {
                (Some((gr, br)), Some(zhat), Some(invstd)) => {
                    let dgamma = (&dy * zhat).sum_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0));
                    g[gr.clone()].copy_from_slice(dgamma.as_slice().unwrap());
                    g[br.clone()].copy_from_slice(dbeta.as_slice().unwrap());
                    let gamma = ArrayView2::from_shape((1, prev.out), &x[gr.clone()]).unwrap();
                    let dzhat = &dy * &gamma;
                    let s1 = dzhat.sum_axis(Axis(0));
                    let s2 = (&dzhat * zhat).sum_axis(Axis(0));
                    let mut out = &dzhat * bsz - &s1 - &(zhat * &s2);
                    out *= &(invstd / bsz);
                    out
                }
                _ => dy,
            };
        }
        Ok((loss, Some(x.with_values(g)?)))
    }

    /// Exact Hessian-vector product by forward-over-reverse differentiation
    /// (ReLU second derivative taken as zero). Only for models without batch norm.
    pub fn hessian_vector_product(&self, x: &ParamVector<T>, v: &[T], batch: BatchRef<'_>) -> Result<ParamVector<T>> {
        if self.has_batch_norm() {
            return Err(Error::InvalidArgument("exact Hessian-vector products need a model without batch norm".into()));
        }
        for len in [x.dim(), v.len()] {
            if len != self.layout.dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.layout.dim(),
                    got: len,
                });
            }
        }
        let input = self.batch_inputs(batch)?;
        let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
        let bsz = T::of_usize(batch.len());
        let depth = self.layers.len();
        let dir = |l: usize| {
            ArrayView2::from_shape((self.layers[l].out, self.layers[l].inp), &v[self.layers[l].w.clone()]).unwrap()
        };
        // forward values and their directional derivatives
        let mut hs: Vec<Array2<T>> = Vec::with_capacity(depth);
        let mut rhs: Vec<Array2<T>> = Vec::with_capacity(depth);
        hs.push(input.clone());
        rhs.push(Array2::zeros(input.dim()));
        let mut logits = None;
        for l in 0..depth {
            let layer = &self.layers[l];
            let b = ArrayView2::from_shape((1, layer.out), &x[layer.b.clone()]).unwrap();
            let vb = ArrayView2::from_shape((1, layer.out), &v[layer.b.clone()]).unwrap();
            let z = hs[l].dot(&self.weight(x, l).t()) + &b;
            let rz = rhs[l].dot(&self.weight(x, l).t()) + hs[l].dot(&dir(l).t()) + &vb;
            if l + 1 == depth {
                logits = Some((z, rz));
                break;
            }
            let mut h = z;
            let mut rh = rz;
            ndarray::Zip::from(&mut h).and(&mut rh).for_each(|a, r| {
                if *a <= T::zero() {
                    *a = T::zero();
                    *r = T::zero();
                }
            });
            hs.push(h);
            rhs.push(rh);
        }
        let (z, rz) = logits.expect("at least one layer");
        let mut dz = Array2::zeros(z.dim());
        let mut rdz = Array2::zeros(z.dim());
        for (r, row) in z.rows().into_iter().enumerate() {
            let m = row.fold(T::neg_infinity(), |a, &v| a.max(v));
            let s: T = row.iter().map(|&v| (v - m).exp()).sum();
            let p: Vec<T> = row.iter().map(|&v| (v - m).exp() / s).collect();
            let pr: T = p.iter().zip(rz.row(r)).map(|(&a, &b)| a * b).sum();
            for c in 0..p.len() {
                dz[[r, c]] = p[c] / bsz;
                rdz[[r, c]] = p[c] * (rz[[r, c]] - pr) / bsz;
            }
            dz[[r, labels[r]]] -= T::one() / bsz;
        }
        let mut out = vec![T::zero(); x.dim()];
        for l in (0..depth).rev() {
            let layer = &self.layers[l];
            let rdw = rdz.t().dot(&hs[l]) + dz.t().dot(&rhs[l]);
            out[layer.w.clone()].copy_from_slice(rdw.as_slice().expect("standard layout"));
            for (o, s) in out[layer.b.clone()].iter_mut().zip(rdz.sum_axis(Axis(0))) {
                *o = s;
            }
            if l == 0 {
                break;
            }
            let w = self.weight(x, l);
            let mut rdh = rdz.dot(&w) + dz.dot(&dir(l));
            let mut dh = dz.dot(&w);
            let act = &hs[l];
            ndarray::Zip::from(&mut dh).and(&mut rdh).and(act).for_each(|d, r, &a| {
                if a <= T::zero() {
                    *d = T::zero();
                    *r = T::zero();
                }
            });
            dz = dh;
            rdz = rdh;
        }
        x.with_values(out)
    }

    /// Logits on arbitrary inputs. With batch norm, `stats = None` normalizes
    /// with the statistics of `inputs` itself.
    pub fn logits(&self, x: &ParamVector<T>, inputs: &Array2<f64>, stats: Option<&BnStats>) -> Array2<T> {
        let input = inputs.mapv(T::of_f64);
        let norm = match stats {
            Some(s) => Norm::Running(s),
            None => Norm::Batch,
        };
        self.forward(x, &input, &norm).0
    }

    pub fn evaluate(&self, x: &ParamVector<T>, ds: &Dataset, stats: Option<&BnStats>) -> Metrics {
        let logits = self.logits(x, &ds.inputs, stats);
        let (loss, _) = Self::softmax_xent(&logits, &ds.labels, false);
        let correct = logits
            .rows()
            .into_iter()
            .zip(&ds.labels)
            .filter(|(row, &y)| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best == y
            })
            .count();
        Metrics {
            loss: loss.into_f64(),
            accuracy: correct as f64 / ds.len().max(1) as f64,
        }
    }
}

impl<T: Scalar> Objective<T> for Mlp<T> {
    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn value(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<T> {
        Ok(self.loss_and_grad(x, batch, false)?.0)
    }

    fn gradient(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<ParamVector<T>> {
        Ok(self.loss_and_grad(x, batch, true)?.1.expect("requested"))
    }

    fn value_and_gradient(&self, x: &ParamVector<T>, batch: BatchRef<'_>) -> Result<(T, ParamVector<T>)> {
        let (l, g) = self.loss_and_grad(x, batch, true)?;
        Ok((l, g.expect("requested")))
    }

    fn exact_hvp(&self, x: &ParamVector<T>, v: &[T], batch: BatchRef<'_>) -> Option<Result<ParamVector<T>>> {
        (!self.has_batch_norm()).then(|| self.hessian_vector_product(x, v, batch))
    }
}

/// Recomputes running batch-norm statistics of the frozen model `x` from the
/// first `samples` inputs of `data`, layer by layer: the moments of layer `k`
/// are taken with layers `< k` already normalized by their new statistics.
/// Returns `None` (with a warning) when the model has no batch norm.
pub fn batchnorm_tune<T: Scalar>(mlp: &Mlp<T>, x: &ParamVector<T>, data: &Dataset, samples: usize) -> Option<BnStats> {
    if !mlp.has_batch_norm() {
        log::warn!("batchnorm_tune called on a model without batch norm; nothing to do");
        return None;
    }
    let n = samples.min(data.len()).max(1);
    let input = data.inputs.slice(ndarray::s![..n, ..]).mapv(T::of_f64);
    let hidden = mlp.layers.len() - 1;
    let mut stats = BnStats {
        mean: Vec::with_capacity(hidden),
        var: Vec::with_capacity(hidden),
    };
    let eps = T::of_f64(BN_EPS);
    let mut h = input;
    for l in 0..hidden {
        let layer = &mlp.layers[l];
        let mut z = h.dot(&mlp.weight(x, l).t());
        z += &ArrayView2::from_shape((1, layer.out), &x[layer.b.clone()]).unwrap();
        // streaming sums in f64
        let mut s1 = vec![0.0; layer.out];
        let mut s2 = vec![0.0; layer.out];
        for row in z.rows() {
            for (j, &v) in row.iter().enumerate() {
                let v = v.into_f64();
                s1[j] += v;
                s2[j] += v * v;
            }
        }
        let mean: Vec<f64> = s1.iter().map(|s| s / n as f64).collect();
        let var: Vec<f64> = s2
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0))
            .collect();
        if let Some((g, b)) = &layer.bn {
            for (j, mut col) in z.axis_iter_mut(Axis(1)).enumerate() {
                let inv = T::one() / (T::of_f64(var[j]) + eps).sqrt();
                let (gm, bt, m) = (x[g.start + j], x[b.start + j], T::of_f64(mean[j]));
                col.mapv_inplace(|v| (v - m) * inv * gm + bt);
            }
        }
        z.mapv_inplace(|v| v.max(T::zero()));
        stats.mean.push(mean);
        stats.var.push(var);
        h = z;
    }
    Some(stats)
}

/// Test-set evaluation of dense and sparse iterates during training. With
/// batch norm the sparse model's statistics are re-estimated on the training
/// set first.
pub struct AccuracyHook<'a, T> {
    pub mlp: &'a Mlp<T>,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub every: usize,
    pub bn_samples: usize,
}

impl<T: Scalar> EvalHook<T> for AccuracyHook<'_, T> {
    fn every(&self) -> usize {
        self.every
    }

    fn evaluate(&mut self, _step: usize, dense: &ParamVector<T>, sparse: &ParamVector<T>) -> Result<BTreeMap<String, f64>> {
        let mut out = BTreeMap::new();
        let tune = |x| {
            self.mlp
                .has_batch_norm()
                .then(|| batchnorm_tune(self.mlp, x, self.train, self.bn_samples))
                .flatten()
        };
        let (ds, sp) = (tune(dense), tune(sparse));
        let d = self.mlp.evaluate(dense, self.test, ds.as_ref());
        let s = self.mlp.evaluate(sparse, self.test, sp.as_ref());
        out.insert("dense_test_acc".into(), d.accuracy);
        out.insert("dense_test_loss".into(), d.loss);
        out.insert("sparse_test_acc".into(), s.accuracy);
        out.insert("sparse_test_loss".into(), s.loss);
        Ok(out)
    }
}
