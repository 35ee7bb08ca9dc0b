//! Flat parameter vectors with a named segment layout.
//!
//! Every optimizer in this crate works on one contiguous vector. Model code
//! registers its tensors as segments; projections, dual updates and norms then
//! act globally on the vector while still knowing which segments may be
//! sparsified.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::{self, Scalar};

/// One named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    /// Logical tensor shape, row-major. Weight matrices are stored `[out, in]`.
    pub shape: Vec<usize>,
    /// Whether entries of this segment count toward (and are subject to) the sparsity target.
    pub sparsifiable: bool,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered partition of `[0, n)` into named segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    dim: usize,
}

impl Layout {
    /// A single sparsifiable segment covering `n` entries.
    pub fn single(n: usize) -> Self {
        Self::builder().push("params", vec![n], true).build()
    }

    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    /// Builds a layout from explicit segments, checking that they partition `[0, n)`.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.offset != next {
                return Err(invalid(format!(
                    "segment `{}` starts at {} but previous segment ends at {next}",
                    s.name, s.offset
                )));
            }
            if s.shape.iter().product::<usize>() != s.len {
                return Err(invalid(format!("segment `{}` shape does not match length", s.name)));
            }
            next += s.len;
        }
        Ok(Self { segments, dim: next })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn sparsifiable_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.sparsifiable)
    }

    /// Number of entries subject to the sparsity target.
    pub fn sparsifiable_len(&self) -> usize {
        self.sparsifiable_segments().map(|s| s.len).sum()
    }

    /// Indices of all sparsifiable entries, in vector order.
    pub fn sparsifiable_indices(&self) -> Vec<usize> {
        self.sparsifiable_segments().flat_map(|s| s.range()).collect()
    }

    /// Returns a copy of this layout with the sparsifiable flag of `name` changed.
    pub fn with_sparsifiable(&self, name: &str, flag: bool) -> Result<Self> {
        let mut out = self.clone();
        let seg = out
            .segments
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| invalid(format!("no segment named `{name}`")))?;
        seg.sparsifiable = flag;
        Ok(out)
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    next: usize,
}

impl LayoutBuilder {
    pub fn push(mut self, name: impl Into<String>, shape: Vec<usize>, sparsifiable: bool) -> Self {
        let len = shape.iter().product();
        self.segments.push(Segment {
            name: name.into(),
            offset: self.next,
            len,
            shape,
            sparsifiable,
        });
        self.next += len;
        self
    }

    pub fn build(self) -> Layout {
        Layout {
            segments: self.segments,
            dim: self.next,
        }
    }
}

/// Flat real-valued parameter state with its segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T> {
    values: Vec<T>,
    layout: Arc<Layout>,
}

impl<T: Scalar> ParamVector<T> {
    pub fn new(values: Vec<T>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.dim() {
            return Err(Error::DimensionMismatch {
                expected: layout.dim(),
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    /// Wraps a plain vector as a single sparsifiable segment.
    pub fn from_vec(values: Vec<T>) -> Self {
        let layout = Arc::new(Layout::single(values.len()));
        Self { values, layout }
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Self::from_vec(values.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        Self {
            values: vec![T::zero(); layout.dim()],
            layout,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<T>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.into_f64()).collect()
    }

    pub fn segment_values(&self, name: &str) -> Option<&[T]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm2(&self) -> T {
        scalar::norm2(&self.values)
    }

    pub fn dist2(&self, other: &Self) -> T {
        scalar::dist2(&self.values, &other.values)
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &[T]) {
        debug_assert_eq!(self.values.len(), other.len());
        for (a, &b) in self.values.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn scaled(&self, alpha: T) -> Self {
        Self {
            values: self.values.iter().map(|&v| alpha * v).collect(),
            layout: self.layout.clone(),
        }
    }

    /// Number of nonzero entries among sparsifiable segments.
    pub fn sparsifiable_nnz(&self) -> usize {
        self.layout
            .sparsifiable_segments()
            .map(|s| self.values[s.range()].iter().filter(|v| !v.is_zero()).count())
            .sum()
    }

    /// Fraction of zeros among sparsifiable entries.
    pub fn sparsity(&self) -> f64 {
        let n = self.layout.sparsifiable_len();
        if n == 0 {
            return 0.0;
        }
        1.0 - self.sparsifiable_nnz() as f64 / n as f64
    }
}

impl<T> Deref for ParamVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.values
    }
}

impl<T> DerefMut for ParamVector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
}
