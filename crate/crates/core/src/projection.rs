//! Exact projections onto sparsity constraints.
//!
//! All projections keep the entries with the largest score `P_ii · v_i²`
//! (`P = I` for plain hard thresholding), which is the exact minimizer of
//! `(z − v)ᵀ P (z − v)` over the constraint set. Equal scores are broken in
//! favour of the lowest index.

use std::cmp::Ordering;

use crate::error::{invalid, Result};
use crate::param::ParamVector;
use crate::saliency::SaliencyDiagonal;
use crate::scalar::Scalar;
use crate::sparsity::{sparsity_to_count, Pattern, SparsityTarget};

/// Order used among equal scores. Only [`TieBreak::LowestIndex`] is correct;
/// the other variant exists so verification suites can run a negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TieBreak {
    #[default]
    LowestIndex,
    #[doc(hidden)]
    HighestIndex,
}

/// Indices of the `k` largest scores (unordered), by quickselect.
pub fn top_k_indices<T: Scalar>(scores: &[T], k: usize, tie: TieBreak) -> Vec<usize> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < n {
        let cmp = |&a: &usize, &b: &usize| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| match tie {
                    TieBreak::LowestIndex => a.cmp(&b),
                    TieBreak::HighestIndex => b.cmp(&a),
                })
        };
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx
}

fn check_weights<T: Scalar>(weights: &[T], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(invalid(format!(
            "saliency has {} entries, vector has {n}",
            weights.len()
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(*w > T::zero())) {
        return Err(invalid(format!("saliency entry {i} is not positive")));
    }
    Ok(())
}

fn keep_support<T: Scalar>(v: &[T], keep: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    for &i in keep {
        out[i] = v[i];
    }
    out
}

fn scores<T: Scalar>(v: &[T], weights: Option<&[T]>) -> Vec<T> {
    match weights {
        Some(p) => v.iter().zip(p).map(|(&x, &w)| w * x * x).collect(),
        None => v.iter().map(|&x| T::one() * x * x).collect(),
    }
}

/// Euclidean projection onto `{‖z‖₀ ≤ d}`: keeps the `d` largest-magnitude entries.
pub fn hard_threshold<T: Scalar>(v: &[T], d: usize) -> Result<Vec<T>> {
    hard_threshold_with(v, d, TieBreak::LowestIndex)
}

#[doc(hidden)]
pub fn hard_threshold_with<T: Scalar>(v: &[T], d: usize, tie: TieBreak) -> Result<Vec<T>> {
    if d == 0 || d > v.len() {
        return Err(invalid(format!("kept count {d} outside [1, {}]", v.len())));
    }
    let keep = top_k_indices(&scores(v, None), d, tie);
    Ok(keep_support(v, &keep))
}

/// Projection onto `{‖z‖₀ ≤ d}` in the metric `‖·‖_P` for a positive diagonal `P`
/// (given by its entries).
pub fn p_weighted_projection<T: Scalar>(v: &[T], d: usize, weights: &[T]) -> Result<Vec<T>> {
    check_weights(weights, v.len())?;
    if d == 0 || d > v.len() {
        return Err(invalid(format!("kept count {d} outside [1, {}]", v.len())));
    }
    let keep = top_k_indices(&scores(v, Some(weights)), d, TieBreak::LowestIndex);
    Ok(keep_support(v, &keep))
}

/// N:M projection: in every consecutive group of `m` entries keep the `n_keep`
/// with the largest `P_ii · v_i²`.
pub fn nm_projection<T: Scalar>(
    v: &[T],
    n_keep: usize,
    m: usize,
    weights: Option<&[T]>,
) -> Result<Vec<T>> {
    if !(0 < n_keep && n_keep < m) {
        return Err(invalid(format!("invalid {n_keep}:{m} pattern")));
    }
    if v.len() % m != 0 {
        return Err(invalid(format!(
            "group size {m} does not divide segment length {}",
            v.len()
        )));
    }
    if let Some(p) = weights {
        check_weights(p, v.len())?;
    }
    let s = scores(v, weights);
    let mut out = vec![T::zero(); v.len()];
    for (g, (chunk, sc)) in v.chunks(m).zip(s.chunks(m)).enumerate() {
        for i in top_k_indices(sc, n_keep, TieBreak::LowestIndex) {
            out[g * m + i] = chunk[i];
        }
    }
    Ok(out)
}

/// Boolean mask (true = kept) of the projection of `x` onto `target` under an
/// optional saliency metric. Non-sparsifiable entries are always kept.
pub fn support_mask<T: Scalar>(
    x: &ParamVector<T>,
    target: &SparsityTarget,
    saliency: Option<&SaliencyDiagonal<T>>,
) -> Result<Vec<bool>> {
    target.validate()?;
    let layout = x.layout();
    if let Some(p) = saliency {
        check_weights(p.entries(), x.dim())?;
    }
    let weights = saliency.map(|p| p.entries());
    let mut mask = vec![true; x.dim()];
    match target.pattern {
        Pattern::Unstructured => {
            let idx = layout.sparsifiable_indices();
            if idx.is_empty() {
                return Err(invalid("layout has no sparsifiable segment"));
            }
            let d = sparsity_to_count(target, idx.len())?;
            let sc: Vec<T> = idx
                .iter()
                .map(|&i| weights.map_or(T::one(), |p| p[i]) * x[i] * x[i])
                .collect();
            for &i in &idx {
                mask[i] = false;
            }
            for k in top_k_indices(&sc, d, TieBreak::LowestIndex) {
                mask[idx[k]] = true;
            }
        }
        Pattern::NOfM { n, m } => {
            for seg in layout.sparsifiable_segments() {
                if seg.len % m != 0 {
                    return Err(invalid(format!(
                        "group size {m} does not divide segment `{}` of length {}",
                        seg.name, seg.len
                    )));
                }
                let r = seg.range();
                let sc = scores(&x[r.clone()], weights.map(|p| &p[r.clone()]));
                for (g, group) in sc.chunks(m).enumerate() {
                    let base = seg.offset + g * m;
                    for j in 0..m {
                        mask[base + j] = false;
                    }
                    for j in top_k_indices(group, n, TieBreak::LowestIndex) {
                        mask[base + j] = true;
                    }
                }
            }
        }
    }
    Ok(mask)
}

/// Projects `x` onto `target` (Euclidean when `saliency` is `None`).
pub fn project<T: Scalar>(
    x: &ParamVector<T>,
    target: &SparsityTarget,
    saliency: Option<&SaliencyDiagonal<T>>,
) -> Result<ParamVector<T>> {
    let mask = support_mask(x, target, saliency)?;
    Ok(apply_mask(x, &mask))
}

pub fn apply_mask<T: Scalar>(x: &ParamVector<T>, mask: &[bool]) -> ParamVector<T> {
    let mut out = x.clone();
    for (v, &keep) in out.iter_mut().zip(mask) {
        if !keep {
            *v = T::zero();
        }
    }
    out
}

/// Whether `x` satisfies `target` exactly on its sparsifiable segments.
pub fn is_feasible<T: Scalar>(x: &ParamVector<T>, target: &SparsityTarget) -> Result<bool> {
    let layout = x.layout();
    match target.pattern {
        Pattern::Unstructured => {
            let d = sparsity_to_count(target, layout.sparsifiable_len())?;
            Ok(x.sparsifiable_nnz() <= d)
        }
        Pattern::NOfM { n, m } => Ok(layout.sparsifiable_segments().all(|seg| {
            seg.len % m == 0
                && x[seg.range()]
                    .chunks(m)
                    .all(|g| g.iter().filter(|v| !v.is_zero()).count() <= n)
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Layout;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn hard_threshold_examples() {
        assert_eq!(hard_threshold(&[3.0, -1.0, 2.0], 2).unwrap(), vec![3.0, 0.0, 2.0]);
        assert_eq!(hard_threshold(&[0.0, 0.0, 0.0], 1).unwrap(), vec![0.0; 3]);
        assert!(hard_threshold(&[1.0, 2.0], 0).is_err());
        assert!(hard_threshold(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn ties_keep_lowest_index() {
        assert_eq!(hard_threshold(&[1.0, -1.0, 1.0], 2).unwrap(), vec![1.0, -1.0, 0.0]);
        assert_eq!(
            hard_threshold_with(&[1.0, -1.0, 1.0], 2, TieBreak::HighestIndex).unwrap(),
            vec![0.0, -1.0, 1.0]
        );
    }

    #[test]
    fn weighted_projection_hand_scored() {
        let out = p_weighted_projection(&[1.0, 10.0], 1, &[100.0, 0.01]).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
        assert!(p_weighted_projection(&[1.0, 10.0], 1, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn nm_examples() {
        assert_eq!(
            nm_projection(&[4.0, 3.0, 2.0, 1.0], 2, 4, None).unwrap(),
            vec![4.0, 3.0, 0.0, 0.0]
        );
        assert_eq!(
            nm_projection(&[1.0, 2.0, 3.0, 4.0, 8.0, 7.0, 6.0, 5.0], 2, 4, None).unwrap(),
            vec![0.0, 0.0, 3.0, 4.0, 8.0, 7.0, 0.0, 0.0]
        );
        assert!(nm_projection(&[1.0; 6], 2, 4, None).is_err());
    }

    #[test]
    fn project_leaves_non_sparsifiable_segments() {
        let layout = Arc::new(
            Layout::builder()
                .push("w", vec![4], true)
                .push("b", vec![2], false)
                .build(),
        );
        let x = ParamVector::new(vec![1.0, -5.0, 0.5, 2.0, 0.1, 0.2], layout).unwrap();
        let z = project(&x, &SparsityTarget::count(2), None).unwrap();
        assert_eq!(z.as_slice(), &[0.0, -5.0, 0.0, 2.0, 0.1, 0.2]);
        let nm = project(&x, &SparsityTarget::n_of_m(1, 2), None).unwrap();
        assert_eq!(nm.as_slice(), &[0.0, -5.0, 0.0, 2.0, 0.1, 0.2]);
        assert!(is_feasible(&nm, &SparsityTarget::n_of_m(1, 2)).unwrap());
    }

    #[test]
    fn nm_rejects_indivisible_segment() {
        let x = ParamVector::from_vec(vec![1.0f64; 6]);
        assert!(project(&x, &SparsityTarget::n_of_m(2, 4), None).is_err());
    }

    fn vec_and_d() -> impl Strategy<Value = (Vec<f64>, usize)> {
        (1usize..40).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), 1..=n))
    }

    proptest! {
        #[test]
        fn idempotent((v, d) in vec_and_d()) {
            let once = hard_threshold(&v, d).unwrap();
            prop_assert_eq!(hard_threshold(&once, d).unwrap(), once.clone());
            let p: Vec<f64> = v.iter().map(|x| 0.5 + x.abs()).collect();
            let pw = p_weighted_projection(&v, d, &p).unwrap();
            prop_assert_eq!(p_weighted_projection(&pw, d, &p).unwrap(), pw);
        }

        #[test]
        fn support_size((v, d) in vec_and_d()) {
            let out = hard_threshold(&v, d).unwrap();
            let nnz_in = v.iter().filter(|x| **x != 0.0).count();
            let nnz_out = out.iter().filter(|x| **x != 0.0).count();
            prop_assert_eq!(nnz_out, d.min(nnz_in));
        }

        #[test]
        fn scale_equivariant((v, d) in vec_and_d(), c in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let a = hard_threshold(&scaled, d).unwrap();
            let b: Vec<f64> = hard_threshold(&v, d).unwrap().iter().map(|x| c * x).collect();
            let supp_a: Vec<bool> = a.iter().map(|x| *x != 0.0).collect();
            let supp_b: Vec<bool> = b.iter().map(|x| *x != 0.0).collect();
            prop_assert_eq!(supp_a, supp_b);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn identity_weights_match_hard_threshold((v, d) in vec_and_d()) {
            let ones = vec![1.0; v.len()];
            prop_assert_eq!(p_weighted_projection(&v, d, &ones).unwrap(), hard_threshold(&v, d).unwrap());
        }

        #[test]
        fn weight_scaling_keeps_support((v, d) in vec_and_d(), c in 0.01f64..100.0) {
            let p: Vec<f64> = (0..v.len()).map(|i| 1.0 + (i as f64 * 0.37).sin().abs()).collect();
            let cp: Vec<f64> = p.iter().map(|w| c * w).collect();
            prop_assert_eq!(
                p_weighted_projection(&v, d, &p).unwrap(),
                p_weighted_projection(&v, d, &cp).unwrap()
            );
        }

        #[test]
        fn nm_groups_feasible(groups in 1usize..20, seed in prop::collection::vec(-5.0f64..5.0, 80)) {
            let v = &seed[..groups * 4];
            let out = nm_projection(v, 2, 4, None).unwrap();
            for g in out.chunks(4) {
                prop_assert!(g.iter().filter(|x| **x != 0.0).count() <= 2);
            }
            prop_assert_eq!(nm_projection(&out, 2, 4, None).unwrap(), out);
        }
    }
}
