//! Sparsity targets: how many parameters to keep and in which pattern.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SparsityMode {
    /// Keep exactly this many parameters.
    Count(usize),
    /// Prune this fraction of parameters.
    Fraction(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    #[default]
    Unstructured,
    /// At most `n` nonzeros in every consecutive group of `m`.
    NOfM { n: usize, m: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityTarget {
    pub mode: SparsityMode,
    #[serde(default)]
    pub pattern: Pattern,
}

impl SparsityTarget {
    pub fn fraction(s: f64) -> Self {
        Self {
            mode: SparsityMode::Fraction(s),
            pattern: Pattern::Unstructured,
        }
    }

    pub fn count(d: usize) -> Self {
        Self {
            mode: SparsityMode::Count(d),
            pattern: Pattern::Unstructured,
        }
    }

    /// `n:m` structured sparsity (e.g. 2:4).
    pub fn n_of_m(n: usize, m: usize) -> Self {
        Self {
            mode: SparsityMode::Fraction(1.0 - n as f64 / m.max(1) as f64),
            pattern: Pattern::NOfM { n, m },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SparsityMode::Count(0) => return Err(invalid("kept count must be positive")),
            SparsityMode::Fraction(s) if !(s > 0.0 && s < 1.0) => {
                return Err(invalid(format!("sparsity fraction {s} outside (0, 1)")))
            }
            _ => {}
        }
        if let Pattern::NOfM { n, m } = self.pattern {
            if !(0 < n && n < m) {
                return Err(invalid(format!("invalid {n}:{m} pattern")));
            }
        }
        Ok(())
    }

    /// Nominal pruned fraction (for reporting).
    pub fn nominal_sparsity(&self, n: usize) -> f64 {
        match self.pattern {
            Pattern::NOfM { n: keep, m } => 1.0 - keep as f64 / m as f64,
            Pattern::Unstructured => match self.mode {
                SparsityMode::Fraction(s) => s,
                SparsityMode::Count(d) => 1.0 - d as f64 / n.max(1) as f64,
            },
        }
    }
}

/// Number of parameters to keep out of `n` under an unstructured target.
///
/// Fractions round half up and clamp to `[1, n]`.
pub fn sparsity_to_count(target: &SparsityTarget, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(invalid("dimension must be positive"));
    }
    target.validate()?;
    match target.mode {
        SparsityMode::Count(d) => {
            if d > n {
                Err(invalid(format!("kept count {d} exceeds dimension {n}")))
            } else {
                Ok(d)
            }
        }
        SparsityMode::Fraction(s) => {
            let kept = (n as f64 * (1.0 - s) + 0.5).floor() as usize;
            Ok(kept.clamp(1, n))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(sparsity_to_count(&SparsityTarget::fraction(0.9), 100).unwrap(), 10);
        assert_eq!(sparsity_to_count(&SparsityTarget::fraction(0.95), 271).unwrap(), 14);
        assert!(sparsity_to_count(&SparsityTarget::count(5), 4).is_err());
        assert_eq!(sparsity_to_count(&SparsityTarget::count(4), 4).unwrap(), 4);
    }

    #[test]
    fn clamps_to_one() {
        assert_eq!(sparsity_to_count(&SparsityTarget::fraction(0.999), 10).unwrap(), 1);
    }

    #[test]
    fn invalid_targets() {
        assert!(SparsityTarget::fraction(1.0).validate().is_err());
        assert!(SparsityTarget::fraction(0.0).validate().is_err());
        assert!(SparsityTarget::n_of_m(4, 4).validate().is_err());
        assert!(SparsityTarget::n_of_m(2, 4).validate().is_ok());
    }

    proptest! {
        #[test]
        fn monotone_in_fraction(n in 1usize..5000, a in 0.001f64..0.999, b in 0.001f64..0.999) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let dlo = sparsity_to_count(&SparsityTarget::fraction(lo), n).unwrap();
            let dhi = sparsity_to_count(&SparsityTarget::fraction(hi), n).unwrap();
            prop_assert!(dhi <= dlo);
            prop_assert!(dhi >= 1 && dlo <= n);
        }
    }
}
