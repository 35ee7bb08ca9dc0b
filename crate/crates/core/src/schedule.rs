//! Step-indexed hyperparameter schedules (learning rate, penalty, radius).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    Linear {
        start: f64,
        end: f64,
    },
    /// Rises from `start` (zero by default) to `end` along a half cosine.
    CosineWarmup {
        #[serde(default)]
        start: f64,
        end: f64,
    },
    /// Falls from `start` to `end` along a half cosine.
    CosineDecay {
        start: f64,
        end: f64,
    },
    /// `start · max(t, 1)^(−exponent)`.
    PowerLaw {
        start: f64,
        exponent: f64,
    },
}

impl Schedule {
    pub fn constant(value: f64) -> Self {
        Schedule::Constant { value }
    }

    pub fn cosine_warmup(end: f64) -> Self {
        Schedule::CosineWarmup { start: 0.0, end }
    }

    pub fn start(&self) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::Linear { start, .. }
            | Schedule::CosineWarmup { start, .. }
            | Schedule::CosineDecay { start, .. }
            | Schedule::PowerLaw { start, .. } => start,
        }
    }

    /// Value at step `t` of a `total`-step horizon.
    pub fn eval(&self, t: usize, total: usize) -> Result<f64> {
        if total == 0 {
            return Err(invalid("schedule horizon must be positive"));
        }
        if t > total {
            return Err(invalid(format!("step {t} beyond horizon {total}")));
        }
        Ok(self.eval_unchecked(t, total))
    }

    pub(crate) fn eval_unchecked(&self, t: usize, total: usize) -> f64 {
        // Endpoints are returned verbatim so that t = 0 and t = T are exact.
        match *self {
            Schedule::Constant { value } => value,
            Schedule::Linear { start, end } => endpoint_or(t, total, start, end, |frac| {
                start + (end - start) * frac
            }),
            Schedule::CosineWarmup { start, end } => endpoint_or(t, total, start, end, |frac| {
                start + (end - start) * (1.0 - (PI * frac).cos()) / 2.0
            }),
            Schedule::CosineDecay { start, end } => endpoint_or(t, total, start, end, |frac| {
                end + (start - end) * (1.0 + (PI * frac).cos()) / 2.0
            }),
            Schedule::PowerLaw { start, exponent } => {
                start * (t.max(1) as f64).powf(-exponent)
            }
        }
    }

    /// Whether every value this schedule can produce is non-negative.
    pub fn is_nonnegative(&self) -> bool {
        match *self {
            Schedule::Constant { value } => value >= 0.0,
            Schedule::Linear { start, end }
            | Schedule::CosineWarmup { start, end }
            | Schedule::CosineDecay { start, end } => start >= 0.0 && end >= 0.0,
            Schedule::PowerLaw { start, .. } => start >= 0.0,
        }
    }
}

fn endpoint_or(t: usize, total: usize, start: f64, end: f64, mid: impl Fn(f64) -> f64) -> f64 {
    if t == 0 {
        start
    } else if t == total {
        end
    } else {
        mid(t as f64 / total as f64)
    }
}
