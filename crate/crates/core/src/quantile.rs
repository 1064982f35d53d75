//! Exact order statistics over importance scores.
//!
//! Quartiles follow the Moore-McCabe convention: the median splits the
//! sorted values into a lower and an upper half (the median element itself
//! is excluded from both when the count is odd), and each quartile is the
//! median of its half. A single value is its own median and quartiles.
//!
//! Everything runs on `f64` with `total_cmp` ordering and partial selection
//! instead of a full sort. Results are bit-identical to sorting and reading
//! off the same positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest element count accepted by [`global_quartiles`].
pub const DEFAULT_GLOBAL_CAP: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub median: f64,
    /// Lower quartile (25th percentile side).
    pub q1: f64,
    /// Upper quartile (75th percentile side).
    pub q3: f64,
}

impl Quartiles {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    pub fn threshold(&self, lambda: f64) -> f64 {
        self.median + lambda * self.iqr()
    }
}

/// Order-statistic summary for one scope (a tensor, or `GLOBAL`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceStats {
    pub scope: String,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub threshold: f64,
    pub updated: u64,
    pub total: u64,
}

impl ImportanceStats {
    pub fn quartiles(&self) -> Quartiles {
        Quartiles {
            median: self.median,
            q1: self.q1,
            q3: self.q3,
        }
    }
}

pub const GLOBAL_SCOPE: &str = "GLOBAL";

fn midpoint(a: f64, b: f64) -> f64 {
    (a + b) / 2.0
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidInput(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Median of a scratch slice, reordering it. Empty slices are a bug.
fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let k = n / 2;
    let (lower, &mut upper_mid, _) = v.select_nth_unstable_by(k, f64::total_cmp);
    if n % 2 == 1 {
        upper_mid
    } else {
        let lower_mid = lower.iter().copied().max_by(f64::total_cmp).expect("n >= 2");
        midpoint(lower_mid, upper_mid)
    }
}

/// Quartiles of a scratch slice, reordering it in place.
pub fn quartiles_in_place(v: &mut [f64]) -> Result<Quartiles> {
    let n = v.len();
    if n == 0 {
        return Err(Error::InvalidInput("quartiles of an empty vector".into()));
    }
    check_finite(v)?;
    if n == 1 {
        return Ok(Quartiles {
            median: v[0],
            q1: v[0],
            q3: v[0],
        });
    }
    let k = n / 2;
    v.select_nth_unstable_by(k, f64::total_cmp);
    let (lower, upper) = v.split_at_mut(k);
    let median = if n % 2 == 1 {
        upper[0]
    } else {
        let lower_mid = lower.iter().copied().max_by(f64::total_cmp).expect("k >= 1");
        midpoint(lower_mid, upper[0])
    };
    let upper = if n % 2 == 1 { &mut upper[1..] } else { upper };
    Ok(Quartiles {
        median,
        q1: median_in_place(lower),
        q3: median_in_place(upper),
    })
}

pub fn exact_quartiles(values: &[f64]) -> Result<Quartiles> {
    quartiles_in_place(&mut values.to_vec())
}

/// Median, quartiles and `median + lambda * iqr`, plus how many values lie
/// strictly above that threshold.
pub fn dynamic_threshold(values: &[f64], lambda: f64) -> Result<ImportanceStats> {
    stats_for_scope(GLOBAL_SCOPE, values, lambda)
}

pub fn stats_for_scope(scope: &str, values: &[f64], lambda: f64) -> Result<ImportanceStats> {
    if !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("lambda must be finite, got {lambda}")));
    }
    let q = exact_quartiles(values)?;
    let threshold = q.threshold(lambda);
    Ok(ImportanceStats {
        scope: scope.to_owned(),
        median: q.median,
        q1: q.q1,
        q3: q.q3,
        iqr: q.iqr(),
        threshold,
        updated: count_above(values, threshold),
        total: values.len() as u64,
    })
}

pub fn count_above(values: &[f64], threshold: f64) -> u64 {
    values.iter().filter(|&&v| v > threshold).count() as u64
}

/// Quartiles over the concatenation of several vectors, refusing to go past
/// `cap` total elements.
pub fn global_quartiles<V: AsRef<[f64]>>(parts: &[V], cap: u64) -> Result<Quartiles> {
    let required: u64 = parts.iter().map(|p| p.as_ref().len() as u64).sum();
    if required > cap {
        return Err(Error::CapExceeded { required, cap });
    }
    let mut all = Vec::with_capacity(required as usize);
    for p in parts {
        all.extend_from_slice(p.as_ref());
    }
    quartiles_in_place(&mut all)
}
