//! Element-level comparison of checkpoints.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{compare_layouts, CheckpointReader, CompatReport, TensorMap, TensorRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub name: String,
    pub elements: u64,
    pub differing: u64,
    /// Largest finite absolute difference in F32 working precision.
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffReport {
    pub tolerance: f64,
    pub compat: CompatReport,
    /// Tensors present in both with matching shape and dtype.
    pub tensors: Vec<TensorDiff>,
}

impl DiffReport {
    pub fn total_differing(&self) -> u64 {
        self.tensors.iter().map(|t| t.differing).sum()
    }

    pub fn total_elements(&self) -> u64 {
        self.tensors.iter().map(|t| t.elements).sum()
    }

    pub fn identical(&self) -> bool {
        self.compat.is_compatible() && self.total_differing() == 0
    }
}

/// Count elements of `b` that differ from `a`.
///
/// With `tolerance == 0` elements are compared bit for bit at their stored
/// dtype. Otherwise values are compared in F32 and differ when
/// `|a - b| > tolerance`; two NaNs count as equal.
pub fn diff_records(name: &str, a: &TensorRecord, b: &TensorRecord, tolerance: f64) -> Result<TensorDiff> {
    if a.dtype != b.dtype || a.shape != b.shape {
        return Err(Error::InvalidInput(format!(
            "tensor {name:?}: cannot compare {}{:?} with {}{:?}",
            a.dtype, a.shape, b.dtype, b.shape
        )));
    }
    let (av, bv) = (a.to_f32(), b.to_f32());
    let max_abs_diff = av
        .par_iter()
        .zip(&bv)
        .map(|(&x, &y)| f64::from(x) - f64::from(y))
        .filter(|d| d.is_finite())
        .map(f64::abs)
        .reduce(|| 0.0, f64::max);
    let differing = if tolerance == 0.0 {
        let w = a.dtype.byte_width();
        a.data
            .par_chunks(w)
            .zip(b.data.par_chunks(w))
            .filter(|(x, y)| x != y)
            .count()
    } else {
        av.par_iter()
            .zip(&bv)
            .filter(|(&x, &y)| {
                if x.is_nan() || y.is_nan() {
                    !(x.is_nan() && y.is_nan())
                } else {
                    (f64::from(x) - f64::from(y)).abs() > tolerance
                }
            })
            .count()
    };
    Ok(TensorDiff {
        name: name.to_owned(),
        elements: a.elements() as u64,
        differing: differing as u64,
        max_abs_diff,
    })
}

fn check_tolerance(tolerance: f64) -> Result<()> {
    if !tolerance.is_finite() || tolerance < 0.0 {
        return Err(Error::InvalidInput(format!("tolerance must be finite and >= 0, got {tolerance}")));
    }
    Ok(())
}

fn comparable(compat: &CompatReport, names: impl Iterator<Item = String>) -> Vec<String> {
    let bad = compat.offending_names();
    names.filter(|n| !bad.contains(&n.as_str())).collect()
}

pub fn diff_maps(a: &TensorMap, b: &TensorMap, tolerance: f64) -> Result<DiffReport> {
    check_tolerance(tolerance)?;
    let compat = compare_layouts(&a.layout(), &b.layout());
    let names = comparable(&compat, a.tensors.keys().cloned());
    let tensors = names
        .iter()
        .map(|n| diff_records(n, &a.tensors[n], &b.tensors[n], tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiffReport {
        tolerance,
        compat,
        tensors,
    })
}

/// Compare two checkpoint files one tensor at a time.
pub fn diff_files(a: impl AsRef<Path>, b: impl AsRef<Path>, tolerance: f64) -> Result<DiffReport> {
    check_tolerance(tolerance)?;
    let ra = CheckpointReader::open(a)?;
    let rb = CheckpointReader::open(b)?;
    let la = ra.layout();
    let compat = compare_layouts(&la, &rb.layout());
    let names = comparable(&compat, la.into_iter().map(|t| t.name));
    let tensors = names
        .iter()
        .map(|n| diff_records(n, &ra.read_tensor(n)?, &rb.read_tensor(n)?, tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(DiffReport {
        tolerance,
        compat,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::Dtype;

    fn rec(v: &[f32]) -> TensorRecord {
        TensorRecord::from_f32(v, Dtype::F32, vec![v.len()]).unwrap()
    }

    #[test]
    fn exact_compare_counts_bits() {
        let d = diff_records("t", &rec(&[1.0, 0.0, f32::NAN]), &rec(&[1.0, -0.0, f32::NAN]), 0.0).unwrap();
        assert_eq!(d.differing, 1);
        assert_eq!(d.max_abs_diff, 0.0);
    }

    #[test]
    fn tolerance_compare() {
        let a = rec(&[1.0, 2.0, 3.0, f32::NAN]);
        let b = rec(&[1.05, 2.2, 3.0, f32::NAN]);
        let d = diff_records("t", &a, &b, 0.1).unwrap();
        assert_eq!(d.differing, 1);
        assert!((d.max_abs_diff - 0.2).abs() < 1e-6);
        let d = diff_records("t", &rec(&[1.0]), &rec(&[f32::NAN]), 10.0).unwrap();
        assert_eq!(d.differing, 1);
    }

    #[test]
    fn layout_mismatch_is_reported_not_compared() {
        let mut a = TensorMap::new();
        a.insert("x", rec(&[1.0])).unwrap();
        a.insert("y", rec(&[1.0])).unwrap();
        let mut b = TensorMap::new();
        b.insert("x", rec(&[2.0])).unwrap();
        b.insert("y", rec(&[1.0, 2.0])).unwrap();
        let r = diff_maps(&a, &b, 0.0).unwrap();
        assert_eq!(r.tensors.len(), 1);
        assert_eq!(r.total_differing(), 1);
        assert_eq!(r.compat.shape_mismatch.len(), 1);
        assert!(!r.identical());
        assert!(diff_maps(&a, &a, 0.0).unwrap().identical());
        assert!(diff_maps(&a, &a, -1.0).is_err());
    }
}
