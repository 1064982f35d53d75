//! Importance-gated selective merging of two aligned parameter vectors.
//!
//! For a left vector `l` and right vector `r` of equal length:
//!
//! ```text
//! p_i = exp(l_i - max l) / sum_j exp(l_j - max l) + eps
//! q_i = exp(r_i - max r) / sum_j exp(r_j - max r) + eps
//! d_i = p_i * ln(p_i / q_i)                 (per-element KL contribution)
//! s_i = d_i * (l_i - r_i)                   (importance)
//! t   = median(s) + lambda * (q3(s) - q1(s))
//! out_i = r_i if s_i > t else l_i
//! ```
//!
//! Softmax scoping is always one tensor (its flattened elements). The
//! threshold scope is either the same tensor or the whole model.
//! All scoring runs in `f64`; sums are accumulated over fixed-size chunks
//! and combined in order, so results do not depend on thread count.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantile::{quartiles_in_place, Quartiles};
use crate::store::TensorRecord;

/// Elements per parallel work unit. Part of the numeric contract: changing
/// it changes the summation order.
pub const CHUNK: usize = 1 << 15;

pub const DEFAULT_LAMBDA: f64 = 1.5;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    #[default]
    #[serde(rename = "tensor")]
    PerTensor,
    #[serde(rename = "global")]
    Global,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::PerTensor => "tensor",
            Granularity::Global => "global",
        }
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tensor" => Ok(Granularity::PerTensor),
            "global" => Ok(Granularity::Global),
            other => Err(Error::InvalidInput(format!(
                "granularity must be \"tensor\" or \"global\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub lambda: f64,
    pub epsilon: f64,
    pub granularity: Granularity,
    /// Replaces the dynamic threshold when set.
    pub fixed_threshold: Option<f64>,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            granularity: Granularity::PerTensor,
            fixed_threshold: None,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidInput(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "epsilon must be finite and > 0, got {}",
                self.epsilon
            )));
        }
        if let Some(t) = self.fixed_threshold {
            if !t.is_finite() {
                return Err(Error::InvalidInput(format!("fixed threshold must be finite, got {t}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
}

/// Max shift and normalizer of a softmax.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftmaxScale {
    pub max: f64,
    pub sum: f64,
}

impl SoftmaxScale {
    pub fn of(values: &[f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("softmax of an empty vector".into()));
        }
        check_finite(values)?;
        let max = values
            .par_chunks(CHUNK)
            .map(|c| c.iter().copied().fold(f32::NEG_INFINITY, f32::max))
            .reduce(|| f32::NEG_INFINITY, f32::max);
        let max = f64::from(max);
        let partials: Vec<f64> = values
            .par_chunks(CHUNK)
            .map(|c| c.iter().map(|&x| (f64::from(x) - max).exp()).sum::<f64>())
            .collect();
        Ok(Self {
            max,
            sum: partials.iter().sum(),
        })
    }

    #[inline]
    pub fn prob(&self, x: f32, epsilon: f64) -> f64 {
        (f64::from(x) - self.max).exp() / self.sum + epsilon
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    let bad = values
        .par_chunks(CHUNK)
        .enumerate()
        .find_map_first(|(c, chunk)| chunk.iter().position(|v| !v.is_finite()).map(|i| c * CHUNK + i));
    match bad {
        Some(i) => Err(Error::InvalidInput(format!(
            "non-finite value {} at index {i}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Max-shifted softmax plus `epsilon` on every entry.
pub fn softmax_normalize(values: &[f32], epsilon: f64) -> Result<Vec<f64>> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidInput(format!("epsilon must be finite and >= 0, got {epsilon}")));
    }
    let scale = SoftmaxScale::of(values)?;
    Ok(values.par_iter().map(|&x| scale.prob(x, epsilon)).collect())
}

#[inline]
fn kl_term(p: f64, q: f64) -> f64 {
    p * (p / q).ln()
}

/// Per-element contributions `p_i ln(p_i / q_i)`; their sum is KL(p || q).
pub fn elementwise_kl(p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    if p.len() != q.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if let Some(i) = p.iter().chain(q).position(|&v| !(v.is_finite() && v > 0.0)) {
        let (side, idx) = if i < p.len() { ("p", i) } else { ("q", i - p.len()) };
        let v = if side == "p" { p[idx] } else { q[idx] };
        return Err(Error::InvalidInput(format!(
            "{side}[{idx}] = {v} is not a positive finite probability"
        )));
    }
    Ok(p.par_iter().zip(q).map(|(&a, &b)| kl_term(a, b)).collect())
}

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::InvalidInput(format!(
            "length mismatch: left has {left} elements, right has {right}"
        )));
    }
    Ok(())
}

/// Importance of taking each right element over the left one.
pub fn importance_scores(left: &[f32], right: &[f32], epsilon: f64) -> Result<ImportanceVector> {
    check_lengths(left.len(), right.len())?;
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::InvalidInput(format!("epsilon must be finite and > 0, got {epsilon}")));
    }
    let ls = SoftmaxScale::of(left)?;
    let rs = SoftmaxScale::of(right)?;
    let mut scores = vec![0.0f64; left.len()];
    scores
        .par_chunks_mut(CHUNK)
        .zip(left.par_chunks(CHUNK).zip(right.par_chunks(CHUNK)))
        .for_each(|(out, (l, r))| {
            for ((s, &a), &b) in out.iter_mut().zip(l).zip(r) {
                let d = kl_term(ls.prob(a, epsilon), rs.prob(b, epsilon));
                *s = d * (f64::from(a) - f64::from(b));
            }
        });
    Ok(ImportanceVector { scores })
}

/// `true` where the right element wins (importance strictly above threshold).
pub fn selection_mask(importance: &[f64], threshold: f64) -> Vec<bool> {
    importance.par_iter().map(|&s| s > threshold).collect()
}

pub fn selective_merge(
    left: &[f32],
    right: &[f32],
    importance: &ImportanceVector,
    threshold: f64,
) -> Result<Vec<f32>> {
    check_lengths(left.len(), right.len())?;
    if importance.scores.len() != left.len() {
        return Err(Error::InvalidInput(format!(
            "importance has {} entries for {} elements",
            importance.scores.len(),
            left.len()
        )));
    }
    Ok(left
        .par_iter()
        .zip(right)
        .zip(&importance.scores)
        .map(|((&l, &r), &s)| if s > threshold { r } else { l })
        .collect())
}

/// Copy whole elements from `left` or `right` bytes according to `mask`.
/// Output bytes are always an exact copy of one input element.
pub fn select_elements(left: &[u8], right: &[u8], mask: &[bool], width: usize) -> Vec<u8> {
    debug_assert_eq!(left.len(), right.len());
    debug_assert_eq!(left.len(), mask.len() * width);
    let mut out = left.to_vec();
    out.par_chunks_mut(CHUNK * width)
        .zip(right.par_chunks(CHUNK * width))
        .zip(mask.par_chunks(CHUNK))
        .for_each(|((o, r), m)| {
            for (i, _) in m.iter().enumerate().filter(|(_, &take)| take) {
                o[i * width..(i + 1) * width].copy_from_slice(&r[i * width..(i + 1) * width]);
            }
        });
    out
}

/// Per-tensor outcome of one fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStats {
    pub name: String,
    pub elements: u64,
    pub updated: u64,
    /// Threshold the selection used; absent for empty tensors.
    pub threshold: Option<f64>,
    /// This tensor's own importance quartiles; absent for empty tensors and
    /// when a model-wide threshold was supplied.
    pub quartiles: Option<Quartiles>,
}

impl TensorStats {
    pub fn update_ratio(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.updated as f64 / self.elements as f64
        }
    }
}

fn check_pair(left: &TensorRecord, right: &TensorRecord) -> Result<()> {
    if left.dtype != right.dtype || left.shape != right.shape {
        return Err(Error::InvalidInput(format!(
            "cannot fuse {}{:?} with {}{:?}",
            left.dtype, left.shape, right.dtype, right.shape
        )));
    }
    Ok(())
}

/// Importance of one tensor pair, both given at their stored dtype.
pub fn tensor_importance(
    left: &TensorRecord,
    right: &TensorRecord,
    epsilon: f64,
) -> Result<ImportanceVector> {
    check_pair(left, right)?;
    if left.elements() == 0 {
        return Ok(ImportanceVector { scores: Vec::new() });
    }
    importance_scores(&left.to_f32(), &right.to_f32(), epsilon)
}

/// Fuse one tensor pair.
///
/// With `external_threshold` absent the threshold comes from this tensor's
/// importance (or `params.fixed_threshold`); with it present (model-wide
/// scope) it is used as is.
pub fn fuse_tensors(
    name: &str,
    left: &TensorRecord,
    right: &TensorRecord,
    params: &FusionParams,
    external_threshold: Option<f64>,
) -> Result<(TensorRecord, TensorStats)> {
    params.validate()?;
    let importance = tensor_importance(left, right, params.epsilon)
        .map_err(|e| Error::InvalidInput(format!("tensor {name:?}: {e}")))?;
    fuse_with_importance(name, left, right, &importance, params, external_threshold)
}

pub(crate) fn fuse_with_importance(
    name: &str,
    left: &TensorRecord,
    right: &TensorRecord,
    importance: &ImportanceVector,
    params: &FusionParams,
    external_threshold: Option<f64>,
) -> Result<(TensorRecord, TensorStats)> {
    let elements = left.elements();
    if elements == 0 {
        return Ok((
            left.clone(),
            TensorStats {
                name: name.to_owned(),
                elements: 0,
                updated: 0,
                threshold: None,
                quartiles: None,
            },
        ));
    }
    let (threshold, quartiles) = match external_threshold {
        Some(t) => (t, None),
        None => {
            let q = quartiles_in_place(&mut importance.scores.clone())?;
            (params.fixed_threshold.unwrap_or_else(|| q.threshold(params.lambda)), Some(q))
        }
    };
    let mask = selection_mask(&importance.scores, threshold);
    let updated = mask.iter().filter(|&&m| m).count() as u64;
    let data = if updated == 0 {
        left.data.clone()
    } else {
        select_elements(&left.data, &right.data, &mask, left.dtype.byte_width())
    };
    Ok((
        TensorRecord {
            dtype: left.dtype,
            shape: left.shape.clone(),
            data,
        },
        TensorStats {
            name: name.to_owned(),
            elements: elements as u64,
            updated,
            threshold: Some(threshold),
            quartiles,
        },
    ))
}

/// Same selection as [`fuse_tensors`] but re-encoding through F32, the
/// literal `from_f32(selective_merge(to_f32(l), to_f32(r), ..))` form.
pub fn fuse_tensors_via_f32(
    left: &TensorRecord,
    right: &TensorRecord,
    params: &FusionParams,
    threshold: Option<f64>,
) -> Result<Vec<u8>> {
    let importance = tensor_importance(left, right, params.epsilon)?;
    if left.elements() == 0 {
        return Ok(Vec::new());
    }
    let t = match threshold {
        Some(t) => t,
        None => quartiles_in_place(&mut importance.scores.clone())?.threshold(params.lambda),
    };
    let merged = selective_merge(&left.to_f32(), &right.to_f32(), &importance, t)?;
    Ok(crate::dtype::encode_f32(&merged, left.dtype))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::Dtype;
    use crate::rng::Philox4x32;
    use proptest::prelude::*;

    fn rec(values: &[f32]) -> TensorRecord {
        TensorRecord::from_f32(values, Dtype::F32, vec![values.len()]).unwrap()
    }

    fn seeded(seed: u64, n: usize, stream: u64) -> Vec<f32> {
        let rng = Philox4x32::new(seed);
        (0..n as u64).map(|i| rng.normal(i, stream) as f32).collect()
    }

    /// Literal softmax without max shift, in f64.
    fn softmax_oracle(x: &[f64], eps: f64) -> Vec<f64> {
        let total: f64 = x.iter().map(|v| v.exp()).sum();
        x.iter().map(|v| v.exp() / total + eps).collect()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let s = softmax_normalize(&[0.0, 0.0], 1e-8).unwrap();
        assert_eq!(s, vec![0.5 + 1e-8, 0.5 + 1e-8]);
    }

    #[test]
    fn softmax_single_element() {
        for x in [-1e30f32, 0.0, 3.5, 1e30] {
            assert_eq!(softmax_normalize(&[x], 1e-8).unwrap(), vec![1.0 + 1e-8]);
        }
    }

    #[test]
    fn softmax_matches_unshifted_oracle() {
        let got = softmax_normalize(&[1.0, 2.0, 3.0], 0.0).unwrap();
        let want = softmax_oracle(&[1.0, 2.0, 3.0], 0.0);
        for (g, w) in got.iter().zip(&want) {
            assert!(((g - w) / w).abs() < 1e-7, "{g} vs {w}");
        }
    }

    #[test]
    fn softmax_survives_large_magnitudes() {
        let s = softmax_normalize(&[1000.0, 1000.0, -1000.0], 1e-8).unwrap();
        assert!((s[0] - (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(s[2], 1e-8);
    }

    #[test]
    fn softmax_errors() {
        assert!(softmax_normalize(&[], 1e-8).is_err());
        let e = softmax_normalize(&[0.0, f32::INFINITY], 1e-8).unwrap_err();
        assert!(e.to_string().contains("index 1"), "{e}");
        assert!(softmax_normalize(&[0.0, f32::NAN, 1.0], 1e-8).is_err());
        assert!(softmax_normalize(&[0.0], -1.0).is_err());
    }

    #[test]
    fn softmax_sum_and_floor() {
        let v = seeded(11, 5000, 0);
        let eps = 1e-8;
        let s = softmax_normalize(&v, eps).unwrap();
        let total: f64 = s.iter().sum();
        assert!((total - (1.0 + 5000.0 * eps)).abs() < 1e-12);
        assert!(s.iter().all(|&p| p >= eps));
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(elementwise_kl(&p, &p).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn kl_two_point_matches_oracle() {
        let d = elementwise_kl(&[0.7, 0.3], &[0.3, 0.7]).unwrap();
        // Oracle via ln p - ln q.
        let want = [0.7 * (0.7f64.ln() - 0.3f64.ln()), 0.3 * (0.3f64.ln() - 0.7f64.ln())];
        for (g, w) in d.iter().zip(want) {
            assert!(((g - w) / w).abs() < 1e-10);
        }
        assert!(d.iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn kl_errors() {
        assert!(elementwise_kl(&[0.5], &[0.5, 0.5]).is_err());
        let e = elementwise_kl(&[0.5, 0.5], &[1.0, 0.0]).unwrap_err();
        assert!(e.to_string().contains("q[1]"), "{e}");
        assert!(elementwise_kl(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_sum_non_negative_on_random_distributions() {
        for trial in 0..20u64 {
            let rng = Philox4x32::new(trial);
            let mut p: Vec<f64> = (0..1000).map(|i| rng.uniform_pair(i, 1).0).collect();
            let mut q: Vec<f64> = (0..1000).map(|i| rng.uniform_pair(i, 2).0).collect();
            let (sp, sq): (f64, f64) = (p.iter().sum(), q.iter().sum());
            p.iter_mut().for_each(|x| *x /= sp);
            q.iter_mut().for_each(|x| *x /= sq);
            let total: f64 = elementwise_kl(&p, &q).unwrap().iter().sum();
            assert!(total >= 0.0, "trial {trial}: {total}");
        }
    }

    #[test]
    fn importance_zero_for_identical() {
        let v = seeded(1, 100, 0);
        let s = importance_scores(&v, &v, 1e-8).unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn importance_two_point_matches_stepwise_oracle() {
        let s = importance_scores(&[1.0, 0.0], &[0.0, 1.0], 1e-8).unwrap();
        let p = softmax_oracle(&[1.0, 0.0], 1e-8);
        let q = softmax_oracle(&[0.0, 1.0], 1e-8);
        let want = [p[0] * (p[0].ln() - q[0].ln()) * 1.0, -(p[1] * (p[1].ln() - q[1].ln()))];
        for (g, w) in s.scores.iter().zip(want) {
            assert!(((g - w) / w).abs() < 1e-9, "{g} vs {w}");
        }
    }

    #[test]
    fn importance_is_exactly_zero_under_constant_offset() {
        let r = [0.25f32, -1.0, 3.0, 0.5];
        let l: Vec<f32> = r.iter().map(|x| x + 2.0).collect();
        let s = importance_scores(&l, &r, 1e-8).unwrap();
        assert!(s.scores.iter().all(|&x| x == 0.0), "{:?}", s.scores);
    }

    #[test]
    fn importance_equals_composition() {
        let l = seeded(2, 70_000, 0);
        let r = seeded(3, 70_000, 0);
        let eps = 1e-8;
        let d = elementwise_kl(
            &softmax_normalize(&l, eps).unwrap(),
            &softmax_normalize(&r, eps).unwrap(),
        )
        .unwrap();
        let want: Vec<f64> = d
            .iter()
            .zip(l.iter().zip(&r))
            .map(|(d, (&a, &b))| d * (f64::from(a) - f64::from(b)))
            .collect();
        assert_eq!(importance_scores(&l, &r, eps).unwrap().scores, want);
    }

    #[test]
    fn importance_errors() {
        assert!(importance_scores(&[1.0], &[1.0, 2.0], 1e-8).is_err());
        assert!(importance_scores(&[1.0, f32::NAN], &[1.0, 2.0], 1e-8).is_err());
        assert!(importance_scores(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn selection_brute_force_example() {
        let imp = ImportanceVector { scores: vec![5.0, 1.0, 3.0] };
        let out = selective_merge(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0], &imp, 2.9).unwrap();
        assert_eq!(out, vec![10.0, 2.0, 30.0]);
    }

    #[test]
    fn selection_extremes() {
        let imp = ImportanceVector { scores: vec![0.5, 0.25, 0.75] };
        let l = [1.0, 2.0, 3.0];
        let r = [4.0, 5.0, 6.0];
        assert_eq!(selective_merge(&l, &r, &imp, 1.0).unwrap(), l);
        assert_eq!(selective_merge(&l, &r, &imp, 0.0).unwrap(), r);
        // At-threshold keeps left.
        assert_eq!(selective_merge(&l, &r, &imp, 0.5).unwrap(), vec![1.0, 2.0, 6.0]);
        assert!(selective_merge(&l, &r[..2], &imp, 0.0).is_err());
        assert!(selective_merge(&l, &r, &ImportanceVector { scores: vec![1.0] }, 0.0).is_err());
    }

    #[test]
    fn fuse_identical_tensors_is_identity() {
        let params = FusionParams::default();
        for dtype in Dtype::ALL {
            let v = seeded(5, 257, 0);
            let t = TensorRecord::from_f32(&v, dtype, vec![257]).unwrap();
            let (out, stats) = fuse_tensors("w", &t, &t, &params, None).unwrap();
            assert_eq!(out, t, "{dtype}");
            assert_eq!(stats.updated, 0);
            assert_eq!(stats.update_ratio(), 0.0);
        }
    }

    #[test]
    fn fuse_single_element_keeps_left() {
        let (out, stats) = fuse_tensors("s", &rec(&[3.0]), &rec(&[-7.0]), &FusionParams::default(), None).unwrap();
        assert_eq!(out.to_f32(), vec![3.0]);
        assert_eq!(stats.updated, 0);
        assert_eq!(stats.threshold, Some(0.0));
    }

    #[test]
    fn fuse_empty_tensor_passes_through() {
        let e = TensorRecord::new(Dtype::BF16, vec![0, 4], vec![]).unwrap();
        let (out, stats) = fuse_tensors("e", &e, &e, &FusionParams::default(), None).unwrap();
        assert_eq!(out, e);
        assert_eq!(stats.elements, 0);
        assert!(stats.threshold.is_none() && stats.quartiles.is_none());
    }

    #[test]
    fn fuse_rejects_mismatched_pair() {
        let a = rec(&[1.0, 2.0]);
        let b = TensorRecord::from_f32(&[1.0, 2.0], Dtype::F16, vec![2]).unwrap();
        assert!(fuse_tensors("x", &a, &b, &FusionParams::default(), None).is_err());
        let c = TensorRecord::from_f32(&[1.0, 2.0], Dtype::F32, vec![1, 2]).unwrap();
        assert!(fuse_tensors("x", &a, &c, &FusionParams::default(), None).is_err());
    }

    #[test]
    fn fuse_four_elements_against_naive_oracle() {
        let l = [0.5f32, -1.0, 2.0, 0.0];
        let r = [1.5f32, -1.0, -2.0, 3.0];
        let params = FusionParams { lambda: 0.0, ..Default::default() };
        let (out, stats) = fuse_tensors("t", &rec(&l), &rec(&r), &params, None).unwrap();

        let lf: Vec<f64> = l.iter().map(|&x| f64::from(x)).collect();
        let rf: Vec<f64> = r.iter().map(|&x| f64::from(x)).collect();
        let p = softmax_oracle(&lf, 1e-8);
        let q = softmax_oracle(&rf, 1e-8);
        let s: Vec<f64> = (0..4).map(|i| p[i] * (p[i] / q[i]).ln() * (lf[i] - rf[i])).collect();
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let median = (sorted[1] + sorted[2]) / 2.0;
        let want: Vec<f32> = (0..4).map(|i| if s[i] > median { r[i] } else { l[i] }).collect();
        assert_eq!(out.to_f32(), want);
        assert_eq!(stats.updated, s.iter().filter(|&&x| x > median).count() as u64);
    }

    #[test]
    fn fuse_huge_lambda_keeps_left() {
        let params = FusionParams { lambda: 1e9, ..Default::default() };
        let mut checked = 0;
        for seed in 0..30 {
            let l = seeded(seed, 500, 1);
            let r = seeded(seed, 500, 2);
            let (out, stats) = fuse_tensors("w", &rec(&l), &rec(&r), &params, None).unwrap();
            if stats.quartiles.unwrap().iqr() == 0.0 {
                continue;
            }
            checked += 1;
            assert_eq!(out.to_f32(), l);
            assert_eq!(stats.updated, 0);
        }
        assert!(checked > 20);
    }

    #[test]
    fn fixed_and_external_thresholds() {
        let l = seeded(9, 64, 1);
        let r = seeded(9, 64, 2);
        let fixed = FusionParams { fixed_threshold: Some(f64::MAX), ..Default::default() };
        let (_, s) = fuse_tensors("w", &rec(&l), &rec(&r), &fixed, None).unwrap();
        assert_eq!(s.updated, 0);
        assert_eq!(s.threshold, Some(f64::MAX));
        assert!(s.quartiles.is_some());
        let (out, s) = fuse_tensors("w", &rec(&l), &rec(&r), &FusionParams::default(), Some(f64::MIN)).unwrap();
        assert!(s.quartiles.is_none());
        assert_eq!(s.updated, 64);
        assert_eq!(out.to_f32(), r);
    }

    #[test]
    fn byte_selection_matches_f32_route() {
        for dtype in [Dtype::F32, Dtype::F16, Dtype::BF16] {
            let l = TensorRecord::from_f32(&seeded(4, 3000, 1), dtype, vec![30, 100]).unwrap();
            let r = TensorRecord::from_f32(&seeded(4, 3000, 2), dtype, vec![30, 100]).unwrap();
            let params = FusionParams { lambda: 0.5, ..Default::default() };
            let (out, _) = fuse_tensors("w", &l, &r, &params, None).unwrap();
            assert_eq!(out.data, fuse_tensors_via_f32(&l, &r, &params, None).unwrap(), "{dtype}");
        }
    }

    #[test]
    fn params_validation() {
        assert!(FusionParams::default().validate().is_ok());
        assert!(FusionParams { lambda: -1.0, ..Default::default() }.validate().is_err());
        assert!(FusionParams { lambda: f64::INFINITY, ..Default::default() }.validate().is_err());
        assert!(FusionParams { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!(FusionParams { fixed_threshold: Some(f64::NAN), ..Default::default() }.validate().is_err());
        assert_eq!("global".parse::<Granularity>().unwrap(), Granularity::Global);
        assert!("layer".parse::<Granularity>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn output_is_always_left_or_right(seed in any::<u64>(), n in 1usize..400, lambda in 0.0f64..4.0) {
            let l = seeded(seed, n, 1);
            let r = seeded(seed, n, 2);
            let params = FusionParams { lambda, ..Default::default() };
            let (out, stats) = fuse_tensors("w", &rec(&l), &rec(&r), &params, None).unwrap();
            let out = out.to_f32();
            let mut taken = 0;
            for i in 0..n {
                prop_assert!(out[i].to_bits() == l[i].to_bits() || out[i].to_bits() == r[i].to_bits());
                if out[i].to_bits() != l[i].to_bits() { taken += 1; }
            }
            prop_assert!(taken <= stats.updated);
        }

        #[test]
        fn importance_invariant_under_common_shift(seed in any::<u64>(), n in 1usize..200, shift in -8i32..8) {
            // Values on a coarse dyadic grid so the shift is exact in f32.
            let grid = |s: u64| -> Vec<f32> {
                let rng = Philox4x32::new(seed);
                (0..n as u64).map(|i| (rng.normal(i, s) * 16.0).round() as f32 / 16.0).collect()
            };
            let l = grid(1);
            let r = grid(2);
            let c = shift as f32 * 0.5;
            let ls: Vec<f32> = l.iter().map(|x| x + c).collect();
            let rs: Vec<f32> = r.iter().map(|x| x + c).collect();
            let a = importance_scores(&l, &r, 1e-8).unwrap();
            let b = importance_scores(&ls, &rs, 1e-8).unwrap();
            // Shifted exponent arguments are bit-identical, so scores are too.
            prop_assert_eq!(a.scores, b.scores);
        }

        #[test]
        fn updated_set_shrinks_as_lambda_grows(seed in any::<u64>(), n in 4usize..300) {
            let l = seeded(seed, n, 1);
            let r = seeded(seed, n, 2);
            let imp = importance_scores(&l, &r, 1e-8).unwrap();
            let q = crate::quantile::exact_quartiles(&imp.scores).unwrap();
            prop_assume!(q.iqr() > 0.0);
            let lambdas = [0.0, 0.5, 1.5, 3.0, 10.0];
            let masks: Vec<Vec<bool>> = lambdas.iter().map(|&lam| selection_mask(&imp.scores, q.threshold(lam))).collect();
            for w in masks.windows(2) {
                for (hi, lo) in w[1].iter().zip(&w[0]) {
                    prop_assert!(!hi || *lo);
                }
            }
        }
    }
}
