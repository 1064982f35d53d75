//! Reference merge methods for comparisons: weighted averaging and task
//! arithmetic. Elements are widened to F32, combined with F64 accumulation
//! and narrowed back to the input dtype. Terms with a zero coefficient are
//! skipped entirely, so one-hot and all-zero coefficient vectors reproduce
//! their source bit-exactly (signed zeros included).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtype::encode_f32;
use crate::error::{Error, Result};
use crate::fusion::CHUNK;
use crate::store::{compare_layouts, TensorMap, TensorRecord};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Linear,
    TaskArithmetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub method: BaselineMethod,
    /// Linear: convex weights per model. TaskArithmetic: one scale per expert.
    pub weights: Vec<f64>,
    /// Base model name; TaskArithmetic only.
    pub base: Option<String>,
}

impl BaselineParams {
    pub fn validate(&self, models: usize) -> Result<()> {
        match self.method {
            BaselineMethod::Linear => {
                validate_linear_weights(&self.weights, models)?;
                if self.base.is_some() {
                    return Err(Error::InvalidInput("linear merge takes no base model".into()));
                }
            }
            BaselineMethod::TaskArithmetic => {
                if self.base.is_none() {
                    return Err(Error::InvalidInput("task arithmetic needs a base model".into()));
                }
                validate_scales(&self.weights, models)?;
            }
        }
        Ok(())
    }
}

pub fn validate_linear_weights(weights: &[f64], models: usize) -> Result<()> {
    if models < 2 {
        return Err(Error::InvalidInput(format!("linear merge needs at least 2 models, got {models}")));
    }
    if weights.len() != models {
        return Err(Error::InvalidInput(format!("{} weights for {models} models", weights.len())));
    }
    if let Some((i, w)) = weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0) {
        return Err(Error::InvalidInput(format!("weight {i} is {w}; weights must be finite and >= 0")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::InvalidInput(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

pub fn validate_scales(scales: &[f64], experts: usize) -> Result<()> {
    if experts == 0 {
        return Err(Error::InvalidInput("task arithmetic needs at least one expert".into()));
    }
    if scales.len() != experts {
        return Err(Error::InvalidInput(format!("{} scales for {experts} experts", scales.len())));
    }
    if let Some((i, s)) = scales.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("scale {i} is {s}; scales must be finite")));
    }
    Ok(())
}

fn check_same_layout(records: &[&TensorRecord]) -> Result<()> {
    let first = records[0];
    for r in &records[1..] {
        if r.dtype != first.dtype || r.shape != first.shape {
            return Err(Error::InvalidInput(format!(
                "cannot combine {}{:?} with {}{:?}",
                first.dtype, first.shape, r.dtype, r.shape
            )));
        }
    }
    Ok(())
}

/// Weighted sum of one tensor across models.
pub fn linear_tensor(records: &[&TensorRecord], weights: &[f64]) -> Result<TensorRecord> {
    validate_linear_weights(weights, records.len())?;
    check_same_layout(records)?;
    let terms: Vec<(Vec<f32>, f64)> = records
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w != 0.0)
        .map(|(r, &w)| (r.to_f32(), w))
        .collect();
    let n = records[0].elements();
    let mut out = vec![0.0f32; n];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let off = c * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            let mut acc: Option<f64> = None;
            for (v, w) in &terms {
                let t = w * f64::from(v[off + j]);
                acc = Some(acc.map_or(t, |a| a + t));
            }
            *o = acc.expect("at least one nonzero weight") as f32;
        }
    });
    Ok(TensorRecord {
        dtype: records[0].dtype,
        shape: records[0].shape.clone(),
        data: encode_f32(&out, records[0].dtype),
    })
}

/// `base + sum_k scale_k * (expert_k - base)` for one tensor.
pub fn task_arithmetic_tensor(
    base: &TensorRecord,
    experts: &[&TensorRecord],
    scales: &[f64],
) -> Result<TensorRecord> {
    validate_scales(scales, experts.len())?;
    let mut all = vec![base];
    all.extend_from_slice(experts);
    check_same_layout(&all)?;
    let b = base.to_f32();
    let terms: Vec<(Vec<f32>, f64)> = experts
        .iter()
        .zip(scales)
        .filter(|(_, &s)| s != 0.0)
        .map(|(e, &s)| (e.to_f32(), s))
        .collect();
    if terms.is_empty() {
        return Ok(base.clone());
    }
    let mut out = vec![0.0f32; b.len()];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let off = c * CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            let bi = f64::from(b[off + j]);
            let delta: f64 = terms
                .iter()
                .map(|(e, s)| s * (f64::from(e[off + j]) - bi))
                .sum();
            *o = (bi + delta) as f32;
        }
    });
    Ok(TensorRecord {
        dtype: base.dtype,
        shape: base.shape.clone(),
        data: encode_f32(&out, base.dtype),
    })
}

fn check_models(models: &[&TensorMap]) -> Result<()> {
    let first = models[0].layout();
    for m in &models[1..] {
        let report = compare_layouts(&first, &m.layout());
        if !report.is_compatible() {
            return Err(Error::Incompatible { node: None, report });
        }
    }
    Ok(())
}

pub fn linear_merge(models: &[&TensorMap], weights: &[f64]) -> Result<TensorMap> {
    validate_linear_weights(weights, models.len())?;
    check_models(models)?;
    let mut out = TensorMap {
        tensors: Default::default(),
        metadata: models[0].metadata.clone(),
    };
    for name in models[0].tensors.keys() {
        let records: Vec<&TensorRecord> = models.iter().map(|m| &m.tensors[name]).collect();
        out.tensors.insert(name.clone(), linear_tensor(&records, weights)?);
    }
    Ok(out)
}

pub fn task_arithmetic_merge(base: &TensorMap, experts: &[&TensorMap], scales: &[f64]) -> Result<TensorMap> {
    validate_scales(scales, experts.len())?;
    let mut all = vec![base];
    all.extend_from_slice(experts);
    check_models(&all)?;
    let mut out = TensorMap {
        tensors: Default::default(),
        metadata: base.metadata.clone(),
    };
    for (name, b) in &base.tensors {
        let records: Vec<&TensorRecord> = experts.iter().map(|m| &m.tensors[name]).collect();
        out.tensors.insert(name.clone(), task_arithmetic_tensor(b, &records, scales)?);
    }
    Ok(out)
}
