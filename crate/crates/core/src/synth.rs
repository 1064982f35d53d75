//! Deterministic synthetic checkpoints and "domain expert" perturbations.
//!
//! Element `i` of tensor `name` is drawn from [`Philox4x32`] keyed by the
//! seed with counter `(i, stream_id(name, tag))`, so output is independent
//! of thread count and of tensor order.
//!
//! * values: Normal uses the Box-Muller cosine branch on one block;
//!   Uniform maps a 53-bit uniform `u` to `lo + (hi - lo) * u`. Both are
//!   computed in f64 and narrowed to the tensor dtype.
//! * perturbation: each element gets a 64-bit key; the `ceil(fraction * n)`
//!   smallest `(key, index)` pairs are perturbed by adding
//!   `magnitude * z` with `z` standard normal.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtype::{decode_f32, encode_f32, Dtype};
use crate::error::{Error, Result};
use crate::fusion::CHUNK;
use crate::rng::{stream_id, Philox4x32};
use crate::store::{element_count, CheckpointWriter, TensorInfo, TensorMap, TensorRecord};

const TAG_VALUES: u32 = 0;
const TAG_MASK: u32 = 1;
const TAG_NOISE: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Distribution {
    Normal { mean: f64, stddev: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(default = "default_dtype")]
    pub dtype: Dtype,
    pub distribution: Distribution,
}

fn default_dtype() -> Dtype {
    Dtype::F32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub seed: u64,
    pub fraction: f64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, String>>,
    /// Applied after generation, turning the base into an "expert".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<Perturbation>,
}

impl SynthSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            serde_json::from_str(text).map_err(|e| Error::synth("<document>", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for (i, t) in self.tensors.iter().enumerate() {
            let field = |f: &str| format!("tensors[{i}].{f}");
            if t.name.is_empty() || t.name == crate::store::METADATA_KEY {
                return Err(Error::synth(field("name"), format!("invalid tensor name {:?}", t.name)));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::synth(field("name"), format!("duplicate tensor name {:?}", t.name)));
            }
            if element_count(&t.shape).is_none() {
                return Err(Error::synth(field("shape"), "element count overflows"));
            }
            match t.distribution {
                Distribution::Normal { mean, stddev } => {
                    if !mean.is_finite() {
                        return Err(Error::synth(field("distribution.normal.mean"), "must be finite"));
                    }
                    if !stddev.is_finite() || stddev < 0.0 {
                        return Err(Error::synth(
                            field("distribution.normal.stddev"),
                            format!("must be finite and >= 0, got {stddev}"),
                        ));
                    }
                }
                Distribution::Uniform { lo, hi } => {
                    if !lo.is_finite() || !hi.is_finite() {
                        return Err(Error::synth(field("distribution.uniform"), "bounds must be finite"));
                    }
                    if lo > hi {
                        return Err(Error::synth(
                            field("distribution.uniform"),
                            format!("lo {lo} exceeds hi {hi}"),
                        ));
                    }
                }
            }
        }
        if let Some(p) = &self.perturb {
            validate_perturbation(p.fraction, p.magnitude)
                .map_err(|e| Error::synth("perturb", e.to_string()))?;
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<TensorInfo> {
        self.tensors
            .iter()
            .map(|t| TensorInfo {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
            })
            .collect()
    }
}

fn validate_perturbation(fraction: f64, magnitude: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    if !(magnitude > 0.0 && magnitude.is_finite()) {
        return Err(Error::InvalidInput(format!("magnitude must be finite and > 0, got {magnitude}")));
    }
    Ok(())
}

/// Values of one tensor in F32 (before narrowing to its dtype).
pub fn generate_values(seed: u64, spec: &TensorSpec) -> Vec<f32> {
    let n = element_count(&spec.shape).expect("validated shape");
    let rng = Philox4x32::new(seed);
    let stream = stream_id(&spec.name, TAG_VALUES);
    let mut out = vec![0.0f32; n];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let base = (c * CHUNK) as u64;
        for (j, v) in chunk.iter_mut().enumerate() {
            let i = base + j as u64;
            *v = match spec.distribution {
                Distribution::Normal { mean, stddev } => (mean + stddev * rng.normal(i, stream)) as f32,
                Distribution::Uniform { lo, hi } => (lo + (hi - lo) * rng.uniform(i, stream)) as f32,
            };
        }
    });
    out
}

fn generate_record(seed: u64, spec: &TensorSpec, perturb: Option<&Perturbation>) -> TensorRecord {
    let values = generate_values(seed, spec);
    let record = TensorRecord {
        dtype: spec.dtype,
        shape: spec.shape.clone(),
        data: encode_f32(&values, spec.dtype),
    };
    match perturb {
        Some(p) => perturb_record(&spec.name, &record, p.seed, p.fraction, p.magnitude),
        None => record,
    }
}

pub fn generate_synthetic_checkpoint(spec: &SynthSpec) -> Result<TensorMap> {
    spec.validate()?;
    let mut map = TensorMap {
        tensors: BTreeMap::new(),
        metadata: spec.metadata.clone(),
    };
    for t in &spec.tensors {
        map.tensors
            .insert(t.name.clone(), generate_record(spec.seed, t, spec.perturb.as_ref()));
    }
    Ok(map)
}

/// Generate straight to disk one tensor at a time. Produces the same bytes
/// as `write_checkpoint(&generate_synthetic_checkpoint(spec)?, path)`.
pub fn write_synthetic_checkpoint(spec: &SynthSpec, path: impl AsRef<Path>) -> Result<()> {
    spec.validate()?;
    let writer = CheckpointWriter::create(path, &spec.layout(), spec.metadata.as_ref())?;
    for t in &spec.tensors {
        let record = generate_record(spec.seed, t, spec.perturb.as_ref());
        writer.write_tensor(&t.name, &record.data)?;
    }
    writer.finish()
}

/// Number of positions `perturb_expert` changes in a tensor of `n` elements.
pub fn perturbed_count(n: usize, fraction: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((fraction * n as f64).ceil() as usize).clamp(1, n)
}

/// Indices chosen for perturbation, ascending.
pub fn perturbation_positions(name: &str, n: usize, seed: u64, fraction: f64) -> Vec<usize> {
    let k = perturbed_count(n, fraction);
    if k == n {
        return (0..n).collect();
    }
    let rng = Philox4x32::new(seed);
    let stream = stream_id(name, TAG_MASK);
    let mut keys: Vec<(u64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| (rng.word(i as u64, stream), i))
        .collect();
    keys.select_nth_unstable(k - 1);
    let mut chosen: Vec<usize> = keys[..k].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    chosen
}

fn perturb_record(name: &str, base: &TensorRecord, seed: u64, fraction: f64, magnitude: f64) -> TensorRecord {
    let n = base.elements();
    let width = base.dtype.byte_width();
    let rng = Philox4x32::new(seed);
    let stream = stream_id(name, TAG_NOISE);
    let mut data = base.data.clone();
    for i in perturbation_positions(name, n, seed, fraction) {
        let bytes = &mut data[i * width..(i + 1) * width];
        let v = decode_f32(bytes, base.dtype)[0];
        let noisy = v + (magnitude * rng.normal(i as u64, stream)) as f32;
        bytes.copy_from_slice(&encode_f32(&[noisy], base.dtype));
    }
    TensorRecord {
        dtype: base.dtype,
        shape: base.shape.clone(),
        data,
    }
}

/// Add Normal(0, magnitude) noise to `ceil(fraction * n)` seeded positions
/// of every tensor; all other elements stay bit-identical.
pub fn perturb_expert(base: &TensorMap, seed: u64, fraction: f64, magnitude: f64) -> Result<TensorMap> {
    validate_perturbation(fraction, magnitude)?;
    let tensors = base
        .tensors
        .iter()
        .map(|(name, t)| (name.clone(), perturb_record(name, t, seed, fraction, magnitude)))
        .collect();
    Ok(TensorMap {
        tensors,
        metadata: base.metadata.clone(),
    })
}
