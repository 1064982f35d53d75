//! Shared fixtures for the benchmarks.

use fusekit_core::rng::Philox4x32;
use fusekit_core::{Dtype, TensorMap, TensorRecord};

/// `n` standard-normal values from `(seed, stream)`.
pub fn normal_values(seed: u64, stream: u64, n: usize) -> Vec<f32> {
    let rng = Philox4x32::new(seed);
    (0..n as u64).map(|i| rng.normal(i, stream) as f32).collect()
}

/// `right` is `left` with every third element shifted.
pub fn pair(n: usize) -> (TensorRecord, TensorRecord) {
    let left = normal_values(1, 0, n);
    let noise = normal_values(1, 1, n);
    let right: Vec<f32> = left
        .iter()
        .zip(&noise)
        .enumerate()
        .map(|(i, (&l, &z))| if i % 3 == 0 { l + 0.1 * z } else { l })
        .collect();
    (
        TensorRecord::from_f32(&left, Dtype::F32, vec![n]).unwrap(),
        TensorRecord::from_f32(&right, Dtype::F32, vec![n]).unwrap(),
    )
}

pub fn checkpoint(tensors: usize, elements: usize, dtype: Dtype) -> TensorMap {
    let mut map = TensorMap::new();
    for t in 0..tensors {
        let v = normal_values(7, t as u64, elements);
        map.insert(format!("layers.{t}.weight"), TensorRecord::from_f32(&v, dtype, vec![elements]).unwrap())
            .unwrap();
    }
    map
}
