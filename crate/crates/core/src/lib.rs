//! Checkpoint merging: importance-gated pairwise fusion, reference
//! baselines, a safetensors-compatible codec and deterministic synthetic
//! checkpoints.

pub mod baselines;
pub mod diff;
pub mod dtype;
pub mod engine;
pub mod error;
pub mod fusion;
pub mod quantile;
pub mod recipe;
pub mod rng;
pub mod store;
pub mod synth;

pub use baselines::{linear_merge, task_arithmetic_merge, BaselineMethod, BaselineParams};
pub use diff::{diff_files, diff_maps, DiffReport, TensorDiff};
pub use dtype::Dtype;
pub use engine::{compare_plans, execute, execute_to_map, MergeReport, PlanComparison, ReportRow, StageReport};
pub use error::{Error, ErrorKind, Result};
pub use fusion::{
    elementwise_kl, fuse_tensors, importance_scores, selective_merge, softmax_normalize, FusionParams, Granularity,
    ImportanceVector, TensorStats,
};
pub use quantile::{dynamic_threshold, exact_quartiles, global_quartiles, ImportanceStats, Quartiles};
pub use recipe::{load_recipe, parse_recipe, MergeMethod, MergeRecipe, Plan, PlanNode};
pub use store::{
    read_checkpoint, validate_compat, write_checkpoint, CheckpointReader, CheckpointWriter, CompatReport, TensorInfo,
    TensorMap, TensorRecord,
};
pub use synth::{generate_synthetic_checkpoint, perturb_expert, write_synthetic_checkpoint, SynthSpec};
