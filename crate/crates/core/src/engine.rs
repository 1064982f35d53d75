//! Executes merge manifests.
//!
//! Fusion plans are evaluated bottom-up. Leaves are read lazily from disk,
//! one tensor at a time; interior results stay in memory at the input dtype
//! (fusion only copies elements, so nothing is lost); the root streams
//! straight into the output file.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{linear_tensor, task_arithmetic_tensor};
use crate::diff::diff_maps;
use crate::dtype::Dtype;
use crate::error::{Error, Result};
use crate::fusion::{fuse_tensors, fuse_with_importance, tensor_importance, Granularity, TensorStats};
use crate::quantile::{global_quartiles, ImportanceStats, GLOBAL_SCOPE};
use crate::recipe::{MergeMethod, MergeRecipe, Plan, PlanNode};
use crate::store::{compare_layouts, CheckpointReader, CheckpointWriter, TensorInfo, TensorMap, TensorRecord};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

/// One output tensor of the final stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub elements: u64,
    pub threshold: Option<f64>,
    pub median: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub updated: u64,
    pub update_ratio: f64,
}

impl From<&TensorStats> for ReportRow {
    fn from(s: &TensorStats) -> Self {
        ReportRow {
            name: s.name.clone(),
            elements: s.elements,
            threshold: s.threshold,
            median: s.quartiles.map(|q| q.median),
            q1: s.quartiles.map(|q| q.q1),
            q3: s.quartiles.map(|q| q.q3),
            updated: s.updated,
            update_ratio: s.update_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Plan expression this stage produced.
    pub node: String,
    pub left: String,
    pub right: String,
    pub elements: u64,
    pub updated: u64,
    pub update_ratio: f64,
    /// Model-wide statistics under global granularity.
    pub global: Option<ImportanceStats>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub elements: u64,
    pub updated: u64,
    pub update_ratio: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub tool_version: String,
    /// The manifest as executed, defaults filled in.
    pub recipe: serde_json::Value,
    pub plan: String,
    pub inputs: Vec<InputDigest>,
    pub stages: Vec<StageReport>,
    /// Per-tensor rows for the final stage.
    pub tensors: Vec<ReportRow>,
    pub aggregate: Aggregate,
}

fn ratio(updated: u64, elements: u64) -> f64 {
    if elements == 0 {
        0.0
    } else {
        updated as f64 / elements as f64
    }
}

fn sci(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.6e}"))
}

impl MergeReport {
    /// Copy with all wall-clock fields zeroed, for run-to-run comparison.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.aggregate.wall_seconds = 0.0;
        for s in &mut r.stages {
            s.wall_seconds = 0.0;
        }
        r
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_pretty() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Aligned plain-text table.
    pub fn render_table(&self) -> String {
        let headers = ["tensor", "elements", "updated", "ratio", "threshold", "median", "q1", "q3"];
        let mut rows: Vec<[String; 8]> = self
            .tensors
            .iter()
            .map(|t| {
                [
                    t.name.clone(),
                    t.elements.to_string(),
                    t.updated.to_string(),
                    format!("{:.6}", t.update_ratio),
                    sci(t.threshold),
                    sci(t.median),
                    sci(t.q1),
                    sci(t.q3),
                ]
            })
            .collect();
        rows.push([
            "TOTAL".into(),
            self.aggregate.elements.to_string(),
            self.aggregate.updated.to_string(),
            format!("{:.6}", self.aggregate.update_ratio),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
        ]);
        let mut widths = headers.map(str::len);
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}");
                } else {
                    let _ = write!(out, "  {c:>w$}");
                }
            }
            out.push('\n');
        };
        line(&mut out, &headers);
        for r in &rows {
            line(&mut out, &r.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let _ = writeln!(out, "plan: {}", self.plan);
        for s in &self.stages {
            let _ = write!(
                out,
                "stage {}: {} of {} updated ({:.6}) in {:.3}s",
                s.node, s.updated, s.elements, s.update_ratio, s.wall_seconds
            );
            if let Some(g) = &s.global {
                let _ = write!(out, ", global threshold {:.6e}", g.threshold);
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for MergeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_table())
    }
}

// ---------------------------------------------------------------------------
// Sources and sinks

enum Source {
    File(CheckpointReader),
    Memory(TensorMap),
}

impl Source {
    fn open(path: &Path) -> Result<Self> {
        CheckpointReader::open(path).map(Source::File)
    }

    fn layout(&self) -> Vec<TensorInfo> {
        match self {
            Source::File(r) => r.layout(),
            Source::Memory(m) => m.layout(),
        }
    }

    fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        match self {
            Source::File(r) => r.header().metadata.as_ref(),
            Source::Memory(m) => m.metadata.as_ref(),
        }
    }

    fn tensor(&self, name: &str) -> Result<Cow<'_, TensorRecord>> {
        match self {
            Source::File(r) => r.read_tensor(name).map(Cow::Owned),
            Source::Memory(m) => m
                .get(name)
                .map(Cow::Borrowed)
                .ok_or_else(|| Error::Internal(format!("intermediate result lacks tensor {name:?}"))),
        }
    }
}

trait Sink: Sync {
    fn put(&self, name: &str, record: TensorRecord) -> Result<()>;
}

struct MemorySink(Mutex<BTreeMap<String, TensorRecord>>);

impl Sink for MemorySink {
    fn put(&self, name: &str, record: TensorRecord) -> Result<()> {
        self.0
            .lock()
            .map_err(|_| Error::Internal("memory sink poisoned".into()))?
            .insert(name.to_owned(), record);
        Ok(())
    }
}

struct FileSink(CheckpointWriter);

impl Sink for FileSink {
    fn put(&self, name: &str, record: TensorRecord) -> Result<()> {
        self.0.write_tensor(name, &record.data)
    }
}

fn convert(record: TensorRecord, dtype: Option<Dtype>) -> Result<TensorRecord> {
    match dtype {
        Some(d) if d != record.dtype => TensorRecord::from_f32(&record.to_f32(), d, record.shape),
        _ => Ok(record),
    }
}

fn with_dtype(layout: Vec<TensorInfo>, dtype: Option<Dtype>) -> Vec<TensorInfo> {
    match dtype {
        None => layout,
        Some(d) => layout.into_iter().map(|t| TensorInfo { dtype: d, ..t }).collect(),
    }
}

/// Where the root stage writes.
enum Target<'a> {
    File(&'a Path),
    Memory,
}

enum Produced {
    Written,
    Map(TensorMap),
}

/// Runs `stage` against a sink for `target`, committing file output only on
/// success.
fn run_into<T>(
    target: &Target<'_>,
    layout: &[TensorInfo],
    metadata: Option<&BTreeMap<String, String>>,
    stage: impl FnOnce(&dyn Sink) -> Result<T>,
) -> Result<(T, Produced)> {
    match target {
        Target::Memory => {
            let sink = MemorySink(Mutex::new(BTreeMap::new()));
            let out = stage(&sink)?;
            let tensors = sink.0.into_inner().map_err(|_| Error::Internal("memory sink poisoned".into()))?;
            Ok((
                out,
                Produced::Map(TensorMap {
                    tensors,
                    metadata: metadata.cloned(),
                }),
            ))
        }
        Target::File(path) => {
            let mut partial = path.as_os_str().to_owned();
            partial.push(".partial");
            let partial = PathBuf::from(partial);
            let result = (|| {
                let sink = FileSink(CheckpointWriter::create(&partial, layout, metadata)?);
                let out = stage(&sink)?;
                sink.0.finish()?;
                std::fs::rename(&partial, path).map_err(|e| Error::io(*path, e))?;
                Ok(out)
            })();
            if result.is_err() {
                let _ = std::fs::remove_file(&partial);
            }
            result.map(|out| (out, Produced::Written))
        }
    }
}

// ---------------------------------------------------------------------------
// Fusion

struct StageOutcome {
    report: StageReport,
    stats: Vec<TensorStats>,
}

fn fusion_stage(
    recipe: &MergeRecipe,
    node: &str,
    (left_label, left): (&str, &Source),
    (right_label, right): (&str, &Source),
    sink: &dyn Sink,
    output_dtype: Option<Dtype>,
) -> Result<StageOutcome> {
    let start = Instant::now();
    let params = &recipe.fusion;
    let layout = left.layout();
    let compat = compare_layouts(&layout, &right.layout());
    if !compat.is_compatible() {
        return Err(Error::Incompatible {
            node: Some(node.to_owned()),
            report: compat,
        });
    }
    let names: Vec<&str> = layout.iter().map(|t| t.name.as_str()).collect();
    let tagged = |name: &str, e: Error| match e {
        Error::InvalidInput(m) if !m.starts_with("tensor ") => Error::InvalidInput(format!("tensor {name:?}: {m}")),
        other => other,
    };

    let (stats, global) = match params.granularity {
        Granularity::PerTensor => {
            let stats = names
                .par_iter()
                .map(|&name| {
                    let l = left.tensor(name)?;
                    let r = right.tensor(name)?;
                    let (out, st) = fuse_tensors(name, &l, &r, params, None)?;
                    sink.put(name, convert(out, output_dtype)?)?;
                    Ok(st)
                })
                .collect::<Result<Vec<_>>>()?;
            (stats, None)
        }
        Granularity::Global => {
            let required: u64 = layout.iter().map(|t| t.elements() as u64).sum();
            if required > recipe.global_cap {
                return Err(Error::CapExceeded {
                    required,
                    cap: recipe.global_cap,
                });
            }
            params.validate()?;
            let importance = names
                .par_iter()
                .map(|&name| {
                    tensor_importance(&*left.tensor(name)?, &*right.tensor(name)?, params.epsilon).map_err(|e| tagged(name, e))
                })
                .collect::<Result<Vec<_>>>()?;
            let quartiles = if required == 0 {
                None
            } else {
                let parts: Vec<&[f64]> = importance.iter().map(|v| v.scores.as_slice()).collect();
                Some(global_quartiles(&parts, recipe.global_cap)?)
            };
            let threshold = quartiles.map(|q| params.fixed_threshold.unwrap_or_else(|| q.threshold(params.lambda)));
            let stats = names
                .par_iter()
                .zip(&importance)
                .map(|(&name, imp)| {
                    let l = left.tensor(name)?;
                    let r = right.tensor(name)?;
                    let (out, st) = fuse_with_importance(name, &l, &r, imp, params, threshold)?;
                    sink.put(name, convert(out, output_dtype)?)?;
                    Ok(st)
                })
                .collect::<Result<Vec<_>>>()?;
            let global = quartiles.zip(threshold).map(|(q, t)| ImportanceStats {
                scope: GLOBAL_SCOPE.to_owned(),
                median: q.median,
                q1: q.q1,
                q3: q.q3,
                iqr: q.iqr(),
                threshold: t,
                updated: stats.iter().map(|s| s.updated).sum(),
                total: required,
            });
            (stats, global)
        }
    };

    let elements = stats.iter().map(|s| s.elements).sum();
    let updated = stats.iter().map(|s| s.updated).sum();
    Ok(StageOutcome {
        report: StageReport {
            node: node.to_owned(),
            left: left_label.to_owned(),
            right: right_label.to_owned(),
            elements,
            updated,
            update_ratio: ratio(updated, elements),
            global,
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        stats,
    })
}

struct Evaluator<'a> {
    recipe: &'a MergeRecipe,
    stages: Vec<StageReport>,
    last_stats: Vec<TensorStats>,
}

impl Evaluator<'_> {
    fn leaf(&self, name: &str) -> Result<Source> {
        let path = self
            .recipe
            .model_path(name)
            .ok_or_else(|| Error::recipe("plan", format!("undeclared model name {name:?}")))?;
        Source::open(path)
    }

    fn eval(&mut self, node: &PlanNode, target: Option<&Target<'_>>) -> Result<(Source, Produced)> {
        let (a, b) = match node {
            PlanNode::Model(name) => return Ok((self.leaf(name)?, Produced::Written)),
            PlanNode::Fuse(a, b) => (a, b),
        };
        let (sa, _) = self.eval(a, None)?;
        let (sb, _) = self.eval(b, None)?;
        let (la, lb) = (a.to_string(), b.to_string());
        let ((left_label, left), (right_label, right)) = if self.recipe.swap_roles {
            ((lb.as_str(), &sb), (la.as_str(), &sa))
        } else {
            ((la.as_str(), &sa), (lb.as_str(), &sb))
        };
        let label = node.to_string();
        let recipe = self.recipe;
        let (target, output_dtype) = match target {
            Some(t) => (t, recipe.output_dtype),
            None => (&Target::Memory, None),
        };
        let layout = with_dtype(left.layout(), output_dtype);
        let (outcome, produced) = run_into(target, &layout, left.metadata(), |sink| {
            fusion_stage(recipe, &label, (left_label, left), (right_label, right), sink, output_dtype)
        })?;
        self.stages.push(outcome.report);
        self.last_stats = outcome.stats;
        match produced {
            Produced::Map(m) => Ok((Source::Memory(m.clone()), Produced::Map(m))),
            Produced::Written => Ok((Source::Memory(TensorMap::new()), Produced::Written)),
        }
    }
}

// ---------------------------------------------------------------------------
// Baselines

fn count_changed(a: &TensorRecord, b: &TensorRecord) -> u64 {
    let w = a.dtype.byte_width();
    a.data.par_chunks(w).zip(b.data.par_chunks(w)).filter(|(x, y)| x != y).count() as u64
}

fn baseline_stage(recipe: &MergeRecipe, target: &Target<'_>) -> Result<(StageOutcome, Produced)> {
    let start = Instant::now();
    let params = recipe
        .baseline
        .as_ref()
        .ok_or_else(|| Error::Internal("baseline recipe without parameters".into()))?;
    let members = match &recipe.plan {
        Plan::Members(m) => m,
        Plan::Fold(_) => return Err(Error::Internal("baseline recipe with a fusion plan".into())),
    };
    let open = |name: &str| {
        recipe
            .model_path(name)
            .ok_or_else(|| Error::recipe("plan", format!("undeclared model name {name:?}")))
            .and_then(Source::open)
    };
    let base = params.base.as_deref().map(open).transpose()?;
    let sources = members.iter().map(|m| open(m)).collect::<Result<Vec<_>>>()?;
    let reference = base.as_ref().or(sources.first()).ok_or_else(|| Error::recipe("plan", "no models to merge"))?;
    let layout = reference.layout();
    for (name, s) in members.iter().zip(&sources) {
        let compat = compare_layouts(&layout, &s.layout());
        if !compat.is_compatible() {
            return Err(Error::Incompatible {
                node: Some(format!("{} <- {name}", params.base.as_deref().unwrap_or(&members[0]))),
                report: compat,
            });
        }
    }
    let out_layout = with_dtype(layout.clone(), recipe.output_dtype);
    let (stats, produced) = run_into(target, &out_layout, reference.metadata(), |sink| {
        layout
            .par_iter()
            .map(|info| {
                let name = info.name.as_str();
                let recs = sources.iter().map(|s| s.tensor(name)).collect::<Result<Vec<_>>>()?;
                let refs: Vec<&TensorRecord> = recs.iter().map(|c| c.as_ref()).collect();
                let (out, changed) = match &base {
                    Some(b) => {
                        let b = b.tensor(name)?;
                        let out = task_arithmetic_tensor(&b, &refs, &params.weights)?;
                        let changed = count_changed(&b, &out);
                        (out, changed)
                    }
                    None => {
                        let out = linear_tensor(&refs, &params.weights)?;
                        let changed = count_changed(refs[0], &out);
                        (out, changed)
                    }
                };
                let elements = out.elements() as u64;
                sink.put(name, convert(out, recipe.output_dtype)?)?;
                Ok(TensorStats {
                    name: name.to_owned(),
                    elements,
                    updated: changed,
                    threshold: None,
                    quartiles: None,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let elements = stats.iter().map(|s| s.elements).sum();
    let updated = stats.iter().map(|s| s.updated).sum();
    let report = StageReport {
        node: format!("{}{}", recipe.method.as_str(), recipe.plan),
        left: params.base.clone().unwrap_or_else(|| members[0].clone()),
        right: members.join(", "),
        elements,
        updated,
        update_ratio: ratio(updated, elements),
        global: None,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((StageOutcome { report, stats }, produced))
}

// ---------------------------------------------------------------------------
// Entry points

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn used_models(recipe: &MergeRecipe) -> Vec<&str> {
    let mut names: Vec<&str> = match &recipe.plan {
        Plan::Fold(n) => n.leaves(),
        Plan::Members(m) => m.iter().map(String::as_str).collect(),
    };
    if let Some(b) = recipe.baseline.as_ref().and_then(|b| b.base.as_deref()) {
        names.insert(0, b);
    }
    names
}

fn input_digests(recipe: &MergeRecipe) -> Result<Vec<InputDigest>> {
    let used = used_models(recipe);
    recipe
        .models
        .par_iter()
        .filter(|(n, _)| used.contains(&n.as_str()))
        .map(|(name, path)| {
            Ok(InputDigest {
                name: name.clone(),
                path: path.display().to_string(),
                sha256: sha256_file(path)?,
            })
        })
        .collect()
}

fn run(recipe: &MergeRecipe, target: Target<'_>) -> Result<(MergeReport, Option<TensorMap>)> {
    let start = Instant::now();
    let inputs = input_digests(recipe)?;
    let (stages, stats, produced) = match (&recipe.method, &recipe.plan) {
        (MergeMethod::Fusion, Plan::Fold(node)) => {
            recipe.fusion.validate()?;
            let mut ev = Evaluator {
                recipe,
                stages: Vec::new(),
                last_stats: Vec::new(),
            };
            let (_, produced) = ev.eval(node, Some(&target))?;
            (ev.stages, ev.last_stats, produced)
        }
        (MergeMethod::Fusion, Plan::Members(_)) => {
            return Err(Error::recipe("plan", "fusion needs a nested pairwise plan"));
        }
        _ => {
            let (outcome, produced) = baseline_stage(recipe, &target)?;
            (vec![outcome.report], outcome.stats, produced)
        }
    };
    let elements = stats.iter().map(|s| s.elements).sum();
    let updated = stats.iter().map(|s| s.updated).sum();
    let report = MergeReport {
        tool_version: TOOL_VERSION.to_owned(),
        recipe: recipe.to_json(),
        plan: recipe.plan.to_string(),
        inputs,
        stages,
        tensors: stats.iter().map(ReportRow::from).collect(),
        aggregate: Aggregate {
            elements,
            updated,
            update_ratio: ratio(updated, elements),
            wall_seconds: start.elapsed().as_secs_f64(),
        },
    };
    let map = match produced {
        Produced::Map(m) => Some(m),
        Produced::Written => None,
    };
    Ok((report, map))
}

/// Run a manifest, writing `recipe.output` (and `recipe.report` when set).
pub fn execute(recipe: &MergeRecipe) -> Result<MergeReport> {
    if let Some(parent) = recipe.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (report, _) = run(recipe, Target::File(&recipe.output))?;
    if let Some(path) = &recipe.report {
        report.write_json(path)?;
    }
    Ok(report)
}

/// Run a manifest in memory; `output` and `report` are ignored.
pub fn execute_to_map(recipe: &MergeRecipe) -> Result<(TensorMap, MergeReport)> {
    let (report, map) = run(recipe, Target::Memory)?;
    let map = map.ok_or_else(|| Error::Internal("in-memory run produced no map".into()))?;
    Ok((map, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub plan: String,
    pub elements: u64,
    pub updated: u64,
    pub update_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDifference {
    pub a: usize,
    pub b: usize,
    /// Output elements whose bits differ between the two plans.
    pub differing: u64,
    pub elements: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanComparison {
    pub plans: Vec<PlanSummary>,
    pub differences: Vec<PlanDifference>,
}

impl PlanComparison {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let w = self.plans.iter().map(|p| p.plan.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(out, "{:<3}  {:<w$}  {:>12}  {:>12}  {:>8}", "#", "plan", "elements", "updated", "ratio");
        for (i, p) in self.plans.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<3}  {:<w$}  {:>12}  {:>12}  {:>8.6}",
                i, p.plan, p.elements, p.updated, p.update_ratio
            );
        }
        for d in &self.differences {
            let _ = writeln!(out, "plans {} vs {}: {} of {} elements differ", d.a, d.b, d.differing, d.elements);
        }
        out
    }
}

/// Execute several manifests over the same models and compare their outputs.
pub fn compare_plans(recipes: &[MergeRecipe]) -> Result<PlanComparison> {
    if recipes.len() < 2 {
        return Err(Error::InvalidInput("comparing plans needs at least two manifests".into()));
    }
    let models = |r: &MergeRecipe| {
        let mut m = r.models.clone();
        m.sort();
        m
    };
    let first = models(&recipes[0]);
    if let Some(i) = recipes.iter().position(|r| models(r) != first) {
        return Err(Error::InvalidInput(format!("manifest {i} declares a different model set than manifest 0")));
    }
    let runs = recipes.iter().map(execute_to_map).collect::<Result<Vec<_>>>()?;
    let plans = runs
        .iter()
        .map(|(_, r)| PlanSummary {
            plan: r.plan.clone(),
            elements: r.aggregate.elements,
            updated: r.aggregate.updated,
            update_ratio: r.aggregate.update_ratio,
        })
        .collect();
    let mut differences = Vec::new();
    for a in 0..runs.len() {
        for b in a + 1..runs.len() {
            let d = diff_maps(&runs[a].0, &runs[b].0, 0.0)?;
            if !d.compat.is_compatible() {
                return Err(Error::Incompatible {
                    node: Some(format!("outputs of manifests {a} and {b}")),
                    report: d.compat,
                });
            }
            differences.push(PlanDifference {
                a,
                b,
                differing: d.total_differing(),
                elements: d.total_elements(),
            });
        }
    }
    Ok(PlanComparison { plans, differences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionParams;
    use crate::recipe::parse_recipe;
    use crate::store::{read_checkpoint, write_checkpoint};

    fn map(seed: u32, tensors: &[(&str, usize)]) -> TensorMap {
        let mut m = TensorMap::new();
        for (k, &(name, n)) in tensors.iter().enumerate() {
            let v: Vec<f32> = (0..n)
                .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97 + k as u32 * 13)) % 1000) as f32 / 250.0)
                .collect();
            m.insert(name, TensorRecord::from_f32(&v, Dtype::F32, vec![n]).unwrap()).unwrap();
        }
        m
    }

    fn write(dir: &Path, name: &str, m: &TensorMap) -> PathBuf {
        let p = dir.join(name);
        write_checkpoint(m, &p).unwrap();
        p
    }

    fn setup(n: usize) -> (tempfile::TempDir, Vec<PathBuf>) {
        let dir = tempfile::tempdir().unwrap();
        let layout = [("a", n), ("b", n / 2), ("empty", 0)];
        let paths = (0..3).map(|s| write(dir.path(), &format!("m{s}.st"), &map(s, &layout))).collect();
        (dir, paths)
    }

    fn recipe_for(dir: &Path, body: &str) -> MergeRecipe {
        let mut r = parse_recipe(body).unwrap();
        r.resolve_paths(dir);
        r
    }

    #[test]
    fn pair_matches_direct_fusion() {
        let (dir, p) = setup(1000);
        let recipe = MergeRecipe::pair(&p[0], &p[1], FusionParams::default(), dir.path().join("o.st"));
        let report = execute(&recipe).unwrap();
        let out = read_checkpoint(&recipe.output).unwrap();
        let (l, r) = (read_checkpoint(&p[0]).unwrap(), read_checkpoint(&p[1]).unwrap());
        let mut updated = 0;
        for (name, lt) in &l.tensors {
            let (want, st) = fuse_tensors(name, lt, &r.tensors[name], &FusionParams::default(), None).unwrap();
            assert_eq!(out.tensors[name], want);
            updated += st.updated;
        }
        assert_eq!(report.aggregate.updated, updated);
        assert_eq!(report.tensors.len(), 3);
        assert_eq!(report.inputs.len(), 2);
        assert_eq!(report.inputs[0].sha256.len(), 64);
        let (m, rep2) = execute_to_map(&recipe).unwrap();
        assert_eq!(m, out);
        assert_eq!(rep2.tensors, report.tensors);
        assert!(!dir.path().join("o.st.partial").exists());
    }

    #[test]
    fn nested_plan_equals_manual_fold() {
        let (dir, _) = setup(800);
        let r = recipe_for(
            dir.path(),
            r#"{"models": {"x": "m0.st", "y": "m1.st", "z": "m2.st"}, "plan": [["x", "z"], "y"], "output": "o.st"}"#,
        );
        let (out, report) = execute_to_map(&r).unwrap();
        assert_eq!(report.stages.len(), 2);
        assert_eq!(report.stages[0].node, "fuse(x, z)");
        assert_eq!(report.stages[1].left, "fuse(x, z)");
        let read = |n: &str| read_checkpoint(dir.path().join(n)).unwrap();
        let (x, y, z) = (read("m0.st"), read("m1.st"), read("m2.st"));
        let p = FusionParams::default();
        for name in x.tensors.keys() {
            let (xz, _) = fuse_tensors(name, &x.tensors[name], &z.tensors[name], &p, None).unwrap();
            let (want, _) = fuse_tensors(name, &xz, &y.tensors[name], &p, None).unwrap();
            assert_eq!(out.tensors[name], want);
        }
        let swapped = recipe_for(
            dir.path(),
            r#"{"models": {"x": "m0.st", "y": "m1.st", "z": "m2.st"}, "plan": [["x", "z"], "y"], "swap_roles": true, "output": "o.st"}"#,
        );
        let (out_s, rep_s) = execute_to_map(&swapped).unwrap();
        assert_eq!(rep_s.stages[1].left, "y");
        for name in x.tensors.keys() {
            let (zx, _) = fuse_tensors(name, &z.tensors[name], &x.tensors[name], &p, None).unwrap();
            let (want, _) = fuse_tensors(name, &y.tensors[name], &zx, &p, None).unwrap();
            assert_eq!(out_s.tensors[name], want);
        }
    }

    #[test]
    fn global_granularity_uses_one_threshold() {
        let (dir, _) = setup(600);
        let r = recipe_for(
            dir.path(),
            r#"{"models": {"x": "m0.st", "y": "m1.st"}, "granularity": "global", "output": "o.st"}"#,
        );
        let (_, report) = execute_to_map(&r).unwrap();
        let g = report.stages[0].global.clone().unwrap();
        assert_eq!(g.total, 900);
        for row in &report.tensors {
            if row.elements > 0 {
                assert_eq!(row.threshold, Some(g.threshold));
            }
        }
        assert_eq!(g.updated, report.aggregate.updated);
        let mut capped = r.clone();
        capped.global_cap = 899;
        assert!(matches!(execute_to_map(&capped), Err(Error::CapExceeded { required: 900, cap: 899 })));
    }

    #[test]
    fn incompatible_models_fail_naming_the_node() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.st", &map(0, &[("w", 10)]));
        write(dir.path(), "b.st", &map(1, &[("w", 11)]));
        let r = recipe_for(dir.path(), r#"{"models": {"a": "a.st", "b": "b.st"}, "output": "o.st"}"#);
        match execute(&r) {
            Err(Error::Incompatible { node, report }) => {
                assert_eq!(node.as_deref(), Some("fuse(a, b)"));
                assert_eq!(report.offending_names(), vec!["w"]);
            }
            other => panic!("{other:?}"),
        }
        assert!(!dir.path().join("o.st").exists());
        assert!(!dir.path().join("o.st.partial").exists());
    }

    #[test]
    fn output_dtype_applies_to_the_final_write_only() {
        let (dir, _) = setup(300);
        let r = recipe_for(
            dir.path(),
            r#"{"models": {"x": "m0.st", "y": "m1.st", "z": "m2.st"}, "output_dtype": "BF16", "output": "o.st"}"#,
        );
        execute(&r).unwrap();
        let out = read_checkpoint(&r.output).unwrap();
        let mut f32_recipe = r.clone();
        f32_recipe.output_dtype = None;
        let (full, _) = execute_to_map(&f32_recipe).unwrap();
        for (name, t) in &out.tensors {
            assert_eq!(t.dtype, Dtype::BF16);
            let want = TensorRecord::from_f32(&full.tensors[name].to_f32(), Dtype::BF16, t.shape.clone()).unwrap();
            assert_eq!(*t, want);
        }
    }

    #[test]
    fn baselines_through_manifests() {
        let (dir, _) = setup(200);
        let r = recipe_for(
            dir.path(),
            r#"{"models": {"x": "m0.st", "y": "m1.st"}, "method": "linear", "weights": [1, 0], "output": "o.st"}"#,
        );
        let (out, rep) = execute_to_map(&r).unwrap();
        assert_eq!(out, read_checkpoint(dir.path().join("m0.st")).unwrap());
        assert_eq!(rep.aggregate.updated, 0);
        let r = recipe_for(
            dir.path(),
            r#"{"models": {"b": "m0.st", "x": "m1.st", "y": "m2.st"}, "method": "task_arithmetic", "base": "b", "scales": [0, 0], "output": "o.st"}"#,
        );
        let (out, rep) = execute_to_map(&r).unwrap();
        assert_eq!(out, read_checkpoint(dir.path().join("m0.st")).unwrap());
        assert_eq!(rep.inputs.len(), 3);
        execute(&r).unwrap();
        assert_eq!(read_checkpoint(&r.output).unwrap(), out);
    }

    #[test]
    fn report_serializes_and_renders() {
        let (dir, _) = setup(100);
        let mut r = recipe_for(dir.path(), r#"{"models": {"x": "m0.st", "y": "m1.st"}, "output": "o.st", "report": "r.json"}"#);
        r.resolve_paths(dir.path());
        let report = execute(&r).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.json")).unwrap();
        let back: MergeReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, report);
        assert_eq!(back.recipe["lambda"], 1.5);
        assert_eq!(back.recipe["epsilon"], 1e-8);
        assert_eq!(back.recipe["granularity"], "tensor");
        let table = report.render_table();
        assert!(table.lines().next().unwrap().starts_with("tensor"));
        assert!(table.contains("TOTAL"));
        let widths: Vec<usize> = table.lines().take(4).map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{table}");
    }

    #[test]
    fn plans_compare() {
        let (dir, _) = setup(500);
        let body = |plan: &str| {
            recipe_for(
                dir.path(),
                &format!(r#"{{"models": {{"m": "m0.st", "s": "m1.st", "c": "m2.st"}}, "plan": {plan}, "output": "o.st"}}"#),
            )
        };
        let c = compare_plans(&[body(r#"[["m", "s"], "c"]"#), body(r#"[["m", "c"], "s"]"#), body(r#"[["m", "s"], "c"]"#)]).unwrap();
        assert_eq!(c.plans.len(), 3);
        assert_eq!(c.differences.len(), 3);
        let d02 = c.differences.iter().find(|d| d.a == 0 && d.b == 2).unwrap();
        assert_eq!(d02.differing, 0);
        assert!(c.render_table().contains("fuse(fuse(m, s), c)"));
        assert!(compare_plans(&[body(r#"["m", "s"]"#)]).is_err());
    }
}
