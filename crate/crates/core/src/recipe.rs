//! Merge manifests.
//!
//! A manifest is a JSON object:
//!
//! ```json
//! {
//!   "models": {"math": "math.safetensors", "science": "sci.safetensors", "coding": "code.safetensors"},
//!   "method": "fusion",
//!   "plan": [["math", "science"], "coding"],
//!   "lambda": 1.5,
//!   "epsilon": 1e-8,
//!   "granularity": "tensor",
//!   "output": "merged.safetensors",
//!   "output_dtype": "BF16"
//! }
//! ```
//!
//! `method` is `fusion` (default), `linear` or `task_arithmetic`. Fusion
//! plans are nested two-element arrays; each pair merges its first element
//! (Left) with its second (Right). Without a plan, declared models are
//! folded left to right. Baseline plans are flat name lists.
//!
//! Other keys: `fixed_threshold`, `swap_roles`, `global_cap` (fusion),
//! `weights` (linear), `base` and `scales` (task arithmetic), `report`.
//! Unknown keys are rejected.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::baselines::{validate_linear_weights, validate_scales, BaselineMethod, BaselineParams};
use crate::dtype::Dtype;
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, Granularity, DEFAULT_EPSILON, DEFAULT_LAMBDA};
use crate::quantile::DEFAULT_GLOBAL_CAP;

const KEYS: &[&str] = &[
    "models",
    "method",
    "plan",
    "lambda",
    "epsilon",
    "granularity",
    "fixed_threshold",
    "swap_roles",
    "global_cap",
    "weights",
    "scales",
    "base",
    "output",
    "output_dtype",
    "report",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Fusion,
    Linear,
    TaskArithmetic,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Fusion => "fusion",
            MergeMethod::Linear => "linear",
            MergeMethod::TaskArithmetic => "task_arithmetic",
        }
    }
}

/// Binary fold tree over model names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanNode {
    Model(String),
    Fuse(Box<PlanNode>, Box<PlanNode>),
}

impl PlanNode {
    pub fn fuse(left: PlanNode, right: PlanNode) -> Self {
        PlanNode::Fuse(Box::new(left), Box::new(right))
    }

    pub fn model(name: &str) -> Self {
        PlanNode::Model(name.to_owned())
    }

    /// Left fold: `((m1, m2), m3), ...`.
    pub fn left_fold<S: AsRef<str>>(names: &[S]) -> Option<Self> {
        let mut it = names.iter();
        let mut acc = PlanNode::model(it.next()?.as_ref());
        for n in it {
            acc = PlanNode::fuse(acc, PlanNode::model(n.as_ref()));
        }
        matches!(acc, PlanNode::Fuse(..)).then_some(acc)
    }

    pub fn leaves(&self) -> Vec<&str> {
        match self {
            PlanNode::Model(n) => vec![n.as_str()],
            PlanNode::Fuse(l, r) => {
                let mut v = l.leaves();
                v.extend(r.leaves());
                v
            }
        }
    }

    pub fn to_json(&self) -> Value {
        match self {
            PlanNode::Model(n) => Value::String(n.clone()),
            PlanNode::Fuse(l, r) => Value::Array(vec![l.to_json(), r.to_json()]),
        }
    }
}

impl fmt::Display for PlanNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanNode::Model(n) => f.write_str(n),
            PlanNode::Fuse(l, r) => write!(f, "fuse({l}, {r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Plan {
    /// Pairwise fusion tree.
    Fold(PlanNode),
    /// Flat member list for baselines (experts only for task arithmetic).
    Members(Vec<String>),
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Plan::Fold(n) => n.fmt(f),
            Plan::Members(m) => write!(f, "[{}]", m.join(", ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeRecipe {
    /// Declared models in document order.
    pub models: Vec<(String, PathBuf)>,
    pub method: MergeMethod,
    pub plan: Plan,
    pub fusion: FusionParams,
    pub baseline: Option<BaselineParams>,
    /// Put the accumulated model on the Right at every fold node.
    pub swap_roles: bool,
    pub global_cap: u64,
    pub output: PathBuf,
    pub output_dtype: Option<Dtype>,
    pub report: Option<PathBuf>,
}

impl MergeRecipe {
    pub fn model_path(&self, name: &str) -> Option<&Path> {
        self.models.iter().find(|(n, _)| n == name).map(|(_, p)| p.as_path())
    }

    /// A one-node fusion recipe over two files.
    pub fn pair(left: impl Into<PathBuf>, right: impl Into<PathBuf>, fusion: FusionParams, output: impl Into<PathBuf>) -> Self {
        MergeRecipe {
            models: vec![("left".into(), left.into()), ("right".into(), right.into())],
            method: MergeMethod::Fusion,
            plan: Plan::Fold(PlanNode::fuse(PlanNode::model("left"), PlanNode::model("right"))),
            fusion,
            baseline: None,
            swap_roles: false,
            global_cap: DEFAULT_GLOBAL_CAP,
            output: output.into(),
            output_dtype: None,
            report: None,
        }
    }

    /// Resolve relative model, output and report paths against `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        for (_, p) in &mut self.models {
            fix(p);
        }
        fix(&mut self.output);
        if let Some(r) = &mut self.report {
            fix(r);
        }
    }

    /// Back to manifest form; `parse_recipe(to_json())` reproduces `self`.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        let models: Map<String, Value> = self
            .models
            .iter()
            .map(|(n, p)| (n.clone(), Value::String(p.display().to_string())))
            .collect();
        m.insert("models".into(), Value::Object(models));
        m.insert("method".into(), self.method.as_str().into());
        match &self.plan {
            Plan::Fold(n) => m.insert("plan".into(), n.to_json()),
            Plan::Members(v) => m.insert("plan".into(), v.clone().into()),
        };
        match self.method {
            MergeMethod::Fusion => {
                m.insert("lambda".into(), self.fusion.lambda.into());
                m.insert("epsilon".into(), self.fusion.epsilon.into());
                m.insert("granularity".into(), self.fusion.granularity.as_str().into());
                if let Some(t) = self.fusion.fixed_threshold {
                    m.insert("fixed_threshold".into(), t.into());
                }
                m.insert("swap_roles".into(), self.swap_roles.into());
                m.insert("global_cap".into(), self.global_cap.into());
            }
            MergeMethod::Linear => {
                let b = self.baseline.as_ref().expect("linear recipe has baseline params");
                m.insert("weights".into(), b.weights.clone().into());
            }
            MergeMethod::TaskArithmetic => {
                let b = self.baseline.as_ref().expect("task arithmetic recipe has baseline params");
                m.insert("scales".into(), b.weights.clone().into());
                m.insert("base".into(), b.base.clone().into());
            }
        }
        m.insert("output".into(), self.output.display().to_string().into());
        if let Some(d) = self.output_dtype {
            m.insert("output_dtype".into(), d.as_str().into());
        }
        if let Some(r) = &self.report {
            m.insert("report".into(), r.display().to_string().into());
        }
        Value::Object(m)
    }
}

fn take_f64(obj: &Map<String, Value>, key: &str) -> Result<Option<f64>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v
            .as_f64()
            .map(Some)
            .ok_or_else(|| Error::recipe(key, format!("expected a number, got {v}"))),
    }
}

fn take_str<'a>(obj: &'a Map<String, Value>, key: &str) -> Result<Option<&'a str>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(v) => Err(Error::recipe(key, format!("expected a string, got {v}"))),
    }
}

fn take_f64_list(obj: &Map<String, Value>, key: &str) -> Result<Option<Vec<f64>>> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_f64()
                    .ok_or_else(|| Error::recipe(format!("{key}[{i}]"), format!("expected a number, got {v}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
        Some(v) => Err(Error::recipe(key, format!("expected an array of numbers, got {v}"))),
    }
}

fn parse_fold(v: &Value, path: &str, declared: &HashSet<&str>, seen: &mut HashSet<String>) -> Result<PlanNode> {
    match v {
        Value::String(name) => {
            if !declared.contains(name.as_str()) {
                return Err(Error::recipe(path, format!("undeclared model name {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::recipe(path, format!("model {name:?} appears more than once in the plan")));
            }
            Ok(PlanNode::Model(name.clone()))
        }
        Value::Array(items) if items.len() == 2 => Ok(PlanNode::fuse(
            parse_fold(&items[0], &format!("{path}[0]"), declared, seen)?,
            parse_fold(&items[1], &format!("{path}[1]"), declared, seen)?,
        )),
        Value::Array(items) => Err(Error::recipe(
            path,
            format!("fusion merges exactly two models per node, found {} children", items.len()),
        )),
        other => Err(Error::recipe(path, format!("expected a model name or a two-element array, got {other}"))),
    }
}

fn parse_members(v: &Value, declared: &HashSet<&str>) -> Result<Vec<String>> {
    let items = v
        .as_array()
        .ok_or_else(|| Error::recipe("plan", "baseline plans are flat arrays of model names"))?;
    let mut seen = HashSet::new();
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = format!("plan[{i}]");
            let name = item
                .as_str()
                .ok_or_else(|| Error::recipe(&path, format!("expected a model name, got {item}")))?;
            if !declared.contains(name) {
                return Err(Error::recipe(&path, format!("undeclared model name {name:?}")));
            }
            if !seen.insert(name) {
                return Err(Error::recipe(&path, format!("model {name:?} listed more than once")));
            }
            Ok(name.to_owned())
        })
        .collect()
}

fn reject_keys(obj: &Map<String, Value>, keys: &[&str], method: MergeMethod) -> Result<()> {
    for k in keys {
        if obj.get(*k).is_some_and(|v| !v.is_null()) {
            return Err(Error::recipe(*k, format!("not applicable to method {:?}", method.as_str())));
        }
    }
    Ok(())
}

/// Parse and validate a manifest. Paths are kept as written.
pub fn parse_recipe(text: &str) -> Result<MergeRecipe> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::recipe("<document>", e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| Error::recipe("<document>", "manifest must be a JSON object"))?;
    if let Some(k) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Error::recipe(k, "unknown field"));
    }

    let models_obj = obj
        .get("models")
        .ok_or_else(|| Error::recipe("models", "missing"))?
        .as_object()
        .ok_or_else(|| Error::recipe("models", "expected an object mapping names to paths"))?;
    let mut models = Vec::with_capacity(models_obj.len());
    for (name, path) in models_obj {
        let field = format!("models.{name}");
        if name.is_empty() {
            return Err(Error::recipe(field, "model names must be non-empty"));
        }
        let p = path
            .as_str()
            .ok_or_else(|| Error::recipe(&field, format!("expected a path string, got {path}")))?;
        models.push((name.clone(), PathBuf::from(p)));
    }
    let declared: HashSet<&str> = models.iter().map(|(n, _)| n.as_str()).collect();

    let method = match take_str(obj, "method")? {
        None | Some("fusion") => MergeMethod::Fusion,
        Some("linear") => MergeMethod::Linear,
        Some("task_arithmetic") => MergeMethod::TaskArithmetic,
        Some(other) => {
            return Err(Error::recipe(
                "method",
                format!("unknown method {other:?}; expected fusion, linear or task_arithmetic"),
            ))
        }
    };

    let output = take_str(obj, "output")?
        .ok_or_else(|| Error::recipe("output", "missing"))
        .map(PathBuf::from)?;
    let output_dtype = take_str(obj, "output_dtype")?
        .map(|s| s.parse::<Dtype>().map_err(|e| Error::recipe("output_dtype", e.to_string())))
        .transpose()?;
    let report = take_str(obj, "report")?.map(PathBuf::from);

    let mut fusion = FusionParams::default();
    let mut baseline = None;
    let mut swap_roles = false;
    let mut global_cap = DEFAULT_GLOBAL_CAP;

    let plan = match method {
        MergeMethod::Fusion => {
            reject_keys(obj, &["weights", "scales", "base"], method)?;
            fusion.lambda = take_f64(obj, "lambda")?.unwrap_or(DEFAULT_LAMBDA);
            if !fusion.lambda.is_finite() || fusion.lambda < 0.0 {
                return Err(Error::recipe("lambda", format!("must be finite and >= 0, got {}", fusion.lambda)));
            }
            fusion.epsilon = take_f64(obj, "epsilon")?.unwrap_or(DEFAULT_EPSILON);
            if !fusion.epsilon.is_finite() || fusion.epsilon <= 0.0 {
                return Err(Error::recipe("epsilon", format!("must be finite and > 0, got {}", fusion.epsilon)));
            }
            if let Some(g) = take_str(obj, "granularity")? {
                fusion.granularity = g.parse::<Granularity>().map_err(|e| Error::recipe("granularity", e.to_string()))?;
            }
            fusion.fixed_threshold = take_f64(obj, "fixed_threshold")?;
            if fusion.fixed_threshold.is_some_and(|t| !t.is_finite()) {
                return Err(Error::recipe("fixed_threshold", "must be finite"));
            }
            swap_roles = match obj.get("swap_roles") {
                None | Some(Value::Null) => false,
                Some(Value::Bool(b)) => *b,
                Some(v) => return Err(Error::recipe("swap_roles", format!("expected a boolean, got {v}"))),
            };
            if let Some(v) = obj.get("global_cap").filter(|v| !v.is_null()) {
                global_cap = v
                    .as_u64()
                    .filter(|&c| c > 0)
                    .ok_or_else(|| Error::recipe("global_cap", format!("expected a positive integer, got {v}")))?;
            }
            let node = match obj.get("plan").filter(|v| !v.is_null()) {
                Some(v) => parse_fold(v, "plan", &declared, &mut HashSet::new())?,
                None => {
                    let names: Vec<&str> = models.iter().map(|(n, _)| n.as_str()).collect();
                    PlanNode::left_fold(&names)
                        .ok_or_else(|| Error::recipe("models", "fusion needs at least two models"))?
                }
            };
            if matches!(node, PlanNode::Model(_)) {
                return Err(Error::recipe("plan", "a plan must merge at least two models"));
            }
            Plan::Fold(node)
        }
        MergeMethod::Linear => {
            reject_keys(obj, &["lambda", "epsilon", "granularity", "fixed_threshold", "swap_roles", "global_cap", "scales", "base"], method)?;
            let members = match obj.get("plan").filter(|v| !v.is_null()) {
                Some(v) => parse_members(v, &declared)?,
                None => models.iter().map(|(n, _)| n.clone()).collect(),
            };
            let weights = take_f64_list(obj, "weights")?
                .unwrap_or_else(|| vec![1.0 / members.len().max(1) as f64; members.len()]);
            validate_linear_weights(&weights, members.len()).map_err(|e| Error::recipe("weights", e.to_string()))?;
            baseline = Some(BaselineParams {
                method: BaselineMethod::Linear,
                weights,
                base: None,
            });
            Plan::Members(members)
        }
        MergeMethod::TaskArithmetic => {
            reject_keys(obj, &["lambda", "epsilon", "granularity", "fixed_threshold", "swap_roles", "global_cap", "weights"], method)?;
            let base = take_str(obj, "base")?.ok_or_else(|| Error::recipe("base", "task arithmetic needs a base model"))?;
            if !declared.contains(base) {
                return Err(Error::recipe("base", format!("undeclared model name {base:?}")));
            }
            let experts = match obj.get("plan").filter(|v| !v.is_null()) {
                Some(v) => parse_members(v, &declared)?,
                None => models.iter().map(|(n, _)| n.clone()).filter(|n| n != base).collect(),
            };
            if let Some(i) = experts.iter().position(|e| e == base) {
                return Err(Error::recipe(format!("plan[{i}]"), "the base model cannot also be an expert"));
            }
            let scales = take_f64_list(obj, "scales")?.unwrap_or_else(|| vec![1.0; experts.len()]);
            validate_scales(&scales, experts.len()).map_err(|e| Error::recipe("scales", e.to_string()))?;
            baseline = Some(BaselineParams {
                method: BaselineMethod::TaskArithmetic,
                weights: scales,
                base: Some(base.to_owned()),
            });
            Plan::Members(experts)
        }
    };

    Ok(MergeRecipe {
        models,
        method,
        plan,
        fusion,
        baseline,
        swap_roles,
        global_cap,
        output,
        output_dtype,
        report,
    })
}

/// Read a manifest file; relative paths resolve against its directory.
pub fn load_recipe(path: impl AsRef<Path>) -> Result<MergeRecipe> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut recipe = parse_recipe(&text)?;
    if let Some(dir) = path.parent() {
        recipe.resolve_paths(dir);
    }
    Ok(recipe)
}
