use std::path::Path;

use fusekit_core::diff::diff_files;
use fusekit_core::{
    execute, fuse_tensors, load_recipe, perturb_expert, read_checkpoint, write_checkpoint, write_synthetic_checkpoint,
    CheckpointReader, Error, FusionParams, SynthSpec, TensorMap,
};

fn base_spec(seed: u64) -> SynthSpec {
    SynthSpec::parse(&format!(
        r#"{{"seed": {seed}, "metadata": {{"format": "pt"}}, "tensors": [
            {{"name": "embed", "shape": [64, 32], "distribution": {{"normal": {{"mean": 0, "stddev": 0.5}}}}}},
            {{"name": "head", "shape": [32], "dtype": "BF16", "distribution": {{"uniform": {{"lo": -1, "hi": 1}}}}}},
            {{"name": "scale", "shape": [], "dtype": "F64", "distribution": {{"normal": {{"mean": 1, "stddev": 0.1}}}}}}
        ]}}"#
    ))
    .unwrap()
}

fn experts(dir: &Path) -> TensorMap {
    let base = fusekit_core::generate_synthetic_checkpoint(&base_spec(5)).unwrap();
    for (name, seed) in [("a", 1), ("b", 2), ("c", 3), ("d", 4)] {
        write_checkpoint(&perturb_expert(&base, seed, 0.4, 0.3).unwrap(), dir.join(format!("{name}.st"))).unwrap();
    }
    base
}

#[test]
fn streamed_synthetic_file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.st");
    write_synthetic_checkpoint(&base_spec(9), &p).unwrap();
    let map = read_checkpoint(&p).unwrap();
    assert_eq!(map, fusekit_core::generate_synthetic_checkpoint(&base_spec(9)).unwrap());
    assert_eq!(map.metadata.as_ref().unwrap()["format"], "pt");
    let again = dir.path().join("again.st");
    write_checkpoint(&map, &again).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&again).unwrap());
    let reader = CheckpointReader::open(&p).unwrap();
    assert_eq!(reader.read_tensor("head").unwrap(), map.tensors["head"]);
}

#[test]
fn balanced_plan_from_manifest_matches_manual_composition() {
    let dir = tempfile::tempdir().unwrap();
    experts(dir.path());
    let manifest = dir.path().join("plan.json");
    std::fs::write(
        &manifest,
        r#"{"models": {"a": "a.st", "b": "b.st", "c": "c.st", "d": "d.st"}, "plan": [["a", "b"], ["c", "d"]], "lambda": 0.5, "output": "out/merged.st", "report": "out/report.json"}"#,
    )
    .unwrap();
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    let recipe = load_recipe(&manifest).unwrap();
    let report = execute(&recipe).unwrap();
    assert_eq!(report.stages.len(), 3);
    assert_eq!(report.stages[2].left, "fuse(a, b)");
    assert_eq!(report.stages[2].right, "fuse(c, d)");

    let m = |n: &str| read_checkpoint(dir.path().join(format!("{n}.st"))).unwrap();
    let (a, b, c, d) = (m("a"), m("b"), m("c"), m("d"));
    let p = FusionParams { lambda: 0.5, ..FusionParams::default() };
    let out = read_checkpoint(dir.path().join("out/merged.st")).unwrap();
    assert_eq!(out.metadata, a.metadata);
    for name in a.tensors.keys() {
        let ab = fuse_tensors(name, &a.tensors[name], &b.tensors[name], &p, None).unwrap().0;
        let cd = fuse_tensors(name, &c.tensors[name], &d.tensors[name], &p, None).unwrap().0;
        let (want, st) = fuse_tensors(name, &ab, &cd, &p, None).unwrap();
        assert_eq!(out.tensors[name], want, "{name}");
        let row = report.tensors.iter().find(|r| &r.name == name).unwrap();
        assert_eq!(row.updated, st.updated);
    }
    assert!(dir.path().join("out/report.json").exists());
}

#[test]
fn fused_output_only_contains_input_elements() {
    let dir = tempfile::tempdir().unwrap();
    experts(dir.path());
    let recipe = fusekit_core::MergeRecipe::pair(
        dir.path().join("a.st"),
        dir.path().join("b.st"),
        FusionParams::default(),
        dir.path().join("o.st"),
    );
    let report = execute(&recipe).unwrap();
    let from_left = diff_files(dir.path().join("a.st"), dir.path().join("o.st"), 0.0).unwrap();
    assert_eq!(from_left.total_differing(), report.aggregate.updated);
    let (a, b, o) = (
        read_checkpoint(dir.path().join("a.st")).unwrap(),
        read_checkpoint(dir.path().join("b.st")).unwrap(),
        read_checkpoint(dir.path().join("o.st")).unwrap(),
    );
    for (name, t) in &o.tensors {
        let w = t.dtype.byte_width();
        for (i, e) in t.data.chunks(w).enumerate() {
            let span = i * w..(i + 1) * w;
            assert!(e == &a.tensors[name].data[span.clone()] || e == &b.tensors[name].data[span]);
        }
    }
}

#[test]
fn corrupt_model_in_plan_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    experts(dir.path());
    let bytes = std::fs::read(dir.path().join("c.st")).unwrap();
    std::fs::write(dir.path().join("c.st"), &bytes[..bytes.len() - 1]).unwrap();
    let manifest = dir.path().join("plan.json");
    std::fs::write(&manifest, r#"{"models": {"a": "a.st", "b": "b.st", "c": "c.st"}, "output": "o.st"}"#).unwrap();
    let err = execute(&load_recipe(&manifest).unwrap()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert!(!dir.path().join("o.st").exists());
}
