//! `fusekit`: merge, fuse, inspect, diff and generate checkpoints.
//!
//! Exit codes: 0 success, 1 validation or compatibility error (also bad
//! usage and differing `diff` inputs), 2 I/O or format error, 3 internal
//! error. Data goes to stdout, diagnostics to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fusekit_core::diff::{diff_files, DiffReport};
use fusekit_core::{
    compare_plans, execute, load_recipe, CheckpointReader, Error, ErrorKind, FusionParams, Granularity, MergeRecipe,
    MergeReport, SynthSpec,
};

const EXIT_OK: u8 = 0;
const EXIT_VALIDATION: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fusekit", version, about = "Importance-gated checkpoint merging")]
struct Cli {
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute a merge manifest.
    Merge {
        recipe: PathBuf,
        /// Report path (default: manifest `report`, else `<output>.report.json`).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fuse two checkpoints without a manifest.
    Fuse {
        left: PathBuf,
        right: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = fusekit_core::fusion::DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long, default_value_t = fusekit_core::fusion::DEFAULT_EPSILON)]
        epsilon: f64,
        /// `tensor` or `global`.
        #[arg(long, default_value = "tensor")]
        granularity: String,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_name = "F")]
        fixed_threshold: Option<f64>,
    },
    /// Print a checkpoint's tensor table and metadata.
    Inspect {
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Count differing elements per tensor; exits 1 when anything differs.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// 0 compares bit for bit.
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        #[arg(long)]
        json: bool,
    },
    /// Generate a checkpoint from a synthetic spec.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several manifests over the same models and compare their outputs.
    Compare {
        #[arg(required = true, num_args = 2..)]
        recipes: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => EXIT_VALIDATION,
        ErrorKind::Io => EXIT_IO,
        ErrorKind::Internal => EXIT_INTERNAL,
    }
}

fn default_report_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".report.json");
    PathBuf::from(s)
}

fn print_summary(report: &MergeReport) {
    print!("{}", report.render_table());
    println!(
        "updated {} of {} elements (ratio {:.6}) in {:.3}s",
        report.aggregate.updated, report.aggregate.elements, report.aggregate.update_ratio, report.aggregate.wall_seconds
    );
}

fn run_recipe(mut recipe: MergeRecipe, report: Option<PathBuf>) -> Result<u8, Error> {
    if report.is_some() {
        recipe.report = report;
    }
    let report = execute(&recipe)?;
    print_summary(&report);
    if let Some(p) = &recipe.report {
        eprintln!("report written to {}", p.display());
    }
    eprintln!("output written to {}", recipe.output.display());
    Ok(EXIT_OK)
}

fn cmd_merge(path: &Path, report: Option<PathBuf>) -> Result<u8, Error> {
    let recipe = load_recipe(path)?;
    let report = report.or_else(|| recipe.report.clone()).unwrap_or_else(|| default_report_path(&recipe.output));
    run_recipe(recipe, Some(report))
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuse(
    left: PathBuf,
    right: PathBuf,
    out: PathBuf,
    lambda: f64,
    epsilon: f64,
    granularity: &str,
    report: Option<PathBuf>,
    fixed_threshold: Option<f64>,
) -> Result<u8, Error> {
    let params = FusionParams {
        lambda,
        epsilon,
        granularity: granularity.parse::<Granularity>()?,
        fixed_threshold,
    };
    params.validate()?;
    run_recipe(MergeRecipe::pair(left, right, params, out), report)
}

fn cmd_inspect(path: &Path, json: bool) -> Result<u8, Error> {
    let reader = CheckpointReader::open(path)?;
    let header = reader.header();
    let total: u64 = header.entries.iter().map(|e| e.shape.iter().product::<usize>() as u64).sum();
    if json {
        let tensors: Vec<serde_json::Value> = header
            .entries
            .iter()
            .map(|e| {
                serde_json::json!({
                    "name": e.name,
                    "dtype": e.dtype.as_str(),
                    "shape": e.shape,
                    "elements": e.shape.iter().product::<usize>(),
                    "data_offsets": e.data_offsets,
                })
            })
            .collect();
        let doc = serde_json::json!({
            "path": path.display().to_string(),
            "data_start": header.data_start,
            "metadata": header.metadata,
            "tensors": tensors,
            "total_elements": total,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("inspect output serializes"));
        return Ok(EXIT_OK);
    }
    let rows: Vec<[String; 5]> = header
        .entries
        .iter()
        .map(|e| {
            [
                e.name.clone(),
                e.dtype.to_string(),
                format!("{:?}", e.shape),
                e.shape.iter().product::<usize>().to_string(),
                format!("{}..{}", e.data_offsets[0], e.data_offsets[1]),
            ]
        })
        .collect();
    let headers = ["tensor", "dtype", "shape", "elements", "bytes"];
    let mut w = headers.map(str::len);
    for r in &rows {
        for (wi, c) in w.iter_mut().zip(r) {
            *wi = (*wi).max(c.len());
        }
    }
    println!("{}", path.display());
    println!(
        "{:<a$}  {:<b$}  {:<c$}  {:>d$}  {:>e$}",
        headers[0], headers[1], headers[2], headers[3], headers[4],
        a = w[0], b = w[1], c = w[2], d = w[3], e = w[4]
    );
    for r in &rows {
        println!(
            "{:<a$}  {:<b$}  {:<c$}  {:>d$}  {:>e$}",
            r[0], r[1], r[2], r[3], r[4],
            a = w[0], b = w[1], c = w[2], d = w[3], e = w[4]
        );
    }
    println!("{} tensors, {} elements, data starts at byte {}", rows.len(), total, header.data_start);
    if let Some(meta) = &header.metadata {
        println!("metadata:");
        for (k, v) in meta {
            println!("  {k} = {v}");
        }
    }
    Ok(EXIT_OK)
}

fn print_diff(report: &DiffReport) {
    let w = report.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
    println!("{:<w$}  {:>12}  {:>12}  {:>14}", "tensor", "elements", "differing", "max_abs_diff");
    for t in &report.tensors {
        println!("{:<w$}  {:>12}  {:>12}  {:>14.6e}", t.name, t.elements, t.differing, t.max_abs_diff);
    }
    for n in &report.compat.missing_left {
        println!("{n:<w$}  mismatch: only in second file");
    }
    for n in &report.compat.missing_right {
        println!("{n:<w$}  mismatch: only in first file");
    }
    for m in &report.compat.shape_mismatch {
        println!("{:<w$}  mismatch: shape {} vs {}", m.name, m.left, m.right);
    }
    for m in &report.compat.dtype_mismatch {
        println!("{:<w$}  mismatch: dtype {} vs {}", m.name, m.left, m.right);
    }
    println!(
        "{} of {} compared elements differ (tolerance {})",
        report.total_differing(),
        report.total_elements(),
        report.tolerance
    );
}

fn cmd_diff(a: &Path, b: &Path, tolerance: f64, json: bool) -> Result<u8, Error> {
    let report = diff_files(a, b, tolerance)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("diff output serializes"));
    } else {
        print_diff(&report);
    }
    Ok(if report.identical() { EXIT_OK } else { EXIT_VALIDATION })
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<u8, Error> {
    let text = std::fs::read_to_string(spec).map_err(|e| Error::Io {
        path: spec.to_path_buf(),
        source: e,
    })?;
    let spec = SynthSpec::parse(&text)?;
    fusekit_core::write_synthetic_checkpoint(&spec, out)?;
    let total: u64 = spec.layout().iter().map(|t| t.elements() as u64).sum();
    println!("wrote {} tensors, {} elements to {}", spec.tensors.len(), total, out.display());
    Ok(EXIT_OK)
}

fn cmd_compare(paths: &[PathBuf], json: bool) -> Result<u8, Error> {
    let recipes = paths.iter().map(load_recipe).collect::<Result<Vec<_>, _>>()?;
    let cmp = compare_plans(&recipes)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&cmp).expect("comparison serializes"));
    } else {
        print!("{}", cmp.render_table());
    }
    Ok(EXIT_OK)
}

fn dispatch(command: Command) -> Result<u8, Error> {
    match command {
        Command::Merge { recipe, report } => cmd_merge(&recipe, report),
        Command::Fuse {
            left,
            right,
            out,
            lambda,
            epsilon,
            granularity,
            report,
            fixed_threshold,
        } => cmd_fuse(left, right, out, lambda, epsilon, &granularity, report, fixed_threshold),
        Command::Inspect { checkpoint, json } => cmd_inspect(&checkpoint, json),
        Command::Diff { a, b, tolerance, json } => cmd_diff(&a, &b, tolerance, json),
        Command::Synth { spec, out } => cmd_synth(&spec, &out),
        Command::Compare { recipes, json } => cmd_compare(&recipes, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK });
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_VALIDATION);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::from(EXIT_INTERNAL);
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
