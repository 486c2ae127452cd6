//! `floz generate | estimate | validate`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{analytic_log_evidence, draw_samples, BenchmarkSpec, Family, GroundTruth, TruthMethod};
use crate::error::{FlozError, Result};
use crate::pipeline::{run_pipeline, FlowPreset, ResultDocument, RunConfig};
use crate::sampleio::{load_sample_set, write_sample_set, PriorBox, SamplePaths, SharpEdge, Side};

pub const THREADS_ENV: &str = "FLOZ_THREADS";

#[derive(Parser, Debug)]
#[command(name = "floz", version, about = "Bayesian evidence from posterior samples with a normalizing flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw samples from a benchmark spec and compute its ground truth.
    Generate {
        spec: PathBuf,
        /// Output prefix; writes `<prefix>.samples.csv`, `.meta.json`, `.truth.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the evidence of a sample set.
    Estimate(EstimateArgs),
    /// Run a matrix of benchmark cases and summarize deviations.
    Validate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
}

#[derive(Args, Debug, Default, Clone)]
pub struct EstimateArgs {
    #[arg(long)]
    pub samples: PathBuf,
    #[arg(long)]
    pub meta: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training history CSV; defaults to `<out>.history.csv`.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Save the trained flow here.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// `default` or `high-dim`.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<FlowPreset>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub no_reflect: bool,
    #[arg(long)]
    pub no_wrap: bool,
    #[arg(long)]
    pub no_whiten: bool,
}

fn parse_preset(s: &str) -> std::result::Result<FlowPreset, String> {
    match s {
        "default" => Ok(FlowPreset::Default),
        "high-dim" | "high_dim" => Ok(FlowPreset::HighDim),
        other => Err(format!("unknown preset `{other}` (expected default or high-dim)")),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| FlozError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| FlozError::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    pub family: String,
    pub d: usize,
    pub prior: PriorBox,
    #[serde(flatten)]
    pub truth: GroundTruth,
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub paths: SamplePaths,
    pub truth_path: PathBuf,
    pub truth: GroundTruth,
}

pub fn cmd_generate(spec_path: &Path, out_prefix: &Path) -> Result<GenerateOutput> {
    let spec = BenchmarkSpec::from_json_str(&read_to_string(spec_path)?)?;
    generate_from_spec(&spec, out_prefix)
}

pub fn generate_from_spec(spec: &BenchmarkSpec, out_prefix: &Path) -> Result<GenerateOutput> {
    let set = draw_samples(spec)?;
    let truth = analytic_log_evidence(spec)?;
    let paths = write_sample_set(&set, &spec.metadata()?, out_prefix)?;
    let truth_path = with_suffix(out_prefix, ".truth.json");
    write_json(
        &truth_path,
        &TruthDocument {
            family: spec.family.name().into(),
            d: spec.d,
            prior: spec.prior.clone(),
            truth: truth.clone(),
        },
    )?;
    Ok(GenerateOutput {
        paths,
        truth_path,
        truth,
    })
}

/// File config with command-line overrides applied.
pub fn resolve_run_config(args: &EstimateArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::from_json_str(&read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.max_epochs {
        cfg.trainer.max_epochs = v;
    }
    if let Some(v) = args.patience {
        cfg.trainer.patience = v;
    }
    if let Some(v) = args.batch_size {
        cfg.trainer.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.trainer.learning_rate = v;
    }
    if args.tolerance.is_some() {
        cfg.trainer.tolerance = args.tolerance;
    }
    if let Some(p) = args.preset {
        cfg.flow.preset = p;
    }
    if args.delta.is_some() {
        cfg.delta = args.delta;
    }
    cfg.preprocess.reflect_sharp_edges &= !args.no_reflect;
    cfg.preprocess.wrap_periodic &= !args.no_wrap;
    cfg.preprocess.whiten &= !args.no_whiten;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<ResultDocument> {
    let start = Instant::now();
    let cfg = resolve_run_config(args)?;
    let (set, meta) = load_sample_set(&args.samples, &args.meta)?;
    let out = run_pipeline(&set, &meta, &cfg)?;
    let doc = out.document(start.elapsed().as_secs_f64());
    write_json(&args.out, &doc)?;
    let history = args
        .history
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".history.csv"));
    out.history.save_csv(&history)?;
    if let Some(p) = &args.checkpoint {
        out.model.save(p)?;
    }
    Ok(doc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixCase {
    pub family: String,
    pub d: usize,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    /// Declare the natural sharp edges of the family (exponential lower
    /// bounds); defaults to true.
    #[serde(default)]
    pub sharp_edges: Option<bool>,
    /// Per-case run configuration; falls back to the matrix-level one.
    #[serde(default)]
    pub config: Option<RunConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationMatrix {
    pub cases: Vec<MatrixCase>,
    #[serde(default)]
    pub config: RunConfig,
}

impl ValidationMatrix {
    /// The four families in two dimensions with `10⁴` samples each.
    pub fn default_matrix(seeds: Vec<u64>) -> Self {
        let cases = ["gaussian", "gaussian_mixture5", "exponential", "rosenbrock"]
            .iter()
            .map(|f| MatrixCase {
                family: f.to_string(),
                d: 2,
                n_samples: 10_000,
                seeds: seeds.clone(),
                sharp_edges: None,
                config: None,
            })
            .collect();
        ValidationMatrix {
            cases,
            config: RunConfig::default(),
        }
    }
}

/// The benchmark used for a matrix entry: paper parameters in two
/// dimensions, deterministic extensions elsewhere.
pub fn benchmark_for(family: &str, d: usize, n: usize, seed: u64, sharp: bool) -> Result<BenchmarkSpec> {
    if d == 0 {
        return Err(FlozError::Schema("d: must be at least 1".into()));
    }
    let spec = match (family, d) {
        ("gaussian", 2) => BenchmarkSpec::paper_gaussian_2d(n, seed),
        ("gaussian", _) => BenchmarkSpec::diagonal_gaussian(d, n, seed),
        ("gaussian_mixture5", 2) => BenchmarkSpec::paper_mixture_2d(n, seed),
        ("exponential", 2) => BenchmarkSpec::paper_exponential_2d(n, seed, sharp),
        ("exponential", _) => {
            let rates: Vec<f64> = (0..d).map(|i| 0.005 * (1 + i % 3) as f64).collect();
            BenchmarkSpec {
                family: Family::Exponential { rates },
                d,
                prior: PriorBox {
                    lower: vec![0.0; d],
                    upper: vec![6000.0; d],
                },
                n_samples: n,
                seed,
                sharp_edges: if sharp {
                    (0..d).map(|dim| SharpEdge { dim, side: Side::Lower }).collect()
                } else {
                    Vec::new()
                },
            }
        }
        ("rosenbrock", _) => BenchmarkSpec::paper_rosenbrock(d, n, seed),
        (f, d) => {
            return Err(FlozError::Schema(format!(
                "cases: no benchmark for family `{f}` in d = {d}"
            )))
        }
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub family: String,
    pub d: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub log_z: Option<f64>,
    pub uncertainty: Option<f64>,
    pub truth_log_z: Option<f64>,
    pub truth_method: Option<TruthMethod>,
    /// `(log_z − truth) / uncertainty`.
    pub deviation_sigma: Option<f64>,
    pub abs_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub family: String,
    pub d: usize,
    pub n_samples: usize,
    pub n_seeds: usize,
    pub mean_log_z: Option<f64>,
    /// Standard deviation of `log_z` across seeds.
    pub seed_spread: Option<f64>,
    /// Largest pairwise `|Δ log_z|` in units of the combined uncertainty.
    pub max_pair_sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub rows: Vec<CaseRow>,
    pub groups: Vec<GroupRow>,
}

fn run_case(
    case: &MatrixCase,
    seed: u64,
    base: &RunConfig,
    out_dir: &Path,
) -> CaseRow {
    let name = format!("{}_d{}_n{}_s{}", case.family, case.d, case.n_samples, seed);
    let mut row = CaseRow {
        case: name.clone(),
        family: case.family.clone(),
        d: case.d,
        n_samples: case.n_samples,
        seed,
        log_z: None,
        uncertainty: None,
        truth_log_z: None,
        truth_method: None,
        deviation_sigma: None,
        abs_error: None,
        error: None,
    };
    let result = (|| -> Result<(GroundTruth, ResultDocument)> {
        let spec = benchmark_for(
            &case.family,
            case.d,
            case.n_samples,
            seed,
            case.sharp_edges.unwrap_or(true),
        )?;
        let start = Instant::now();
        let set = draw_samples(&spec)?;
        let truth = analytic_log_evidence(&spec)?;
        let mut cfg = case.config.clone().unwrap_or_else(|| base.clone());
        cfg.seed = seed;
        let out = run_pipeline(&set, &spec.metadata()?, &cfg)?;
        let doc = out.document(start.elapsed().as_secs_f64());
        write_json(&out_dir.join(format!("{name}.json")), &doc)?;
        out.history
            .save_csv(&out_dir.join(format!("{name}.history.csv")))?;
        Ok((truth, doc))
    })();
    match result {
        Ok((truth, doc)) => {
            row.log_z = Some(doc.log_evidence);
            row.uncertainty = Some(doc.uncertainty);
            row.truth_method = Some(truth.method);
            row.truth_log_z = truth.log_z;
            if let Some(t) = truth.log_z {
                row.abs_error = Some((doc.log_evidence - t).abs());
                row.deviation_sigma = Some((doc.log_evidence - t) / doc.uncertainty);
            }
        }
        Err(e) => {
            row.error = Some(e.to_string());
            let _ = write_json(&out_dir.join(format!("{name}.error.json")), &e.to_json());
        }
    }
    row
}

fn group_rows(rows: &[CaseRow]) -> Vec<GroupRow> {
    let mut keys: Vec<(String, usize, usize)> = Vec::new();
    for r in rows {
        let k = (r.family.clone(), r.d, r.n_samples);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(family, d, n)| {
            let ok: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.family == family && r.d == d && r.n_samples == n)
                .filter_map(|r| Some((r.log_z?, r.uncertainty?)))
                .collect();
            let n_seeds = ok.len();
            let (mean, spread) = if n_seeds > 0 {
                let m = ok.iter().map(|p| p.0).sum::<f64>() / n_seeds as f64;
                let v = ok.iter().map(|p| (p.0 - m).powi(2)).sum::<f64>() / n_seeds as f64;
                (Some(m), Some(v.sqrt()))
            } else {
                (None, None)
            };
            let mut max_pair = None::<f64>;
            for i in 0..n_seeds {
                for j in 0..i {
                    let s = (ok[i].1.powi(2) + ok[j].1.powi(2)).sqrt();
                    let z = (ok[i].0 - ok[j].0).abs() / s;
                    max_pair = Some(max_pair.map_or(z, |m| m.max(z)));
                }
            }
            GroupRow {
                family,
                d,
                n_samples: n,
                n_seeds,
                mean_log_z: mean,
                seed_spread: spread,
                max_pair_sigma: max_pair,
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| FlozError::io(path, e))?;
    let mut w = csv::Writer::from_writer(f);
    let err = |e: csv::Error| FlozError::Schema(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.flush().map_err(|e| FlozError::io(path, e))
}

pub fn cmd_validate(matrix_path: &Path, out_dir: &Path) -> Result<ValidationSummary> {
    let text = read_to_string(matrix_path)?;
    let matrix: ValidationMatrix =
        serde_json::from_str(&text).map_err(|e| FlozError::Schema(format!("matrix: {e}")))?;
    run_matrix(&matrix, out_dir)
}

/// Runs every (case, seed) pair; individual failures are recorded and the
/// matrix carries on.
pub fn run_matrix(matrix: &ValidationMatrix, out_dir: &Path) -> Result<ValidationSummary> {
    if matrix.cases.is_empty() || matrix.cases.iter().all(|c| c.seeds.is_empty()) {
        return Err(FlozError::Schema("matrix: no cases to run".into()));
    }
    matrix.config.validate()?;
    for c in &matrix.cases {
        if let Some(cfg) = &c.config {
            cfg.validate()?;
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| FlozError::io(out_dir, e))?;
    let jobs: Vec<(&MatrixCase, u64)> = matrix
        .cases
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |s| (c, *s)))
        .collect();
    let rows: Vec<CaseRow> = jobs
        .par_iter()
        .map(|(c, s)| run_case(c, *s, &matrix.config, out_dir))
        .collect();
    let groups = group_rows(&rows);

    write_csv(
        &out_dir.join("summary.csv"),
        &[
            "case",
            "family",
            "d",
            "n_samples",
            "seed",
            "log_z",
            "uncertainty",
            "truth_log_z",
            "truth_method",
            "deviation_sigma",
            "abs_error",
            "error",
        ],
        rows.iter()
            .map(|r| {
                vec![
                    r.case.clone(),
                    r.family.clone(),
                    r.d.to_string(),
                    r.n_samples.to_string(),
                    r.seed.to_string(),
                    opt(r.log_z),
                    opt(r.uncertainty),
                    opt(r.truth_log_z),
                    r.truth_method
                        .map(|m| serde_json::to_value(m).unwrap().as_str().unwrap_or("").to_string())
                        .unwrap_or_default(),
                    opt(r.deviation_sigma),
                    opt(r.abs_error),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect(),
    )?;
    write_csv(
        &out_dir.join("groups.csv"),
        &["family", "d", "n_samples", "n_seeds", "mean_log_z", "seed_spread", "max_pair_sigma"],
        groups
            .iter()
            .map(|g| {
                vec![
                    g.family.clone(),
                    g.d.to_string(),
                    g.n_samples.to_string(),
                    g.n_seeds.to_string(),
                    opt(g.mean_log_z),
                    opt(g.seed_spread),
                    opt(g.max_pair_sigma),
                ]
            })
            .collect(),
    )?;
    // relative deviation per case against the truth, or against the group
    // mean when there is none
    write_csv(
        &out_dir.join("panel.csv"),
        &["family", "d", "seed", "log_z", "uncertainty", "reference", "reference_kind", "relative_deviation"],
        rows.iter()
            .filter(|r| r.log_z.is_some())
            .map(|r| {
                let group_mean = groups
                    .iter()
                    .find(|g| g.family == r.family && g.d == r.d && g.n_samples == r.n_samples)
                    .and_then(|g| g.mean_log_z);
                let (reference, kind) = match r.truth_log_z {
                    Some(t) => (Some(t), "truth"),
                    None => (group_mean, "seed_mean"),
                };
                let rel = reference.map(|t| (r.log_z.unwrap() - t) / t.abs().max(f64::MIN_POSITIVE));
                vec![
                    r.family.clone(),
                    r.d.to_string(),
                    r.seed.to_string(),
                    opt(r.log_z),
                    opt(r.uncertainty),
                    opt(reference),
                    kind.to_string(),
                    opt(rel),
                ]
            })
            .collect(),
    )?;
    let summary = ValidationSummary { rows, groups };
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Applies `FLOZ_THREADS` to the global thread pool.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| FlozError::Configuration(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // a pool built earlier in the process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn report_failure(e: &FlozError) -> i32 {
    let _ = writeln!(std::io::stderr(), "{}", e.to_json());
    e.exit_code()
}

/// Entry point of the `floz` binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        return report_failure(&e);
    }
    let outcome = match &cli.command {
        Command::Generate { spec, out } => cmd_generate(spec, out).map(|g| {
            serde_json::json!({
                "samples": g.paths.samples,
                "metadata": g.paths.metadata,
                "truth": g.truth_path,
                "truth_method": g.truth.method,
                "log_z": g.truth.log_z,
            })
        }),
        Command::Estimate(args) => cmd_estimate(args).map(|doc| {
            serde_json::json!({
                "log_evidence": doc.log_evidence,
                "uncertainty": doc.uncertainty,
                "n_in_ball": doc.n_in_ball,
                "out": args.out,
            })
        }),
        Command::Validate { matrix, out_dir } => cmd_validate(matrix, out_dir).map(|s| {
            let failed = s.rows.iter().filter(|r| r.error.is_some()).count();
            serde_json::json!({
                "cases": s.rows.len(),
                "failed": failed,
                "summary": out_dir.join("summary.csv"),
            })
        }),
    };
    match outcome {
        Ok(v) => {
            println!("{v}");
            0
        }
        Err(e) => {
            if let Command::Estimate(args) = &cli.command {
                let _ = write_json(&args.out, &e.to_json());
            }
            report_failure(&e)
        }
    }
}
