//! `cdi-forge` command-line front end.
//!
//! Every subcommand reads an optional JSON run config, applies flag
//! overrides, writes the resolved config as `config.json` into the output
//! directory, and writes its data products next to it. Logs go to stderr;
//! verbosity is taken from `CDI_FORGE_LOG`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use cdi_forge::crystalgen::{BraggVector, CrystalConfig, TrainingSample};
use cdi_forge::dataset::{build_dataset_with, ingest_experimental, DatasetManifest, Split, MANIFEST_FILE};
use cdi_forge::eval::{benchmark, recon_error_weighted, split_object, BenchmarkConfig, Quartiles};
use cdi_forge::forward::ForwardConfig;
use cdi_forge::nn::io::{load_weights, save_weights};
use cdi_forge::nn::{predict, train, NetworkConfig, TrainConfig};
use cdi_forge::refine::{magnitude_mae, refine, RefineConfig};
use cdi_forge::retrieval::{run_restarts, PRConfig};
use cdi_forge::volume::{cdiv, recombine, Dims, RealVolume};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DatasetSection {
    n_strained: usize,
    n_unstrained: usize,
    test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { n_strained: 100, n_unstrained: 100, test_fraction: 0.1 }
    }
}

/// One section per module configuration. The global seed overrides the
/// training and evaluation seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    out: PathBuf,
    threads: Option<usize>,
    generator: CrystalConfig,
    bragg: BraggVector,
    dataset: DatasetSection,
    forward: ForwardConfig,
    retrieval: PRConfig,
    refinement: RefineConfig,
    network: NetworkConfig,
    training: TrainConfig,
    evaluation: BenchmarkConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            generator: CrystalConfig::default(),
            bragg: BraggVector::default(),
            dataset: DatasetSection::default(),
            forward: ForwardConfig::default(),
            retrieval: PRConfig::default(),
            refinement: RefineConfig::default(),
            network: NetworkConfig::default(),
            training: TrainConfig::default(),
            evaluation: BenchmarkConfig::default(),
        }
    }
}

#[derive(Parser)]
#[command(name = "cdi-forge", version, about = "Synthesize BCDI datasets and invert diffraction magnitudes")]
struct Cli {
    /// JSON run config; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for across-sample parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset of strained crystals and their zero-strain twins.
    Generate(GenerateArgs),
    /// Train the network on a dataset (its test split serves as validation).
    Train(DataArgs),
    /// Predict shape and phase from one magnitude volume.
    Predict(PredictArgs),
    /// Iterative phase retrieval on one magnitude volume.
    Retrieve(RetrieveArgs),
    /// Gradient refinement of a complex object against a magnitude.
    Refine(RefineArgs),
    /// Crop and DCT-resample a measured magnitude volume to network dims.
    Resample(ResampleArgs),
    /// Error statistics of NN predictions over a dataset split.
    Evaluate(EvaluateArgs),
    /// Single-threaded timing of NN, NN + refinement and retrieval.
    Benchmark(BenchmarkArgs),
    /// Check CDIV files, weights files or dataset directories.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Strained crystals, each with a zero-strain twin.
    #[arg(long)]
    count: Option<usize>,
    /// Zero-strain twins, when different from --count.
    #[arg(long)]
    unstrained: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Magnitude volume (CDIV real).
    #[arg(long)]
    magnitude: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    magnitude: PathBuf,
    /// Random restarts; defaults to the evaluation section.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args)]
struct RefineArgs {
    /// Initial object (CDIV complex).
    #[arg(long)]
    object: PathBuf,
    #[arg(long)]
    magnitude: PathBuf,
}

#[derive(Args)]
struct ResampleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Cubic output size; defaults to the network input size.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Also refine each prediction.
    #[arg(long)]
    refine: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Use at most this many test samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ValidateArgs {
    /// CDIV files, `.cdnw` weights files, or dataset directories.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    cfg.training.seed = cfg.seed;
    cfg.evaluation.seed = cfg.seed;
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let mut text = serde_json::to_string_pretty(cfg)?;
    text.push('\n');
    fs::write(cfg.out.join("config.json"), text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_real(path: &Path) -> Result<RealVolume> {
    cdiv::read_real(path).with_context(|| format!("reading magnitude {}", path.display()))
}

fn load_split(dir: &Path, split: Split) -> Result<(DatasetManifest, Vec<(String, TrainingSample)>)> {
    let manifest = DatasetManifest::load(dir).with_context(|| format!("dataset::load {}", dir.display()))?;
    let samples = manifest.load_split(dir, split).context("dataset::load_split")?;
    let ids = manifest.records(split).map(|r| r.id.clone());
    let pairs = ids.zip(samples).collect();
    Ok((manifest, pairs))
}

fn cmd_generate(cfg: &mut RunConfig, a: &GenerateArgs) -> Result<()> {
    if let Some(n) = a.count {
        cfg.dataset.n_strained = n;
        cfg.dataset.n_unstrained = n;
    }
    if let Some(n) = a.unstrained {
        cfg.dataset.n_unstrained = n;
    }
    if let Some(f) = a.test_fraction {
        cfg.dataset.test_fraction = f;
    }
    prepare_out(cfg)?;
    let d = &cfg.dataset;
    let m = build_dataset_with(
        &cfg.generator,
        &cfg.bragg,
        &cfg.forward,
        d.n_strained,
        d.n_unstrained,
        d.test_fraction,
        cfg.seed,
        &cfg.out,
    )
    .context("dataset::build_dataset")?;
    println!("{} train / {} test samples written to {}", m.counts.train, m.counts.test, cfg.out.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, a: &DataArgs) -> Result<()> {
    prepare_out(cfg)?;
    let (_, train_set) = load_split(&a.data, Split::Train)?;
    let (_, val_set) = load_split(&a.data, Split::Test)?;
    let strip = |v: Vec<(String, TrainingSample)>| v.into_iter().map(|(_, s)| s).collect::<Vec<_>>();
    let (train_set, val_set) = (strip(train_set), strip(val_set));
    let (weights, report) = train(&train_set, &val_set, &cfg.network, &cfg.training).context("nn::train")?;
    save_weights(&weights, &cfg.out.join("weights.cdnw")).context("nn::save_weights")?;
    write_json(&cfg.out.join("metrics.json"), &report)?;
    if let Some(last) = report.last() {
        println!(
            "validation shape MAE {:.4} (untrained {:.4}), phase MAE {:.4} (untrained {:.4})",
            last.validation.shape_mae, report.baseline.shape_mae, last.validation.phase_mae, report.baseline.phase_mae
        );
    }
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, a: &PredictArgs) -> Result<()> {
    prepare_out(cfg)?;
    let weights = load_weights(&a.weights).with_context(|| format!("nn::load_weights {}", a.weights.display()))?;
    let m = read_real(&a.magnitude)?;
    let (p, elapsed) = predict(&m, &weights).context("nn::predict")?;
    let rho = recombine(&p.shape, &p.phase)?;
    let loss = magnitude_mae(&rho, &m, &cfg.refinement).context("refine::magnitude_mae")?;
    cdiv::save_real(cfg.out.join("shape.cdiv"), &p.shape)?;
    cdiv::save_real(cfg.out.join("phase.cdiv"), &p.phase)?;
    cdiv::save_complex(cfg.out.join("object.cdiv"), &rho)?;
    write_json(&cfg.out.join("predict.json"), &serde_json::json!({ "magnitude_mae": loss }))?;
    println!("prediction in {:.1} ms, magnitude MAE {loss:.6}", elapsed.as_secs_f64() * 1e3);
    Ok(())
}

fn cmd_retrieve(cfg: &RunConfig, a: &RetrieveArgs) -> Result<()> {
    prepare_out(cfg)?;
    let m = read_real(&a.magnitude)?;
    let restarts = a.restarts.unwrap_or(cfg.evaluation.restarts);
    let res = run_restarts(&m, &cfg.retrieval, restarts, cfg.seed).context("retrieval::run_phase_retrieval")?;
    cdiv::save_complex(cfg.out.join("object.cdiv"), &res.object)?;
    cdiv::save_real(cfg.out.join("support.cdiv"), &res.support.to_volume())?;
    let mut w = std::io::BufWriter::new(fs::File::create(cfg.out.join("chi_history.csv"))?);
    writeln!(w, "iteration,chi2")?;
    for (i, c) in res.chi2_history.iter().enumerate() {
        writeln!(w, "{i},{c:e}")?;
    }
    w.flush()?;
    println!("best of {restarts} restarts: chi {:.5}", res.final_chi());
    Ok(())
}

fn cmd_refine(cfg: &RunConfig, a: &RefineArgs) -> Result<()> {
    prepare_out(cfg)?;
    let rho0 = cdiv::read_complex(&a.object).with_context(|| format!("reading object {}", a.object.display()))?;
    let m = read_real(&a.magnitude)?;
    let res = refine(&rho0, &m, &cfg.refinement).context("refine::refine")?;
    cdiv::save_complex(cfg.out.join("refined.cdiv"), &res.object)?;
    let mut w = std::io::BufWriter::new(fs::File::create(cfg.out.join("loss.csv"))?);
    writeln!(w, "iteration,loss")?;
    for (i, l) in res.loss_history.iter().enumerate() {
        writeln!(w, "{i},{l:e}")?;
    }
    w.flush()?;
    let summary = serde_json::json!({
        "initial_loss": res.loss_history.first(),
        "best_loss": res.best_loss(),
        "best_iteration": res.best_iteration,
    });
    write_json(&cfg.out.join("refine.json"), &summary)?;
    println!("loss {:.6} -> {:.6}", res.loss_history[0], res.best_loss());
    Ok(())
}

fn cmd_resample(cfg: &RunConfig, a: &ResampleArgs) -> Result<()> {
    prepare_out(cfg)?;
    let v = read_real(&a.input)?;
    let dim = a.dim.unwrap_or(cfg.network.input_dim);
    let out = ingest_experimental(&v, Dims::cube(dim)).context("dataset::ingest_experimental")?;
    cdiv::save_real(cfg.out.join("resampled.cdiv"), &out)?;
    println!("{} -> {}", v.dims(), out.dims());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    sample_id: String,
    method: &'static str,
    shape_mae: f64,
    phase_mae: f64,
    chi2: f64,
    twin_used: bool,
    wall_ms: f64,
}

fn cmd_evaluate(cfg: &RunConfig, a: &EvaluateArgs) -> Result<()> {
    use rayon::prelude::*;
    prepare_out(cfg)?;
    let weights = load_weights(&a.weights).with_context(|| format!("nn::load_weights {}", a.weights.display()))?;
    let (_, samples) = load_split(&a.data, a.split.into())?;
    if samples.is_empty() {
        bail!("eval::recon_error: split has no samples");
    }
    let per: Vec<Vec<EvalRow>> = samples
        .par_iter()
        .map(|(id, s)| -> Result<Vec<EvalRow>> {
            let err = |shape: &RealVolume, phase: &RealVolume| {
                recon_error_weighted(shape, phase, &s.shape, &s.phase, cfg.evaluation.phase_weight)
                    .context("eval::recon_error")
            };
            let start = Instant::now();
            let (p, _) = predict(&s.magnitude, &weights).context("nn::predict")?;
            let t_nn = start.elapsed().as_secs_f64() * 1e3;
            let e = err(&p.shape, &p.phase)?;
            let mut rows = vec![EvalRow {
                sample_id: id.clone(),
                method: "nn",
                shape_mae: e.shape_mae,
                phase_mae: e.phase_mae,
                chi2: e.chi2,
                twin_used: e.twin_used,
                wall_ms: t_nn,
            }];
            if a.refine {
                let r = refine(&recombine(&p.shape, &p.phase)?, &s.magnitude, &cfg.refinement).context("refine::refine")?;
                let t = start.elapsed().as_secs_f64() * 1e3;
                let (rs, rp) = split_object(&r.object);
                let e = err(&rs, &rp)?;
                rows.push(EvalRow {
                    sample_id: id.clone(),
                    method: "nn_refine",
                    shape_mae: e.shape_mae,
                    phase_mae: e.phase_mae,
                    chi2: e.chi2,
                    twin_used: e.twin_used,
                    wall_ms: t,
                });
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<EvalRow> = per.into_iter().flatten().collect();
    let mut w = csv::Writer::from_path(cfg.out.join("evaluation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut summary = serde_json::Map::new();
    for method in ["nn", "nn_refine"] {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| r.method == method).collect();
        if sel.is_empty() {
            continue;
        }
        let q = |f: fn(&EvalRow) -> f64| Quartiles::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        summary.insert(
            method.into(),
            serde_json::json!({
                "count": sel.len(),
                "shape_mae": q(|r| r.shape_mae),
                "phase_mae": q(|r| r.phase_mae),
                "chi2": q(|r| r.chi2),
                "twin_used": sel.iter().filter(|r| r.twin_used).count(),
            }),
        );
    }
    write_json(&cfg.out.join("evaluation.json"), &summary)?;
    println!("{} rows written to {}", rows.len(), cfg.out.join("evaluation.csv").display());
    Ok(())
}

fn cmd_benchmark(cfg: &RunConfig, a: &BenchmarkArgs) -> Result<()> {
    prepare_out(cfg)?;
    let weights = load_weights(&a.weights).with_context(|| format!("nn::load_weights {}", a.weights.display()))?;
    let (_, mut samples) = load_split(&a.data, Split::Test)?;
    if let Some(n) = a.limit {
        samples.truncate(n);
    }
    let rep = benchmark(&samples, Some(&weights), &cfg.retrieval, &cfg.refinement, &cfg.evaluation)
        .context("eval::benchmark")?;
    rep.write_csv(fs::File::create(cfg.out.join("benchmark.csv"))?)?;
    fs::write(cfg.out.join("benchmark.json"), rep.summary_json()? + "\n")?;
    println!(
        "retrieval / nn = {:.1}x, retrieval / (nn + refine) = {:.2}x",
        rep.nn_speedup, rep.nn_refine_speedup
    );
    if !rep.ordering_holds {
        bail!("eval::benchmark: NN forward pass was not faster than iterative retrieval");
    }
    Ok(())
}

fn validate_path(p: &Path) -> Result<String> {
    if p.is_dir() || p.file_name().is_some_and(|n| n == MANIFEST_FILE) {
        let root = if p.is_dir() { p.to_path_buf() } else { p.parent().unwrap_or(Path::new(".")).to_path_buf() };
        let m = DatasetManifest::load(&root).context("dataset::load")?;
        m.validate(&root).context("dataset::validate")?;
        return Ok(format!("dataset with {} train / {} test samples", m.counts.train, m.counts.test));
    }
    let head = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    if head.starts_with(b"CDNW") {
        let w = cdi_forge::nn::io::decode_weights(&head).context("nn::load_weights")?;
        return Ok(format!("weights, {} parameters", w.param_count()));
    }
    let v = cdiv::read(&mut head.as_slice()).context("volume::cdiv::read")?;
    let kind = match v {
        cdiv::CdivVolume::Real(_) => "real",
        cdiv::CdivVolume::Complex(_) => "complex",
    };
    Ok(format!("{kind} volume {}", v.dims()))
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let mut failed = 0;
    for p in &a.paths {
        match validate_path(p) {
            Ok(msg) => println!("ok   {}: {msg}", p.display()),
            Err(e) => {
                failed += 1;
                println!("FAIL {}: {e:#}", p.display());
            }
        }
    }
    if failed > 0 {
        bail!("validate: {failed} of {} inputs failed", a.paths.len());
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CDI_FORGE_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    match &cli.cmd {
        Command::Generate(a) => cmd_generate(&mut cfg, a),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Predict(a) => cmd_predict(&cfg, a),
        Command::Retrieve(a) => cmd_retrieve(&cfg, a),
        Command::Refine(a) => cmd_refine(&cfg, a),
        Command::Resample(a) => cmd_resample(&cfg, a),
        Command::Evaluate(a) => cmd_evaluate(&cfg, a),
        Command::Benchmark(a) => cmd_benchmark(&cfg, a),
        Command::Validate(a) => cmd_validate(a),
    }
}
