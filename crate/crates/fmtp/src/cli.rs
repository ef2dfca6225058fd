//! Subcommand implementations behind the `fmtp` binary.
//!
//! Every subcommand reads its configuration from (in order) built-in
//! defaults, the `--config` file (or `FMTP_CONFIG`), then `--set key=value`
//! overrides; writes its artifact under `--out-dir` with a fixed name; and
//! drops a reproducibility manifest next to it. Missing upstream artifacts
//! fail with a dependency error naming the producing subcommand.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, Manifest, RunConfig};
use crate::data::{read_corpus, synth_generate, write_corpus, Corpus, DataError, Point};
use crate::eval::{
    self, compare_masks, evaluate, latency_bench, report, sweep_theta, EvalError, PredictConfig,
    PredictionSet,
};
use crate::lm::{train_lm, LmModel};
use crate::num::Rng;
use crate::vq::{train_vq, TrainError, VqModel};
use crate::{checkpoint, lm};

// Stream ids separating the PRNG draws of each pipeline stage.
const STREAM_SYNTH: u64 = 1;
const STREAM_VQ_INIT: u64 = 2;
const STREAM_LM_INIT: u64 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("missing {path}: run `fmtp {command}` first")]
    Dependency { path: PathBuf, command: &'static str },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

macro_rules! other_from {
    ($ty:ty) => {
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Other(e.to_string())
            }
        }
    };
}
other_from!(DataError);
other_from!(TrainError);
other_from!(EvalError);
other_from!(checkpoint::CkptError);
other_from!(eval::AblationError);
other_from!(std::io::Error);

#[derive(Parser)]
#[command(
    name = "fmtp",
    about = "Trajectory prediction with a discrete memory array and a semi-causal sequence model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motion-pattern corpus cache.
    Synth(CommonArgs),
    /// Train encoders, decoder, and memory array; writes vq.fmck and
    /// codebook.fmck.
    TrainVq(CommonArgs),
    /// Tokenize the corpus into per-split token files.
    Encode(CommonArgs),
    /// Train the sequence model on tokenized data; writes lm.fmck.
    TrainLm(CommonArgs),
    /// Sample best-of-K futures for the test split; writes predictions.csv.
    Predict(CommonArgs),
    /// Score best-of-K ADE/FDE against the constant-velocity baseline.
    Eval(CommonArgs),
    /// Time single-trajectory prediction; writes bench.txt.
    Bench(BenchArgs),
    /// Train the full pipeline per memory scale; writes sweep.csv.
    SweepTheta(SweepArgs),
    /// Train semi-causal and causal variants at identical seeds; writes
    /// masks.csv.
    CompareMasks(CommonArgs),
    /// Export per-trajectory prediction CSV and SVG renderings.
    ExportPlot(PlotArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file (falls back to $FMTP_CONFIG, then defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for artifacts and manifests.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Override one config key, e.g. --set k=128 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Timed trials after warmup.
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Untimed warmup predictions.
    #[arg(long, default_value_t = 50)]
    warmup: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated memory scales.
    #[arg(long, default_value = "16,32,64,128,256")]
    thetas: String,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Test trajectories to export.
    #[arg(long, default_value_t = 8)]
    count: usize,
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth(args) => cmd_synth(&args),
        Command::TrainVq(args) => cmd_train_vq(&args),
        Command::Encode(args) => cmd_encode(&args),
        Command::TrainLm(args) => cmd_train_lm(&args),
        Command::Predict(args) => cmd_predict(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::SweepTheta(args) => cmd_sweep(&args),
        Command::CompareMasks(args) => cmd_compare_masks(&args),
        Command::ExportPlot(args) => cmd_export_plot(&args),
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    let file = args
        .config
        .clone()
        .or_else(|| std::env::var_os("FMTP_CONFIG").map(PathBuf::from));
    if let Some(path) = file {
        config = RunConfig::load(&path)?;
    }
    for pair in &args.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        config.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts { dir: dir.to_path_buf() })
    }

    fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.fmds")
    }

    fn vq(&self) -> PathBuf {
        self.dir.join("vq.fmck")
    }

    fn codebook(&self) -> PathBuf {
        self.dir.join("codebook.fmck")
    }

    fn tokens(&self, split: &str) -> PathBuf {
        self.dir.join(format!("tokens-{split}.fmtk"))
    }

    fn lm(&self) -> PathBuf {
        self.dir.join("lm.fmck")
    }

    fn predictions(&self) -> PathBuf {
        self.dir.join("predictions.csv")
    }

    fn metrics_csv(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    fn metrics_txt(&self) -> PathBuf {
        self.dir.join("metrics.txt")
    }

    fn bench_txt(&self) -> PathBuf {
        self.dir.join("bench.txt")
    }

    fn sweep_csv(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }

    fn masks_csv(&self) -> PathBuf {
        self.dir.join("masks.csv")
    }

    fn plots(&self) -> PathBuf {
        self.dir.join("plots")
    }

    fn manifest(&self, command: &str) -> PathBuf {
        self.dir.join(format!("manifest-{command}.txt"))
    }

    fn require(&self, path: PathBuf, producer: &'static str) -> Result<PathBuf, CliError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Dependency { path, command: producer })
        }
    }
}

fn write_manifest(
    artifacts: &Artifacts,
    command: &str,
    config: &RunConfig,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CliError> {
    let mut manifest = Manifest::new(command, config);
    for input in inputs {
        manifest.input(input)?;
    }
    for output in outputs {
        manifest.output(output);
    }
    std::fs::write(artifacts.manifest(command), manifest.render())?;
    Ok(())
}

fn load_corpus(artifacts: &Artifacts) -> Result<Corpus, CliError> {
    let path = artifacts.require(artifacts.corpus(), "synth")?;
    Ok(read_corpus(&path)?)
}

fn load_models(artifacts: &Artifacts) -> Result<(VqModel<f32>, LmModel<f32>), CliError> {
    let vq_path = artifacts.require(artifacts.vq(), "train-vq")?;
    let lm_path = artifacts.require(artifacts.lm(), "train-lm")?;
    Ok((checkpoint::load_vq(&vq_path)?, checkpoint::load_lm(&lm_path)?))
}

fn cmd_synth(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let mut rng = Rng::derive(config.seed, STREAM_SYNTH);
    let corpus = synth_generate(&mut rng, &config.synth_config());
    write_corpus(&artifacts.corpus(), &corpus)?;
    println!(
        "synth: {} trajectories ({} train / {} val / {} test) -> {}",
        corpus.total(),
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        artifacts.corpus().display()
    );
    write_manifest(&artifacts, "synth", &config, &[], &[&artifacts.corpus()])?;
    Ok(())
}

fn cmd_train_vq(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let corpus = load_corpus(&artifacts)?;

    let mut rng = Rng::derive(config.seed, STREAM_VQ_INIT);
    let mut model = VqModel::new(config.vq_config(), &mut rng);
    let record = train_vq(&mut model, &corpus.train, &config.vq_train_config())?;
    for (i, epoch) in record.epochs.iter().enumerate() {
        if i % 10 == 0 || i + 1 == record.epochs.len() {
            println!(
                "vq epoch {:>3}: total {:.6} recon {:.6} codebook {:.6} commit {:.6} util {:.3}",
                i, epoch.total, epoch.reconstruction, epoch.codebook, epoch.commitment,
                epoch.utilization
            );
        }
    }
    let recon = eval::reconstruction_ade(&model, &corpus.val, config.normalization());
    println!("vq held-out reconstruction ADE: {recon:.6}");

    checkpoint::save_vq(&artifacts.vq(), &model)?;
    checkpoint::save_codebook(&artifacts.codebook(), &model)?;
    println!("wrote {} and {}", artifacts.vq().display(), artifacts.codebook().display());
    write_manifest(
        &artifacts,
        "train-vq",
        &config,
        &[&artifacts.corpus()],
        &[&artifacts.vq(), &artifacts.codebook()],
    )?;
    Ok(())
}

fn cmd_encode(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let corpus = load_corpus(&artifacts)?;
    let vq_path = artifacts.require(artifacts.vq(), "train-vq")?;
    let vq = checkpoint::load_vq(&vq_path)?;

    let mut outputs = Vec::new();
    for (split, dataset) in
        [("train", &corpus.train), ("val", &corpus.val), ("test", &corpus.test)]
    {
        let tokens = eval::tokenize_dataset(&vq, dataset, config.normalization());
        let path = artifacts.tokens(split);
        checkpoint::save_tokens(&path, vq.config.k, &tokens)?;
        println!("encode: {} sequences -> {}", tokens.len(), path.display());
        outputs.push(path);
    }
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &artifacts,
        "encode",
        &config,
        &[&artifacts.corpus(), &artifacts.vq()],
        &output_refs,
    )?;
    Ok(())
}

fn cmd_train_lm(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let train_path = artifacts.require(artifacts.tokens("train"), "encode")?;
    let val_path = artifacts.require(artifacts.tokens("val"), "encode")?;
    let (vocab, train_tokens) = checkpoint::load_tokens(&train_path)?;
    let (_, val_tokens) = checkpoint::load_tokens(&val_path)?;
    if vocab != config.k {
        return Err(CliError::Usage(format!(
            "token file vocabulary {vocab} does not match config k = {}; re-run `fmtp encode`",
            config.k
        )));
    }

    let mut rng = Rng::derive(config.seed, STREAM_LM_INIT);
    let mut model = LmModel::new(config.lm_config(), &mut rng);
    let record = train_lm(&mut model, &train_tokens, &val_tokens, &config.lm_train_config())?;
    println!(
        "lm: {} steps, {} epochs recorded, mask {}",
        record.steps,
        record.epoch_losses.len(),
        config.mask.name()
    );
    match record.convergence_step {
        Some(step) => println!("lm converged at iteration {step}"),
        None => println!("lm did not hit the plateau criterion within the epoch budget"),
    }
    if let Some(&(_, loss)) = record.val_curve.last() {
        println!("final validation loss: {loss:.6}");
    }

    checkpoint::save_lm(&artifacts.lm(), &model)?;
    println!("wrote {}", artifacts.lm().display());
    write_manifest(
        &artifacts,
        "train-lm",
        &config,
        &[&train_path, &val_path],
        &[&artifacts.lm()],
    )?;
    Ok(())
}

fn render_prediction_rows(out: &mut String, index: usize, set: &PredictionSet) {
    let mut push = |kind: &str, sample: String, points: &[Point]| {
        for (frame, p) in points.iter().enumerate() {
            out.push_str(&format!("{index},{kind},{sample},{frame},{},{}\n", p.x, p.y));
        }
    };
    push("observed", String::new(), &set.observed);
    push("gt", String::new(), &set.ground_truth);
    for (s, sample) in set.samples.iter().enumerate() {
        push("sample", s.to_string(), sample);
    }
}

fn cmd_predict(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let corpus = load_corpus(&artifacts)?;
    let (vq, lm) = load_models(&artifacts)?;

    let base = config.predict_config();
    let mut csv = String::from("traj_index,kind,sample,frame,x,y\n");
    for (index, traj) in corpus.test.trajectories.iter().enumerate() {
        let cfg = PredictConfig {
            seed: Rng::derive(base.seed, index as u64).next_u64(),
            ..base
        };
        let set = eval::predict(&vq, &lm, traj, &cfg);
        render_prediction_rows(&mut csv, index, &set);
    }
    std::fs::write(artifacts.predictions(), &csv)?;
    println!(
        "predict: {} trajectories x {} samples -> {}",
        corpus.test.len(),
        config.k_samples,
        artifacts.predictions().display()
    );
    write_manifest(
        &artifacts,
        "predict",
        &config,
        &[&artifacts.corpus(), &artifacts.vq(), &artifacts.lm()],
        &[&artifacts.predictions()],
    )?;
    Ok(())
}

fn cmd_eval(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let corpus = load_corpus(&artifacts)?;
    let (vq, lm) = load_models(&artifacts)?;

    let metrics = evaluate(&vq, &lm, &corpus.test.trajectories, &config.predict_config())?;
    std::fs::write(artifacts.metrics_csv(), report::metrics_csv(&metrics))?;
    std::fs::write(artifacts.metrics_txt(), report::metrics_summary(&metrics))?;
    print!("{}", report::metrics_summary(&metrics));
    write_manifest(
        &artifacts,
        "eval",
        &config,
        &[&artifacts.corpus(), &artifacts.vq(), &artifacts.lm()],
        &[&artifacts.metrics_csv(), &artifacts.metrics_txt()],
    )?;
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let config = load_config(&args.common)?;
    let artifacts = Artifacts::new(&args.common.out_dir)?;
    let corpus = load_corpus(&artifacts)?;
    let (vq, lm) = load_models(&artifacts)?;
    if corpus.test.is_empty() {
        return Err(CliError::Other("benchmark needs a non-empty test split".into()));
    }

    let bench = latency_bench(&vq, &lm, &corpus.test.trajectories, args.trials, args.warmup);
    std::fs::write(artifacts.bench_txt(), report::latency_text(&bench))?;
    print!("{}", report::latency_text(&bench));
    write_manifest(
        &artifacts,
        "bench",
        &config,
        &[&artifacts.corpus(), &artifacts.vq(), &artifacts.lm()],
        &[&artifacts.bench_txt()],
    )?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let config = load_config(&args.common)?;
    let artifacts = Artifacts::new(&args.common.out_dir)?;
    let corpus = load_corpus(&artifacts)?;

    let thetas: Vec<usize> = args
        .thetas
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad --thetas list `{}`", args.thetas)))?;
    if thetas.is_empty() {
        return Err(CliError::Usage("--thetas must name at least one scale".into()));
    }

    let table = sweep_theta(&corpus, &thetas, &config.pipeline_config())?;
    std::fs::write(artifacts.sweep_csv(), report::sweep_csv(&table))?;
    print!("{}", report::sweep_csv(&table));
    write_manifest(
        &artifacts,
        "sweep-theta",
        &config,
        &[&artifacts.corpus()],
        &[&artifacts.sweep_csv()],
    )?;
    Ok(())
}

fn cmd_compare_masks(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let artifacts = Artifacts::new(&args.out_dir)?;
    let corpus = load_corpus(&artifacts)?;

    let cmp = compare_masks(&corpus, &config.pipeline_config())?;
    std::fs::write(artifacts.masks_csv(), report::masks_csv(&cmp))?;
    print!("{}", report::masks_csv(&cmp));
    write_manifest(
        &artifacts,
        "compare-masks",
        &config,
        &[&artifacts.corpus()],
        &[&artifacts.masks_csv()],
    )?;
    Ok(())
}

fn svg_render(set: &PredictionSet) -> String {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let all_points = set
        .observed
        .iter()
        .chain(&set.ground_truth)
        .chain(set.samples.iter().flatten());
    for p in all_points {
        min = (min.0.min(p.x), min.1.min(p.y));
        max = (max.0.max(p.x), max.1.max(p.y));
    }
    let span = (max.0 - min.0).max(max.1 - min.1).max(1e-6);
    let pad = span * 0.05;
    let scale = 560.0 / (span + 2.0 * pad);
    let map = |p: &Point| -> (f64, f64) {
        ((p.x - min.0 + pad) * scale + 20.0, 580.0 - (p.y - min.1 + pad) * scale)
    };
    let polyline = |points: &[Point], color: &str, width: f64| -> String {
        let coords: Vec<String> = points
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\"/>\n",
            coords.join(" ")
        )
    };

    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"600\" height=\"600\" viewBox=\"0 0 600 600\">\n",
    );
    for sample in &set.samples {
        svg.push_str(&polyline(sample, "#f0a050", 1.0));
    }
    svg.push_str(&polyline(&set.observed, "#202020", 2.0));
    svg.push_str(&polyline(&set.ground_truth, "#109040", 2.0));
    let (ax, ay) = map(set.observed.last().unwrap());
    svg.push_str(&format!("  <circle cx=\"{ax:.2}\" cy=\"{ay:.2}\" r=\"4\" fill=\"#202020\"/>\n"));
    svg.push_str("</svg>\n");
    svg
}

fn cmd_export_plot(args: &PlotArgs) -> Result<(), CliError> {
    let config = load_config(&args.common)?;
    let artifacts = Artifacts::new(&args.common.out_dir)?;
    let corpus = load_corpus(&artifacts)?;
    let (vq, lm) = load_models(&artifacts)?;
    let plots = artifacts.plots();
    std::fs::create_dir_all(&plots)?;

    let base = config.predict_config();
    let count = args.count.min(corpus.test.len());
    let mut outputs: Vec<PathBuf> = Vec::new();
    for (index, traj) in corpus.test.trajectories.iter().take(count).enumerate() {
        let cfg = PredictConfig {
            seed: Rng::derive(base.seed, index as u64).next_u64(),
            ..base
        };
        let set = eval::predict(&vq, &lm, traj, &cfg);

        let mut csv = String::from("traj_index,kind,sample,frame,x,y\n");
        render_prediction_rows(&mut csv, index, &set);
        let csv_path = plots.join(format!("traj_{index}.csv"));
        std::fs::write(&csv_path, csv)?;
        let svg_path = plots.join(format!("traj_{index}.svg"));
        std::fs::write(&svg_path, svg_render(&set))?;
        outputs.push(csv_path);
        outputs.push(svg_path);
    }
    println!("export-plot: wrote {count} trajectory plots under {}", plots.display());
    let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &artifacts,
        "export-plot",
        &config,
        &[&artifacts.corpus(), &artifacts.vq(), &artifacts.lm()],
        &output_refs,
    )?;
    Ok(())
}

// Re-exported for the integration tests.
pub use lm::MaskKind as CliMaskKind;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dependency_error_names_producer() {
        let dir = tempfile::tempdir().unwrap();
        let artifacts = Artifacts::new(dir.path()).unwrap();
        let err = artifacts.require(artifacts.vq(), "train-vq").unwrap_err();
        match err {
            CliError::Dependency { command, .. } => assert_eq!(command, "train-vq"),
            other => panic!("expected dependency error, got {other}"),
        }
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn set_override_applies_after_config() {
        let args = CommonArgs {
            config: None,
            out_dir: PathBuf::from("unused"),
            set: vec!["k=32".into(), "temperature=0.5".into()],
            seed: Some(99),
        };
        let config = load_config(&args).unwrap();
        assert_eq!(config.k, 32);
        assert_eq!(config.temperature, 0.5);
        assert_eq!(config.seed, 99);
    }

    #[test]
    fn bad_set_pair_is_usage_error() {
        let args = CommonArgs {
            config: None,
            out_dir: PathBuf::from("unused"),
            set: vec!["k".into()],
            seed: None,
        };
        let err = load_config(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
