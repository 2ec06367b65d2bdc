#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lightcnn::experiments::{
    default_channel_values, default_kernel_values, group_psd, run_sweep_with_observer, SeedPolicy,
    SweepConfig, SweepParameter,
};
use lightcnn::interpret::{conv_filter_response, pooling_sensitivity, ProbeSpec};
use lightcnn::metrics::evaluate;
use lightcnn::model::{ModelConfig, DEFAULT_CLASSES, DEFAULT_DROPOUT, DEFAULT_KERNEL};
use lightcnn::pipeline::{prepare, PrepareOptions, SplitIndex};
use lightcnn::preprocess::{DEFAULT_HIGHPASS_HZ, DEFAULT_HIGHPASS_ORDER};
use lightcnn::signal_io::{Manifest, SplitRatios};
use lightcnn::synthetic::{write_dataset, SyntheticSpec};
use lightcnn::train::{train_with_observer, TrainConfig};
use lightcnn::{checkpoint, DatasetSplit, Epoch, Error, Partition};

use crate::config::{pick, FileConfig};

const THREADS_ENV: &str = "LIGHTCNN_THREADS";

#[derive(Parser)]
#[command(
    name = "lightcnn",
    version,
    about = "Train, evaluate and probe a single-layer EEG CNN"
)]
struct Cli {
    /// Flat TOML file of default values for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a two-class synthetic dataset (manifest plus CSVs).
    Synth(SynthArgs),
    /// Filter, epoch and split a manifest's recordings; writes split.json.
    Prepare(PrepareArgs),
    /// Train on a prepared split; writes checkpoint, history and log.
    Train(TrainArgs),
    /// Score a checkpoint on one partition of a split.
    Evaluate(EvaluateArgs),
    /// Sinusoid and white-noise probes of a checkpoint.
    Probe(ProbeArgs),
    /// Train one model per kernel size or channel count.
    Sweep(SweepArgs),
    /// Mean ± SEM PSD per class.
    Psd(PsdArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    epochs_per_subject: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    fs: Option<f64>,
    #[arg(long)]
    snr_db: Option<f64>,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    highpass_hz: Option<f64>,
    /// Skip the high-pass filter.
    #[arg(long)]
    no_highpass: bool,
    #[arg(long)]
    epoch_seconds: Option<f64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    out_channels: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// train, validation or test.
    #[arg(long)]
    partition: Option<String>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fs: Option<f64>,
    #[arg(long)]
    epoch_len: Option<usize>,
    #[arg(long)]
    min_freq: Option<f64>,
    /// Highest probe frequency; at most fs/2.
    #[arg(long)]
    max_freq: Option<f64>,
    #[arg(long)]
    amplitude: Option<f64>,
    #[arg(long)]
    repeats_sine: Option<usize>,
    #[arg(long)]
    repeats_noise: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    split: Option<PathBuf>,
    /// kernel_size or out_channels.
    #[arg(long)]
    parameter: Option<String>,
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<usize>>,
    /// fixed or per_value.
    #[arg(long)]
    seed_policy: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    model: ModelFlags,
}

#[derive(Args)]
struct PsdArgs {
    #[arg(long)]
    split: Option<PathBuf>,
    /// train, validation, test or all.
    #[arg(long)]
    partition: Option<String>,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Run(e) => match e {
                Error::Parse { .. } | Error::Format { .. } | Error::InvalidArgument(_) => 2,
                Error::Io { .. } => 3,
                Error::Diverged { .. } | Error::NonFinite(_) => 4,
                _ => 1,
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) => m.clone(),
            Failure::Run(e) => e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

struct Ctx {
    file: FileConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn seed(&self) -> u64 {
        pick(self.seed, self.file.seed, 0)
    }

    fn out_dir(&self) -> Result<PathBuf, Failure> {
        let dir = self
            .out
            .clone()
            .or_else(|| self.file.out.clone())
            .ok_or_else(|| Failure::Usage("--out is required".into()))?;
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        Ok(dir)
    }

    fn required(
        &self,
        flag: Option<PathBuf>,
        file: &Option<PathBuf>,
        name: &str,
    ) -> Result<PathBuf, Failure> {
        flag.or_else(|| file.clone())
            .ok_or_else(|| Failure::Usage(format!("--{name} is required")))
    }

    fn train_config(&self, f: &TrainFlags) -> TrainConfig {
        let d = TrainConfig::default();
        let c = &self.file;
        TrainConfig {
            batch_size: pick(f.batch_size, c.batch_size, d.batch_size),
            learning_rate: pick(f.learning_rate, c.learning_rate, d.learning_rate),
            epochs: pick(f.epochs, c.epochs, d.epochs),
            adam_beta1: pick(f.adam_beta1, c.adam_beta1, d.adam_beta1),
            adam_beta2: pick(f.adam_beta2, c.adam_beta2, d.adam_beta2),
            adam_eps: pick(f.adam_eps, c.adam_eps, d.adam_eps),
            seed: self.seed(),
        }
    }

    fn model_config(&self, f: &ModelFlags, in_channels: usize) -> ModelConfig {
        let c = &self.file;
        ModelConfig {
            in_channels,
            out_channels: pick(f.out_channels, c.out_channels, in_channels),
            kernel: pick(f.kernel, c.kernel, DEFAULT_KERNEL),
            classes: DEFAULT_CLASSES,
            dropout: pick(f.dropout, c.dropout, DEFAULT_DROPOUT),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| {
        Failure::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn write(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(io_err(path))
}

fn parse_partition(name: &str) -> Result<Option<Partition>, Failure> {
    match name {
        "train" => Ok(Some(Partition::Train)),
        "validation" | "val" => Ok(Some(Partition::Validation)),
        "test" => Ok(Some(Partition::Test)),
        "all" => Ok(None),
        other => Err(Failure::Usage(format!(
            "unknown partition {other:?} (expected train, validation, test or all)"
        ))),
    }
}

fn select(split: &DatasetSplit, part: Option<Partition>) -> Vec<Epoch> {
    match part {
        Some(p) => split.partition(p).to_vec(),
        None => [&split.train, &split.validation, &split.test]
            .into_iter()
            .flatten()
            .cloned()
            .collect(),
    }
}

fn load_split(ctx: &Ctx, flag: Option<PathBuf>) -> Result<(SplitIndex, DatasetSplit), Failure> {
    let path = ctx.required(flag, &ctx.file.split, "split")?;
    let index = SplitIndex::load(&path)?;
    let split = index.materialize()?;
    Ok((index, split))
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> CmdResult {
    let d = SyntheticSpec::default();
    let c = &ctx.file;
    let spec = SyntheticSpec {
        subjects: pick(a.subjects, c.subjects, d.subjects),
        epochs_per_subject: pick(
            a.epochs_per_subject,
            c.epochs_per_subject,
            d.epochs_per_subject,
        ),
        channels: pick(a.channels, c.channels, d.channels),
        fs: pick(a.fs, c.fs, d.fs),
        snr_db: pick(a.snr_db, c.snr_db, d.snr_db),
        seed: ctx.seed(),
        ..d
    };
    let path = write_dataset(&spec, &ctx.out_dir()?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_prepare(ctx: &Ctx, a: PrepareArgs) -> CmdResult {
    let c = &ctx.file;
    let manifest_path = ctx.required(a.manifest, &c.manifest, "manifest")?;
    let manifest_path = manifest_path
        .canonicalize()
        .map_err(io_err(&manifest_path))?;
    let skip = a.no_highpass || c.no_highpass.unwrap_or(false);
    let opts = PrepareOptions {
        highpass_hz: (!skip).then(|| pick(a.highpass_hz, c.highpass_hz, DEFAULT_HIGHPASS_HZ)),
        filter_order: DEFAULT_HIGHPASS_ORDER,
        epoch_seconds: pick(a.epoch_seconds, c.epoch_seconds, 5.0),
        ratios: SplitRatios::default(),
        seed: ctx.seed(),
    };
    let manifest = Manifest::load(&manifest_path)?;
    let split = prepare(manifest.load_subjects()?, &opts)?;
    let index = SplitIndex::from_split(&split, &manifest_path, opts);
    let out = ctx.out_dir()?.join("split.json");
    index.save(&out)?;
    println!(
        "subjects train/validation/test: {}/{}/{}; epochs {}/{}/{}",
        split.subjects_in(Partition::Train),
        split.subjects_in(Partition::Validation),
        split.subjects_in(Partition::Test),
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> CmdResult {
    let (_, split) = load_split(ctx, a.split)?;
    let out = ctx.out_dir()?;
    let in_channels = split.train.first().map_or(0, |e| e.data.nrows());
    let model_config = ctx.model_config(&a.model, in_channels);
    let train_config = ctx.train_config(&a.train);

    let log_path = out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_error = None;
    let history = train_with_observer(&split, &train_config, model_config, &mut |r| {
        let line = r.log_line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(io_err(&log_path)(e));
    }

    let ckpt = out.join("checkpoint.lcnn");
    checkpoint::save(&history.best_checkpoint, train_config.seed, &ckpt)?;
    write(&out.join("history.json"), &history.to_json())?;
    let best = history.best_record();
    println!(
        "best epoch {} (val_acc {}, val_loss {}); wrote {}",
        history.best_epoch,
        best.val_accuracy,
        best.val_loss,
        ckpt.display()
    );
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> CmdResult {
    let ckpt = ctx.required(a.checkpoint, &ctx.file.checkpoint, "checkpoint")?;
    let part = parse_partition(&pick(
        a.partition,
        ctx.file.partition.clone(),
        "test".into(),
    ))?;
    let (params, _) = checkpoint::load(&ckpt)?;
    let (_, split) = load_split(ctx, a.split)?;
    let epochs = select(&split, part);
    let report = evaluate(&params, &epochs)?;
    let out = ctx.out_dir()?;
    write(&out.join("metrics.json"), &report.to_json())?;
    let row = report.csv_row();
    write(
        &out.join("metrics.csv"),
        &format!("{}\n{row}\n", lightcnn::MetricsReport::CSV_HEADER),
    )?;
    println!("{}", lightcnn::MetricsReport::CSV_HEADER);
    println!("{row}");
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_probe(ctx: &Ctx, a: ProbeArgs) -> CmdResult {
    let c = &ctx.file;
    let ckpt = ctx.required(a.checkpoint, &c.checkpoint, "checkpoint")?;
    let fs_hz = pick(a.fs, c.fs, 500.0);
    let nyquist = fs_hz / 2.0;
    let min_freq = pick(a.min_freq, c.min_freq, 0.0);
    let max_freq = pick(a.max_freq, c.max_freq, nyquist.floor());
    if !(fs_hz > 0.0) || max_freq > nyquist || min_freq < 0.0 || min_freq > max_freq {
        return Err(Failure::Usage(format!(
            "probe frequencies must satisfy 0 <= min <= max <= fs/2 = {nyquist} Hz \
             (got {min_freq}..{max_freq})"
        )));
    }
    let (params, _) = checkpoint::load(&ckpt)?;
    let default = ProbeSpec::new(
        fs_hz,
        (fs_hz * 5.0).round() as usize,
        params.config.in_channels,
        ctx.seed(),
    );
    let spec = ProbeSpec {
        frequencies: (min_freq.ceil() as usize..=max_freq.floor() as usize)
            .map(|f| f as f64)
            .collect(),
        amplitude: pick(a.amplitude, c.amplitude, default.amplitude),
        repeats_sine: pick(a.repeats_sine, c.repeats_sine, default.repeats_sine),
        repeats_noise: pick(a.repeats_noise, c.repeats_noise, default.repeats_noise),
        epoch_len: pick(a.epoch_len, c.epoch_len, default.epoch_len),
        ..default
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;

    let out = ctx.out_dir()?;
    let map = pooling_sensitivity(&params, &spec)?;
    write(&out.join("sensitivity.csv"), &map.to_csv())?;
    let response = conv_filter_response(&params, &spec)?;
    response.write_csvs(&out.join("filter_response"))?;
    println!(
        "wrote sensitivity.csv ({} outputs x {} frequencies) and {} filter responses",
        map.activation.nrows(),
        map.freqs.len(),
        response.n_channels()
    );
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, a: SweepArgs) -> CmdResult {
    let c = &ctx.file;
    let parameter = match pick(a.parameter, c.parameter.clone(), "kernel_size".into()).as_str() {
        "kernel_size" | "kernel" => SweepParameter::KernelSize,
        "out_channels" | "channels" => SweepParameter::OutChannels,
        other => {
            return Err(Failure::Usage(format!(
                "unknown sweep parameter {other:?} (expected kernel_size or out_channels)"
            )))
        }
    };
    let seed_policy = match pick(a.seed_policy, c.seed_policy.clone(), "fixed".into()).as_str() {
        "fixed" => SeedPolicy::Fixed,
        "per_value" => SeedPolicy::PerValue,
        other => {
            return Err(Failure::Usage(format!(
                "unknown seed policy {other:?} (expected fixed or per_value)"
            )))
        }
    };
    let values = a
        .values
        .or_else(|| c.values.clone())
        .unwrap_or_else(|| match parameter {
            SweepParameter::KernelSize => default_kernel_values(),
            SweepParameter::OutChannels => default_channel_values(),
        });
    let (_, split) = load_split(ctx, a.split)?;
    let in_channels = split.train.first().map_or(0, |e| e.data.nrows());
    let config = SweepConfig {
        parameter,
        values,
        base_train_config: ctx.train_config(&a.train),
        base_model_config: ctx.model_config(&a.model, in_channels),
        seed_policy,
    };
    config
        .validate()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let report = run_sweep_with_observer(&config, &split, &|p| match (&p.metrics, &p.error) {
        (Some(m), _) => println!("{}={}: {}", parameter.name(), p.value, m.csv_row()),
        (None, Some(e)) => eprintln!("{}={}: failed: {e}", parameter.name(), p.value),
        (None, None) => {}
    })?;
    let out = ctx.out_dir()?;
    write(&out.join("ablation.csv"), &report.to_csv())?;
    write(&out.join("ablation.json"), &report.to_json())?;
    Ok(())
}

fn cmd_psd(ctx: &Ctx, a: PsdArgs) -> CmdResult {
    let part = parse_partition(&pick(a.partition, ctx.file.partition.clone(), "all".into()))?;
    let (index, split) = load_split(ctx, a.split)?;
    let fs_hz = Manifest::load(&index.manifest)?.fs;
    let psd = group_psd(&select(&split, part), fs_hz)?;
    let out = ctx.out_dir()?.join("group_psd.csv");
    write(&out, &psd.to_csv())?;
    println!("wrote {}", out.display());
    Ok(())
}

fn configure_threads(file: &FileConfig) -> CmdResult {
    let from_env = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| {
            Failure::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got {v:?}"
            ))
        })?),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(file.threads).filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path).map_err(Failure::Usage)?,
        None => FileConfig::default(),
    };
    configure_threads(&file)?;
    let ctx = Ctx {
        file,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Prepare(a) => cmd_prepare(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Probe(a) => cmd_probe(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Psd(a) => cmd_psd(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.exit_code())
        }
    }
}
