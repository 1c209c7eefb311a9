//! `xmtl`: generate synthetic signal/image datasets, train single- and
//! cross-modal classifiers, run noise sweeps, build reports and manage
//! checkpoints.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O or missing
//! input, 4 numeric failure during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xmtl::checkpoint::{Checkpoint, CheckpointError};
use xmtl::dml::DmlKind;
use xmtl::harness::{
    build_report, evaluate, load_runs, run_sweep, train, write_report, write_run, ExperimentConfig,
    HarnessError, Pairing, SweepConfig, TrainMode, DEFAULT_GRID,
};
use xmtl::synth::{gen_dataset, read_dataset, write_dataset, DatasetConfig, SynthError};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(
    name = "xmtl",
    version,
    about = "Cross-modal time-series/image metric learning"
)]
struct Cli {
    /// Seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, env = "XMTL_JOBS", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic signal/image dataset.
    Gen(GenArgs),
    /// Train one model on a generated dataset.
    Train(TrainArgs),
    /// Train every (kind, image noise, seed) cell and write a report.
    Sweep(SweepArgs),
    /// Aggregate finished runs into report tables and curve data.
    Report(ReportArgs),
    /// Inspect, verify or evaluate checkpoints.
    #[command(subcommand)]
    Checkpoint(CheckpointCommand),
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 1000)]
    timesteps: usize,
    /// Samples per class, train and validation together.
    #[arg(long, default_value_t = 120)]
    per_class: usize,
    #[arg(long, default_value_t = 20)]
    val_per_class: usize,
    /// Upper bound b of the U(0, b) noise added to signals.
    #[arg(long, default_value_t = 0.3)]
    signal_noise: f64,
    #[arg(long, default_value_t = 100)]
    image_size: usize,
}

impl DataArgs {
    fn config(&self, image_noise: f64, seed: u64) -> DatasetConfig {
        DatasetConfig {
            classes: self.classes,
            timesteps: self.timesteps,
            per_class: self.per_class,
            val_per_class: self.val_per_class,
            signal_noise: self.signal_noise,
            image_noise,
            image_size: self.image_size,
            seed,
            ..DatasetConfig::default()
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Upper bound b of the U(0, b) noise added before the image encoding.
    #[arg(long, default_value_t = 0.0)]
    image_noise: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write PGM previews of the images.
    #[arg(long)]
    pgm: bool,
}

#[derive(Args)]
struct ModelArgs {
    /// TOML experiment configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    pairing: Option<Pairing>,
    /// Metric-learning distance: mse, cs, pc, kl, kmmd, bc or po.
    #[arg(long)]
    dml: Option<DmlKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl ModelArgs {
    fn experiment(&self, seed: Option<u64>) -> Result<ExperimentConfig, HarnessError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
                    path: path.clone(),
                    source,
                })?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.pairing {
            config.pairing = p;
        }
        if let Some(k) = self.dml {
            config.dml = k;
        }
        if let Some(e) = self.epochs {
            config = config.with_epochs(e);
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
        if let Some(lr) = self.lr {
            config.lr = lr;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = TrainMode::Ts)]
    mode: TrainMode,
    #[command(flatten)]
    model: ModelArgs,
    /// Run directory (default: `<data>/runs/<mode>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Image-noise grid.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_GRID.to_vec())]
    grid: Vec<f64>,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 3)]
    repeats: u64,
    /// Combined-model distances to train.
    #[arg(long, value_delimiter = ',', default_values_t = DmlKind::ALL.to_vec())]
    kinds: Vec<DmlKind>,
    /// Skip the time-series baseline.
    #[arg(long)]
    no_ts: bool,
    /// Also train image-only classifiers.
    #[arg(long)]
    image: bool,
    /// Save the best checkpoint of every run.
    #[arg(long)]
    checkpoints: bool,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory holding one sub-directory per run.
    #[arg(long)]
    runs: PathBuf,
    /// Where to write the report files (default: the runs directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CheckpointCommand {
    /// Print the manifest and tensor list.
    Inspect { path: PathBuf },
    /// Reload and re-encode a checkpoint and compare bytes.
    Verify { path: PathBuf },
    /// Validation accuracy of the checkpoint's first model on a dataset.
    Eval {
        path: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let msg = e.to_string();
        match e {
            HarnessError::Config(_) => Failure::Usage(msg),
            HarnessError::Data(SynthError::InvalidConfig(_) | SynthError::BadLength(_)) => {
                Failure::Usage(msg)
            }
            HarnessError::Data(_)
            | HarnessError::Io { .. }
            | HarnessError::NoRuns(_)
            | HarnessError::Malformed(_)
            | HarnessError::Checkpoint(_) => Failure::Io(msg),
            HarnessError::NonFiniteLoss { .. }
            | HarnessError::Nn(_)
            | HarnessError::Dml(_)
            | HarnessError::Triplet(_)
            | HarnessError::EmptySplit
            | HarnessError::Audit(_) => Failure::Numeric(msg),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        HarnessError::from(e).into()
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Io(e.to_string())
    }
}

fn cmd_gen(seed: u64, args: &GenArgs) -> Result<(), Failure> {
    let config = args.data.config(args.image_noise, seed);
    let data = gen_dataset(&config)?;
    write_dataset(&args.out, &data, args.pgm)?;
    println!(
        "wrote {} pairs ({} train, {} val) to {}",
        data.train.len() + data.val.len(),
        data.train.len(),
        data.val.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(seed: Option<u64>, args: &TrainArgs) -> Result<(), Failure> {
    let data = read_dataset(&args.data)?;
    let mut config = args.model.experiment(seed)?;
    config.mode = args.mode;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.data.join("runs").join(config.mode.to_string()));
    let outcome = train(&config, &data)?;
    write_run(&out, &data.config, &config, &outcome, true)?;
    let s = &outcome.summary;
    println!("run written to {}", out.display());
    println!("best_val_acc={} best_epoch={}", s.best_val_acc, s.best_epoch);
    if let Some(acc) = s.final_image_val_acc {
        println!("final_image_val_acc={acc}");
    }
    println!("final_val_acc={}", s.final_val_acc);
    Ok(())
}

fn cmd_sweep(seed: u64, jobs: usize, args: &SweepArgs) -> Result<(), Failure> {
    let sweep = SweepConfig {
        dataset: args.data.config(0.0, seed),
        experiment: args.model.experiment(Some(seed))?,
        grid: args.grid.clone(),
        seeds: (seed..seed + args.repeats).collect(),
        include_ts: !args.no_ts,
        include_image: args.image,
        kinds: args.kinds.clone(),
        jobs,
        save_checkpoints: args.checkpoints,
    };
    let runs = run_sweep(&sweep, &args.out)?;
    for s in &runs {
        println!(
            "{} b={} seed={} final_val_acc={}",
            s.mode, s.image_noise, s.seed, s.final_val_acc
        );
    }
    let report = build_report(&runs)?;
    write_report(&args.out, &report)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> Result<(), Failure> {
    let runs = load_runs(&args.runs)?;
    let report = build_report(&runs)?;
    let out = args.out.as_deref().unwrap_or(&args.runs);
    std::fs::create_dir_all(out).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))?;
    write_report(out, &report)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn cmd_checkpoint(command: &CheckpointCommand) -> Result<(), Failure> {
    match command {
        CheckpointCommand::Inspect { path } => {
            let ck = Checkpoint::load(path)?;
            let manifest = serde_json::to_string_pretty(&ck.manifest).expect("manifest serializes");
            println!("{manifest}");
            for (name, array) in &ck.tensors {
                println!("{name} {:?}", array.shape());
            }
        }
        CheckpointCommand::Verify { path } => {
            let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            let ck = Checkpoint::from_bytes(&bytes)?;
            if ck.to_bytes() != bytes {
                return Err(Failure::Io(format!("{}: re-encoding differs", path.display())));
            }
            println!(
                "ok: {} tensors, config {}",
                ck.tensors.len(),
                ck.manifest.config_hash
            );
        }
        CheckpointCommand::Eval { path, data } => {
            let ck = Checkpoint::load(path)?;
            let data = read_dataset(data)?;
            let model = ck
                .manifest
                .models
                .first()
                .ok_or_else(|| Failure::Io("checkpoint holds no model".into()))?;
            let store = ck.to_store();
            let inputs = if model.input_shape.len() == 2 {
                &data.val.signals
            } else {
                &data.val.images
            };
            let acc = evaluate(model, &store, inputs, &data.val.labels, 100).map_err(Failure::from)?;
            println!("val_acc={acc}");
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Gen(args) => cmd_gen(cli.seed.unwrap_or(0), args),
        Command::Train(args) => cmd_train(cli.seed, args),
        Command::Sweep(args) => cmd_sweep(cli.seed.unwrap_or(0), cli.jobs, args),
        Command::Report(args) => cmd_report(args),
        Command::Checkpoint(c) => cmd_checkpoint(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (2, m),
                Failure::Io(m) => (3, m),
                Failure::Numeric(m) => (4, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
