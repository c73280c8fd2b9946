//! Command-line entry points.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::mdn::{nll_loss, train, EpochLoss, MdnModel, Scaler};
use crate::simlab::{
    benchmark_grid, run_simulation, write_ledger_csv, KernelLibrary, Policy, Scenario,
};
use crate::trajdata::{find_plt_files, read_dataset, run_pipeline, split_dataset, window_set, write_dataset, TrajectorySegment};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
/// Sampled steps before a checkpoint's mixture is taken as a kernel.
const KERNEL_WARMUP: usize = 64;

static CONFIG_HELP: LazyLock<String> = LazyLock::new(|| {
    format!(
        "Configuration keys and their defaults (TOML; every key is optional):\n\n{}",
        ExperimentConfig::default().to_toml()
    )
});

#[derive(Debug, Parser)]
#[command(name = "vnfmig", version, about = "Cost-loss-optimal VNF migration laboratory", after_long_help = CONFIG_HELP.as_str())]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path of the subcommand's main artifact.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 200 users and 1000 evaluation steps, reduced rollouts and in-run epochs.
    #[arg(long, global = true)]
    desk_scale: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Controller {
    Optimal,
    Baseline,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn a directory of .plt files into a segment dataset plus manifest.
    Preprocess {
        input_dir: PathBuf,
    },
    /// Train the mobility model on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Per-epoch loss CSV (defaults to `paths.loss_csv`).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run one simulation and write its per-interval ledger.
    Simulate {
        /// Trained model whose mixtures become the users' ground-truth kernels.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Controller::Optimal)]
        controller: Controller,
        #[arg(long)]
        p_o: Option<f64>,
        #[arg(long)]
        p_v: Option<f64>,
    },
    /// Compare the optimal controller with the double-threshold grid.
    Benchmark {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Format(_) | Error::Capacity(_) | Error::Io(_) => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.common.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    if cli.common.desk_scale {
        cfg.apply_desk_scale();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let out = cli.common.out;
    pool.install(|| match cli.command {
        Command::Preprocess { input_dir } => cmd_preprocess(&input_dir, out, &cfg),
        Command::Train {
            dataset,
            loss_csv,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.mdn.epochs = e;
            }
            cmd_train(dataset, out, loss_csv, &cfg)
        }
        Command::Simulate {
            checkpoint,
            controller,
            p_o,
            p_v,
        } => {
            let policy = match controller {
                Controller::Optimal => Policy::Optimal,
                Controller::Baseline => Policy::DoubleThreshold {
                    p_o: p_o.unwrap_or(cfg.benchmark.p_o),
                    p_v: p_v.unwrap_or(cfg.benchmark.p_v),
                    reducer: cfg.sim.visit_reducer,
                },
            };
            cmd_simulate(checkpoint, policy, out, &cfg)
        }
        Command::Benchmark { checkpoint } => cmd_benchmark(checkpoint, out, &cfg),
    })
}

fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn cmd_preprocess(input_dir: &Path, out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<()> {
    if !input_dir.is_dir() {
        return Err(Error::Data(format!("input directory {} does not exist", input_dir.display())));
    }
    let files = find_plt_files(input_dir)?
        .into_iter()
        .map(|p| {
            let name = p.strip_prefix(input_dir).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            Ok((name, fs::read_to_string(&p)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (segments, manifest) = run_pipeline(&files, &cfg.pipeline)?;
    if manifest.records == manifest.records_skipped {
        return Err(Error::Data("no trajectories found".into()));
    }
    let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
    write_dataset(BufWriter::new(File::create(&out)?), &segments)?;
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(manifest_path(&out), json + "\n")?;
    println!(
        "files={} records={} skipped={} segments={} windows={} stationarity_pass_rate={}",
        manifest.files,
        manifest.records,
        manifest.records_skipped,
        manifest.segments,
        manifest.windows,
        manifest.stationarity_pass_rate
    );
    Ok(())
}

fn load_segments(path: &Path) -> Result<Vec<TrajectorySegment>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
    read_dataset(std::io::BufReader::new(file))
}

/// Splits segments for training; if the validation side ends up without a
/// window, one training segment is moved over.
fn split_for_training(segments: Vec<TrajectorySegment>, cfg: &ExperimentConfig) -> Result<(Vec<TrajectorySegment>, Vec<TrajectorySegment>)> {
    let usable: Vec<_> = segments
        .into_iter()
        .filter(|s| s.len() >= crate::trajdata::MIN_WINDOW_SAMPLES)
        .collect();
    if usable.len() < 2 {
        return Err(Error::Data("dataset needs at least two segments long enough for a window".into()));
    }
    let split = split_dataset(usable, cfg.pipeline.train_fraction, cfg.seed)?;
    let (mut tr, mut val) = (split.training, split.validation);
    if val.is_empty() {
        warn!("validation split is empty; holding out one training segment");
        val.push(tr.pop().expect("at least two segments"));
    }
    if tr.is_empty() {
        warn!("training split is empty; moving one validation segment back");
        tr.push(val.pop().expect("at least two segments"));
    }
    Ok((tr, val))
}

pub fn write_loss_csv(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    wr.write_record(["epoch", "train_nll", "val_nll"]).map_err(err)?;
    for e in curve {
        wr.write_record([e.epoch.to_string(), e.train_nll.to_string(), e.val_nll.to_string()])
            .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn cmd_train(dataset: Option<PathBuf>, out: Option<PathBuf>, loss_csv: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<()> {
    let dataset = dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
    let (tr, val) = split_for_training(load_segments(&dataset)?, cfg)?;
    let train_set = window_set(&tr)?;
    let val_set = window_set(&val)?;
    info!("training on {} windows, validating on {}", train_set.len(), val_set.len());
    let mut model = MdnModel::new(cfg.mdn.architecture(), cfg.seed)?;
    model.set_scaler(Scaler::fit(&train_set));
    let mut opt = cfg.mdn.optimizer();
    let curve = train(&mut model, &train_set, &val_set, &cfg.mdn.train_config(cfg.seed), &mut opt)?;
    let out = out.unwrap_or_else(|| cfg.paths.checkpoint.clone());
    model.save(&out)?;
    write_loss_csv(&loss_csv.unwrap_or_else(|| cfg.paths.loss_csv.clone()), &curve)?;
    let last = curve.last().expect("epoch 0 is always present");
    println!("epoch={} train_nll={} val_nll={}", last.epoch, last.train_nll, last.val_nll);
    Ok(())
}

/// Validation windows exactly as `train` builds them, for checking a saved model.
pub fn validation_nll(model: &MdnModel, dataset: &Path, cfg: &ExperimentConfig) -> Result<f64> {
    let (_, val) = split_for_training(load_segments(dataset)?, cfg)?;
    nll_loss(model, &window_set(&val)?)
}

fn kernels_for(checkpoint: Option<&Path>, cfg: &ExperimentConfig) -> Result<KernelLibrary> {
    match checkpoint {
        Some(p) => {
            let model = MdnModel::load(p).map_err(|e| Error::Config(format!("cannot load checkpoint {}: {e}", p.display())))?;
            KernelLibrary::from_model(&model, cfg.sim.kernel_count, KERNEL_WARMUP, cfg.seed)
        }
        None => KernelLibrary::synthetic(cfg.sim.kernel_count, cfg.seed),
    }
}

fn require_checkpoint(checkpoint: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    checkpoint.ok_or_else(|| Error::Config(format!("{what} requires --checkpoint")))
}

pub fn cmd_simulate(checkpoint: Option<PathBuf>, policy: Policy, out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<()> {
    let checkpoint = match policy {
        Policy::Optimal => Some(require_checkpoint(checkpoint, "the optimal controller")?),
        Policy::DoubleThreshold { .. } => checkpoint,
    };
    let scenario: Scenario = cfg.scenario();
    let kernels = kernels_for(checkpoint.as_deref(), cfg)?;
    let run = run_simulation(&scenario, &kernels, &policy, cfg.seed)?;
    let out = out.unwrap_or_else(|| cfg.paths.ledger_csv.clone());
    write_ledger_csv(BufWriter::new(File::create(&out)?), &run.ledger)?;
    let s = run.summary;
    println!("total_loss={} total_cost={} total_sum={}", s.total_loss, s.total_cost, s.total_sum);
    Ok(())
}

pub fn cmd_benchmark(checkpoint: Option<PathBuf>, out: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<()> {
    let checkpoint = require_checkpoint(checkpoint, "benchmark")?;
    let kernels = kernels_for(Some(&checkpoint), cfg)?;
    let b = &cfg.benchmark;
    let table = benchmark_grid(&cfg.scenario(), &kernels, &b.p_o_grid, &b.p_v_grid, &cfg.seeds())?;
    let out = out.unwrap_or_else(|| cfg.paths.benchmark_csv.clone());
    table.write_csv(BufWriter::new(File::create(&out)?))?;
    let best = table.best_grid_row();
    let (po, pv) = best.thresholds.expect("grid row");
    println!(
        "optimal_mean_total={} best_baseline_mean_total={} best_P_o={po} best_P_v={pv}",
        table.optimal.mean_total, best.mean_total
    );
    Ok(())
}
