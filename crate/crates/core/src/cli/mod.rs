//! Command-line entry points: `search`, `retrain`, `eval` and `report`.
//!
//! Every command writes plain artifacts into a run directory:
//!
//! | file | content |
//! |------|---------|
//! | `manifest.json` | resolved config, dataset digest, checksums |
//! | `config.toml` | resolved config; `--config` on it repeats the run |
//! | `metrics.jsonl` | one JSON record per epoch |
//! | `shrink_events.jsonl` | one JSON record per network shrink |
//! | `flops_trajectory.tsv` | MACs, alive blocks and accuracy per epoch |
//! | `architecture.txt` | final architecture report |
//! | `final.ckpt` | final weights with recalibrated batch-norm statistics |
//! | `final_momentum_bn.ckpt` | the same weights with the statistics accumulated during training |

pub mod checkpoint;
pub mod config;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsLedger;
use crate::search::{
    eval_batches, recalibrate_bn, recalibration_batches, search_loop, train_fixed, validate, EpochRecord, Penalty,
    SearchConfig,
};
use crate::supernet::{ArchitectureReport, Supernet, SupernetConfig, KERNEL_SIZES};
use crate::tensor::BatchNormState;

use checkpoint::CheckpointMeta;
use config::{load_data, sha256_hex, DataPaths, DatasetDescriptor, RunConfig};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const SHRINK_EVENTS: &str = "shrink_events.jsonl";
pub const TRAJECTORY: &str = "flops_trajectory.tsv";
pub const ARCHITECTURE: &str = "architecture.txt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const MOMENTUM_CHECKPOINT: &str = "final_momentum_bn.ckpt";
pub const SUMMARY: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "atomnas", version, about = "Channel-level architecture search with atomic blocks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search: train the supernet with the importance penalty while removing dead blocks.
    Search(TrainArgs),
    /// Train an exported architecture from scratch without the penalty.
    Retrain(RetrainArgs),
    /// Evaluate a checkpoint, optionally after re-estimating batch-norm statistics.
    Eval(EvalArgs),
    /// Summarise a run directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// IDX image file of the training set.
    #[arg(long)]
    pub data_images: Option<PathBuf>,
    /// IDX label file of the training set.
    #[arg(long)]
    pub data_labels: Option<PathBuf>,
    /// IDX image file of a separate validation set (otherwise a holdout split is used).
    #[arg(long)]
    pub val_images: Option<PathBuf>,
    #[arg(long)]
    pub val_labels: Option<PathBuf>,
    /// Use this many generated samples instead of files.
    #[arg(long, value_name = "SAMPLES")]
    pub synthetic: Option<usize>,
}

impl DataArgs {
    fn apply(&self, paths: &mut DataPaths) {
        if self.synthetic.is_some() {
            *paths = DataPaths {
                synthetic: self.synthetic,
                ..DataPaths::default()
            };
        }
        if let Some(p) = &self.data_images {
            paths.images = Some(p.clone());
            paths.synthetic = None;
        }
        if let Some(p) = &self.data_labels {
            paths.labels = Some(p.clone());
        }
        if let Some(p) = &self.val_images {
            paths.val_images = Some(p.clone());
        }
        if let Some(p) = &self.val_labels {
            paths.val_labels = Some(p.clone());
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PenaltyArg {
    Flops,
    Uniform,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Config file (`key = value`); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Run directory for all artifacts.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Target penalty coefficient.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Shrink threshold in MACs.
    #[arg(long)]
    pub delta: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    #[arg(long)]
    pub max_train_samples: Option<usize>,
    /// Do not print per-epoch progress.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RetrainArgs {
    /// Architecture report exported by `search`.
    #[arg(long)]
    pub arch: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Also report accuracy after re-estimating batch-norm statistics on the training split.
    #[arg(long)]
    pub recalibrate_bn: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

/// Everything that determines a run, written next to its artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build_version: String,
    pub config: SearchConfig,
    pub network: SupernetConfig,
    pub dataset: DatasetDescriptor,
    /// SHA-256 of the resolved `config.toml`.
    pub config_sha256: String,
    /// SHA-256 of the architecture report the run started from.
    pub architecture_sha256: String,
    pub initial_flops: u64,
    pub out_dir: PathBuf,
}

/// Process exit status for an error: 2 for bad input (config, data,
/// checkpoints), 3 for divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::InvalidLabel { .. }
        | Error::Index(_)
        | Error::EmptyStream(_)
        | Error::UnsupportedKernel(_)
        | Error::Dimension { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::NoGraph | Error::Consistency(_) => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Search(args) => cmd_search(&args),
        Command::Retrain(args) => cmd_retrain(&args),
        Command::Eval(args) => cmd_eval(&args).map(|text| print!("{text}")),
        Command::Report(args) => cmd_report(&args.run_dir).map(|text| print!("{text}")),
    }
}

fn resolve(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    args.data.apply(&mut cfg.data);
    let s = &mut cfg.search;
    if let Some(v) = args.seed {
        s.seed = v;
    }
    if let Some(v) = args.lambda {
        s.lambda = v;
    }
    if let Some(v) = args.delta {
        s.delta = Some(v);
    }
    if let Some(v) = args.epochs {
        s.epochs = v;
        s.warmup_epochs = s.warmup_epochs.min(v as f64);
    }
    if let Some(v) = args.penalty {
        s.penalty = match v {
            PenaltyArg::Flops => Penalty::Flops,
            PenaltyArg::Uniform => Penalty::Uniform,
        };
    }
    if let Some(v) = args.max_train_samples {
        s.max_train_samples = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serialises")
}

/// Streams per-epoch artifacts as the run progresses.
struct RunLog {
    dir: PathBuf,
    metrics: BufWriter<fs::File>,
    events: BufWriter<fs::File>,
    trajectory: BufWriter<fs::File>,
    quiet: bool,
    epochs: usize,
    failure: Option<Error>,
}

impl RunLog {
    fn create(dir: &Path, initial: &ArchitectureReport, alive: usize, epochs: usize, quiet: bool) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        let mut log = RunLog {
            dir: dir.into(),
            metrics: open(METRICS)?,
            events: open(SHRINK_EVENTS)?,
            trajectory: open(TRAJECTORY)?,
            quiet,
            epochs,
            failure: None,
        };
        let res = writeln!(log.trajectory, "epoch\tflops\tflops_ratio\talive\ttrain_macs\tval_acc")
            .and_then(|_| writeln!(log.trajectory, "0\t{}\t1.000000\t{alive}\t0\t", initial.flops))
            .and_then(|_| log.trajectory.flush());
        res.map_err(|e| Error::io(dir.join(TRAJECTORY), e))?;
        Ok(log)
    }

    fn record(&mut self, r: &EpochRecord, initial_flops: u64) {
        if self.failure.is_some() {
            return;
        }
        let mut res = writeln!(self.metrics, "{}", to_json(r)).and_then(|_| self.metrics.flush());
        if let Some(ev) = &r.shrink {
            res = res.and_then(|_| writeln!(self.events, "{}", to_json(ev)).and_then(|_| self.events.flush()));
        }
        res = res.and_then(|_| {
            writeln!(
                self.trajectory,
                "{}\t{}\t{:.6}\t{}\t{}\t{:.4}",
                r.epoch + 1,
                r.flops,
                r.flops as f64 / initial_flops as f64,
                r.alive_total,
                r.train_macs,
                r.val_acc
            )?;
            self.trajectory.flush()
        });
        if let Err(e) = res {
            self.failure = Some(Error::io(&self.dir, e));
        }
        if !self.quiet {
            eprintln!(
                "epoch {:>3}/{} loss {:.4} penalty {:.4} lambda {:.3} lr {:.4} val {:.4} flops {} alive {}{}",
                r.epoch + 1,
                self.epochs,
                r.train_loss,
                r.penalty,
                r.lambda,
                r.lr,
                r.val_acc,
                r.flops,
                r.alive_total,
                r.shrink
                    .as_ref()
                    .map(|ev| format!(" (removed {})", ev.removed_ids.len()))
                    .unwrap_or_default()
            );
        }
    }

    fn finish(self) -> Result<()> {
        match self.failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

fn prepare_run(cmd: &str, args: &TrainArgs, cfg: &RunConfig, net: &Supernet, dataset: DatasetDescriptor) -> Result<RunManifest> {
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_text = cfg.to_text()?;
    write_file(&dir.join(CONFIG), &config_text)?;
    let arch = net.export_architecture();
    let manifest = RunManifest {
        command: cmd.into(),
        build_version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.search.clone(),
        network: net.config().clone(),
        dataset,
        config_sha256: sha256_hex(config_text.as_bytes()),
        architecture_sha256: sha256_hex(arch.to_text().as_bytes()),
        initial_flops: arch.flops,
        out_dir: dir.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("plain data serialises");
    write_file(&dir.join(MANIFEST), json + "\n")?;
    Ok(manifest)
}

fn finish_run(
    dir: &Path,
    net: &Supernet,
    meta: &CheckpointMeta,
    momentum_bn: &[BatchNormState],
    quiet: bool,
) -> Result<()> {
    let arch = net.export_architecture();
    write_file(&dir.join(ARCHITECTURE), arch.to_text())?;
    checkpoint::save(&dir.join(FINAL_CHECKPOINT), net, meta, None)?;
    if !momentum_bn.is_empty() {
        checkpoint::save(&dir.join(MOMENTUM_CHECKPOINT), net, meta, Some(momentum_bn))?;
    }
    if !quiet {
        eprintln!("final flops {} params {}; artifacts in {}", arch.flops, arch.params, dir.display());
    }
    Ok(())
}

pub fn cmd_search(args: &TrainArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let network = cfg.network();
    let loaded = load_data(&cfg.data, &network, &cfg.search, None)?;
    let net = Supernet::build(&network, cfg.search.seed)?;
    let manifest = prepare_run("search", args, &cfg, &net, loaded.descriptor)?;
    let initial = net.export_architecture();
    let mut log = RunLog::create(&args.out_dir, &initial, net.alive_count(), cfg.search.epochs, args.quiet)?;
    let outcome = search_loop(net, &loaded.data, &cfg.search, &mut |r| log.record(r, manifest.initial_flops))?;
    log.finish()?;
    let meta = CheckpointMeta::new(&cfg.search, &loaded.data.pre);
    finish_run(&args.out_dir, &outcome.net, &meta, &outcome.momentum_bn, args.quiet)
}

pub fn cmd_retrain(args: &RetrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.arch).map_err(|e| Error::io(&args.arch, e))?;
    let report = ArchitectureReport::parse(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.arch.display())))?;
    let mut cfg = resolve(&args.train)?;
    match &cfg.network {
        Some(n) if *n != report.config => {
            return Err(Error::Config(
                "the config's network section disagrees with the architecture report".into(),
            ))
        }
        _ => cfg.network = Some(report.config.clone()),
    }
    let loaded = load_data(&cfg.data, &report.config, &cfg.search, None)?;
    let net = Supernet::build_with_widths(&report.config, &report.widths(), cfg.search.seed)?;
    let manifest = prepare_run("retrain", &args.train, &cfg, &net, loaded.descriptor)?;
    let initial = net.export_architecture();
    let mut log = RunLog::create(&args.train.out_dir, &initial, net.alive_count(), cfg.search.epochs, args.train.quiet)?;
    let outcome = train_fixed(net, &loaded.data, &cfg.search, &mut |r| log.record(r, manifest.initial_flops))?;
    log.finish()?;
    let meta = CheckpointMeta::new(&cfg.search, &loaded.data.pre);
    finish_run(&args.train.out_dir, &outcome.net, &meta, &outcome.momentum_bn, args.train.quiet)
}

/// Evaluates a checkpoint; returns the printed `key = value` lines.
pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let (mut net, meta) = checkpoint::load(&args.checkpoint)?;
    let mut paths = DataPaths::default();
    args.data.apply(&mut paths);
    let loaded = load_data(&paths, net.config(), &meta.config, Some(meta.preprocess()))?;
    let data = &loaded.data;
    let flops = FlopsLedger::new(&net).network_flops(&net);
    let accuracy = validate(&mut net, eval_batches(&data.val, &meta.config, &data.pre)?)?;
    let mut out = String::new();
    let _ = writeln!(out, "checkpoint = {}", args.checkpoint.display());
    let _ = writeln!(out, "samples = {}", data.val.len());
    let _ = writeln!(out, "flops = {flops}");
    let _ = writeln!(out, "accuracy = {accuracy:.6}");
    if args.recalibrate_bn {
        let last = meta.config.epochs.saturating_sub(1);
        recalibrate_bn(&mut net, recalibration_batches(data, &meta.config, last)?, meta.config.bn_recalib_samples)?;
        let recalibrated = validate(&mut net, eval_batches(&data.val, &meta.config, &data.pre)?)?;
        let _ = writeln!(out, "accuracy_recalibrated = {recalibrated:.6}");
    }
    Ok(out)
}

fn read_records(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Summarises a run directory: headline metrics, per-block kernel ratios
/// and the FLOPs trajectory. Also written to `summary.txt`.
pub fn cmd_report(run_dir: &Path) -> Result<String> {
    let manifest_path = run_dir.join(MANIFEST);
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )
    .map_err(|e| Error::Config(format!("{}: {e}", manifest_path.display())))?;
    let records = read_records(&run_dir.join(METRICS))?;
    let arch_path = run_dir.join(ARCHITECTURE);
    let arch = ArchitectureReport::parse(&fs::read_to_string(&arch_path).map_err(|e| Error::io(&arch_path, e))?)?;

    let mut s = String::new();
    let _ = writeln!(s, "run = {}", run_dir.display());
    let _ = writeln!(s, "command = {}", manifest.command);
    let _ = writeln!(s, "epochs = {}", records.len());
    let _ = writeln!(s, "initial_flops = {}", manifest.initial_flops);
    let _ = writeln!(s, "final_flops = {}", arch.flops);
    let _ = writeln!(
        s,
        "flops_reduction = {:.2}%",
        100.0 * (1.0 - arch.flops as f64 / manifest.initial_flops.max(1) as f64)
    );
    let _ = writeln!(s, "final_params = {}", arch.params);
    if let Some(last) = records.last() {
        let _ = writeln!(s, "final_val_acc = {:.4}", last.val_acc);
        if let Some(a) = last.val_acc_before_recalibration {
            let _ = writeln!(s, "final_val_acc_before_recalibration = {a:.4}");
        }
        let full = manifest.initial_flops as u128 * manifest.dataset.train_samples as u128 * records.len() as u128;
        let _ = writeln!(s, "train_macs = {}", last.train_macs);
        let _ = writeln!(s, "train_macs_unshrunk = {full}");
        let _ = writeln!(
            s,
            "train_macs_saving = {:.2}%",
            100.0 * (1.0 - last.train_macs as f64 / full.max(1) as f64)
        );
    }
    let shrinks = records.iter().filter(|r| r.shrink.is_some()).count();
    let _ = writeln!(s, "shrink_events = {shrinks}");
    let recount = match checkpoint::load(&run_dir.join(FINAL_CHECKPOINT)) {
        Ok((net, _)) if net.export_architecture() == arch => "match",
        Ok(_) => "mismatch",
        Err(_) => "unavailable",
    };
    let _ = writeln!(s, "checkpoint_recount = {recount}");

    let _ = writeln!(s, "\n# kernel ratios (fraction of the block's original channels)");
    let _ = write!(s, "block");
    for k in KERNEL_SIZES {
        let _ = write!(s, "\tk{k}");
    }
    let _ = writeln!(s, "\tdead");
    for (i, r) in arch.kernel_ratios().iter().enumerate() {
        let _ = writeln!(s, "{i}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", r[0], r[1], r[2], r[3]);
    }

    let _ = writeln!(s, "\n# flops trajectory");
    let _ = writeln!(s, "epoch\tflops\tflops_ratio\talive\tval_acc");
    for r in &records {
        let _ = writeln!(
            s,
            "{}\t{}\t{:.4}\t{}\t{:.4}",
            r.epoch + 1,
            r.flops,
            r.flops as f64 / manifest.initial_flops.max(1) as f64,
            r.alive_total,
            r.val_acc
        );
    }
    write_file(&run_dir.join(SUMMARY), &s)?;
    Ok(s)
}
