//! Command-line pipeline: synthesize or ingest recordings, train, tokenize,
//! evaluate with the proxy classifier, export statistics and instruction
//! prompts.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::downstream::{
    self, export_prompts, load_proxy, save_proxy, split_by_recording,
    train_proxy, DownstreamError, ProxyConfig,
};
use crate::iterlearn::{
    LossRow, TrainConfig, TrainError, TrainObserver, Trainer,
};
use crate::losses::LossError;
use crate::metrics::{accuracy_report, fit_zipf_exponent, RankFrequencyTable};
use crate::net::checkpoint::Container;
use crate::net::NetError;
use crate::quantizer::QuantizerError;
use crate::signal::{
    load_recordings, save_binary, save_csv, synthesize, FileFormat, Recording, SignalError,
    SynthConfig,
};
use crate::tokenizer::{
    emit, read_token_dump, write_token_dump, EmissionMode, TokenRecord, TokenizerError,
};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<SignalError> for CliError {
    fn from(e: SignalError) -> Self {
        match e {
            SignalError::BadConfig(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match &e {
            TrainError::Config(_) | TrainError::NotAtBoundary => CliError::Config(e.to_string()),
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::EmptyDataset | TrainError::ChannelMismatch { .. } => {
                CliError::Data(e.to_string())
            }
            TrainError::Signal(_) => CliError::Data(e.to_string()),
            TrainError::Net(n) => net_error(n),
            TrainError::Quantizer(_) | TrainError::Loss(_) => CliError::Numerical(e.to_string()),
        }
    }
}

fn net_error(e: &NetError) -> CliError {
    match e {
        NetError::BadConfig(_) | NetError::ShapeMismatch { .. } => {
            CliError::Config(e.to_string())
        }
        NetError::Checkpoint(_) => CliError::Data(e.to_string()),
        NetError::Graph(_) | NetError::NonFiniteGradient(_) => {
            CliError::Numerical(e.to_string())
        }
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        net_error(&e)
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match &e {
            TokenizerError::BudgetTooSmall { .. } | TokenizerError::SlicesDontDivide { .. } => {
                CliError::Config(e.to_string())
            }
            TokenizerError::Net(n) => net_error(n),
            TokenizerError::Io { .. } | TokenizerError::BadRecord { .. } => {
                CliError::Data(e.to_string())
            }
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<DownstreamError> for CliError {
    fn from(e: DownstreamError) -> Self {
        match &e {
            DownstreamError::Io { .. } => CliError::Data(e.to_string()),
            DownstreamError::Net(n) => net_error(n),
            DownstreamError::UnknownLabel(..)
            | DownstreamError::SingleClass
            | DownstreamError::TokenOutOfRange { .. }
            | DownstreamError::Empty => CliError::Data(e.to_string()),
        }
    }
}

impl From<QuantizerError> for CliError {
    fn from(e: QuantizerError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::Numerical(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "semglang",
    about = "sEMG-to-token-language pipeline: synthesize data, train the quantizing autoencoder, emit token sequences, evaluate, and export prompts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate labeled surrogate recordings and an index file.
    Synth(SynthArgs),
    /// Train the quantizing autoencoder under the generation schedule.
    Train(TrainArgs),
    /// Emit token sequences for a dataset from a trained checkpoint.
    Tokenize(TokenizeArgs),
    /// Train/evaluate the proxy classifier on a token dump.
    Eval(EvalArgs),
    /// Token statistics: rank-frequency table, Zipf fit, per-generation
    /// diagnostics.
    Stats(StatsArgs),
    /// Export instruction-tuning prompts from a token dump.
    ExportLlm(ExportLlmArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 2048)]
    pub t_len: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise_std: f64,
    #[arg(long, default_value_t = 1.0)]
    pub burst_amp: f64,
    /// Comma-separated bursts-per-second, one per class.
    #[arg(long)]
    pub rates: Option<String>,
    #[arg(long, default_value_t = 1000.0)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `bin` or `csv`.
    #[arg(long, default_value = "bin")]
    pub format: String,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Recording file, or directory containing an index.json.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with TrainConfig keys; CLI flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a checkpoint (its embedded config wins).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub generations: Option<u32>,
    #[arg(long)]
    pub warmup_steps: Option<u64>,
    #[arg(long)]
    pub transmission_steps: Option<u64>,
    #[arg(long)]
    pub final_extra_steps: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub zipf_exponent: Option<f64>,
    #[arg(long)]
    pub zipf_fraction: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run a single generation regardless of --generations.
    #[arg(long)]
    pub no_iteration: bool,
    /// Skip the warm-up phase (warmup_steps = 0).
    #[arg(long)]
    pub no_warmup: bool,
    /// Disable the Zipf prior (sampling and regularizer).
    #[arg(long)]
    pub no_zipf: bool,
    /// Disable the context-sensitivity regularizer.
    #[arg(long)]
    pub no_context: bool,
    /// Disable the cross-generation preservation term.
    #[arg(long)]
    pub no_preserving: bool,
    /// Disable residual-adaptive allocation downstream of this run.
    #[arg(long)]
    pub no_residual: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub t_max: Option<usize>,
    /// Force uniform duplicated tokens instead of adaptive allocation.
    #[arg(long)]
    pub uniform: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub seeds: u32,
    #[arg(long, default_value_t = 0.25)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Evaluate a saved proxy instead of training new ones.
    #[arg(long)]
    pub load_proxy: Option<PathBuf>,
    /// Comma-separated class names; defaults to class<i>.
    #[arg(long)]
    pub labels: Option<String>,
}

#[derive(Args, Debug, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub tokens: PathBuf,
    /// report.json from training, for per-generation diagnostics.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ExportLlmArgs {
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated class names; defaults to class<i>.
    #[arg(long)]
    pub labels: Option<String>,
}

#[derive(Serialize)]
struct RunManifest {
    schema_version: u32,
    command: String,
    args: serde_json::Value,
    seeds: Vec<u64>,
    git_describe: String,
    started_unix: u64,
    finished_unix: u64,
    artifacts: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// Manifest next to the run's artifacts, written atomically.
fn write_manifest(
    dir: &Path,
    command: &str,
    args: serde_json::Value,
    seeds: Vec<u64>,
    started: u64,
    artifacts: &[PathBuf],
) -> Result<(), CliError> {
    let manifest = RunManifest {
        schema_version: 1,
        command: command.to_string(),
        args,
        seeds,
        git_describe: git_describe(),
        started_unix: started,
        finished_unix: now_unix(),
        artifacts: artifacts
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
    };
    let path = dir.join("manifest.json");
    let tmp = dir.join("manifest.json.tmp");
    fs::write(
        &tmp,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

#[derive(Serialize, serde::Deserialize)]
struct IndexEntry {
    path: String,
    label: u32,
    subject: String,
    steps: usize,
}

#[derive(Serialize, serde::Deserialize)]
struct DataIndex {
    channels: usize,
    sample_rate_hz: f64,
    format: String,
    recordings: Vec<IndexEntry>,
}

/// Load a single recording file or a directory with an index.json.
pub fn load_dataset(path: &Path) -> Result<Vec<Recording>, CliError> {
    if path.is_dir() {
        let index_path = path.join("index.json");
        let raw = fs::read(&index_path).map_err(|e| io_err(&index_path, e))?;
        let index: DataIndex = serde_json::from_slice(&raw)
            .map_err(|e| CliError::Data(format!("{}: {e}", index_path.display())))?;
        let format = match index.format.as_str() {
            "bin" => FileFormat::F32Binary,
            "csv" => FileFormat::Csv,
            other => return Err(CliError::Data(format!("unknown index format `{other}`"))),
        };
        let mut out = Vec::new();
        for entry in &index.recordings {
            let file = path.join(&entry.path);
            let mut recs = load_recordings(&file, format)?;
            for r in &mut recs {
                r.subject_id = entry.subject.clone();
            }
            out.append(&mut recs);
        }
        if out.is_empty() {
            return Err(CliError::Data(format!(
                "{}: index lists no recordings",
                index_path.display()
            )));
        }
        Ok(out)
    } else {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => FileFormat::Csv,
            _ => FileFormat::F32Binary,
        };
        Ok(load_recordings(path, format)?)
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Tokenize(args) => cmd_tokenize(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Stats(args) => cmd_stats(args),
        Command::ExportLlm(args) => cmd_export_llm(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let started = now_unix();
    let rates: Vec<f64> = match &args.rates {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| CliError::Config(format!("bad rate `{s}`: {e}")))
            })
            .collect::<Result<_, _>>()?,
        None => (0..args.classes)
            .map(|c| 3.0 * 1.6f64.powi(c as i32))
            .collect(),
    };
    let cfg = SynthConfig {
        num_classes: args.classes,
        channels: args.channels,
        burst_rates: rates,
        burst_amp: args.burst_amp,
        noise_std: args.noise_std,
        sample_rate_hz: args.sample_rate,
        seed: args.seed,
    };
    let recordings = synthesize(&cfg, args.per_class, args.t_len)?;
    ensure_dir(&args.out)?;
    let (ext, format_name) = match args.format.as_str() {
        "bin" => ("bin", "bin"),
        "csv" => ("csv", "csv"),
        other => {
            return Err(CliError::Config(format!(
                "format must be bin or csv, got `{other}`"
            )))
        }
    };
    let mut entries = Vec::new();
    let mut artifacts = Vec::new();
    for rec in &recordings {
        let file = args.out.join(format!("{}.{ext}", rec.id));
        match format_name {
            "bin" => save_binary(&file, rec, false)?,
            _ => save_csv(&file, rec, false)?,
        }
        entries.push(IndexEntry {
            path: format!("{}.{ext}", rec.id),
            label: rec.label,
            subject: rec.subject_id.clone(),
            steps: rec.steps,
        });
        artifacts.push(file);
    }
    let index = DataIndex {
        channels: args.channels,
        sample_rate_hz: args.sample_rate,
        format: format_name.to_string(),
        recordings: entries,
    };
    let index_path = args.out.join("index.json");
    fs::write(
        &index_path,
        serde_json::to_string_pretty(&index).expect("index serializes"),
    )
    .map_err(|e| io_err(&index_path, e))?;
    artifacts.push(index_path);
    write_manifest(
        &args.out,
        "synth",
        serde_json::to_value(&args).unwrap(),
        vec![args.seed],
        started,
        &artifacts,
    )
}

fn resolve_train_config(args: &TrainArgs, data_channels: usize) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            toml::from_str::<TrainConfig>(&raw)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    macro_rules! flag {
        ($field:ident) => {
            if let Some(v) = args.$field {
                cfg.$field = v;
            }
        };
    }
    flag!(generations);
    flag!(warmup_steps);
    flag!(transmission_steps);
    flag!(final_extra_steps);
    flag!(k);
    flag!(d);
    flag!(s);
    flag!(t);
    flag!(stride);
    flag!(t_max);
    flag!(hidden);
    flag!(lambda1);
    flag!(lambda2);
    flag!(zipf_exponent);
    flag!(lr);
    flag!(batch_size);
    flag!(seed);
    if let Some(v) = args.zipf_fraction {
        cfg.zipf_phase_fraction = v;
    }
    if args.no_iteration {
        cfg.generations = 1;
    }
    if args.no_warmup {
        cfg.warmup_steps = 0;
    }
    if args.no_zipf {
        cfg.zipf_enabled = false;
    }
    if args.no_context {
        cfg.context_enabled = false;
    }
    if args.no_preserving {
        cfg.preserving_enabled = false;
    }
    if args.no_residual {
        cfg.residual_enabled = false;
    }
    cfg.channels = data_channels;
    Ok(cfg)
}

/// Streams the loss log to report.csv and emits periodic checkpoints.
struct CliObserver {
    csv: std::io::BufWriter<fs::File>,
    out_dir: PathBuf,
    every: Option<u64>,
    error: Option<CliError>,
}

impl CliObserver {
    fn new(out_dir: &Path, every: Option<u64>, append: bool) -> Result<Self, CliError> {
        let path = out_dir.join("report.csv");
        let mut opts = fs::OpenOptions::new();
        if append && path.exists() {
            opts.append(true);
        } else {
            opts.write(true).create(true).truncate(true);
        }
        let file = opts.open(&path).map_err(|e| io_err(&path, e))?;
        let mut csv = std::io::BufWriter::new(file);
        if !append || !path.exists() {
            writeln!(csv, "{}", LossRow::CSV_HEADER).map_err(|e| io_err(&path, e))?;
        }
        Ok(Self {
            csv,
            out_dir: out_dir.to_path_buf(),
            every,
            error: None,
        })
    }
}

impl TrainObserver for CliObserver {
    fn on_step(&mut self, row: &LossRow) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.csv, "{}", row.csv_line()) {
                self.error = Some(CliError::Data(format!("report.csv: {e}")));
            }
        }
    }

    fn after_step(&mut self, trainer: &Trainer) {
        if let Some(every) = self.every {
            if every > 0 && trainer.global_step % every == 0 && self.error.is_none() {
                let path = self
                    .out_dir
                    .join(format!("checkpoint_step{}.ckpt", trainer.global_step));
                if let Err(e) = trainer.to_container().write(&path) {
                    self.error = Some(e.into());
                }
            }
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let started = now_unix();
    let recordings = load_dataset(&args.data)?;
    ensure_dir(&args.out)?;

    let (mut trainer, resumed) = match &args.resume {
        Some(ckpt) => {
            let container = Container::read(ckpt)?;
            (Trainer::from_container(&container)?, true)
        }
        None => {
            let cfg = resolve_train_config(&args, recordings[0].channels)?;
            (Trainer::new(cfg)?, false)
        }
    };
    let seed = trainer.cfg.seed;
    let segments = trainer.make_segments(&recordings)?.len();

    let mut observer = CliObserver::new(&args.out, args.checkpoint_every, resumed)?;
    trainer.run(&recordings, &mut observer, None)?;
    observer
        .csv
        .flush()
        .map_err(|e| CliError::Data(format!("report.csv: {e}")))?;
    if let Some(e) = observer.error {
        return Err(e);
    }

    let ckpt_path = args.out.join("checkpoint.ckpt");
    trainer.to_container().write(&ckpt_path)?;

    let report = trainer.report(segments);
    let report_path = args.out.join("report.json");
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| io_err(&report_path, e))?;

    let summary_path = args.out.join("codebook_summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&trainer.codebook.summary()).expect("summary serializes"),
    )
    .map_err(|e| io_err(&summary_path, e))?;

    write_manifest(
        &args.out,
        "train",
        serde_json::to_value(&args).unwrap(),
        vec![seed],
        started,
        &[
            ckpt_path,
            report_path,
            summary_path,
            args.out.join("report.csv"),
        ],
    )
}

fn cmd_tokenize(args: TokenizeArgs) -> Result<(), CliError> {
    let started = now_unix();
    let container = Container::read(&args.checkpoint)?;
    let trainer = Trainer::from_container(&container)?;
    let recordings = load_dataset(&args.data)?;
    let segments = trainer.make_segments(&recordings)?;
    let t_max = args.t_max.unwrap_or(trainer.cfg.t_max);
    let mode = if args.uniform || !trainer.cfg.residual_enabled {
        EmissionMode::Uniform
    } else {
        EmissionMode::Adaptive
    };
    let mut records = Vec::with_capacity(segments.len());
    for seg in &segments {
        let emitted = emit(
            &trainer.encoder,
            &trainer.codebook,
            &trainer.decoder,
            seg,
            t_max,
            mode,
        )?;
        records.push(TokenRecord::from(&emitted));
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_token_dump(&args.out, &records)?;
    let dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    write_manifest(
        &dir,
        "tokenize",
        serde_json::to_value(&args).unwrap(),
        vec![trainer.cfg.seed],
        started,
        &[args.out.clone()],
    )
}

fn parse_labels(spec: &Option<String>, records: &[TokenRecord]) -> Vec<String> {
    match spec {
        Some(s) => s.split(',').map(|n| n.trim().to_string()).collect(),
        None => {
            let max = records.iter().map(|r| r.label).max().unwrap_or(0);
            (0..=max).map(|i| format!("class{i}")).collect()
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let started = now_unix();
    let records = read_token_dump(&args.tokens)?;
    if records.is_empty() {
        return Err(CliError::Data(format!(
            "{}: empty token dump",
            args.tokens.display()
        )));
    }
    let class_names = parse_labels(&args.labels, &records);
    let vocab = args.vocab.unwrap_or_else(|| {
        records
            .iter()
            .flat_map(|r| r.tokens.iter())
            .max()
            .map(|&m| m + 1)
            .unwrap_or(1)
    });
    ensure_dir(&args.out)?;

    let (train_set, val_set) = split_by_recording(&records, args.val_fraction, args.seed);
    if train_set.is_empty() || val_set.is_empty() {
        return Err(CliError::Data(
            "train/val split left one side empty; need more recordings".into(),
        ));
    }

    let mut runs = Vec::new();
    let mut reports = Vec::new();
    let mut seeds_used = Vec::new();
    let mut artifacts = Vec::new();
    if let Some(proxy_path) = &args.load_proxy {
        let model = load_proxy(proxy_path)?;
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        for rec in &val_set {
            let (p, _) = downstream::classify(&model, &rec.tokens)?;
            preds.push(p);
            labels.push(rec.label);
        }
        runs.push((preds, labels));
        seeds_used.push(model.cfg.seed);
    } else {
        for i in 0..args.seeds.max(1) {
            let seed = args.seed + i as u64;
            seeds_used.push(seed);
            let mut cfg = ProxyConfig::new(vocab, class_names.len(), seed);
            if let Some(e) = args.epochs {
                cfg.max_epochs = e;
            }
            let (model, report) = train_proxy(&train_set, &val_set, cfg)?;
            if i == 0 {
                let proxy_path = args.out.join("proxy.ckpt");
                save_proxy(&model, &proxy_path)?;
                artifacts.push(proxy_path);
            }
            let mut preds = Vec::new();
            let mut labels = Vec::new();
            for rec in &val_set {
                let (p, _) = downstream::classify(&model, &rec.tokens)?;
                preds.push(p);
                labels.push(rec.label);
            }
            runs.push((preds, labels));
            reports.push(report);
        }
    }

    let report = accuracy_report(&runs, &class_names)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let metrics_path = args.out.join("metrics.json");
    let payload = serde_json::json!({
        "accuracy": report,
        "proxy_runs": reports,
        "val_records": val_set.len(),
        "train_records": train_set.len(),
        "vocab": vocab,
    });
    fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&payload).expect("metrics serialize"),
    )
    .map_err(|e| io_err(&metrics_path, e))?;
    artifacts.push(metrics_path);

    let confusion_path = args.out.join("confusion.csv");
    let mut csv = String::new();
    csv.push_str(&class_names.join(","));
    csv.push('\n');
    for row in &report.confusion {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&line.join(","));
        csv.push('\n');
    }
    fs::write(&confusion_path, csv).map_err(|e| io_err(&confusion_path, e))?;
    artifacts.push(confusion_path);

    write_manifest(
        &args.out,
        "eval",
        serde_json::to_value(&args).unwrap(),
        seeds_used,
        started,
        &artifacts,
    )
}

fn cmd_stats(args: StatsArgs) -> Result<(), CliError> {
    let started = now_unix();
    let records = read_token_dump(&args.tokens)?;
    ensure_dir(&args.out)?;

    let report_json: Option<serde_json::Value> = match &args.report {
        Some(path) => {
            let raw = fs::read(path).map_err(|e| io_err(path, e))?;
            Some(
                serde_json::from_slice(&raw)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
            )
        }
        None => None,
    };

    let vocab = report_json
        .as_ref()
        .and_then(|r| r["config"]["k"].as_u64())
        .map(|k| k as usize)
        .unwrap_or_else(|| {
            records
                .iter()
                .flat_map(|r| r.tokens.iter())
                .max()
                .map(|&m| m + 1)
                .unwrap_or(1)
        });
    let mut counts = vec![0u64; vocab];
    for rec in &records {
        for &t in &rec.tokens {
            if t < vocab {
                counts[t] += 1;
            }
        }
    }
    let table = RankFrequencyTable::from_counts(&counts);

    let mut artifacts = Vec::new();
    let rank_path = args.out.join("rank_frequency.csv");
    let mut csv = String::from("token,count,rank\n");
    for (token, count, rank) in &table.rows {
        csv.push_str(&format!("{token},{count},{rank}\n"));
    }
    fs::write(&rank_path, csv).map_err(|e| io_err(&rank_path, e))?;
    artifacts.push(rank_path);

    let fit = fit_zipf_exponent(&table).ok();
    let fit_path = args.out.join("zipf_fit.json");
    fs::write(
        &fit_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "exponent": fit.map(|f| f.0),
            "r_squared": fit.map(|f| f.1),
            "total_tokens": table.total,
            "dead_tokens": table.dead_tokens,
            "live_tokens": table.rows.len(),
        }))
        .expect("fit serializes"),
    )
    .map_err(|e| io_err(&fit_path, e))?;
    artifacts.push(fit_path);

    if let Some(report) = &report_json {
        let gens_path = args.out.join("generations.csv");
        let mut csv = String::from("generation,js_usage_to_zipf,codebook_perplexity,cooc_drift\n");
        if let Some(gens) = report["generations"].as_array() {
            for g in gens {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    g["generation"],
                    g["js_usage_to_zipf"],
                    g["codebook_perplexity"],
                    g["cooc_drift"]
                ));
            }
        }
        fs::write(&gens_path, csv).map_err(|e| io_err(&gens_path, e))?;
        artifacts.push(gens_path);
    }

    write_manifest(
        &args.out,
        "stats",
        serde_json::to_value(&args).unwrap(),
        vec![],
        started,
        &artifacts,
    )
}

fn cmd_export_llm(args: ExportLlmArgs) -> Result<(), CliError> {
    let started = now_unix();
    let records = read_token_dump(&args.tokens)?;
    let class_names = parse_labels(&args.labels, &records);
    let prompts = export_prompts(&records, &class_names)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    downstream::write_prompts(&args.out, &prompts)?;
    let map_path = args.out.with_extension("labels.json");
    downstream::write_label_map(&map_path, &class_names)?;
    let dir = args
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf();
    write_manifest(
        &dir,
        "export-llm",
        serde_json::to_value(&args).unwrap(),
        vec![],
        started,
        &[args.out.clone(), map_path],
    )
}
