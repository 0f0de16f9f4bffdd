//! Command-line surface tying the crate together: train, compress,
//! decompress, evaluate, sweep, inspect.
//!
//! Configuration comes from a single TOML file (`--config`) plus dotted
//! `--set key=value` overrides, so every invocation is reproducible from the
//! file and the command line alone. The only environment variable consulted
//! is `BRAINCODEC_DATA_ROOT`, which rebases relative `data.inputs` paths;
//! nothing else is read from the environment.
//!
//! Exit codes are fixed: 0 success, 2 configuration error, 3 data error
//! (missing or malformed files, empty datasets), 4 numeric error (non-finite
//! values), 5 geometry error (shapes that do not fit together).
//!
//! # Config schema
//!
//! `train` reads four tables, all optional except that the dataset must end
//! up nonempty:
//!
//! ```toml
//! [codec]        # codec::CodecConfig (architecture and rate)
//! [train]        # trainer::TrainConfig (variant, lrs, epochs, ...)
//!
//! [data]
//! format = "bcraw"            # or "csv" (then sampling_rate_hz is required)
//! sampling_rate_hz = 256.0    # csv inputs only; bcraw stores its own rate
//! modality = "eeg"            # csv inputs only: "eeg" | "ieeg"
//! inputs = ["a.bcraw"]        # resolved against BRAINCODEC_DATA_ROOT
//!
//! [[data.synthetic]]          # synth::SyntheticSpec, appended after inputs
//! num_channels = 2
//! duration_s = 60.0
//!
//! [output]
//! checkpoint = "model.bcck"
//! epoch_log = "model.epochs.csv"   # default: <checkpoint>.log.csv
//! step_log = "model.steps.csv"     # optional, off by default
//! ```
//!
//! `evaluate` reads `[data]`, `[protocol]` (eval::ProtocolConfig) and:
//!
//! ```toml
//! [evaluate]
//! checkpoint = "model.bcck"
//! report_csv = "degradation.csv"
//! report_json = "degradation.json"  # optional full report
//! ```
//!
//! `sweep` reads `[data]` and:
//!
//! ```toml
//! [sweep]
//! checkpoints = ["a.bcck", "b.bcck"]
//! csv = "sweep.csv"
//! ```
//!
//! # Report schemas
//!
//! The epoch log is `epoch,validation_prd,mean_step_loss` with an empty loss
//! cell for the pre-training baseline row. The step log carries one row per
//! optimizer step with the `trainer::StepRecord` fields in declaration
//! order. The degradation report is
//! `scope,subject,events,weight,f1_original,f1_reconstructed,degradation`
//! with one `subject` row per subject and a final `dataset` row; the sweep
//! CSV schema is documented at [`crate::eval::write_sweep_csv`]. Floats are
//! printed in shortest round-trip form, so byte-identical reruns are part of
//! the contract.

use crate::bitstream::{deserialize, ContainerHeader, CONTAINER_MAGIC};
use crate::codec::{CodecConfig, CodecError};
use crate::discriminator::DiscriminatorError;
use crate::eval::{
    self, reference_classifier::ConvClassifier, DegradationReport, EvalError, ProtocolConfig,
};
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::quantizer::QuantizerError;
use crate::signal_io::{
    load_recording, patchify, save_recording, Modality, Patch, Recording, RecordingFormat,
    SignalError, BCRAW_MAGIC,
};
use crate::synth::{self, SyntheticSpec, SynthError};
use crate::trainer::{
    self, Checkpoint, EpochReport, StepRecord, TrainConfig, TrainError, Variant, CHECKPOINT_MAGIC,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

pub const DATA_ROOT_VAR: &str = "BRAINCODEC_DATA_ROOT";

/// CLI failure carrying its exit-code category; the message already names
/// the offending path or field where one exists.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    Geometry(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Geometry(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Geometry(m) => write!(f, "geometry error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn classify_signal(e: SignalError) -> CliError {
    match e {
        SignalError::NonFiniteSamples { .. } => CliError::Numeric(e.to_string()),
        SignalError::InvalidBand { .. } | SignalError::NonIntegerWindow { .. } => {
            CliError::Geometry(e.to_string())
        }
        SignalError::TooFewChannels { .. } | SignalError::MissingGroups(_) => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Data(e.to_string()),
    }
}

fn classify_codec(e: CodecError) -> CliError {
    match e {
        CodecError::InvalidConfig(_) => CliError::Config(e.to_string()),
        CodecError::ShapeMismatch(_) => CliError::Geometry(e.to_string()),
    }
}

fn classify_quantizer(e: QuantizerError) -> CliError {
    match e {
        QuantizerError::TooFewVectors { .. } => CliError::Data(e.to_string()),
        QuantizerError::AlreadyInitialized | QuantizerError::NotInitialized => {
            CliError::Config(e.to_string())
        }
        _ => CliError::Geometry(e.to_string()),
    }
}

fn classify_loss(e: LossError) -> CliError {
    match e {
        LossError::NonFiniteTerm(_) => CliError::Numeric(e.to_string()),
        _ => CliError::Geometry(e.to_string()),
    }
}

fn classify_metric(e: MetricError) -> CliError {
    match e {
        MetricError::NonFinite => CliError::Numeric(e.to_string()),
        MetricError::ZeroReference | MetricError::Empty => CliError::Data(e.to_string()),
        MetricError::ShapeMismatch(..) | MetricError::TooShort { .. } => {
            CliError::Geometry(e.to_string())
        }
    }
}

fn classify_bitstream(e: crate::bitstream::BitstreamError) -> CliError {
    match e {
        crate::bitstream::BitstreamError::GeometryMismatch(_) => CliError::Geometry(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn classify_discriminator(e: DiscriminatorError) -> CliError {
    match e {
        DiscriminatorError::InvalidConfig(_) => CliError::Config(e.to_string()),
        DiscriminatorError::TooShort { .. } => CliError::Geometry(e.to_string()),
    }
}

fn classify_synth(e: SynthError) -> CliError {
    match e {
        SynthError::InvalidSpec(_) => CliError::Config(e.to_string()),
        SynthError::Io(s) => classify_signal(s),
    }
}

fn classify_train(e: TrainError) -> CliError {
    match e {
        TrainError::InvalidConfig(_) | TrainError::StepOutOfRange { .. } => {
            CliError::Config(e.to_string())
        }
        TrainError::EmptyDataset
        | TrainError::CheckpointIo { .. }
        | TrainError::CheckpointFormat(_) => CliError::Data(e.to_string()),
        TrainError::NonFiniteLoss(_) => CliError::Numeric(e.to_string()),
        TrainError::Codec(c) => classify_codec(c),
        TrainError::Quantizer(q) => classify_quantizer(q),
        TrainError::Loss(l) => classify_loss(l),
        TrainError::Discriminator(d) => classify_discriminator(d),
        TrainError::Metric(m) => classify_metric(m),
    }
}

fn classify_eval(e: EvalError) -> CliError {
    match e {
        EvalError::InvalidProtocol(_) | EvalError::NoCheckpoints => {
            CliError::Config(e.to_string())
        }
        EvalError::EmptyDataset
        | EvalError::NoLabels { .. }
        | EvalError::InsufficientEvents { .. }
        | EvalError::ModelHashMismatch
        | EvalError::ReportIo { .. } => CliError::Data(e.to_string()),
        EvalError::GeometryMismatch(_) => CliError::Geometry(e.to_string()),
        EvalError::Signal(s) => classify_signal(s),
        EvalError::Codec(c) => classify_codec(c),
        EvalError::Quantizer(q) => classify_quantizer(q),
        EvalError::Bitstream(b) => classify_bitstream(b),
        EvalError::Metric(m) => classify_metric(m),
        EvalError::Train(t) => classify_train(t),
    }
}

fn io_data(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(
    name = "braincodec",
    version,
    about = "Neural compressor for EEG/iEEG recordings",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a codec from a TOML config; writes a checkpoint and logs.
    Train(TrainArgs),
    /// Encode a recording into a compressed container.
    Compress(CompressArgs),
    /// Decode a container back into a recording.
    Decompress(DecompressArgs),
    /// Run the downstream-fidelity protocol and write a degradation report.
    Evaluate(EvaluateArgs),
    /// Measure rate-distortion across checkpoints and write a CSV.
    Sweep(SweepArgs),
    /// Print a summary of a recording, container, or checkpoint file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Dotted-key override applied before parsing, e.g. train.epochs=3.
    /// Values parse as TOML; anything unparseable is taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replace train.seed from the config (applied after --set).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replace protocol.seed from the config (applied after --set).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Bcraw,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModalityArg {
    Eeg,
    Ieeg,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Eeg => Modality::Eeg,
            ModalityArg::Ieeg => Modality::Ieeg,
        }
    }
}

#[derive(Args, Debug)]
struct CompressArgs {
    /// Input recording.
    input: PathBuf,
    /// Trained checkpoint that defines the model.
    checkpoint: PathBuf,
    /// Output container path.
    output: PathBuf,
    /// Input file format.
    #[arg(long, value_enum, default_value_t = FormatArg::Bcraw)]
    input_format: FormatArg,
    /// Sampling rate of csv inputs; csv does not store it in-band.
    #[arg(long, value_name = "HZ")]
    sampling_rate_hz: Option<f64>,
    /// Modality of csv inputs.
    #[arg(long, value_enum, default_value_t = ModalityArg::Eeg)]
    modality: ModalityArg,
}

#[derive(Args, Debug)]
struct DecompressArgs {
    /// Input container.
    input: PathBuf,
    /// Checkpoint that wrote the container.
    checkpoint: PathBuf,
    /// Output recording path.
    output: PathBuf,
    /// Output file format.
    #[arg(long, value_enum, default_value_t = FormatArg::Bcraw)]
    output_format: FormatArg,
    /// Decode even if the container was written by a different model.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// File to summarize; the kind is detected from its magic bytes.
    path: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DataFormat {
    Bcraw,
    Csv,
}

/// `[data]` table: file inputs plus inline synthetic specs, in that order.
#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub(crate) struct DataConfig {
    format: DataFormat,
    /// Required when `format = "csv"`.
    sampling_rate_hz: Option<f64>,
    modality: Modality,
    inputs: Vec<PathBuf>,
    synthetic: Vec<SyntheticSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Bcraw,
            sampling_rate_hz: None,
            modality: Modality::Eeg,
            inputs: Vec::new(),
            synthetic: Vec::new(),
        }
    }
}

impl DataConfig {
    fn recording_format(&self) -> Result<RecordingFormat, CliError> {
        match self.format {
            DataFormat::Bcraw => Ok(RecordingFormat::BcRaw),
            DataFormat::Csv => {
                let fs = self.sampling_rate_hz.ok_or_else(|| {
                    CliError::Config(
                        "data.sampling_rate_hz is required for csv inputs".into(),
                    )
                })?;
                Ok(RecordingFormat::Csv { sampling_rate_hz: fs, modality: self.modality })
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOutput {
    checkpoint: PathBuf,
    /// Defaults to `<checkpoint>.log.csv`.
    epoch_log: Option<PathBuf>,
    step_log: Option<PathBuf>,
}

impl Default for TrainOutput {
    fn default() -> Self {
        Self { checkpoint: PathBuf::from("checkpoint.bcck"), epoch_log: None, step_log: None }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFileConfig {
    codec: CodecConfig,
    train: TrainConfig,
    data: DataConfig,
    output: TrainOutput,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateSection {
    checkpoint: PathBuf,
    report_csv: PathBuf,
    report_json: Option<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("checkpoint.bcck"),
            report_csv: PathBuf::from("degradation.csv"),
            report_json: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvaluateFileConfig {
    data: DataConfig,
    protocol: ProtocolConfig,
    evaluate: EvaluateSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepSection {
    checkpoints: Vec<PathBuf>,
    csv: PathBuf,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { checkpoints: Vec::new(), csv: PathBuf::from("sweep.csv") }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepFileConfig {
    data: DataConfig,
    sweep: SweepSection,
}

fn load_config_table(path: &Path) -> Result<toml::Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map_err(|e| CliError::Config(format!("cannot parse config {}: {e}", path.display())))
}

/// Parses an override value as a TOML literal, falling back to a string for
/// anything that does not parse (so `--set data.format=csv` needs no quotes).
fn parse_toml_value(raw: &str) -> toml::Value {
    let trimmed = raw.trim();
    match format!("v = {trimmed}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed table has key v"),
        Err(_) => toml::Value::String(trimmed.to_string()),
    }
}

fn insert_dotted(
    table: &mut toml::Table,
    key: &str,
    value: toml::Value,
) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} has an empty segment")));
    }
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for part in parts {
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("override key {key:?}: segment {part:?} is not a table"))
            })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn apply_overrides(table: &mut toml::Table, sets: &[String]) -> Result<(), CliError> {
    for s in sets {
        let (key, raw) = s.split_once('=').ok_or_else(|| {
            CliError::Config(format!("override {s:?} is not of the form key=value"))
        })?;
        insert_dotted(table, key.trim(), parse_toml_value(raw))?;
    }
    Ok(())
}

fn from_table<T: serde::de::DeserializeOwned>(table: toml::Table) -> Result<T, CliError> {
    table.try_into().map_err(|e| CliError::Config(e.to_string()))
}

fn load_file_config<T: serde::de::DeserializeOwned>(args: &ConfigArgs) -> Result<T, CliError> {
    let mut table = load_config_table(&args.config)?;
    apply_overrides(&mut table, &args.set)?;
    from_table(table)
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_VAR).map(PathBuf::from)
}

/// Relative dataset paths resolve against the data root when one is set;
/// absolute paths and outputs are never rebased.
fn resolve_input(path: &Path, root: Option<&Path>) -> PathBuf {
    match root {
        Some(r) if path.is_relative() => r.join(path),
        _ => path.to_path_buf(),
    }
}

fn load_dataset(data: &DataConfig, root: Option<&Path>) -> Result<Vec<Recording>, CliError> {
    let format = data.recording_format()?;
    let mut recordings = Vec::new();
    for input in &data.inputs {
        let path = resolve_input(input, root);
        if !path.exists() {
            return Err(CliError::Data(format!("dataset path not found: {}", path.display())));
        }
        recordings.push(load_recording(&path, &format).map_err(classify_signal)?);
    }
    for spec in &data.synthetic {
        recordings.push(synth::generate(spec).map_err(classify_synth)?);
    }
    if recordings.is_empty() {
        return Err(CliError::Data(
            "dataset is empty: configure data.inputs or data.synthetic".into(),
        ));
    }
    Ok(recordings)
}

fn collect_patches(
    recordings: &[Recording],
    patch_seconds: f64,
) -> Result<Vec<Patch>, CliError> {
    let fs = recordings[0].sampling_rate_hz;
    if recordings.iter().any(|r| r.sampling_rate_hz != fs) {
        return Err(CliError::Geometry(
            "recordings disagree in sampling rate; training batches need one patch length".into(),
        ));
    }
    let mut patches = Vec::new();
    for r in recordings {
        patches.extend(patchify(r, patch_seconds).map_err(classify_signal)?);
    }
    Ok(patches)
}

fn default_epoch_log(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".log.csv");
    PathBuf::from(s)
}

/// Shortest round-trip decimal form; keeps report bytes reproducible.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn csv_io(path: &Path, e: csv::Error) -> CliError {
    CliError::Data(format!("cannot write {}: {e}", path.display()))
}

fn write_epoch_csv(epochs: &[EpochReport], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record(["epoch", "validation_prd", "mean_step_loss"])
        .map_err(|e| csv_io(path, e))?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            fmt_f64(e.validation_prd),
            e.mean_step_loss.map(fmt_f64).unwrap_or_default(),
        ])
        .map_err(|err| csv_io(path, err))?;
    }
    w.flush().map_err(|e| io_data(path, e))
}

fn write_step_csv(steps: &[StepRecord], path: &Path) -> Result<(), CliError> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record([
        "step",
        "lr_generator",
        "lr_discriminator",
        "time",
        "spectral",
        "line_length",
        "feature",
        "adversarial",
        "disc_adversarial",
        "commitment",
        "total",
        "replaced_codes",
    ])
    .map_err(|e| csv_io(path, e))?;
    for s in steps {
        w.write_record([
            s.step.to_string(),
            fmt_f64(s.lr_generator),
            opt(s.lr_discriminator),
            fmt_f64(s.time),
            opt(s.spectral),
            opt(s.line_length),
            opt(s.feature),
            opt(s.adversarial),
            opt(s.disc_adversarial),
            fmt_f64(s.commitment),
            fmt_f64(s.total),
            s.replaced_codes.to_string(),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| io_data(path, e))
}

/// One row per subject plus a weight-aggregated `dataset` row.
fn write_degradation_csv(report: &DegradationReport, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    w.write_record([
        "scope",
        "subject",
        "events",
        "weight",
        "f1_original",
        "f1_reconstructed",
        "degradation",
    ])
    .map_err(|e| csv_io(path, e))?;
    for s in &report.subjects {
        w.write_record([
            "subject".to_string(),
            s.subject.to_string(),
            s.events.to_string(),
            fmt_f64(s.weight),
            fmt_f64(s.f1_original),
            fmt_f64(s.f1_reconstructed),
            fmt_f64(s.f1_original - s.f1_reconstructed),
        ])
        .map_err(|e| csv_io(path, e))?;
    }
    let events: usize = report.subjects.iter().map(|s| s.events).sum();
    let weight: f64 = report.subjects.iter().map(|s| s.weight).sum();
    w.write_record([
        "dataset".to_string(),
        String::new(),
        events.to_string(),
        fmt_f64(weight),
        fmt_f64(report.f1_original),
        fmt_f64(report.f1_reconstructed),
        fmt_f64(report.degradation),
    ])
    .map_err(|e| csv_io(path, e))?;
    w.flush().map_err(|e| io_data(path, e))
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainFileConfig = load_file_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let recordings = load_dataset(&cfg.data, data_root().as_deref())?;
    let patches = collect_patches(&recordings, cfg.codec.patch_seconds)?;
    let result = trainer::fit(&patches, &cfg.codec, &cfg.train).map_err(classify_train)?;
    for e in &result.epochs {
        println!("epoch {}: validation PRD {:.4}", e.epoch, e.validation_prd);
    }
    result.checkpoint.save(&cfg.output.checkpoint).map_err(classify_train)?;
    let epoch_log =
        cfg.output.epoch_log.clone().unwrap_or_else(|| default_epoch_log(&cfg.output.checkpoint));
    write_epoch_csv(&result.epochs, &epoch_log)?;
    if let Some(step_log) = &cfg.output.step_log {
        write_step_csv(&result.steps, step_log)?;
    }
    println!(
        "best epoch {} (validation PRD {:.4})",
        result.best_epoch, result.epochs[result.best_epoch].validation_prd
    );
    println!("wrote checkpoint to {}", cfg.output.checkpoint.display());
    println!("wrote training log to {}", epoch_log.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint not found: {}", path.display())));
    }
    Checkpoint::load(path).map_err(classify_train)
}

fn load_input_recording(
    path: &Path,
    format: FormatArg,
    sampling_rate_hz: Option<f64>,
    modality: ModalityArg,
) -> Result<Recording, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("input recording not found: {}", path.display())));
    }
    let format = match format {
        FormatArg::Bcraw => RecordingFormat::BcRaw,
        FormatArg::Csv => {
            let fs = sampling_rate_hz.ok_or_else(|| {
                CliError::Config("--sampling-rate-hz is required for csv inputs".into())
            })?;
            RecordingFormat::Csv { sampling_rate_hz: fs, modality: modality.into() }
        }
    };
    load_recording(path, &format).map_err(classify_signal)
}

fn cmd_compress(args: &CompressArgs) -> Result<(), CliError> {
    let rec =
        load_input_recording(&args.input, args.input_format, args.sampling_rate_hz, args.modality)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let bytes = eval::compress_recording(&rec, &ck).map_err(classify_eval)?;
    std::fs::write(&args.output, &bytes).map_err(|e| io_data(&args.output, e))?;
    let raw_bits = rec.channels() as f64
        * rec.num_samples() as f64
        * ck.codec_config.raw_bits_per_sample as f64;
    println!("nominal compression ratio: {:.2}", ck.codec_config.compression_ratio());
    println!("measured compression ratio: {:.2}", raw_bits / (bytes.len() as f64 * 8.0));
    println!("wrote {} ({} bytes)", args.output.display(), bytes.len());
    Ok(())
}

fn cmd_decompress(args: &DecompressArgs) -> Result<(), CliError> {
    if !args.input.exists() {
        return Err(CliError::Data(format!("container not found: {}", args.input.display())));
    }
    let bytes = std::fs::read(&args.input).map_err(|e| io_data(&args.input, e))?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let rec = match eval::decompress_container(&bytes, &ck) {
        Ok(r) => r,
        Err(EvalError::ModelHashMismatch) if args.force => {
            eprintln!(
                "warning: container was written by a different model; decoding anyway (--force)"
            );
            eval::decompress_container_unverified(&bytes, &ck).map_err(classify_eval)?
        }
        Err(EvalError::ModelHashMismatch) => {
            return Err(CliError::Data(
                "container model hash does not match the checkpoint; pass --force to decode anyway"
                    .into(),
            ));
        }
        Err(e) => return Err(classify_eval(e)),
    };
    let format = match args.output_format {
        FormatArg::Bcraw => RecordingFormat::BcRaw,
        FormatArg::Csv => RecordingFormat::Csv {
            sampling_rate_hz: rec.sampling_rate_hz,
            modality: rec.modality,
        },
    };
    save_recording(&args.output, &rec, &format).map_err(classify_signal)?;
    println!(
        "decoded {} channels x {} samples at {} Hz",
        rec.channels(),
        rec.num_samples(),
        rec.sampling_rate_hz
    );
    println!("wrote {}", args.output.display());
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let mut cfg: EvaluateFileConfig = load_file_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.protocol.seed = seed;
    }
    let recordings = load_dataset(&cfg.data, data_root().as_deref())?;
    let ck = load_checkpoint(&cfg.evaluate.checkpoint)?;
    let report = eval::run_protocol(&recordings, &ConvClassifier, &cfg.protocol, &ck)
        .map_err(classify_eval)?;
    write_degradation_csv(&report, &cfg.evaluate.report_csv)?;
    if let Some(json_path) = &cfg.evaluate.report_json {
        let json = serde_json::to_vec_pretty(&report)
            .map_err(|e| CliError::Data(format!("cannot serialize report: {e}")))?;
        std::fs::write(json_path, json).map_err(|e| io_data(json_path, e))?;
    }
    println!("classifier: {}", report.classifier);
    println!("nominal compression ratio: {:.2}", report.nominal_cr);
    println!("median PRD: {:.4}", report.median_prd);
    println!("F1 original: {:.4}", report.f1_original);
    println!("F1 reconstructed: {:.4}", report.f1_reconstructed);
    println!("degradation: {:.4}", report.degradation);
    println!("wrote report to {}", cfg.evaluate.report_csv.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let cfg: SweepFileConfig = load_file_config(&args.config)?;
    if cfg.sweep.checkpoints.is_empty() {
        return Err(CliError::Config("sweep.checkpoints is empty".into()));
    }
    let recordings = load_dataset(&cfg.data, data_root().as_deref())?;
    let mut checkpoints = Vec::with_capacity(cfg.sweep.checkpoints.len());
    for path in &cfg.sweep.checkpoints {
        checkpoints.push(load_checkpoint(path)?);
    }
    let rows = eval::rate_distortion_sweep(&recordings, &checkpoints, Some(&cfg.sweep.csv))
        .map_err(classify_eval)?;
    for r in &rows {
        println!(
            "CR {:8.2}  quantizers {:2}  codebook {:4}  median PRD {:.4}",
            r.compression_ratio, r.num_quantizers, r.codebook_size, r.median_prd
        );
    }
    println!("wrote {} rows to {}", rows.len(), cfg.sweep.csv.display());
    Ok(())
}

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Eeg => "eeg",
        Modality::Ieeg => "ieeg",
    }
}

fn hex32(bytes: &[u8; 32]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn inspect_recording(path: &Path) -> Result<(), CliError> {
    let rec = load_recording(path, &RecordingFormat::BcRaw).map_err(classify_signal)?;
    println!("type: recording (bcraw)");
    println!("channels: {}", rec.channels());
    println!("sampling rate: {} Hz", rec.sampling_rate_hz);
    println!("samples per channel: {}", rec.num_samples());
    println!("duration: {:.3} s", rec.duration_seconds());
    println!("modality: {}", modality_name(rec.modality));
    println!("annotations: {}", rec.annotations.len());
    Ok(())
}

fn inspect_container(bytes: &[u8]) -> Result<(), CliError> {
    let (header, grids): (ContainerHeader, _) =
        deserialize(bytes).map_err(classify_bitstream)?;
    println!("type: compressed container");
    println!("version: {}", header.version);
    println!("channels: {}", header.channels);
    println!("sampling rate: {} Hz", header.sampling_rate_hz);
    println!("total samples per channel: {}", header.total_samples);
    println!(
        "patches per channel: {} x {} samples (tail {})",
        header.num_patches(),
        header.patch_samples,
        header.true_tail_length
    );
    println!("latent frames per patch: {}", header.latent_frames());
    println!(
        "quantizer: {} stages x {} codes ({} bits/index)",
        header.num_quantizers,
        header.codebook_size,
        header.bits_per_index()
    );
    println!("source precision: {} bits/sample", header.raw_bits_per_sample);
    println!(
        "modality: {}",
        Modality::from_code(header.modality).map(modality_name).unwrap_or("unknown")
    );
    println!("model hash: {}", hex32(&header.model_hash));
    println!("file size: {} bytes ({} channel grids)", bytes.len(), grids.len());
    Ok(())
}

fn inspect_checkpoint(path: &Path) -> Result<(), CliError> {
    let ck = Checkpoint::load(path).map_err(classify_train)?;
    let c = &ck.codec_config;
    println!("type: checkpoint");
    println!(
        "variant: {}",
        match ck.train_config.variant {
            Variant::Base => "base",
            Variant::Gan => "gan",
        }
    );
    println!("trained steps: {} of {}", ck.step, ck.total_steps);
    println!(
        "codec: base {} ch, stride {} x {} blocks (downsample {}), latent dim {}",
        c.base_channels,
        c.stride,
        c.num_blocks,
        c.downsample_factor(),
        c.latent_dim
    );
    println!("quantizer: {} stages x {} codes", c.num_quantizers, c.codebook_size);
    println!("patch seconds: {}", c.patch_seconds);
    println!("nominal compression ratio: {:.2}", c.compression_ratio());
    println!("adversary: {}", if ck.discriminator_params.is_some() { "present" } else { "absent" });
    println!("model hash: {}", hex32(&ck.content_hash()));
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), CliError> {
    if !args.path.exists() {
        return Err(CliError::Data(format!("file not found: {}", args.path.display())));
    }
    let bytes = std::fs::read(&args.path).map_err(|e| io_data(&args.path, e))?;
    if bytes.starts_with(BCRAW_MAGIC) {
        inspect_recording(&args.path)
    } else if bytes.starts_with(&CONTAINER_MAGIC) {
        inspect_container(&bytes)
    } else if bytes.starts_with(&CHECKPOINT_MAGIC) {
        inspect_checkpoint(&args.path)
    } else {
        Err(CliError::Data(format!(
            "{}: not a braincodec recording, container, or checkpoint",
            args.path.display()
        )))
    }
}

/// Parses and dispatches one invocation; returns the process exit code.
/// Help and version requests print to stdout and return 0.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
