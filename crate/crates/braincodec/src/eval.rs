//! Downstream-fidelity evaluation: full-pipeline reconstruction through the
//! container format, pluggable window classifiers run under
//! train-original/test-reconstructed protocols with cross-validation, and
//! rate-distortion sweeps.
//!
//! The harness never trains the codec; checkpoints are inputs. All protocol
//! randomness derives from the protocol seed, so reports are reproducible.

use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::bitstream::{
    deserialize, serialize, BitstreamError, ContainerHeader, CONTAINER_VERSION,
};
use crate::codec::{decode_latents, encode_patches, CodecError, LatentSequence};
use crate::metrics::{self, Aggregation, MetricError, MetricReport};
use crate::quantizer::{frame_indices_from_grids, grids_from_frame_indices, QuantizerError};
use crate::signal_io::{
    patch_window, patchify, depatchify, Modality, Patch, Recording, SignalError,
};
use crate::trainer::{Checkpoint, TrainError};

pub const DEFAULT_CLASSIFIER_EPOCHS: usize = 50;
pub const DEFAULT_CLASSIFIER_LR: f64 = 3e-4;
pub const DEFAULT_WINDOW_SECONDS: f64 = 5.0;
pub const DEFAULT_CLASSIFIER_BATCH: usize = 128;

/// A window is positive when at least this fraction of it lies inside a
/// labeled event interval.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

/// Scores above this count as positive predictions.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no checkpoints supplied")]
    NoCheckpoints,
    #[error("subject {subject} has no labeled events for the protocol")]
    NoLabels { subject: usize },
    #[error("subject {subject} has {events} labeled events; leave-one-out needs at least 2")]
    InsufficientEvents { subject: usize, events: usize },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("container was written by a different model (content hash mismatch)")]
    ModelHashMismatch,
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Bitstream(#[from] BitstreamError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("report io at {path}: {source}")]
    ReportIo { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Train on originals, test on reconstructions (the headline protocol).
    TrainOrigTestRec,
    TrainRecTestOrig,
    TrainRecTestRec,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScheme {
    /// One fold per labeled event; the recording is partitioned into
    /// contiguous segments, each containing exactly one event.
    LeaveOneSeizureOut,
    /// Single seeded shuffle split of the windows.
    FixedSplit,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub direction: Direction,
    pub cv: CvScheme,
    pub classifier_epochs: usize,
    pub classifier_lr: f64,
    pub window_seconds: f64,
    pub batch_size: usize,
    /// Fraction of a window that must lie inside an event to label it positive.
    pub overlap_threshold: f64,
    /// Train fraction under `FixedSplit`.
    pub train_fraction: f64,
    /// Only annotations with this label count as events; None accepts any.
    pub positive_label: Option<String>,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            direction: Direction::TrainOrigTestRec,
            cv: CvScheme::LeaveOneSeizureOut,
            classifier_epochs: DEFAULT_CLASSIFIER_EPOCHS,
            classifier_lr: DEFAULT_CLASSIFIER_LR,
            window_seconds: DEFAULT_WINDOW_SECONDS,
            batch_size: DEFAULT_CLASSIFIER_BATCH,
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            train_fraction: 0.8,
            positive_label: None,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.window_seconds > 0.0 && self.window_seconds.is_finite()) {
            return Err(EvalError::InvalidProtocol("window_seconds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(EvalError::InvalidProtocol("batch_size must be >= 1".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(EvalError::InvalidProtocol(
                "overlap_threshold must lie in (0, 1]".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(EvalError::InvalidProtocol("train_fraction must lie in (0, 1)".into()));
        }
        if !(self.classifier_lr > 0.0 && self.classifier_lr.is_finite()) {
            return Err(EvalError::InvalidProtocol("classifier_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Provenance of one evaluation window; scorers see this, not the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowMeta {
    pub subject: usize,
    pub start_sample: usize,
}

/// Fixed-length multichannel windows with binary labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledWindows {
    pub meta: Vec<WindowMeta>,
    /// Each (channels, window_samples).
    pub data: Vec<Array2<f64>>,
    pub labels: Vec<bool>,
    pub sampling_rate_hz: f64,
}

impl LabeledWindows {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledWindows {
        LabeledWindows {
            meta: idx.iter().map(|&i| self.meta[i]).collect(),
            data: idx.iter().map(|&i| self.data[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sampling_rate_hz: self.sampling_rate_hz,
        }
    }

    pub fn extend_from(&mut self, other: &LabeledWindows) {
        self.meta.extend_from_slice(&other.meta);
        self.data.extend(other.data.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        if self.sampling_rate_hz == 0.0 {
            self.sampling_rate_hz = other.sampling_rate_hz;
        }
    }
}

/// Trained classifier handle: scores one window, higher means more likely
/// positive, thresholded at [`DECISION_THRESHOLD`].
pub trait WindowScorer {
    fn score(&self, meta: WindowMeta, data: ArrayView2<f64>) -> f64;
}

/// Pluggable downstream classifier. Implementations must be deterministic
/// for a given seed.
pub trait ClassifierAdapter {
    fn name(&self) -> &str;
    fn train(
        &self,
        train: &LabeledWindows,
        protocol: &ProtocolConfig,
        seed: u64,
    ) -> Result<Box<dyn WindowScorer>, EvalError>;
}

/// Window-level F1. The degenerate empty case (no positives anywhere, no
/// false alarms) scores 1.0.
pub fn f1_score(tp: usize, fp: usize, false_neg: usize) -> f64 {
    if tp + fp + false_neg == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + false_neg) as f64
    }
}

/// Event intervals in sample coordinates, filtered by the protocol's
/// positive label, sorted and merged.
fn merged_event_intervals(rec: &Recording, protocol: &ProtocolConfig) -> Vec<(u64, u64)> {
    let mut iv: Vec<(u64, u64)> = rec
        .annotations
        .iter()
        .filter(|a| {
            protocol.positive_label.as_deref().is_none_or(|l| l == a.label)
                && a.offset_sample > a.onset_sample
        })
        .map(|a| (a.onset_sample, a.offset_sample))
        .collect();
    iv.sort_unstable();
    let mut merged: Vec<(u64, u64)> = Vec::with_capacity(iv.len());
    for (s, e) in iv {
        match merged.last_mut() {
            Some(last) if s <= last.1 => last.1 = last.1.max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

fn overlap_samples(intervals: &[(u64, u64)], start: u64, end: u64) -> u64 {
    intervals
        .iter()
        .map(|&(s, e)| e.min(end).saturating_sub(s.max(start)))
        .sum()
}

/// Cuts a recording into non-overlapping windows of `window_seconds`,
/// labeling each by event overlap. The trailing partial window is dropped.
pub fn extract_windows(
    rec: &Recording,
    subject: usize,
    protocol: &ProtocolConfig,
) -> Result<LabeledWindows, EvalError> {
    let w = patch_window(protocol.window_seconds, rec.sampling_rate_hz)?;
    let n_w = rec.num_samples() / w;
    if n_w == 0 {
        return Err(EvalError::GeometryMismatch(format!(
            "recording of {} samples is shorter than one {w}-sample window",
            rec.num_samples()
        )));
    }
    let intervals = merged_event_intervals(rec, protocol);
    let need = (protocol.overlap_threshold * w as f64).ceil() as u64;
    let mut out = LabeledWindows {
        sampling_rate_hz: rec.sampling_rate_hz,
        ..Default::default()
    };
    for wi in 0..n_w {
        let start = wi * w;
        let ov = overlap_samples(&intervals, start as u64, (start + w) as u64);
        out.meta.push(WindowMeta { subject, start_sample: start });
        out.data.push(rec.samples.slice(ndarray::s![.., start..start + w]).to_owned());
        out.labels.push(ov >= need.max(1));
    }
    Ok(out)
}

fn geometry(msg: impl Into<String>) -> EvalError {
    EvalError::GeometryMismatch(msg.into())
}

/// Compresses a recording into one container holding every channel and
/// patch. The header's model hash binds the payload to `checkpoint`.
pub fn compress_recording(rec: &Recording, ck: &Checkpoint) -> Result<Vec<u8>, EvalError> {
    let cfg = &ck.codec_config;
    let factor = cfg.downsample_factor();
    if !factor.is_power_of_two() {
        return Err(geometry(format!(
            "downsample factor {factor} is not a power of two; the container header cannot express it"
        )));
    }
    if rec.channels() == 0 || rec.num_samples() == 0 {
        return Err(geometry("empty recording"));
    }
    let window = patch_window(cfg.patch_seconds, rec.sampling_rate_hz)?;
    cfg.validate_window(window)?;
    if window > u32::MAX as usize {
        return Err(geometry(format!("patch of {window} samples overflows the header")));
    }
    if cfg.num_quantizers > u8::MAX as usize || cfg.codebook_size > u16::MAX as usize
        || cfg.raw_bits_per_sample > u8::MAX as u32
    {
        return Err(geometry("quantizer geometry overflows the header"));
    }

    let codec = ck.codec();
    let patches = patchify(rec, cfg.patch_seconds)?;
    let latents = encode_patches(&codec, &patches)?;
    let t_lat = window / factor;
    let n_patches = rec.num_samples().div_ceil(window).max(1);
    let mut slots: Vec<Vec<Option<crate::quantizer::CodeGrid>>> =
        vec![vec![None; n_patches]; rec.channels()];
    for seq in &latents {
        let frames_t = seq.frames.t().to_owned();
        let qf = ck.quantizer.quantize_frames(frames_t.view())?;
        let grid = grids_from_frame_indices(&qf.indices, 1, t_lat)
            .pop()
            .expect("one grid per sequence");
        slots[seq.channel_index][seq.patch_index] = Some(grid);
    }
    let grids: Vec<Vec<crate::quantizer::CodeGrid>> = slots
        .into_iter()
        .map(|ch| ch.into_iter().map(|g| g.expect("complete patch cover")).collect())
        .collect();

    let header = ContainerHeader {
        version: CONTAINER_VERSION,
        model_hash: ck.content_hash(),
        sampling_rate_hz: rec.sampling_rate_hz,
        channels: rec.channels() as u32,
        total_samples: rec.num_samples() as u64,
        patch_samples: window as u32,
        downsample_exponent: factor.trailing_zeros() as u8,
        num_quantizers: cfg.num_quantizers as u8,
        codebook_size: cfg.codebook_size as u16,
        raw_bits_per_sample: cfg.raw_bits_per_sample as u8,
        modality: rec.modality.code(),
        true_tail_length: (rec.num_samples() - (n_patches - 1) * window) as u32,
    };
    Ok(serialize(&header, &grids)?)
}

/// Exact inverse of [`compress_recording`] up to quantization: decodes one
/// container back into a recording. Channel names are synthesized and
/// annotations are empty; callers carry those from the source.
pub fn decompress_container(bytes: &[u8], ck: &Checkpoint) -> Result<Recording, EvalError> {
    decompress_container_impl(bytes, ck, true)
}

/// [`decompress_container`] without the model-hash check. Decoding with the
/// wrong model yields structurally valid but meaningless samples; this exists
/// only for explicit operator override.
pub fn decompress_container_unverified(
    bytes: &[u8],
    ck: &Checkpoint,
) -> Result<Recording, EvalError> {
    decompress_container_impl(bytes, ck, false)
}

fn decompress_container_impl(
    bytes: &[u8],
    ck: &Checkpoint,
    verify_hash: bool,
) -> Result<Recording, EvalError> {
    let (header, grids) = deserialize(bytes)?;
    if verify_hash && header.model_hash != ck.content_hash() {
        return Err(EvalError::ModelHashMismatch);
    }
    let codec = ck.codec();
    let window = header.patch_samples as usize;
    let mut sequences = Vec::with_capacity(header.channels as usize * header.num_patches());
    for (ci, patches) in grids.iter().enumerate() {
        for (pi, grid) in patches.iter().enumerate() {
            let idx = frame_indices_from_grids(std::slice::from_ref(grid))?;
            let deq = ck.quantizer.dequantize_frames(idx.view())?;
            sequences.push(LatentSequence {
                frames: deq.t().to_owned(),
                channel_index: ci,
                patch_index: pi,
            });
        }
    }
    let values = decode_latents(&codec, &sequences)?;
    let patches: Vec<Patch> = sequences
        .iter()
        .zip(values)
        .map(|(s, v)| Patch {
            values: v,
            channel_index: s.channel_index,
            patch_index: s.patch_index,
            sampling_rate_hz: header.sampling_rate_hz,
        })
        .collect();
    for p in &patches {
        if p.values.len() != window {
            return Err(geometry(format!(
                "decoded patch length {} does not match header window {window}",
                p.values.len()
            )));
        }
    }
    let samples =
        depatchify(&patches, header.channels as usize, header.total_samples as usize)?;
    let modality = Modality::from_code(header.modality)
        .ok_or_else(|| geometry(format!("unknown modality code {}", header.modality)))?;
    Ok(Recording {
        channel_names: (0..header.channels).map(|i| format!("ch{i}")).collect(),
        samples,
        sampling_rate_hz: header.sampling_rate_hz,
        modality,
        annotations: Vec::new(),
    })
}

/// Round trip through the container: compress, decode, and return a
/// recording of identical shape with the source's names and annotations.
pub fn reconstruct_recording(rec: &Recording, ck: &Checkpoint) -> Result<Recording, EvalError> {
    let bytes = compress_recording(rec, ck)?;
    let mut out = decompress_container(&bytes, ck)?;
    out.channel_names = rec.channel_names.clone();
    out.annotations = rec.annotations.clone();
    Ok(out)
}

/// Per-patch metrics of a reconstruction against its source, skipping
/// patches whose reference is identically zero (undefined PRD).
pub fn recording_metrics(
    rec: &Recording,
    rec_hat: &Recording,
    patch_seconds: f64,
    nominal_cr: f64,
) -> Result<MetricReport, EvalError> {
    let a = patchify(rec, patch_seconds)?;
    let b = patchify(rec_hat, patch_seconds)?;
    let mut per_patch = Vec::with_capacity(a.len());
    for (pa, pb) in a.iter().zip(&b) {
        if pa.values.iter().all(|&v| v == 0.0) {
            log::warn!(
                "skipping all-zero reference patch (ch {}, idx {})",
                pa.channel_index,
                pa.patch_index
            );
            continue;
        }
        per_patch.push(metrics::patch_metrics(&pa.values, &pb.values, metrics::DEFAULT_SPEC_WINDOW, metrics::DEFAULT_SPEC_HOP)?);
    }
    Ok(metrics::aggregate(&per_patch, Aggregation::Median, nominal_cr)?)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_windows: usize,
    pub f1_original: f64,
    pub f1_reconstructed: f64,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SubjectResult {
    pub subject: usize,
    pub events: usize,
    /// Contribution to the dataset average.
    pub weight: f64,
    pub f1_original: f64,
    pub f1_reconstructed: f64,
    pub folds: Vec<FoldResult>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct DegradationReport {
    pub classifier: String,
    pub protocol: ProtocolConfig,
    pub nominal_cr: f64,
    pub median_prd: f64,
    pub f1_original: f64,
    pub f1_reconstructed: f64,
    /// `f1_original - f1_reconstructed`; positive means the reconstruction
    /// hurt the downstream task.
    pub degradation: f64,
    pub subjects: Vec<SubjectResult>,
}

fn f1_on(
    scorer: &dyn WindowScorer,
    windows: &LabeledWindows,
    idx: &[usize],
) -> f64 {
    let (mut tp, mut fp, mut false_neg) = (0usize, 0usize, 0usize);
    for &i in idx {
        let pred = scorer.score(windows.meta[i], windows.data[i].view()) > DECISION_THRESHOLD;
        match (windows.labels[i], pred) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => false_neg += 1,
            (false, false) => {}
        }
    }
    f1_score(tp, fp, false_neg)
}

/// Fold index sets for one subject's windows.
fn fold_splits(
    windows: &LabeledWindows,
    rec: &Recording,
    subject: usize,
    protocol: &ProtocolConfig,
) -> Result<(usize, Vec<(Vec<usize>, Vec<usize>)>), EvalError> {
    let n = windows.len();
    match protocol.cv {
        CvScheme::LeaveOneSeizureOut => {
            let events = merged_event_intervals(rec, protocol);
            if events.is_empty() {
                return Err(EvalError::NoLabels { subject });
            }
            if events.len() < 2 {
                return Err(EvalError::InsufficientEvents { subject, events: events.len() });
            }
            // Segment boundaries halfway between consecutive events; each
            // segment holds exactly one event and becomes one test fold.
            let mut bounds = vec![0u64];
            for pair in events.windows(2) {
                bounds.push((pair[0].1 + pair[1].0) / 2);
            }
            bounds.push(rec.num_samples() as u64);
            let mut folds = Vec::with_capacity(events.len());
            for k in 0..events.len() {
                let (lo, hi) = (bounds[k], bounds[k + 1]);
                let test: Vec<usize> = (0..n)
                    .filter(|&i| {
                        let s = windows.meta[i].start_sample as u64;
                        s >= lo && s < hi
                    })
                    .collect();
                let train: Vec<usize> = (0..n)
                    .filter(|&i| {
                        let s = windows.meta[i].start_sample as u64;
                        !(s >= lo && s < hi)
                    })
                    .collect();
                if test.is_empty() || train.is_empty() {
                    return Err(EvalError::InsufficientEvents { subject, events: events.len() });
                }
                folds.push((train, test));
            }
            Ok((events.len(), folds))
        }
        CvScheme::FixedSplit => {
            if n < 2 {
                return Err(EvalError::GeometryMismatch(format!(
                    "subject {subject} has {n} windows; the split needs at least 2"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            crate::rng::Rng::substream(protocol.seed, 1000 + subject as u64)
                .shuffle(&mut order);
            let n_train =
                ((n as f64 * protocol.train_fraction).round() as usize).clamp(1, n - 1);
            let (tr, te) = order.split_at(n_train);
            let events = merged_event_intervals(rec, protocol).len();
            Ok((events, vec![(tr.to_vec(), te.to_vec())]))
        }
    }
}

/// Runs the degradation protocol: per subject, cross-validated classifier
/// training on the direction's train source, then F1 on both the original
/// and the reconstructed test windows. Subject averages are weighted by
/// event count under leave-one-out, uniformly under a fixed split.
pub fn run_protocol(
    dataset: &[Recording],
    adapter: &dyn ClassifierAdapter,
    protocol: &ProtocolConfig,
    ck: &Checkpoint,
) -> Result<DegradationReport, EvalError> {
    protocol.validate()?;
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut subjects = Vec::with_capacity(dataset.len());
    let mut all_prds = Vec::new();
    for (si, rec) in dataset.iter().enumerate() {
        let rec_hat = reconstruct_recording(rec, ck)?;
        let report = recording_metrics(
            rec,
            &rec_hat,
            ck.codec_config.patch_seconds,
            ck.codec_config.compression_ratio(),
        )?;
        all_prds.push(report.prd);

        let orig = extract_windows(rec, si, protocol)?;
        let rc = extract_windows(&rec_hat, si, protocol)?;
        let (events, folds) = fold_splits(&orig, rec, si, protocol)?;
        let mut fold_results = Vec::with_capacity(folds.len());
        for (fi, (train_idx, test_idx)) in folds.iter().enumerate() {
            let train_source = match protocol.direction {
                Direction::TrainOrigTestRec => &orig,
                Direction::TrainRecTestOrig | Direction::TrainRecTestRec => &rc,
            };
            let seed = protocol
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add((si * 4096 + fi) as u64);
            let scorer = adapter.train(&train_source.subset(train_idx), protocol, seed)?;
            fold_results.push(FoldResult {
                fold: fi,
                test_windows: test_idx.len(),
                f1_original: f1_on(scorer.as_ref(), &orig, test_idx),
                f1_reconstructed: f1_on(scorer.as_ref(), &rc, test_idx),
            });
        }
        let weight = match protocol.cv {
            CvScheme::LeaveOneSeizureOut => events as f64,
            CvScheme::FixedSplit => 1.0,
        };
        let f1_o = metrics::mean(&fold_results.iter().map(|f| f.f1_original).collect::<Vec<_>>());
        let f1_r =
            metrics::mean(&fold_results.iter().map(|f| f.f1_reconstructed).collect::<Vec<_>>());
        subjects.push(SubjectResult {
            subject: si,
            events,
            weight,
            f1_original: f1_o,
            f1_reconstructed: f1_r,
            folds: fold_results,
        });
    }
    let wsum: f64 = subjects.iter().map(|s| s.weight).sum();
    let f1_original = subjects.iter().map(|s| s.weight * s.f1_original).sum::<f64>() / wsum;
    let f1_reconstructed =
        subjects.iter().map(|s| s.weight * s.f1_reconstructed).sum::<f64>() / wsum;
    Ok(DegradationReport {
        classifier: adapter.name().to_string(),
        protocol: protocol.clone(),
        nominal_cr: ck.codec_config.compression_ratio(),
        median_prd: metrics::median(&mut all_prds),
        f1_original,
        f1_reconstructed,
        degradation: f1_original - f1_reconstructed,
        subjects,
    })
}

/// One rate-distortion table row; metric semantics follow
/// [`MetricReport`] (PRD family aggregated by median, the rest by mean).
#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub compression_ratio: f64,
    pub num_quantizers: usize,
    pub codebook_size: usize,
    pub median_prd: f64,
    pub median_prd_spec: Option<f64>,
    pub mean_rmse: f64,
    pub mean_snr_db: f64,
    pub mean_psnr_db: f64,
    pub n_patches: usize,
}

/// Reconstructs the dataset through every checkpoint and tabulates the
/// rate-distortion front, rows sorted by compression ratio ascending.
/// Optionally writes the table as CSV.
pub fn rate_distortion_sweep(
    dataset: &[Recording],
    checkpoints: &[Checkpoint],
    csv_path: Option<&Path>,
) -> Result<Vec<SweepRow>, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if checkpoints.is_empty() {
        return Err(EvalError::NoCheckpoints);
    }
    let mut rows = Vec::with_capacity(checkpoints.len());
    for ck in checkpoints {
        let cr = ck.codec_config.compression_ratio();
        let mut per_patch = Vec::new();
        for rec in dataset {
            let rec_hat = reconstruct_recording(rec, ck)?;
            let a = patchify(rec, ck.codec_config.patch_seconds)?;
            let b = patchify(&rec_hat, ck.codec_config.patch_seconds)?;
            for (pa, pb) in a.iter().zip(&b) {
                if pa.values.iter().all(|&v| v == 0.0) {
                    continue;
                }
                per_patch.push(metrics::patch_metrics(&pa.values, &pb.values, metrics::DEFAULT_SPEC_WINDOW, metrics::DEFAULT_SPEC_HOP)?);
            }
        }
        let report = metrics::aggregate(&per_patch, Aggregation::Median, cr)?;
        rows.push(SweepRow {
            compression_ratio: cr,
            num_quantizers: ck.codec_config.num_quantizers,
            codebook_size: ck.codec_config.codebook_size,
            median_prd: report.prd,
            median_prd_spec: report.prd_spec,
            mean_rmse: report.rmse,
            mean_snr_db: report.snr_db,
            mean_psnr_db: report.psnr_db,
            n_patches: report.n_patches,
        });
    }
    rows.sort_by(|a, b| a.compression_ratio.total_cmp(&b.compression_ratio));
    if let Some(path) = csv_path {
        write_sweep_csv(&rows, path)?;
    }
    Ok(rows)
}

/// CSV schema: one row per checkpoint, columns as in [`SweepRow`], empty
/// cell when the spectral PRD is unavailable (windows too short).
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<(), EvalError> {
    let io_err = |e: std::io::Error| EvalError::ReportIo { path: path.to_owned(), source: e };
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => io_err(e),
        other => EvalError::InvalidProtocol(format!("csv: {other:?}")),
    })?;
    w.write_record([
        "compression_ratio",
        "num_quantizers",
        "codebook_size",
        "median_prd",
        "median_prd_spec",
        "mean_rmse",
        "mean_snr_db",
        "mean_psnr_db",
        "n_patches",
    ])
    .map_err(|e| EvalError::InvalidProtocol(format!("csv: {e}")))?;
    for r in rows {
        w.write_record([
            r.compression_ratio.to_string(),
            r.num_quantizers.to_string(),
            r.codebook_size.to_string(),
            r.median_prd.to_string(),
            r.median_prd_spec.map(|v| v.to_string()).unwrap_or_default(),
            r.mean_rmse.to_string(),
            r.mean_snr_db.to_string(),
            r.mean_psnr_db.to_string(),
            r.n_patches.to_string(),
        ])
        .map_err(|e| EvalError::InvalidProtocol(format!("csv: {e}")))?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub mod reference_classifier {
    //! Small convolutional window classifier for synthetic end-to-end tests.
    //! Three strided conv stages and a full-width linear head, trained with
    //! a hinge loss. This is a harness fixture, not a reproduction of any
    //! published architecture.

    use ndarray::ArrayView2;

    use super::{
        ClassifierAdapter, EvalError, LabeledWindows, ProtocolConfig, WindowMeta, WindowScorer,
    };
    use crate::nn::{clip_global_norm, init_uniform, Adam, ParamCursor, ParamVec};
    use crate::rng::Rng;
    use crate::tensor::ops::{conv1d, conv1d_out_len};
    use crate::tensor::{Arr, Tape, Var};
    use ndarray::IxDyn;

    pub const HIDDEN: usize = 8;
    pub const KERNEL: usize = 9;
    pub const STRIDE: usize = 4;
    pub const LEAKY_SLOPE: f64 = 0.2;

    pub struct ConvClassifier;

    struct TrainedConv {
        params: ParamVec,
        channels: usize,
        window: usize,
    }

    fn head_width(window: usize) -> usize {
        let pad = KERNEL / 2;
        let mut t = window;
        for _ in 0..3 {
            t = conv1d_out_len(t, KERNEL, STRIDE, pad, pad);
        }
        t
    }

    fn build_params(channels: usize, window: usize, seed: u64) -> ParamVec {
        let mut rng = Rng::substream(seed, 7);
        let mut p = ParamVec::new();
        let shapes = [
            (HIDDEN, channels, KERNEL),
            (HIDDEN, HIDDEN, KERNEL),
            (HIDDEN, HIDDEN, KERNEL),
        ];
        for (i, &(co, ci, k)) in shapes.iter().enumerate() {
            p.push(format!("conv{i}.w"), init_uniform(&mut rng, &[co, ci, k], ci * k));
            p.push(format!("conv{i}.b"), init_uniform(&mut rng, &[co], ci * k));
        }
        let hw = head_width(window);
        p.push("head.w", init_uniform(&mut rng, &[1, HIDDEN, hw], HIDDEN * hw));
        p.push("head.b", init_uniform(&mut rng, &[1], HIDDEN * hw));
        p
    }

    /// Logits for a (batch, channels, window) input, shaped (batch, 1, 1),
    /// plus the parameter leaves in storage order.
    fn forward<'t>(tape: &'t Tape, params: &ParamVec, x: Var<'t>) -> (Var<'t>, Vec<Var<'t>>) {
        let mut cur = ParamCursor::new(tape, params);
        let pad = KERNEL / 2;
        let mut h = x;
        for i in 0..3 {
            let w = cur.take(&format!("conv{i}.w"));
            let b = cur.take(&format!("conv{i}.b"));
            h = conv1d(tape, h, w, b, STRIDE, pad, pad).leaky_relu(LEAKY_SLOPE);
        }
        let w = cur.take("head.w");
        let b = cur.take("head.b");
        let out = conv1d(tape, h, w, b, 1, 0, 0);
        (out, cur.finish())
    }

    fn batch_arr(windows: &LabeledWindows, idx: &[usize]) -> Arr {
        let (c, w) = (windows.data[idx[0]].nrows(), windows.data[idx[0]].ncols());
        let mut data = Vec::with_capacity(idx.len() * c * w);
        for &i in idx {
            data.extend(windows.data[i].iter().cloned());
        }
        Arr::from_shape_vec(IxDyn(&[idx.len(), c, w]), data).unwrap()
    }

    impl ClassifierAdapter for ConvClassifier {
        fn name(&self) -> &str {
            "conv-reference"
        }

        fn train(
            &self,
            train: &LabeledWindows,
            protocol: &ProtocolConfig,
            seed: u64,
        ) -> Result<Box<dyn WindowScorer>, EvalError> {
            if train.is_empty() {
                return Err(EvalError::EmptyDataset);
            }
            let channels = train.data[0].nrows();
            let window = train.data[0].ncols();
            if train.data.iter().any(|d| d.nrows() != channels || d.ncols() != window) {
                return Err(EvalError::GeometryMismatch(
                    "training windows differ in shape".into(),
                ));
            }
            let mut params = build_params(channels, window, seed);
            let mut opt = Adam::new(&params);
            let n = train.len();
            for epoch in 0..protocol.classifier_epochs {
                let mut order: Vec<usize> = (0..n).collect();
                Rng::substream(seed, 5000 + epoch as u64).shuffle(&mut order);
                for chunk in order.chunks(protocol.batch_size) {
                    let x = batch_arr(train, chunk);
                    // Hinge target in {-1, +1}, broadcast against the
                    // (batch, 1, 1) logits.
                    let y = Arr::from_shape_vec(
                        IxDyn(&[chunk.len(), 1, 1]),
                        chunk
                            .iter()
                            .map(|&i| if train.labels[i] { 1.0 } else { -1.0 })
                            .collect(),
                    )
                    .unwrap();
                    let tape = Tape::new();
                    let xv = tape.leaf(x);
                    let yv = tape.leaf(y);
                    let (logits, vars) = forward(&tape, &params, xv);
                    let loss = logits.mul(yv).neg().add_scalar(1.0).relu().mean();
                    let mut grads = tape.backward(loss);
                    let mut gvec = Vec::with_capacity(vars.len());
                    for v in &vars {
                        gvec.push(
                            grads
                                .take(*v)
                                .unwrap_or_else(|| Arr::zeros(v.value().raw_dim())),
                        );
                    }
                    clip_global_norm(&mut gvec, 1.0);
                    opt.update(&mut params, &gvec, protocol.classifier_lr);
                }
            }
            Ok(Box::new(TrainedConv { params, channels, window }))
        }
    }

    impl WindowScorer for TrainedConv {
        fn score(&self, _meta: WindowMeta, data: ArrayView2<f64>) -> f64 {
            assert_eq!(data.nrows(), self.channels, "channel count mismatch");
            assert_eq!(data.ncols(), self.window, "window length mismatch");
            let tape = Tape::no_grad();
            let x = Arr::from_shape_vec(
                IxDyn(&[1, self.channels, self.window]),
                data.iter().cloned().collect(),
            )
            .unwrap();
            let (logit, _) = forward(&tape, &self.params, tape.leaf(x));
            0.5 + logit.scalar_value()
        }
    }
}
