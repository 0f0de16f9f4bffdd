//! Recording I/O, re-referencing, band-pass filtering, and patch extraction.
//!
//! Two self-contained file formats are supported. The binary format (BCRAW)
//! is little-endian: magic `BCRAW`, u16 version, u32 channel count C,
//! u64 sample count T, f64 sampling rate, u8 modality, followed by C*T f32
//! samples in channel-major order. The text format is delimited (CSV) with a
//! channel-name header row and one row per time step; it carries no sampling
//! rate, so the rate is a parameter of the format. An optional annotation
//! sidecar `<file>.ann` holds `onset_sample,offset_sample,label` rows.

use ndarray::Array2;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

pub const BCRAW_MAGIC: &[u8; 5] = b"BCRAW";
pub const BCRAW_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Eeg,
    Ieeg,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Eeg => 0,
            Modality::Ieeg => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Modality::Eeg),
            1 => Some(Modality::Ieeg),
            _ => None,
        }
    }
}

/// Labeled interval in sample coordinates, `onset..offset` half-open.
#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub onset_sample: u64,
    pub offset_sample: u64,
    pub label: String,
}

/// Multichannel signal with metadata. Samples are (channels, time).
#[derive(Clone, Debug)]
pub struct Recording {
    pub channel_names: Vec<String>,
    pub samples: Array2<f64>,
    pub sampling_rate_hz: f64,
    pub modality: Modality,
    pub annotations: Vec<Annotation>,
}

impl Recording {
    pub fn channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.num_samples() as f64 / self.sampling_rate_hz
    }
}

/// One fixed-length single-channel window of a recording.
#[derive(Clone, Debug)]
pub struct Patch {
    pub values: Vec<f64>,
    pub channel_index: usize,
    pub patch_index: usize,
    pub sampling_rate_hz: f64,
}

#[derive(Clone, Debug)]
pub enum ReferenceScheme {
    /// Keep channels as recorded.
    None,
    /// Subtract the per-time-step median across channels.
    Median,
    /// Adjacent-pair differences; output has C-1 channels.
    Bipolar,
    /// Subtract each electrode group's mean (groups are lists of channel
    /// indices; every channel must belong to exactly one group).
    Laplacian { groups: Vec<Vec<usize>> },
}

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("unreadable file {path}: {source}")]
    UnreadableFile {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a recognized recording file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("invalid modality byte {0}")]
    InvalidModality(u8),
    #[error("declared shape {channels}x{samples} inconsistent with payload ({detail})")]
    ShapeMismatch {
        channels: usize,
        samples: usize,
        detail: String,
    },
    #[error("non-finite sample at channel {channel}, index {index}")]
    NonFiniteSamples { channel: usize, index: usize },
    #[error("malformed text recording: {0}")]
    MalformedText(String),
    #[error("malformed annotation sidecar: {0}")]
    MalformedAnnotations(String),
    #[error("reference scheme needs at least {needed} channels, got {got}")]
    TooFewChannels { needed: usize, got: usize },
    #[error("laplacian groups must cover every channel exactly once: {0}")]
    MissingGroups(String),
    #[error("invalid band {low_hz}-{high_hz} Hz at sampling rate {fs} Hz")]
    InvalidBand { low_hz: f64, high_hz: f64, fs: f64 },
    #[error("patch window of {seconds} s is not a whole number of samples at {fs} Hz")]
    NonIntegerWindow { seconds: f64, fs: f64 },
    #[error("missing patch (channel {channel}, index {index})")]
    MissingPatch { channel: usize, index: usize },
    #[error("duplicate patch (channel {channel}, index {index})")]
    IndexCollision { channel: usize, index: usize },
    #[error("patch set is inconsistent: {0}")]
    BadPatchSet(String),
}

/// File format selector for [`load_recording`] / [`save_recording`].
/// Reconstructed-signal containers are decoded through the codec pipeline
/// (they need model parameters), not through this module.
#[derive(Clone, Debug)]
pub enum RecordingFormat {
    BcRaw,
    /// Delimited text; the rate and modality are not stored in-band.
    Csv {
        sampling_rate_hz: f64,
        modality: Modality,
    },
}

fn read_file(path: &Path) -> Result<Vec<u8>, SignalError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| SignalError::UnreadableFile { path: path.display().to_string(), source: e })?;
    Ok(buf)
}

fn check_finite(samples: &Array2<f64>) -> Result<(), SignalError> {
    for (c, row) in samples.outer_iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(SignalError::NonFiniteSamples { channel: c, index: i });
            }
        }
    }
    Ok(())
}

pub fn annotation_sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".ann");
    std::path::PathBuf::from(s)
}

fn load_annotations(path: &Path) -> Result<Vec<Annotation>, SignalError> {
    let sidecar = annotation_sidecar_path(path);
    if !sidecar.exists() {
        return Ok(Vec::new());
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&sidecar)
        .map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let r = record.map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
        if r.len() != 3 {
            return Err(SignalError::MalformedAnnotations(format!(
                "expected 3 columns, got {}",
                r.len()
            )));
        }
        let onset = r[0]
            .parse::<u64>()
            .map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
        let offset = r[1]
            .parse::<u64>()
            .map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
        out.push(Annotation { onset_sample: onset, offset_sample: offset, label: r[2].to_string() });
    }
    Ok(out)
}

pub fn save_annotations(path: &Path, annotations: &[Annotation]) -> Result<(), SignalError> {
    let sidecar = annotation_sidecar_path(path);
    let mut wtr = csv::Writer::from_path(&sidecar)
        .map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
    wtr.write_record(["onset_sample", "offset_sample", "label"])
        .map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
    for a in annotations {
        wtr.write_record([
            a.onset_sample.to_string(),
            a.offset_sample.to_string(),
            a.label.clone(),
        ])
        .map_err(|e| SignalError::MalformedAnnotations(e.to_string()))?;
    }
    wtr.flush()
        .map_err(|e| SignalError::UnreadableFile { path: sidecar.display().to_string(), source: e })?;
    Ok(())
}

pub fn load_recording(path: &Path, format: &RecordingFormat) -> Result<Recording, SignalError> {
    let mut rec = match format {
        RecordingFormat::BcRaw => load_bcraw(path)?,
        RecordingFormat::Csv { sampling_rate_hz, modality } => {
            load_csv(path, *sampling_rate_hz, *modality)?
        }
    };
    rec.annotations = load_annotations(path)?;
    Ok(rec)
}

pub fn save_recording(
    path: &Path,
    rec: &Recording,
    format: &RecordingFormat,
) -> Result<(), SignalError> {
    check_finite(&rec.samples)?;
    match format {
        RecordingFormat::BcRaw => save_bcraw(path, rec)?,
        RecordingFormat::Csv { .. } => save_csv(path, rec)?,
    }
    if !rec.annotations.is_empty() {
        save_annotations(path, &rec.annotations)?;
    }
    Ok(())
}

fn load_bcraw(path: &Path) -> Result<Recording, SignalError> {
    let buf = read_file(path)?;
    const HEADER: usize = 5 + 2 + 4 + 8 + 8 + 1;
    if buf.len() < HEADER || &buf[0..5] != BCRAW_MAGIC {
        return Err(SignalError::BadMagic);
    }
    let version = u16::from_le_bytes([buf[5], buf[6]]);
    if version != BCRAW_VERSION {
        return Err(SignalError::VersionUnsupported(version));
    }
    let c = u32::from_le_bytes(buf[7..11].try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(buf[11..19].try_into().unwrap()) as usize;
    let fs = f64::from_le_bytes(buf[19..27].try_into().unwrap());
    let modality =
        Modality::from_code(buf[27]).ok_or(SignalError::InvalidModality(buf[27]))?;
    let expected = HEADER + c * t * 4;
    if buf.len() != expected {
        return Err(SignalError::ShapeMismatch {
            channels: c,
            samples: t,
            detail: format!("file is {} bytes, expected {expected}", buf.len()),
        });
    }
    let mut samples = Array2::<f64>::zeros((c, t));
    let mut off = HEADER;
    for ci in 0..c {
        for ti in 0..t {
            let v = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
            samples[[ci, ti]] = v as f64;
            off += 4;
        }
    }
    check_finite(&samples)?;
    Ok(Recording {
        channel_names: (0..c).map(|i| format!("ch{i}")).collect(),
        samples,
        sampling_rate_hz: fs,
        modality,
        annotations: Vec::new(),
    })
}

fn save_bcraw(path: &Path, rec: &Recording) -> Result<(), SignalError> {
    let c = rec.channels();
    let t = rec.num_samples();
    let mut buf = Vec::with_capacity(28 + c * t * 4);
    buf.extend_from_slice(BCRAW_MAGIC);
    buf.extend_from_slice(&BCRAW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(c as u32).to_le_bytes());
    buf.extend_from_slice(&(t as u64).to_le_bytes());
    buf.extend_from_slice(&rec.sampling_rate_hz.to_le_bytes());
    buf.push(rec.modality.code());
    for ci in 0..c {
        for ti in 0..t {
            buf.extend_from_slice(&(rec.samples[[ci, ti]] as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| SignalError::UnreadableFile { path: path.display().to_string(), source: e })
}

fn load_csv(path: &Path, fs: f64, modality: Modality) -> Result<Recording, SignalError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => SignalError::UnreadableFile {
                path: path.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => SignalError::MalformedText(e.to_string()),
        })?;
    let channel_names: Vec<String> = rdr
        .headers()
        .map_err(|e| SignalError::MalformedText(e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let c = channel_names.len();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); c];
    for record in rdr.records() {
        let r = record.map_err(|e| SignalError::MalformedText(e.to_string()))?;
        if r.len() != c {
            return Err(SignalError::ShapeMismatch {
                channels: c,
                samples: columns[0].len(),
                detail: format!("row with {} fields", r.len()),
            });
        }
        for (ci, field) in r.iter().enumerate() {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| SignalError::MalformedText(format!("{field:?}: {e}")))?;
            columns[ci].push(v);
        }
    }
    let t = columns.first().map_or(0, Vec::len);
    let mut samples = Array2::<f64>::zeros((c, t));
    for (ci, col) in columns.iter().enumerate() {
        for (ti, &v) in col.iter().enumerate() {
            samples[[ci, ti]] = v;
        }
    }
    check_finite(&samples)?;
    Ok(Recording { channel_names, samples, sampling_rate_hz: fs, modality, annotations: Vec::new() })
}

fn save_csv(path: &Path, rec: &Recording) -> Result<(), SignalError> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| SignalError::MalformedText(e.to_string()))?;
    wtr.write_record(&rec.channel_names)
        .map_err(|e| SignalError::MalformedText(e.to_string()))?;
    for ti in 0..rec.num_samples() {
        let row: Vec<String> =
            (0..rec.channels()).map(|ci| format!("{}", rec.samples[[ci, ti]])).collect();
        wtr.write_record(&row).map_err(|e| SignalError::MalformedText(e.to_string()))?;
    }
    wtr.flush()
        .map_err(|e| SignalError::UnreadableFile { path: path.display().to_string(), source: e })
}

/// Applies a montage. Annotations and metadata pass through; bipolar output
/// has C-1 channels, all other schemes keep the shape.
pub fn apply_reference(rec: &Recording, scheme: &ReferenceScheme) -> Result<Recording, SignalError> {
    let c = rec.channels();
    let t = rec.num_samples();
    let samples = match scheme {
        ReferenceScheme::None => rec.samples.clone(),
        ReferenceScheme::Median => {
            if c < 2 {
                return Err(SignalError::TooFewChannels { needed: 2, got: c });
            }
            let mut out = rec.samples.clone();
            let mut col = vec![0.0; c];
            for ti in 0..t {
                for ci in 0..c {
                    col[ci] = rec.samples[[ci, ti]];
                }
                let med = median_in_place(&mut col);
                for ci in 0..c {
                    out[[ci, ti]] -= med;
                }
            }
            out
        }
        ReferenceScheme::Bipolar => {
            if c < 2 {
                return Err(SignalError::TooFewChannels { needed: 2, got: c });
            }
            let mut out = Array2::<f64>::zeros((c - 1, t));
            for ci in 0..c - 1 {
                for ti in 0..t {
                    out[[ci, ti]] = rec.samples[[ci, ti]] - rec.samples[[ci + 1, ti]];
                }
            }
            out
        }
        ReferenceScheme::Laplacian { groups } => {
            let mut owner = vec![usize::MAX; c];
            for (gi, group) in groups.iter().enumerate() {
                for &ch in group {
                    if ch >= c {
                        return Err(SignalError::MissingGroups(format!(
                            "group {gi} references channel {ch} of {c}"
                        )));
                    }
                    if owner[ch] != usize::MAX {
                        return Err(SignalError::MissingGroups(format!(
                            "channel {ch} appears in groups {} and {gi}",
                            owner[ch]
                        )));
                    }
                    owner[ch] = gi;
                }
            }
            if let Some(ch) = owner.iter().position(|&g| g == usize::MAX) {
                return Err(SignalError::MissingGroups(format!("channel {ch} not in any group")));
            }
            let mut out = rec.samples.clone();
            for group in groups {
                let inv = 1.0 / group.len() as f64;
                for ti in 0..t {
                    let mean: f64 = group.iter().map(|&ch| rec.samples[[ch, ti]]).sum::<f64>() * inv;
                    for &ch in group {
                        out[[ch, ti]] -= mean;
                    }
                }
            }
            out
        }
    };
    let channel_names = match scheme {
        ReferenceScheme::Bipolar => (0..c - 1)
            .map(|i| format!("{}-{}", rec.channel_names[i], rec.channel_names[i + 1]))
            .collect(),
        _ => rec.channel_names.clone(),
    };
    Ok(Recording {
        channel_names,
        samples,
        sampling_rate_hz: rec.sampling_rate_hz,
        modality: rec.modality,
        annotations: rec.annotations.clone(),
    })
}

fn median_in_place(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Second-order section, coefficients in z^-1 form with a0 = 1.
#[derive(Clone, Copy, Debug)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Digital Butterworth band-pass as cascaded biquads. `order` is the analog
/// prototype order; the band-pass has 2*order poles.
pub fn butter_bandpass(
    order: usize,
    low_hz: f64,
    high_hz: f64,
    fs: f64,
) -> Result<Vec<Biquad>, SignalError> {
    use rustfft::num_complex::Complex64 as C;
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) || order == 0 {
        return Err(SignalError::InvalidBand { low_hz, high_hz, fs });
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * low_hz / fs).tan();
    let w2 = fs2 * (PI * high_hz / fs).tan();
    let w0sq = w1 * w2;
    let bw = w2 - w1;
    // Analog prototype poles on the unit circle, left half-plane.
    let mut apoles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2.0 * k as f64 + order as f64 + 1.0) / (2.0 * order as f64);
        let p = C::new(theta.cos(), theta.sin());
        // Low-pass to band-pass: roots of s^2 - bw*p*s + w0^2.
        let bp = p * bw;
        let disc = (bp * bp - C::new(4.0 * w0sq, 0.0)).sqrt();
        apoles.push((bp + disc) * 0.5);
        apoles.push((bp - disc) * 0.5);
    }
    // Bilinear transform; analog zeros are `order` zeros at s=0 (-> z=1)
    // plus `order` implicit zeros at infinity (-> z=-1).
    let mut gain = C::new(1.0, 0.0);
    for _ in 0..order {
        gain *= C::new(bw * fs2, 0.0); // bw^n from the transform, fs2^n from the zeros
    }
    let mut dpoles = Vec::with_capacity(2 * order);
    for &p in &apoles {
        let denom = C::new(fs2, 0.0) - p;
        dpoles.push((C::new(fs2, 0.0) + p) / denom);
        gain /= denom;
    }
    debug_assert!(gain.im.abs() <= 1e-8 * gain.re.abs().max(1e-300), "gain must be real");
    let gain = gain.re;
    for p in &dpoles {
        if p.norm() >= 1.0 {
            return Err(SignalError::InvalidBand { low_hz, high_hz, fs });
        }
    }
    // Pair conjugate poles into sections; each section gets one z=1 and one
    // z=-1 zero, i.e. numerator z^2 - 1.
    let mut remaining = dpoles;
    let mut sections = Vec::with_capacity(order);
    while !remaining.is_empty() {
        let i = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.im.abs().partial_cmp(&b.1.im.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let p = remaining.swap_remove(i);
        let j = if p.im.abs() > 1e-10 {
            let conj = p.conj();
            remaining
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - conj).norm().partial_cmp(&(b.1 - conj).norm()).unwrap()
                })
                .map(|(j, _)| j)
                .unwrap()
        } else {
            remaining
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.im.abs().partial_cmp(&b.1.im.abs()).unwrap())
                .map(|(j, _)| j)
                .unwrap()
        };
        let q = remaining.swap_remove(j);
        sections.push(Biquad {
            b: [1.0, 0.0, -1.0],
            a: [-(p + q).re, (p * q).re],
        });
    }
    sections[0].b = [gain, 0.0, -gain];
    Ok(sections)
}

/// Direct-form-II-transposed cascade with steady-state initial conditions
/// scaled to the first input sample, so a constant input produces its exact
/// steady-state response from sample 0.
fn sosfilt(sections: &[Biquad], x: &mut [f64]) {
    let mut level = x.first().copied().unwrap_or(0.0);
    for s in sections {
        let h1 = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[0] + s.a[1]);
        let mut z1 = (h1 - s.b[0]) * level;
        let mut z2 = (s.b[2] - s.a[1] * h1) * level;
        for v in x.iter_mut() {
            let xn = *v;
            let yn = s.b[0] * xn + z1;
            z1 = s.b[1] * xn - s.a[0] * yn + z2;
            z2 = s.b[2] * xn - s.a[1] * yn;
            *v = yn;
        }
        level *= h1;
    }
}

/// Zero-phase forward-backward filtering with odd-extension padding.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let t = x.len();
    if t < 2 {
        return x.to_vec();
    }
    let padlen = (3 * (2 * sections.len() + 1)).min(t - 1);
    let mut ext = Vec::with_capacity(t + 2 * padlen);
    for i in (1..=padlen).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=padlen {
        ext.push(2.0 * x[t - 1] - x[t - 1 - i]);
    }
    sosfilt(sections, &mut ext);
    ext.reverse();
    sosfilt(sections, &mut ext);
    ext.reverse();
    ext[padlen..padlen + t].to_vec()
}

/// Zero-phase Butterworth band-pass applied to every channel.
pub fn bandpass_filter(
    rec: &Recording,
    low_hz: f64,
    high_hz: f64,
    order: usize,
) -> Result<Recording, SignalError> {
    let sections = butter_bandpass(order, low_hz, high_hz, rec.sampling_rate_hz)?;
    let mut out = rec.clone();
    for mut row in out.samples.outer_iter_mut() {
        let filtered = filtfilt(&sections, row.as_slice().expect("contiguous row"));
        for (dst, src) in row.iter_mut().zip(filtered) {
            *dst = src;
        }
    }
    Ok(out)
}

/// Number of samples per patch window; errors if not a whole number.
pub fn patch_window(seconds: f64, fs: f64) -> Result<usize, SignalError> {
    let w = seconds * fs;
    if !(w.is_finite() && w > 0.0 && (w - w.round()).abs() < 1e-9) {
        return Err(SignalError::NonIntegerWindow { seconds, fs });
    }
    Ok(w.round() as usize)
}

/// Splits a recording into channel-major, time-ascending fixed windows. The
/// final window of each channel is zero-padded; the true length is implied by
/// the recording's sample count, which [`depatchify`] takes back.
pub fn patchify(rec: &Recording, patch_seconds: f64) -> Result<Vec<Patch>, SignalError> {
    let w = patch_window(patch_seconds, rec.sampling_rate_hz)?;
    let t = rec.num_samples();
    let n_patches = t.div_ceil(w).max(1);
    let mut out = Vec::with_capacity(rec.channels() * n_patches);
    for ci in 0..rec.channels() {
        for pi in 0..n_patches {
            let mut values = vec![0.0; w];
            let start = pi * w;
            let end = ((pi + 1) * w).min(t);
            for (k, ti) in (start..end).enumerate() {
                values[k] = rec.samples[[ci, ti]];
            }
            out.push(Patch {
                values,
                channel_index: ci,
                patch_index: pi,
                sampling_rate_hz: rec.sampling_rate_hz,
            });
        }
    }
    Ok(out)
}

/// Reassembles `channels x total_samples` from a complete patch set,
/// trimming the zero-padded tail.
pub fn depatchify(
    patches: &[Patch],
    channels: usize,
    total_samples: usize,
) -> Result<Array2<f64>, SignalError> {
    if patches.is_empty() {
        return Err(SignalError::BadPatchSet("no patches".into()));
    }
    let w = patches[0].values.len();
    if w == 0 {
        return Err(SignalError::BadPatchSet("zero-length patches".into()));
    }
    let n_patches = total_samples.div_ceil(w).max(1);
    let mut seen = vec![false; channels * n_patches];
    let mut out = Array2::<f64>::zeros((channels, total_samples));
    for p in patches {
        if p.values.len() != w {
            return Err(SignalError::BadPatchSet(format!(
                "patch (ch {}, idx {}) has length {}, expected {w}",
                p.channel_index,
                p.patch_index,
                p.values.len()
            )));
        }
        if p.channel_index >= channels || p.patch_index >= n_patches {
            return Err(SignalError::BadPatchSet(format!(
                "patch (ch {}, idx {}) outside {channels}x{n_patches} grid",
                p.channel_index, p.patch_index
            )));
        }
        let slot = p.channel_index * n_patches + p.patch_index;
        if seen[slot] {
            return Err(SignalError::IndexCollision {
                channel: p.channel_index,
                index: p.patch_index,
            });
        }
        seen[slot] = true;
        let start = p.patch_index * w;
        let end = ((p.patch_index + 1) * w).min(total_samples);
        for (k, ti) in (start..end).enumerate() {
            out[[p.channel_index, ti]] = p.values[k];
        }
    }
    if let Some(slot) = seen.iter().position(|&s| !s) {
        return Err(SignalError::MissingPatch {
            channel: slot / n_patches,
            index: slot % n_patches,
        });
    }
    Ok(out)
}
