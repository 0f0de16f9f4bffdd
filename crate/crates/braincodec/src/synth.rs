//! Deterministic synthetic EEG-like recordings for desk-scale experiments.
//!
//! Background activity is a per-channel sum of sines in the 1 to 30 Hz band
//! with a 1/f amplitude envelope; labeled burst events add a rhythmic 3 to
//! 12 Hz component whose amplitude is chosen so the in-event RMS exceeds the
//! background RMS by a configured gain. Everything is a pure function of the
//! seed.

use crate::rng::Rng;
use crate::signal_io::{save_recording, Annotation, Modality, Recording, RecordingFormat, SignalError};
use ndarray::Array2;
use std::f64::consts::PI;
use std::path::Path;

pub const BACKGROUND_BAND_HZ: (f64, f64) = (1.0, 30.0);
pub const BURST_BAND_HZ: (f64, f64) = (3.0, 12.0);

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] SignalError),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstEvent {
    pub onset_s: f64,
    pub duration_s: f64,
    /// Target ratio of in-event RMS to background RMS, >= 1.
    pub amplitude_gain: f64,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_channels: usize,
    pub duration_s: f64,
    pub sampling_rate_hz: f64,
    /// Sines per channel in the background band.
    pub background_components: usize,
    pub burst_events: Vec<BurstEvent>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub modality: Modality,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_channels: 4,
            duration_s: 60.0,
            sampling_rate_hz: 256.0,
            background_components: 12,
            burst_events: Vec::new(),
            noise_sigma: 0.05,
            seed: 0,
            modality: Modality::Eeg,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.num_channels == 0 {
            return bad("num_channels must be positive".into());
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration {} s must be positive", self.duration_s));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 2.0 * BACKGROUND_BAND_HZ.1)
        {
            return bad(format!(
                "sampling rate {} Hz must exceed {} Hz to hold the background band",
                self.sampling_rate_hz,
                2.0 * BACKGROUND_BAND_HZ.1
            ));
        }
        if self.background_components == 0 {
            return bad("background_components must be positive".into());
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!("noise sigma {} must be nonnegative", self.noise_sigma));
        }
        for (i, e) in self.burst_events.iter().enumerate() {
            if !(e.onset_s.is_finite() && e.onset_s >= 0.0) {
                return bad(format!("event {i}: bad onset {}", e.onset_s));
            }
            if !(e.duration_s.is_finite() && e.duration_s > 0.0) {
                return bad(format!("event {i}: bad duration {}", e.duration_s));
            }
            if e.onset_s + e.duration_s > self.duration_s + 1e-9 {
                return bad(format!(
                    "event {i} ends at {} s, past the {} s recording",
                    e.onset_s + e.duration_s,
                    self.duration_s
                ));
            }
            if !(e.amplitude_gain.is_finite() && e.amplitude_gain >= 1.0) {
                return bad(format!("event {i}: gain {} below 1", e.amplitude_gain));
            }
        }
        Ok(())
    }
}

struct Sine {
    freq_hz: f64,
    phase: f64,
    amplitude: f64,
}

/// Renders the spec to a Recording with one annotation per burst event.
pub fn generate(spec: &SyntheticSpec) -> Result<Recording, SynthError> {
    spec.validate()?;
    let mut rng = Rng::seeded(spec.seed);
    let fs = spec.sampling_rate_hz;
    let t = (spec.duration_s * fs).round() as usize;

    // Draw order is frozen: event rhythms, then per-channel background
    // components, then per-(event, channel) phases, then noise.
    let event_freqs: Vec<f64> = spec
        .burst_events
        .iter()
        .map(|_| rng.uniform_in(BURST_BAND_HZ.0, BURST_BAND_HZ.1))
        .collect();
    let mut backgrounds: Vec<Vec<Sine>> = Vec::with_capacity(spec.num_channels);
    for _ in 0..spec.num_channels {
        let mut comps = Vec::with_capacity(spec.background_components);
        for _ in 0..spec.background_components {
            let f = rng.uniform_in(BACKGROUND_BAND_HZ.0, BACKGROUND_BAND_HZ.1);
            let phase = rng.uniform_in(0.0, 2.0 * PI);
            comps.push(Sine { freq_hz: f, phase, amplitude: 1.0 / f });
        }
        backgrounds.push(comps);
    }
    let mut event_phases = vec![vec![0.0f64; spec.num_channels]; spec.burst_events.len()];
    for row in event_phases.iter_mut() {
        for p in row.iter_mut() {
            *p = rng.uniform_in(0.0, 2.0 * PI);
        }
    }

    let mut samples = Array2::<f64>::zeros((spec.num_channels, t));
    for (c, comps) in backgrounds.iter().enumerate() {
        // Analytic background RMS: each sine contributes a^2/2.
        let bg_rms =
            (comps.iter().map(|s| s.amplitude * s.amplitude / 2.0).sum::<f64>()).sqrt();
        for n in 0..t {
            let time = n as f64 / fs;
            let mut v = 0.0;
            for s in comps {
                v += s.amplitude * (2.0 * PI * s.freq_hz * time + s.phase).sin();
            }
            for (e, ev) in spec.burst_events.iter().enumerate() {
                if time >= ev.onset_s && time < ev.onset_s + ev.duration_s {
                    // In-event RMS^2 = bg^2 + a^2/2 = gain^2 * bg^2.
                    let a = 2.0f64.sqrt()
                        * bg_rms
                        * (ev.amplitude_gain * ev.amplitude_gain - 1.0).sqrt();
                    v += a * (2.0 * PI * event_freqs[e] * time + event_phases[e][c]).sin();
                }
            }
            samples[[c, n]] = v;
        }
        if spec.noise_sigma > 0.0 {
            for n in 0..t {
                samples[[c, n]] += spec.noise_sigma * rng.normal();
            }
        }
    }

    let annotations = spec
        .burst_events
        .iter()
        .map(|e| Annotation {
            onset_sample: (e.onset_s * fs).round() as u64,
            offset_sample: ((e.onset_s + e.duration_s) * fs).round() as u64,
            label: "burst".to_string(),
        })
        .collect();

    Ok(Recording {
        channel_names: (0..spec.num_channels).map(|c| format!("ch{c}")).collect(),
        samples,
        sampling_rate_hz: fs,
        modality: spec.modality,
        annotations,
    })
}

/// Generates and writes a BCRAW file plus its annotation sidecar.
pub fn generate_to_file(spec: &SyntheticSpec, path: &Path) -> Result<Recording, SynthError> {
    let rec = generate(spec)?;
    save_recording(path, &rec, &RecordingFormat::BcRaw)?;
    Ok(rec)
}
