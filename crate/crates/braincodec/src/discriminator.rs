//! Multi-scale spectrogram discriminator.
//!
//! A bank of 2D convolutional critics, one per STFT window length, each
//! consuming the complex spectrogram of the input as two real channels and
//! emitting a logit map plus the intermediate feature maps used by the
//! feature-matching loss.

use crate::nn::{init_uniform, ParamCursor, ParamVec};
use crate::rng::Rng;
use crate::tensor::ops::{conv2d, Conv2dGeom};
use crate::tensor::stft::{reflect_pad, stft_complex, StftPlan};
use crate::tensor::{Tape, Var};
use std::rc::Rc;

#[derive(Debug, thiserror::Error)]
pub enum DiscriminatorError {
    #[error("invalid discriminator config: {0}")]
    InvalidConfig(String),
    #[error("signal of {len} samples too short for window {window} even with reflect padding")]
    TooShort { len: usize, window: usize },
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// STFT window per sub-discriminator, strictly decreasing, all >= 32.
    pub window_lengths: Vec<usize>,
    pub base_channels: usize,
    /// Time-axis dilations of the strided middle convolutions.
    pub dilations: Vec<usize>,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            window_lengths: vec![2048, 1024, 512, 256, 128],
            base_channels: 64,
            dilations: vec![1, 2, 4],
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<(), DiscriminatorError> {
        let bad = |m: String| Err(DiscriminatorError::InvalidConfig(m));
        if self.window_lengths.is_empty() {
            return bad("window_lengths empty".into());
        }
        if self.window_lengths.windows(2).any(|p| p[1] >= p[0]) {
            return bad(format!("window_lengths not strictly decreasing: {:?}", self.window_lengths));
        }
        if self.window_lengths.iter().any(|&w| w < 32) {
            return bad(format!("window length below 32 in {:?}", self.window_lengths));
        }
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        if self.dilations.is_empty() || self.dilations.iter().any(|&d| d == 0) {
            return bad(format!("dilations must be nonempty and positive: {:?}", self.dilations));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky_slope {} outside (0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Conv layers per sub-discriminator, final logit layer included.
    pub fn layers_per_scale(&self) -> usize {
        self.dilations.len() + 3
    }

    /// Feature maps contributing to feature matching (all layers but the logit).
    pub fn features_per_scale(&self) -> usize {
        self.layers_per_scale() - 1
    }
}

pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamVec,
}

/// Per-layer (weight, bias) pairs for one sub-discriminator, in forward order.
pub struct DiscVars<'t> {
    pub scales: Vec<Vec<(Var<'t>, Var<'t>)>>,
    pub ordered: Vec<Var<'t>>,
}

pub fn build_discriminator(
    config: DiscriminatorConfig,
    seed: u64,
) -> Result<Discriminator, DiscriminatorError> {
    config.validate()?;
    let mut rng = Rng::seeded(seed);
    let c = config.base_channels;
    let mut params = ParamVec::default();
    let push = |name: String, co: usize, ci: usize, rng: &mut Rng, params: &mut ParamVec| {
        let fan_in = ci * 9;
        params.push(format!("{name}.w"), init_uniform(rng, &[co, ci, 3, 3], fan_in));
        params.push(format!("{name}.b"), init_uniform(rng, &[co], fan_in));
    };
    for s in 0..config.window_lengths.len() {
        push(format!("disc.s{s}.init"), c, 2, &mut rng, &mut params);
        for (j, _) in config.dilations.iter().enumerate() {
            push(format!("disc.s{s}.dil{j}"), c, c, &mut rng, &mut params);
        }
        push(format!("disc.s{s}.mid"), c, c, &mut rng, &mut params);
        push(format!("disc.s{s}.logit"), 1, c, &mut rng, &mut params);
    }
    Ok(Discriminator { config, params })
}

impl Discriminator {
    pub fn vars<'t>(&self, tape: &'t Tape) -> DiscVars<'t> {
        let mut cur = ParamCursor::new(tape, &self.params);
        let mut scales = Vec::new();
        for s in 0..self.config.window_lengths.len() {
            let mut names = vec![format!("disc.s{s}.init")];
            for j in 0..self.config.dilations.len() {
                names.push(format!("disc.s{s}.dil{j}"));
            }
            names.push(format!("disc.s{s}.mid"));
            names.push(format!("disc.s{s}.logit"));
            let mut layers = Vec::new();
            for name in names {
                let w = cur.take(&format!("{name}.w"));
                let b = cur.take(&format!("{name}.b"));
                layers.push((w, b));
            }
            scales.push(layers);
        }
        let ordered = cur.finish();
        DiscVars { scales, ordered }
    }
}

pub struct DiscriminatorOutput<'t> {
    /// One logit map per scale, shape (batch, 1, frames, bins').
    pub logits: Vec<Var<'t>>,
    /// Post-activation feature maps per scale, logit layer excluded.
    pub features: Vec<Vec<Var<'t>>>,
}

/// Padding that keeps stride-1 axes the same length: total = k_eff - stride.
fn pad2(k: usize, dilation: usize, stride: usize) -> (usize, usize) {
    let k_eff = (k - 1) * dilation + 1;
    let total = k_eff.saturating_sub(stride);
    (total / 2, total - total / 2)
}

/// Runs every sub-discriminator on a (batch, time) signal. Signals shorter
/// than a scale's window are reflect-padded up to it; padding is impossible
/// when the deficit per side exceeds len - 1.
pub fn discriminate<'t>(
    tape: &'t Tape,
    config: &DiscriminatorConfig,
    vars: &DiscVars<'t>,
    x: Var<'t>,
) -> Result<DiscriminatorOutput<'t>, DiscriminatorError> {
    let shape = x.value().shape().to_vec();
    assert_eq!(shape.len(), 2, "discriminator input must be (batch, time)");
    let t = shape[1];
    let mut logits = Vec::new();
    let mut features = Vec::new();
    for (s, &win) in config.window_lengths.iter().enumerate() {
        let hop = win / 4;
        let input = if t < win {
            let deficit = win - t;
            let left = deficit / 2;
            let right = deficit - left;
            if left > t - 1 || right > t - 1 {
                return Err(DiscriminatorError::TooShort { len: t, window: win });
            }
            reflect_pad(tape, x, left, right)
        } else {
            x
        };
        let plan = Rc::new(StftPlan::new(win, hop));
        let mut h = stft_complex(tape, input, plan);
        let mut feats = Vec::new();
        let layers = &vars.scales[s];
        let last = layers.len() - 1;
        for (l, &(w, b)) in layers.iter().enumerate() {
            let (stride, dil) = if l == 0 || l >= last - 1 {
                ((1, 1), (1, 1))
            } else {
                ((1, 2), (config.dilations[l - 1], 1))
            };
            let (pt, pb) = pad2(3, dil.0, stride.0);
            let (pl, pr) = pad2(3, dil.1, stride.1);
            let geom = Conv2dGeom { stride, dilation: dil, pad: (pt, pb, pl, pr) };
            h = conv2d(tape, h, w, b, geom);
            if l < last {
                h = h.leaky_relu(config.leaky_slope);
                feats.push(h);
            }
        }
        logits.push(h);
        features.push(feats);
    }
    Ok(DiscriminatorOutput { logits, features })
}
