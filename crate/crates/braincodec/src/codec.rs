//! Convolutional encoder/decoder over single-channel signal patches.
//!
//! Every convolution has kernel extent 1 across channels (patches enter as
//! independent batch rows), so one trained model serves any montage and any
//! channel count. The encoder downsamples time by `stride` per block while
//! doubling feature widths up to a cap; the decoder mirrors it with
//! transposed convolutions. All activations are ELU; there is no
//! normalization and no stochastic layer, so evaluation is bit-deterministic.

use crate::nn::{init_uniform, ParamCursor, ParamVec};
use crate::rng::Rng;
use crate::signal_io::Patch;
use crate::tensor::ops::{conv1d, tconv1d};
use crate::tensor::{Arr, Tape, Var};
use ndarray::{Array2, IxDyn};

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("invalid codec config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

fn default_base_channels() -> usize {
    16
}
fn default_stride() -> usize {
    2
}
fn default_latent_dim() -> usize {
    64
}
fn default_num_blocks() -> usize {
    6
}
fn default_init_kernel() -> usize {
    3
}
fn default_patch_seconds() -> f64 {
    4.0
}
fn default_max_channels() -> usize {
    256
}
fn default_raw_bits() -> u32 {
    32
}
fn default_num_quantizers() -> usize {
    4
}
fn default_codebook_size() -> usize {
    256
}

/// Architecture and rate parameters of one codec model.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_num_blocks")]
    pub num_blocks: usize,
    #[serde(default = "default_init_kernel")]
    pub init_kernel: usize,
    #[serde(default = "default_patch_seconds")]
    pub patch_seconds: f64,
    #[serde(default = "default_max_channels")]
    pub max_channels: usize,
    #[serde(default = "default_raw_bits")]
    pub raw_bits_per_sample: u32,
    #[serde(default = "default_num_quantizers")]
    pub num_quantizers: usize,
    #[serde(default = "default_codebook_size")]
    pub codebook_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            base_channels: default_base_channels(),
            stride: default_stride(),
            latent_dim: default_latent_dim(),
            num_blocks: default_num_blocks(),
            init_kernel: default_init_kernel(),
            patch_seconds: default_patch_seconds(),
            max_channels: default_max_channels(),
            raw_bits_per_sample: default_raw_bits(),
            num_quantizers: default_num_quantizers(),
            codebook_size: default_codebook_size(),
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.num_blocks < 1 {
            return Err(CodecError::InvalidConfig("num_blocks must be >= 1".into()));
        }
        if self.stride < 2 {
            return Err(CodecError::InvalidConfig("stride must be >= 2".into()));
        }
        if self.base_channels == 0
            || self.latent_dim == 0
            || self.init_kernel == 0
            || self.max_channels < self.base_channels
        {
            return Err(CodecError::InvalidConfig("zero-sized layer dimension".into()));
        }
        if !(self.patch_seconds > 0.0) {
            return Err(CodecError::InvalidConfig("patch_seconds must be positive".into()));
        }
        if self.num_quantizers == 0 || self.codebook_size < 2 {
            return Err(CodecError::InvalidConfig(
                "need at least one quantizer stage and two codes".into(),
            ));
        }
        if self.raw_bits_per_sample == 0 {
            return Err(CodecError::InvalidConfig("raw_bits_per_sample must be positive".into()));
        }
        Ok(())
    }

    /// Total temporal downsampling, `stride^num_blocks`.
    pub fn downsample_factor(&self) -> usize {
        self.stride.pow(self.num_blocks as u32)
    }

    /// Per-block kernel size along time, fixed at twice the stride.
    pub fn block_kernel(&self) -> usize {
        2 * self.stride
    }

    /// Feature widths after the initial conv and after each block:
    /// `widths()[0] = base_channels`, then doubling capped at max_channels.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.num_blocks + 1);
        w.push(self.base_channels);
        for i in 0..self.num_blocks {
            w.push((2 * w[i]).min(self.max_channels));
        }
        w
    }

    /// A patch length is encodable when the downsample factor divides it.
    pub fn validate_window(&self, window: usize) -> Result<(), CodecError> {
        let f = self.downsample_factor();
        if window == 0 || window % f != 0 {
            return Err(CodecError::InvalidConfig(format!(
                "patch length {window} is not a positive multiple of the downsample factor {f}"
            )));
        }
        Ok(())
    }

    pub fn latent_frames(&self, window: usize) -> usize {
        window / self.downsample_factor()
    }

    /// Nominal compression ratio: raw bits covered by one latent frame over
    /// the bits its code indices occupy (information-theoretic, log2 of the
    /// codebook size; container overhead not included).
    pub fn compression_ratio(&self) -> f64 {
        let raw = self.raw_bits_per_sample as f64 * self.downsample_factor() as f64;
        raw / (self.num_quantizers as f64 * (self.codebook_size as f64).log2())
    }
}

/// One latent frame sequence with its source location in the recording.
#[derive(Clone, Debug)]
pub struct LatentSequence {
    /// (latent_dim, latent_frames)
    pub frames: Array2<f64>,
    pub channel_index: usize,
    pub patch_index: usize,
}

/// Codec parameters; array order is the construction order and is relied on
/// by checkpoints and the optimizer.
#[derive(Clone, Debug)]
pub struct Codec {
    pub config: CodecConfig,
    pub params: ParamVec,
}

fn push_conv(params: &mut ParamVec, rng: &mut Rng, name: &str, shape: [usize; 3], fan_in: usize) {
    params.push(format!("{name}.w"), init_uniform(rng, &shape, fan_in));
    params.push(format!("{name}.b"), init_uniform(rng, &[shape[0]], fan_in));
}

/// tconv weights are laid out (in, out, k); bias length is the out width.
fn push_tconv(params: &mut ParamVec, rng: &mut Rng, name: &str, shape: [usize; 3], fan_in: usize) {
    params.push(format!("{name}.w"), init_uniform(rng, &shape, fan_in));
    params.push(format!("{name}.b"), init_uniform(rng, &[shape[1]], fan_in));
}

fn push_res_block(params: &mut ParamVec, rng: &mut Rng, name: &str, width: usize) {
    push_conv(params, rng, &format!("{name}.c1"), [width, width, 3], width * 3);
    push_conv(params, rng, &format!("{name}.c2"), [width, width, 3], width * 3);
}

/// Deterministically initializes all encoder and decoder parameters.
pub fn build_codec(config: CodecConfig, seed: u64) -> Result<Codec, CodecError> {
    config.validate()?;
    let mut rng = Rng::seeded(seed);
    let mut params = ParamVec::new();
    let w = config.widths();
    let n = config.num_blocks;
    let bk = config.block_kernel();
    push_conv(&mut params, &mut rng, "enc.init", [w[0], 1, config.init_kernel], config.init_kernel);
    for i in 0..n {
        push_res_block(&mut params, &mut rng, &format!("enc.block{i}.res"), w[i]);
        push_conv(
            &mut params,
            &mut rng,
            &format!("enc.block{i}.down"),
            [w[i + 1], w[i], bk],
            w[i] * bk,
        );
    }
    push_conv(&mut params, &mut rng, "enc.final", [config.latent_dim, w[n], 3], w[n] * 3);
    push_conv(&mut params, &mut rng, "dec.init", [w[n], config.latent_dim, 3], config.latent_dim * 3);
    for i in 0..n {
        // Decoder block i inverts encoder block n-1-i.
        let (wide, narrow) = (w[n - i], w[n - i - 1]);
        push_tconv(
            &mut params,
            &mut rng,
            &format!("dec.block{i}.up"),
            [wide, narrow, bk],
            wide * bk,
        );
        push_res_block(&mut params, &mut rng, &format!("dec.block{i}.res"), narrow);
    }
    push_conv(&mut params, &mut rng, "dec.final", [1, w[0], 3], w[0] * 3);
    Ok(Codec { config, params })
}

#[derive(Clone, Copy)]
pub struct ConvVars<'t> {
    pub w: Var<'t>,
    pub b: Var<'t>,
}

#[derive(Clone, Copy)]
pub struct ResVars<'t> {
    pub c1: ConvVars<'t>,
    pub c2: ConvVars<'t>,
}

pub struct EncBlockVars<'t> {
    pub res: ResVars<'t>,
    pub down: ConvVars<'t>,
}

pub struct DecBlockVars<'t> {
    pub up: ConvVars<'t>,
    pub res: ResVars<'t>,
}

/// All codec parameters as tape leaves, in checkpoint order.
pub struct CodecVars<'t> {
    pub enc_init: ConvVars<'t>,
    pub enc_blocks: Vec<EncBlockVars<'t>>,
    pub enc_final: ConvVars<'t>,
    pub dec_init: ConvVars<'t>,
    pub dec_blocks: Vec<DecBlockVars<'t>>,
    pub dec_final: ConvVars<'t>,
    pub ordered: Vec<Var<'t>>,
}

fn take_conv<'t>(cur: &mut ParamCursor<'t, '_>, name: &str) -> ConvVars<'t> {
    ConvVars { w: cur.take(&format!("{name}.w")), b: cur.take(&format!("{name}.b")) }
}

fn take_res<'t>(cur: &mut ParamCursor<'t, '_>, name: &str) -> ResVars<'t> {
    ResVars { c1: take_conv(cur, &format!("{name}.c1")), c2: take_conv(cur, &format!("{name}.c2")) }
}

impl Codec {
    /// Loads every parameter onto the tape. `ordered` matches ParamVec order
    /// for gradient collection and optimizer updates.
    pub fn vars<'t>(&self, tape: &'t Tape) -> CodecVars<'t> {
        let mut cur = ParamCursor::new(tape, &self.params);
        let n = self.config.num_blocks;
        let enc_init = take_conv(&mut cur, "enc.init");
        let enc_blocks = (0..n)
            .map(|i| EncBlockVars {
                res: take_res(&mut cur, &format!("enc.block{i}.res")),
                down: take_conv(&mut cur, &format!("enc.block{i}.down")),
            })
            .collect();
        let enc_final = take_conv(&mut cur, "enc.final");
        let dec_init = take_conv(&mut cur, "dec.init");
        let dec_blocks = (0..n)
            .map(|i| DecBlockVars {
                up: take_conv(&mut cur, &format!("dec.block{i}.up")),
                res: take_res(&mut cur, &format!("dec.block{i}.res")),
            })
            .collect();
        let dec_final = take_conv(&mut cur, "dec.final");
        let ordered = cur.finish();
        CodecVars { enc_init, enc_blocks, enc_final, dec_init, dec_blocks, dec_final, ordered }
    }
}

fn same_pad(k: usize, stride: usize) -> (usize, usize) {
    // Total padding k - stride keeps out_len = in_len / stride exactly.
    let total = k - stride;
    (total / 2, total - total / 2)
}

fn res_forward<'t>(tape: &'t Tape, x: Var<'t>, rv: &ResVars<'t>) -> Var<'t> {
    let h = conv1d(tape, x, rv.c1.w, rv.c1.b, 1, 1, 1).elu();
    let h = conv1d(tape, h, rv.c2.w, rv.c2.b, 1, 1, 1);
    x.add(h)
}

/// Patches (batch, 1, window) to latents (batch, latent_dim, window/stride^N).
pub fn encode<'t>(tape: &'t Tape, cfg: &CodecConfig, vars: &CodecVars<'t>, x: Var<'t>) -> Var<'t> {
    let shape = x.value().shape().to_vec();
    assert_eq!(shape.len(), 3, "encoder input must be (batch, 1, window)");
    assert_eq!(shape[1], 1, "encoder input must be single-channel");
    assert_eq!(shape[2] % cfg.downsample_factor(), 0, "window not divisible by stride^N");
    let (pl, pr) = same_pad(cfg.init_kernel, 1);
    let mut h = conv1d(tape, x, vars.enc_init.w, vars.enc_init.b, 1, pl, pr).elu();
    let (bl, br) = same_pad(cfg.block_kernel(), cfg.stride);
    for block in &vars.enc_blocks {
        h = res_forward(tape, h, &block.res);
        h = conv1d(tape, h, block.down.w, block.down.b, cfg.stride, bl, br).elu();
    }
    conv1d(tape, h, vars.enc_final.w, vars.enc_final.b, 1, 1, 1)
}

/// Latents (batch, latent_dim, t) to reconstructed patches (batch, 1, t*stride^N).
pub fn decode<'t>(tape: &'t Tape, cfg: &CodecConfig, vars: &CodecVars<'t>, z: Var<'t>) -> Var<'t> {
    let shape = z.value().shape().to_vec();
    assert_eq!(shape.len(), 3, "decoder input must be (batch, latent_dim, t)");
    assert_eq!(shape[1], cfg.latent_dim, "latent dim mismatch");
    let mut h = conv1d(tape, z, vars.dec_init.w, vars.dec_init.b, 1, 1, 1).elu();
    let (cl, cr) = same_pad(cfg.block_kernel(), cfg.stride);
    for block in &vars.dec_blocks {
        h = tconv1d(tape, h, block.up.w, block.up.b, cfg.stride, cl, cr).elu();
        h = res_forward(tape, h, &block.res);
    }
    conv1d(tape, h, vars.dec_final.w, vars.dec_final.b, 1, 1, 1)
}

/// Stacks equal-length patch values into an encoder input (batch, 1, window).
pub fn patch_batch(patches: &[Patch]) -> Result<Arr, CodecError> {
    let Some(first) = patches.first() else {
        return Err(CodecError::ShapeMismatch("empty patch batch".into()));
    };
    let w = first.values.len();
    let mut x = Arr::zeros(IxDyn(&[patches.len(), 1, w]));
    for (i, p) in patches.iter().enumerate() {
        if p.values.len() != w {
            return Err(CodecError::ShapeMismatch(format!(
                "patch (ch {}, idx {}) has length {}, expected {w}",
                p.channel_index,
                p.patch_index,
                p.values.len()
            )));
        }
        for (t, &v) in p.values.iter().enumerate() {
            x[[i, 0, t]] = v;
        }
    }
    Ok(x)
}

/// Gradient-free batched encoding with provenance carried through. Batches
/// are processed in fixed-size chunks; chunking cannot change results because
/// batch rows never interact.
pub fn encode_patches(codec: &Codec, patches: &[Patch]) -> Result<Vec<LatentSequence>, CodecError> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(CHUNK) {
        let x = patch_batch(chunk)?;
        codec.config.validate_window(x.shape()[2])?;
        let tape = Tape::no_grad();
        let xv = tape.leaf(x);
        let vars = codec.vars(&tape);
        let z = encode(&tape, &codec.config, &vars, xv);
        let zv = z.value();
        let (d, t) = (zv.shape()[1], zv.shape()[2]);
        for (i, p) in chunk.iter().enumerate() {
            let mut frames = Array2::<f64>::zeros((d, t));
            for di in 0..d {
                for ti in 0..t {
                    frames[[di, ti]] = zv[[i, di, ti]];
                }
            }
            out.push(LatentSequence {
                frames,
                channel_index: p.channel_index,
                patch_index: p.patch_index,
            });
        }
    }
    Ok(out)
}

/// Gradient-free batched decoding back to patch value vectors, in input order.
pub fn decode_latents(codec: &Codec, latents: &[LatentSequence]) -> Result<Vec<Vec<f64>>, CodecError> {
    const CHUNK: usize = 32;
    let Some(first) = latents.first() else {
        return Ok(Vec::new());
    };
    let (d, t) = (first.frames.nrows(), first.frames.ncols());
    if d != codec.config.latent_dim {
        return Err(CodecError::ShapeMismatch(format!(
            "latent dim {d} does not match config {}",
            codec.config.latent_dim
        )));
    }
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        let mut z = Arr::zeros(IxDyn(&[chunk.len(), d, t]));
        for (i, l) in chunk.iter().enumerate() {
            if l.frames.nrows() != d || l.frames.ncols() != t {
                return Err(CodecError::ShapeMismatch(format!(
                    "latent (ch {}, idx {}) has shape {}x{}, expected {d}x{t}",
                    l.channel_index,
                    l.patch_index,
                    l.frames.nrows(),
                    l.frames.ncols()
                )));
            }
            for di in 0..d {
                for ti in 0..t {
                    z[[i, di, ti]] = l.frames[[di, ti]];
                }
            }
        }
        let tape = Tape::no_grad();
        let zv = tape.leaf(z);
        let vars = codec.vars(&tape);
        let y = decode(&tape, &codec.config, &vars, zv);
        let yv = y.value();
        let w = yv.shape()[2];
        for i in 0..chunk.len() {
            out.push((0..w).map(|ti| yv[[i, 0, ti]]).collect());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn tiny_config(n: usize) -> CodecConfig {
        CodecConfig {
            base_channels: 4,
            num_blocks: n,
            latent_dim: 6,
            max_channels: 16,
            ..CodecConfig::default()
        }
    }

    fn random_input(rng: &mut Rng, b: usize, w: usize) -> Arr {
        Arr::from_shape_fn(IxDyn(&[b, 1, w]), |_| rng.normal())
    }

    #[test]
    fn widths_double_and_cap() {
        let cfg = CodecConfig { num_blocks: 6, ..CodecConfig::default() };
        assert_eq!(cfg.widths(), vec![16, 32, 64, 128, 256, 256, 256]);
        assert_eq!(cfg.block_kernel(), 4);
        assert_eq!(cfg.downsample_factor(), 64);
    }

    #[test]
    fn same_seed_builds_bitwise_identical_parameters() {
        let a = build_codec(tiny_config(3), 7).unwrap();
        let b = build_codec(tiny_config(3), 7).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (pa, pb) in a.params.entries.iter().zip(&b.params.entries) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
        let c = build_codec(tiny_config(3), 8).unwrap();
        assert!(
            a.params.entries.iter().zip(&c.params.entries).any(|(x, y)| x.value != y.value),
            "different seeds must differ"
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = tiny_config(0);
        assert!(matches!(build_codec(cfg.clone(), 1), Err(CodecError::InvalidConfig(_))));
        cfg.num_blocks = 2;
        cfg.codebook_size = 1;
        assert!(matches!(build_codec(cfg, 1), Err(CodecError::InvalidConfig(_))));
        // Window not divisible by the downsample factor.
        let cfg = tiny_config(6);
        assert!(matches!(cfg.validate_window(1000), Err(CodecError::InvalidConfig(_))));
        assert!(cfg.validate_window(1024).is_ok());
    }

    #[test]
    fn encode_geometry_matches_contract() {
        let cfg = CodecConfig { num_blocks: 6, ..CodecConfig::default() };
        let codec = build_codec(cfg.clone(), 3).unwrap();
        let mut rng = Rng::seeded(1);
        let x = random_input(&mut rng, 2, 1024);
        let tape = Tape::no_grad();
        let xv = tape.leaf(x);
        let vars = codec.vars(&tape);
        let z = encode(&tape, &cfg, &vars, xv);
        assert_eq!(z.value().shape(), &[2, 64, 16]);
    }

    #[test]
    fn identical_patches_encode_identically() {
        let cfg = tiny_config(2);
        let codec = build_codec(cfg.clone(), 5).unwrap();
        let mut rng = Rng::seeded(2);
        let single = random_input(&mut rng, 1, 32);
        let mut pair = Arr::zeros(IxDyn(&[2, 1, 32]));
        for t in 0..32 {
            pair[[0, 0, t]] = single[[0, 0, t]];
            pair[[1, 0, t]] = single[[0, 0, t]];
        }
        let tape = Tape::no_grad();
        let vars = codec.vars(&tape);
        let z = encode(&tape, &cfg, &vars, tape.leaf(pair));
        let zv = z.value();
        for d in 0..cfg.latent_dim {
            for t in 0..zv.shape()[2] {
                assert_eq!(zv[[0, d, t]], zv[[1, d, t]]);
            }
        }
    }

    #[test]
    fn channels_are_independent_of_batch_composition() {
        let cfg = tiny_config(2);
        let codec = build_codec(cfg.clone(), 5).unwrap();
        let mut rng = Rng::seeded(4);
        let a = random_input(&mut rng, 1, 32);
        let b = random_input(&mut rng, 1, 32);
        let mut both = Arr::zeros(IxDyn(&[2, 1, 32]));
        for t in 0..32 {
            both[[0, 0, t]] = a[[0, 0, t]];
            both[[1, 0, t]] = b[[0, 0, t]];
        }
        let run = |x: Arr| {
            let tape = Tape::no_grad();
            let vars = codec.vars(&tape);
            let z = encode(&tape, &cfg, &vars, tape.leaf(x));
            let v = z.value();
            (*v).clone()
        };
        let za = run(a);
        let zb = run(b);
        let zboth = run(both);
        for d in 0..cfg.latent_dim {
            for t in 0..za.shape()[2] {
                let ra = (zboth[[0, d, t]] - za[[0, d, t]]).abs();
                let rb = (zboth[[1, d, t]] - zb[[0, d, t]]).abs();
                assert!(ra <= 1e-6 && rb <= 1e-6, "batch composition changed outputs");
            }
        }
    }

    #[test]
    fn decode_inverts_geometry_and_zero_latent_is_finite() {
        let cfg = CodecConfig { num_blocks: 6, ..CodecConfig::default() };
        let codec = build_codec(cfg.clone(), 9).unwrap();
        let tape = Tape::no_grad();
        let vars = codec.vars(&tape);
        let z = tape.leaf(Arr::zeros(IxDyn(&[1, 64, 16])));
        let y = decode(&tape, &cfg, &vars, z);
        assert_eq!(y.value().shape(), &[1, 1, 1024]);
        assert!(y.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn compression_ratio_reproduces_rate_tables() {
        let base = CodecConfig { num_blocks: 6, ..CodecConfig::default() };
        // Codebook-size ladder at n_q = 4.
        let expect_k: [(usize, f64); 5] =
            [(64, 85.33), (128, 73.14), (256, 64.0), (512, 56.89), (1024, 51.20)];
        for (k, cr) in expect_k {
            let cfg = CodecConfig { codebook_size: k, ..base.clone() };
            assert!(
                (cfg.compression_ratio() - cr).abs() <= 0.01,
                "K={k}: {} vs {cr}",
                cfg.compression_ratio()
            );
        }
        // Stage-count ladder at K_cb = 256.
        for (nq, cr) in [(1usize, 256.0), (4, 64.0), (8, 32.0), (16, 16.0)] {
            let cfg = CodecConfig { num_quantizers: nq, ..base.clone() };
            assert_eq!(cfg.compression_ratio(), cr, "n_q={nq}");
        }
        // Defaults give CR = 2^N.
        for n in 1..=6 {
            let cfg = CodecConfig { num_blocks: n, ..CodecConfig::default() };
            assert_eq!(cfg.compression_ratio(), (1u64 << n) as f64);
        }
    }

    #[test]
    fn gradients_flow_to_every_parameter() {
        let cfg = tiny_config(2);
        let codec = build_codec(cfg.clone(), 11).unwrap();
        let mut rng = Rng::seeded(6);
        let tape = Tape::new();
        let vars = codec.vars(&tape);
        let x = tape.leaf(random_input(&mut rng, 2, 16));
        let z = encode(&tape, &cfg, &vars, x);
        let y = decode(&tape, &cfg, &vars, z);
        let loss = y.mul(y).sum();
        let grads = tape.backward(loss);
        for (i, v) in vars.ordered.iter().enumerate() {
            let g = grads
                .get(*v)
                .unwrap_or_else(|| panic!("no gradient for {}", codec.params.entries[i].name));
            assert!(g.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn encode_patches_carries_provenance_and_chunking_is_invisible() {
        let cfg = tiny_config(1);
        let codec = build_codec(cfg.clone(), 13).unwrap();
        let mut rng = Rng::seeded(8);
        // 70 patches forces three chunks of 32/32/6.
        let patches: Vec<Patch> = (0..70)
            .map(|i| Patch {
                values: (0..16).map(|_| rng.normal()).collect(),
                channel_index: i % 7,
                patch_index: i / 7,
                sampling_rate_hz: 4.0,
            })
            .collect();
        let lats = encode_patches(&codec, &patches).unwrap();
        assert_eq!(lats.len(), 70);
        for (l, p) in lats.iter().zip(&patches) {
            assert_eq!((l.channel_index, l.patch_index), (p.channel_index, p.patch_index));
        }
        // Single-patch encoding agrees with the batched run.
        let solo = encode_patches(&codec, &patches[40..41]).unwrap();
        assert_eq!(solo[0].frames, lats[40].frames);
        let recon = decode_latents(&codec, &lats).unwrap();
        assert_eq!(recon.len(), 70);
        assert_eq!(recon[0].len(), 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn decode_encode_round_trip_preserves_length(
            n in 1usize..4,
            t_lat in 1usize..5,
            b in 1usize..3,
            seed in 0u64..50,
        ) {
            let cfg = tiny_config(n);
            let codec = build_codec(cfg.clone(), seed).unwrap();
            let w = t_lat * cfg.downsample_factor();
            let mut rng = Rng::seeded(seed);
            let x = random_input(&mut rng, b, w);
            let tape = Tape::no_grad();
            let vars = codec.vars(&tape);
            let z = encode(&tape, &cfg, &vars, tape.leaf(x));
            let zv = z.value();
            prop_assert_eq!(zv.shape(), &[b, cfg.latent_dim, t_lat]);
            let y = decode(&tape, &cfg, &vars, z);
            let yv = y.value();
            prop_assert_eq!(yv.shape(), &[b, 1, w]);
            prop_assert!(yv.iter().all(|v| v.is_finite()));
        }
    }
}
