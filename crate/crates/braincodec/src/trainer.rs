//! Joint training of the encoder, quantizer, decoder, and optional
//! adversary, plus the checkpoint archive format.
//!
//! The loop is single-writer over model state: each step runs one forward
//! and one optimizer update, then refreshes the codebooks from the same
//! batch. The adversarial variant alternates one discriminator update and
//! one generator update per step. All randomness derives from the config
//! seed through named substreams, so a rerun with the same config and data
//! produces a bitwise-identical checkpoint.

use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use sha2::{Digest, Sha256};

use crate::codec::{
    build_codec, decode, encode, encode_patches, decode_latents, patch_batch, Codec, CodecConfig,
    CodecError, CodecVars, LatentSequence,
};
use crate::discriminator::{
    build_discriminator, discriminate, Discriminator, DiscriminatorConfig, DiscriminatorError,
};
use crate::losses::{
    disc_adv_loss, feature_loss, gen_adv_loss, line_length_loss, spectral_loss, time_loss,
    total_generator_loss, Balancer, GeneratorLosses, LineLengthConfig, LossError, LossWeights,
    SpectralLossConfig,
};
use crate::metrics::{self, MetricError};
use crate::nn::{clip_global_norm, Adam, ParamVec};
use crate::quantizer::{
    frames_from_latents, quantize_st, QuantizerError, ResidualQuantizer, DEFAULT_DEAD_CODE_THRESHOLD,
    DEFAULT_EMA_DECAY,
};
use crate::rng::Rng;
use crate::signal_io::Patch;
use crate::tensor::{Arr, Tape, Var};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BCCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Fraction of total steps spent ramping the learning rate up.
pub const WARMUP_FRACTION: f64 = 0.3;

/// Slots in the gradient balancer: time, spectral, line-length, feature,
/// adversarial. Order is fixed; the balancer keys its running norms by slot.
pub const BALANCED_SLOTS: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("schedule step {step} out of range, total {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("non-finite {0}; step aborted before any parameter update")]
    NonFiniteLoss(&'static str),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Discriminator(#[from] DiscriminatorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("checkpoint io at {path}: {source}")]
    CheckpointIo { path: PathBuf, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Reconstruction + commitment objective only.
    Base,
    /// Adds the multi-scale spectrogram adversary and perceptual terms.
    Gan,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// None selects the per-variant default weights.
    pub weights: Option<LossWeights>,
    pub lr_generator_min: f64,
    pub lr_generator_max: f64,
    pub lr_discriminator_min: f64,
    pub lr_discriminator_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_split_fraction: f64,
    /// Global gradient norm ceiling; None disables clipping.
    pub grad_clip: Option<f64>,
    /// Rescale the perceptual loss gradients at the reconstruction before
    /// they enter the decoder. Only affects the adversarial variant.
    pub use_balancer: bool,
    pub dead_code_threshold: f64,
    pub spectral: SpectralLossConfig,
    pub line_length: LineLengthConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Base,
            weights: None,
            lr_generator_min: 1e-5,
            lr_generator_max: 1e-4,
            lr_discriminator_min: 1e-7,
            lr_discriminator_max: 1e-6,
            epochs: 10,
            batch_size: 64,
            seed: 0,
            train_split_fraction: 0.8,
            grad_clip: Some(1.0),
            use_balancer: true,
            dead_code_threshold: DEFAULT_DEAD_CODE_THRESHOLD,
            spectral: SpectralLossConfig::default(),
            line_length: LineLengthConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, min, max) in [
            ("generator", self.lr_generator_min, self.lr_generator_max),
            ("discriminator", self.lr_discriminator_min, self.lr_discriminator_max),
        ] {
            if !(min > 0.0 && max > 0.0 && min.is_finite() && max.is_finite()) {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} learning rates must be positive and finite"
                )));
            }
            if min > max {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} lr min {min} exceeds max {max}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.train_split_fraction > 0.0 && self.train_split_fraction < 1.0) {
            return Err(TrainError::InvalidConfig(
                "train_split_fraction must lie in (0, 1)".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(TrainError::InvalidConfig("grad_clip must be positive".into()));
            }
        }
        if !(self.dead_code_threshold >= 0.0 && self.dead_code_threshold.is_finite()) {
            return Err(TrainError::InvalidConfig(
                "dead_code_threshold must be nonnegative".into(),
            ));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        self.spectral.validate()?;
        self.line_length.validate()?;
        if self.variant == Variant::Gan {
            self.discriminator.validate()?;
        }
        Ok(())
    }

    /// Explicit weights if given, otherwise the variant's defaults.
    pub fn effective_weights(&self) -> LossWeights {
        self.weights.unwrap_or(match self.variant {
            Variant::Base => LossWeights::base(),
            Variant::Gan => LossWeights::gan(),
        })
    }
}

/// One-cycle learning rate: cosine ramp from `lr_min` to `lr_max` over the
/// first [`WARMUP_FRACTION`] of steps, cosine anneal back to `lr_min` over
/// the rest. Endpoints and the peak are exact.
pub fn one_cycle_lr(
    step: u64,
    total_steps: u64,
    lr_min: f64,
    lr_max: f64,
) -> Result<f64, TrainError> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange { step, total: total_steps });
    }
    if step == 0 || step == total_steps {
        return Ok(lr_min);
    }
    let peak = WARMUP_FRACTION * total_steps as f64;
    let t = step as f64;
    let span = lr_max - lr_min;
    if t == peak {
        return Ok(lr_max);
    }
    if t < peak {
        Ok(lr_min + span * 0.5 * (1.0 - (std::f64::consts::PI * t / peak).cos()))
    } else {
        let u = (t - peak) / (total_steps as f64 - peak);
        Ok(lr_min + span * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()))
    }
}

/// Loss values observed in one optimizer step. Terms the active variant
/// does not compute stay None.
#[derive(Clone, Debug, serde::Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr_generator: f64,
    pub lr_discriminator: Option<f64>,
    pub time: f64,
    pub spectral: Option<f64>,
    pub line_length: Option<f64>,
    pub feature: Option<f64>,
    pub adversarial: Option<f64>,
    pub disc_adversarial: Option<f64>,
    pub commitment: f64,
    /// Weighted generator objective (discriminator loss excluded).
    pub total: f64,
    pub replaced_codes: usize,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochReport {
    /// 0 is the pre-training baseline.
    pub epoch: usize,
    pub validation_prd: f64,
    pub mean_step_loss: Option<f64>,
}

/// Serializable snapshot of everything a run needs to resume or deploy.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub codec_config: CodecConfig,
    pub train_config: TrainConfig,
    pub codec_params: ParamVec,
    pub quantizer: ResidualQuantizer,
    pub discriminator_params: Option<ParamVec>,
    pub balancer: Balancer,
    pub generator_optimizer: Adam,
    pub discriminator_optimizer: Option<Adam>,
    pub step: u64,
    pub total_steps: u64,
}

impl Checkpoint {
    /// SHA-256 over the deployed state: codec config, codec parameters,
    /// quantizer. Optimizer and adversary state do not affect the hash, so
    /// containers written by a model stay verifiable across fine-tuning
    /// bookkeeping differences.
    pub fn content_hash(&self) -> [u8; 32] {
        let payload =
            serde_json::to_vec(&(&self.codec_config, &self.codec_params, &self.quantizer))
                .expect("model state is serializable");
        let mut h = Sha256::new();
        h.update(&payload);
        h.finalize().into()
    }

    /// Deployable codec built from this snapshot.
    pub fn codec(&self) -> Codec {
        Codec { config: self.codec_config.clone(), params: self.codec_params.clone() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let json = serde_json::to_vec(self)
            .map_err(|e| TrainError::CheckpointFormat(e.to_string()))?;
        let mut out = Vec::with_capacity(14 + json.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 14 {
            return Err(TrainError::CheckpointFormat("shorter than header".into()));
        }
        if bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(TrainError::CheckpointFormat("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointFormat(format!(
                "unsupported version {version}"
            )));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        if bytes.len() != 14 + len {
            return Err(TrainError::CheckpointFormat(format!(
                "payload length {} does not match declared {len}",
                bytes.len() - 14
            )));
        }
        serde_json::from_slice(&bytes[14..])
            .map_err(|e| TrainError::CheckpointFormat(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)
            .map_err(|e| TrainError::CheckpointIo { path: path.to_owned(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)
            .map_err(|e| TrainError::CheckpointIo { path: path.to_owned(), source: e })?;
        Self::from_bytes(&bytes)
    }
}

pub struct Trainer {
    pub codec: Codec,
    pub quantizer: ResidualQuantizer,
    pub discriminator: Option<Discriminator>,
    pub config: TrainConfig,
    pub step: u64,
    pub total_steps: u64,
    generator_optimizer: Adam,
    discriminator_optimizer: Option<Adam>,
    balancer: Balancer,
    maintenance_rng: Rng,
}

/// Extracts one gradient array per parameter, rejecting non-finite values
/// before anything touches the optimizer.
fn collect_grads(
    grads: &mut crate::tensor::Gradients,
    ordered: &[Var<'_>],
    what: &'static str,
) -> Result<Vec<Arr>, TrainError> {
    let mut out = Vec::with_capacity(ordered.len());
    for v in ordered {
        let g = grads.take(*v).unwrap_or_else(|| Arr::zeros(v.value().raw_dim()));
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TrainError::NonFiniteLoss(what));
        }
        out.push(g);
    }
    Ok(out)
}

fn finite(name: &'static str, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFiniteLoss(name))
    }
}

impl Trainer {
    /// Builds fresh model state. `total_steps` sizes the learning rate
    /// schedule; [`fit`] computes it from the dataset, direct users of
    /// [`Trainer::train_step`] pass their own horizon.
    pub fn new(
        codec_config: CodecConfig,
        config: TrainConfig,
        total_steps: u64,
    ) -> Result<Self, TrainError> {
        codec_config.validate()?;
        config.validate()?;
        let codec = build_codec(codec_config.clone(), config.seed)?;
        let quantizer = ResidualQuantizer::new(
            codec_config.latent_dim,
            codec_config.num_quantizers,
            codec_config.codebook_size,
            DEFAULT_EMA_DECAY,
        );
        let discriminator = match config.variant {
            Variant::Base => None,
            Variant::Gan => Some(build_discriminator(
                config.discriminator.clone(),
                config.seed.wrapping_add(1),
            )?),
        };
        let generator_optimizer = Adam::new(&codec.params);
        let discriminator_optimizer = discriminator.as_ref().map(|d| Adam::new(&d.params));
        let maintenance_rng = Rng::substream(config.seed, 2);
        Ok(Self {
            codec,
            quantizer,
            discriminator,
            config,
            step: 0,
            total_steps,
            generator_optimizer,
            discriminator_optimizer,
            balancer: Balancer::new(BALANCED_SLOTS),
            maintenance_rng,
        })
    }

    /// Seeds the codebooks by k-means over the latents of `batch` if they
    /// are still uninitialized. Returns whether initialization ran.
    pub fn ensure_initialized(&mut self, batch: &Arr) -> Result<bool, TrainError> {
        if self.quantizer.initialized {
            return Ok(false);
        }
        let tape = Tape::no_grad();
        let vars = self.codec.vars(&tape);
        let x = tape.leaf(batch.clone());
        let z = encode(&tape, &self.codec.config, &vars, x);
        let frames = frames_from_latents(&z.value());
        let mut rng = Rng::substream(self.config.seed, 1);
        self.quantizer.kmeans_init(frames.view(), &mut rng)?;
        Ok(true)
    }

    /// One optimizer step on `batch`, shaped (batch, 1, window). The first
    /// call on fresh state initializes the codebooks from this batch.
    pub fn train_step(&mut self, batch: &Arr) -> Result<StepRecord, TrainError> {
        self.ensure_initialized(batch)?;
        match self.config.variant {
            Variant::Base => self.train_step_base(batch),
            Variant::Gan => self.train_step_gan(batch),
        }
    }

    fn train_step_base(&mut self, batch: &Arr) -> Result<StepRecord, TrainError> {
        let lr = one_cycle_lr(
            self.step,
            self.total_steps,
            self.config.lr_generator_min,
            self.config.lr_generator_max,
        )?;
        let weights = self.config.effective_weights();

        let tape = Tape::new();
        let vars = self.codec.vars(&tape);
        let x = tape.leaf(batch.clone());
        let z = encode(&tape, &self.codec.config, &vars, x);
        let (zq, commit, qf) = quantize_st(&self.quantizer, z)?;
        let xhat = decode(&tape, &self.codec.config, &vars, zq);
        let lt = time_loss(x, xhat)?;
        let losses =
            GeneratorLosses { time: Some(lt), commitment: Some(commit), ..Default::default() };
        let total = total_generator_loss(&tape, &losses, &weights)?;
        let total_v = finite("total loss", total.scalar_value())?;

        let mut grads = tape.backward(total);
        let mut gvec = collect_grads(&mut grads, &vars.ordered, "generator gradient")?;
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut gvec, c);
        }
        self.generator_optimizer.update(&mut self.codec.params, &gvec, lr);
        let replaced = self.refresh_codebooks(&z.value(), &qf.indices);
        self.step += 1;

        Ok(StepRecord {
            step: self.step,
            lr_generator: lr,
            lr_discriminator: None,
            time: lt.scalar_value(),
            spectral: None,
            line_length: None,
            feature: None,
            adversarial: None,
            disc_adversarial: None,
            commitment: qf.commit_loss,
            total: total_v,
            replaced_codes: replaced,
        })
    }

    fn train_step_gan(&mut self, batch: &Arr) -> Result<StepRecord, TrainError> {
        let shape = batch.shape().to_vec();
        assert_eq!(shape.len(), 3, "batch must be (batch, 1, window)");
        let (b, w) = (shape[0], shape[2]);
        let flat_shape = [b, w];

        let lr_d = one_cycle_lr(
            self.step,
            self.total_steps,
            self.config.lr_discriminator_min,
            self.config.lr_discriminator_max,
        )?;
        let lr_g = one_cycle_lr(
            self.step,
            self.total_steps,
            self.config.lr_generator_min,
            self.config.lr_generator_max,
        )?;

        let real_flat = batch.to_shape(IxDyn(&flat_shape)).expect("batch reshape").to_owned();

        // Adversary update on the current generator's output, no gradient
        // into the generator.
        let fake_flat = {
            let tape = Tape::no_grad();
            let vars = self.codec.vars(&tape);
            let x = tape.leaf(batch.clone());
            let z = encode(&tape, &self.codec.config, &vars, x);
            let (zq, _, _) = quantize_st(&self.quantizer, z)?;
            let xhat = decode(&tape, &self.codec.config, &vars, zq);
            let v = xhat.value();
            v.to_shape(IxDyn(&flat_shape)).expect("reconstruction reshape").to_owned()
        };
        let disc = self.discriminator.as_mut().expect("adversarial variant");
        let ld_v;
        {
            let tape = Tape::new();
            let dvars = disc.vars(&tape);
            let xr = tape.leaf(real_flat.clone());
            let xf = tape.leaf(fake_flat);
            let real_out = discriminate(&tape, &disc.config, &dvars, xr)?;
            let fake_out = discriminate(&tape, &disc.config, &dvars, xf)?;
            let ld = disc_adv_loss(&real_out.logits, &fake_out.logits)?;
            ld_v = finite("discriminator loss", ld.scalar_value())?;
            let mut grads = tape.backward(ld);
            let mut gvec = collect_grads(&mut grads, &dvars.ordered, "discriminator gradient")?;
            if let Some(c) = self.config.grad_clip {
                clip_global_norm(&mut gvec, c);
            }
            let opt = self.discriminator_optimizer.as_mut().expect("adversarial variant");
            opt.update(&mut disc.params, &gvec, lr_d);
        }

        // Generator update against the just-updated adversary.
        let weights = self.config.effective_weights();
        let tape = Tape::new();
        let cvars = self.codec.vars(&tape);
        let disc = self.discriminator.as_ref().expect("adversarial variant");
        let dvars = disc.vars(&tape);
        let x = tape.leaf(batch.clone());
        let x_flat = x.reshape(&flat_shape);
        let z = encode(&tape, &self.codec.config, &cvars, x);
        let (zq, commit, qf) = quantize_st(&self.quantizer, z)?;
        let xhat = decode(&tape, &self.codec.config, &cvars, zq).reshape(&flat_shape);

        // With balancing on, perceptual losses are built on a detached copy
        // of the reconstruction; their gradients are renormalized there and
        // re-seeded into the live graph. The commitment term bypasses the
        // balancer by design.
        let target = if self.config.use_balancer { xhat.detach() } else { xhat };
        let lt = time_loss(x_flat, target)?;
        let ls = spectral_loss(&tape, x_flat, target, &self.config.spectral)?;
        let ll = line_length_loss(&tape, x_flat, target, &self.config.line_length)?;
        let real_out = discriminate(&tape, &disc.config, &dvars, x_flat)?;
        let fake_out = discriminate(&tape, &disc.config, &dvars, target)?;
        let lg = gen_adv_loss(&fake_out.logits)?;
        let lf = feature_loss(&real_out.features, &fake_out.features)?;

        let lt_v = finite("time loss", lt.scalar_value())?;
        let ls_v = finite("spectral loss", ls.scalar_value())?;
        let ll_v = finite("line-length loss", ll.scalar_value())?;
        let lf_v = finite("feature loss", lf.scalar_value())?;
        let lg_v = finite("adversarial loss", lg.scalar_value())?;
        let lq_v = finite("commitment loss", qf.commit_loss)?;
        let total_v = weights.time * lt_v
            + weights.spectral * ls_v
            + weights.line_length * ll_v
            + weights.feature * lf_v
            + weights.adversarial * lg_v
            + weights.commitment * lq_v;

        let mut grads = if self.config.use_balancer {
            let seed = self.balancer.combine(
                &tape,
                target,
                &[
                    Some((weights.time, lt)),
                    Some((weights.spectral, ls)),
                    Some((weights.line_length, ll)),
                    Some((weights.feature, lf)),
                    Some((weights.adversarial, lg)),
                ],
            )?;
            let commit_seed = Arr::from_elem(IxDyn(&[]), weights.commitment);
            tape.backward_seeded(&[(xhat, seed), (commit, commit_seed)])
        } else {
            let losses = GeneratorLosses {
                time: Some(lt),
                spectral: Some(ls),
                line_length: Some(ll),
                feature: Some(lf),
                adversarial: Some(lg),
                commitment: Some(commit),
            };
            let total = total_generator_loss(&tape, &losses, &weights)?;
            tape.backward(total)
        };
        let mut gvec = collect_grads(&mut grads, &cvars.ordered, "generator gradient")?;
        if let Some(c) = self.config.grad_clip {
            clip_global_norm(&mut gvec, c);
        }
        self.generator_optimizer.update(&mut self.codec.params, &gvec, lr_g);
        let replaced = self.refresh_codebooks(&z.value(), &qf.indices);
        self.step += 1;

        Ok(StepRecord {
            step: self.step,
            lr_generator: lr_g,
            lr_discriminator: Some(lr_d),
            time: lt_v,
            spectral: Some(ls_v),
            line_length: Some(ll_v),
            feature: Some(lf_v),
            adversarial: Some(lg_v),
            disc_adversarial: Some(ld_v),
            commitment: lq_v,
            total: total_v,
            replaced_codes: replaced,
        })
    }

    /// EMA codebook update plus dead-code replacement from one batch of
    /// encoder latents. Runs after the optimizer step.
    fn refresh_codebooks(&mut self, latents: &Arr, indices: &ndarray::Array2<u32>) -> usize {
        let frames = frames_from_latents(latents);
        self.quantizer.ema_update(frames.view(), indices.view());
        self.quantizer.replace_dead_codes(
            frames.view(),
            self.config.dead_code_threshold,
            &mut self.maintenance_rng,
        )
    }

    /// Median PRD of quantized reconstructions over `patches`.
    pub fn validation_prd(&self, patches: &[Patch]) -> Result<f64, TrainError> {
        if patches.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let latents = encode_patches(&self.codec, patches)?;
        let mut quantized = Vec::with_capacity(latents.len());
        for seq in &latents {
            let frames_t = seq.frames.t().to_owned();
            let qf = self.quantizer.quantize_frames(frames_t.view())?;
            quantized.push(LatentSequence {
                frames: qf.quantized.t().to_owned(),
                channel_index: seq.channel_index,
                patch_index: seq.patch_index,
            });
        }
        let recs = decode_latents(&self.codec, &quantized)?;
        let mut prds = Vec::with_capacity(patches.len());
        for (p, r) in patches.iter().zip(&recs) {
            prds.push(metrics::prd(&p.values, r)?);
        }
        Ok(metrics::median(&mut prds))
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            codec_config: self.codec.config.clone(),
            train_config: self.config.clone(),
            codec_params: self.codec.params.clone(),
            quantizer: self.quantizer.clone(),
            discriminator_params: self.discriminator.as_ref().map(|d| d.params.clone()),
            balancer: self.balancer.clone(),
            generator_optimizer: self.generator_optimizer.clone(),
            discriminator_optimizer: self.discriminator_optimizer.clone(),
            step: self.step,
            total_steps: self.total_steps,
        }
    }

    /// Parameter variables for the codec on `tape`. Test hook.
    pub fn codec_vars<'t>(&self, tape: &'t Tape) -> CodecVars<'t> {
        self.codec.vars(tape)
    }
}

#[derive(Debug)]
pub struct FitResult {
    /// Best-validation snapshot (ties keep the earliest epoch).
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub epochs: Vec<EpochReport>,
    pub steps: Vec<StepRecord>,
}

/// Trains on a shuffled split of `patches`, validates each epoch by median
/// PRD, and returns the best-validation checkpoint. Deterministic for a
/// given config and patch list.
pub fn fit(
    patches: &[Patch],
    codec_config: &CodecConfig,
    config: &TrainConfig,
) -> Result<FitResult, TrainError> {
    if patches.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    codec_config.validate()?;
    config.validate()?;
    let window = patches[0].values.len();
    if patches.iter().any(|p| p.values.len() != window) {
        return Err(TrainError::InvalidConfig("patches must share one window length".into()));
    }

    let n = patches.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::substream(config.seed, 3).shuffle(&mut order);
    let n_train = ((n as f64 * config.train_split_fraction).round() as usize).clamp(1, n);
    let (train_idx, val_idx) = order.split_at(n_train);
    let val_idx = if val_idx.is_empty() {
        log::warn!("validation split is empty; validating on the training patches");
        train_idx
    } else {
        val_idx
    };
    let val_patches: Vec<Patch> = val_idx.iter().map(|&i| patches[i].clone()).collect();

    let batches_per_epoch = n_train.div_ceil(config.batch_size);
    let total_steps = (config.epochs * batches_per_epoch).max(1) as u64;
    let mut trainer = Trainer::new(codec_config.clone(), config.clone(), total_steps)?;

    // Codebooks must exist before the baseline validation pass; epochs=0
    // then still returns a usable model.
    let first: Vec<Patch> = train_idx
        .iter()
        .take(config.batch_size.min(n_train))
        .map(|&i| patches[i].clone())
        .collect();
    trainer.ensure_initialized(&patch_batch(&first)?)?;

    let mut best_prd = trainer.validation_prd(&val_patches)?;
    let mut best_ck = trainer.checkpoint();
    let mut best_epoch = 0usize;
    let mut epochs =
        vec![EpochReport { epoch: 0, validation_prd: best_prd, mean_step_loss: None }];
    let mut steps = Vec::new();

    for e in 0..config.epochs {
        let mut idx = train_idx.to_vec();
        Rng::substream(config.seed, 100 + e as u64).shuffle(&mut idx);
        let mut totals = Vec::with_capacity(batches_per_epoch);
        for chunk in idx.chunks(config.batch_size) {
            let batch: Vec<Patch> = chunk.iter().map(|&i| patches[i].clone()).collect();
            let rec = trainer.train_step(&patch_batch(&batch)?)?;
            totals.push(rec.total);
            steps.push(rec);
        }
        let prd = trainer.validation_prd(&val_patches)?;
        epochs.push(EpochReport {
            epoch: e + 1,
            validation_prd: prd,
            mean_step_loss: Some(metrics::mean(&totals)),
        });
        if prd < best_prd {
            best_prd = prd;
            best_ck = trainer.checkpoint();
            best_epoch = e + 1;
        }
    }

    Ok(FitResult { checkpoint: best_ck, best_epoch, epochs, steps })
}
