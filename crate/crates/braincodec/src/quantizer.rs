//! Residual vector quantization with EMA codebook learning.
//!
//! Each stage quantizes the residual left by the previous stage against its
//! own codebook; the reconstructed latent is the sum of the selected
//! prototypes. Codebooks are learned by exponential moving averages of the
//! assigned inputs rather than by gradient descent, initialized by k-means on
//! the first batch, and revived by dead-code replacement. Gradients flow to
//! the encoder through a straight-through estimator.

use crate::rng::Rng;
use crate::tensor::{Arr, Var};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

pub const DEFAULT_EMA_DECAY: f64 = 0.99;
pub const DEFAULT_DEAD_CODE_THRESHOLD: f64 = 0.01;
/// Laplace smoothing floor for the EMA count division.
const COUNT_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum QuantizerError {
    #[error("codebooks already initialized")]
    AlreadyInitialized,
    #[error("initialization needs at least {needed} frame vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("quantizer used before k-means initialization")]
    NotInitialized,
    #[error("latent dimension {got} does not match codebook dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("code index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: u32, size: usize },
    #[error("code grids disagree in shape: {0}")]
    GridShapeMismatch(String),
}

/// Integer code indices for one latent sequence, shape (num_stages, latent_frames).
#[derive(Clone, Debug, PartialEq)]
pub struct CodeGrid {
    pub indices: Array2<u32>,
}

/// One stage's codebook plus its EMA statistics.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CodebookStage {
    pub vectors: Array2<f64>,
    pub ema_cluster_size: Array1<f64>,
    pub ema_embed_sum: Array2<f64>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ResidualQuantizer {
    pub dim: usize,
    pub num_stages: usize,
    pub codebook_size: usize,
    pub decay: f64,
    pub initialized: bool,
    pub stages: Vec<CodebookStage>,
}

/// Result of quantizing a flat batch of frame vectors.
#[derive(Clone, Debug)]
pub struct QuantizedFrames {
    /// (frames, stages)
    pub indices: Array2<u32>,
    /// (frames, dim); sum of selected prototypes.
    pub quantized: Array2<f64>,
    /// Squared per-stage residual errors, summed over stages, averaged over frames.
    pub commit_loss: f64,
    /// Gradient of `commit_loss` with respect to the input frames.
    pub commit_grad: Array2<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest codebook row. Strict `<` means equal distances
/// resolve to the lowest index.
fn nearest(codebook: ArrayView2<f64>, v: ArrayView1<f64>) -> usize {
    let mut best_k = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in codebook.outer_iter().enumerate() {
        let d = sq_dist(row, v);
        if d < best_d {
            best_d = d;
            best_k = k;
        }
    }
    best_k
}

/// Lloyd's algorithm with k-means++ seeding. Requires `data.nrows() >= k`.
/// Empty clusters keep their previous centroid.
pub fn kmeans(data: ArrayView2<f64>, k: usize, iters: usize, rng: &mut Rng) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    assert!(n >= k && k > 0, "kmeans needs at least k data points");
    let mut centroids = Array2::<f64>::zeros((k, d));
    let first = rng.below(n);
    centroids.row_mut(0).assign(&data.row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for j in 1..k {
        let pick = rng
            .weighted(&min_d2)
            .unwrap_or_else(|| rng.below(n));
        centroids.row_mut(j).assign(&data.row(pick));
        for i in 0..n {
            min_d2[i] = min_d2[i].min(sq_dist(data.row(i), data.row(pick)));
        }
    }
    let mut counts = vec![0usize; k];
    let mut sums = Array2::<f64>::zeros((k, d));
    for _ in 0..iters {
        counts.fill(0);
        sums.fill(0.0);
        for i in 0..n {
            let a = nearest(centroids.view(), data.row(i));
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            row += &data.row(i);
        }
        for kk in 0..k {
            if counts[kk] > 0 {
                let inv = 1.0 / counts[kk] as f64;
                for dd in 0..d {
                    centroids[[kk, dd]] = sums[[kk, dd]] * inv;
                }
            }
        }
    }
    centroids
}

impl ResidualQuantizer {
    pub fn new(dim: usize, num_stages: usize, codebook_size: usize, decay: f64) -> Self {
        assert!(dim > 0 && num_stages > 0 && codebook_size > 0);
        assert!(decay > 0.0 && decay < 1.0, "decay must lie in (0,1)");
        let stages = (0..num_stages)
            .map(|_| CodebookStage {
                vectors: Array2::zeros((codebook_size, dim)),
                ema_cluster_size: Array1::zeros(codebook_size),
                ema_embed_sum: Array2::zeros((codebook_size, dim)),
            })
            .collect();
        Self { dim, num_stages, codebook_size, decay, initialized: false, stages }
    }

    /// Initializes stage 0 from k-means centroids of the batch frames and
    /// each later stage from centroids of the residuals left by the previous
    /// one. EMA statistics start at one assignment per centroid so untouched
    /// codes stay exactly where k-means put them.
    pub fn kmeans_init(
        &mut self,
        frames: ArrayView2<f64>,
        rng: &mut Rng,
    ) -> Result<(), QuantizerError> {
        if self.initialized {
            return Err(QuantizerError::AlreadyInitialized);
        }
        if frames.ncols() != self.dim {
            return Err(QuantizerError::DimMismatch { expected: self.dim, got: frames.ncols() });
        }
        if frames.nrows() < self.codebook_size {
            return Err(QuantizerError::TooFewVectors {
                needed: self.codebook_size,
                got: frames.nrows(),
            });
        }
        let mut residual = frames.to_owned();
        for stage in &mut self.stages {
            let centroids = kmeans(residual.view(), self.codebook_size, 10, rng);
            stage.ema_embed_sum.assign(&centroids);
            stage.ema_cluster_size.fill(1.0);
            stage.vectors = centroids;
            for mut row in residual.outer_iter_mut() {
                let k = nearest(stage.vectors.view(), row.view());
                row -= &stage.vectors.row(k);
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Quantizes flat frame vectors (frames, dim). The commit loss value and
    /// its gradient treat the selected prototypes as constants.
    pub fn quantize_frames(
        &self,
        frames: ArrayView2<f64>,
    ) -> Result<QuantizedFrames, QuantizerError> {
        if !self.initialized {
            return Err(QuantizerError::NotInitialized);
        }
        if frames.ncols() != self.dim {
            return Err(QuantizerError::DimMismatch { expected: self.dim, got: frames.ncols() });
        }
        let n = frames.nrows();
        let mut residual = frames.to_owned();
        let mut quantized = Array2::<f64>::zeros((n, self.dim));
        let mut indices = Array2::<u32>::zeros((n, self.num_stages));
        let mut commit_sq = 0.0;
        let mut commit_grad = Array2::<f64>::zeros((n, self.dim));
        for (s, stage) in self.stages.iter().enumerate() {
            for i in 0..n {
                let k = nearest(stage.vectors.view(), residual.row(i));
                indices[[i, s]] = k as u32;
                for d in 0..self.dim {
                    let q = stage.vectors[[k, d]];
                    let diff = residual[[i, d]] - q;
                    quantized[[i, d]] += q;
                    commit_sq += diff * diff;
                    commit_grad[[i, d]] += diff;
                    residual[[i, d]] = diff;
                }
            }
        }
        let inv_n = if n == 0 { 0.0 } else { 1.0 / n as f64 };
        commit_grad.mapv_inplace(|g| g * 2.0 * inv_n);
        Ok(QuantizedFrames { indices, quantized, commit_loss: commit_sq * inv_n, commit_grad })
    }

    /// Sums the addressed prototypes; exact inverse of the index assignment.
    pub fn dequantize_frames(
        &self,
        indices: ArrayView2<u32>,
    ) -> Result<Array2<f64>, QuantizerError> {
        if !self.initialized {
            return Err(QuantizerError::NotInitialized);
        }
        if indices.ncols() != self.num_stages {
            return Err(QuantizerError::GridShapeMismatch(format!(
                "{} stages, expected {}",
                indices.ncols(),
                self.num_stages
            )));
        }
        let n = indices.nrows();
        let mut out = Array2::<f64>::zeros((n, self.dim));
        for (s, stage) in self.stages.iter().enumerate() {
            for i in 0..n {
                let k = indices[[i, s]];
                if k as usize >= self.codebook_size {
                    return Err(QuantizerError::IndexOutOfRange {
                        index: k,
                        size: self.codebook_size,
                    });
                }
                let mut row = out.row_mut(i);
                row += &stage.vectors.row(k as usize);
            }
        }
        Ok(out)
    }

    /// EMA codebook update from a batch and the grids it produced. Residual
    /// inputs per stage are recomputed with the pre-update codebooks, so this
    /// must run before any other mutation of the state for the same batch.
    pub fn ema_update(&mut self, frames: ArrayView2<f64>, indices: ArrayView2<u32>) {
        assert!(self.initialized, "ema_update before initialization");
        let n = frames.nrows();
        assert_eq!(indices.nrows(), n);
        assert_eq!(indices.ncols(), self.num_stages);
        let d = self.decay;
        let mut residual = frames.to_owned();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            let mut counts = Array1::<f64>::zeros(self.codebook_size);
            let mut sums = Array2::<f64>::zeros((self.codebook_size, self.dim));
            for i in 0..n {
                let k = indices[[i, s]] as usize;
                counts[k] += 1.0;
                let mut sum_row = sums.row_mut(k);
                sum_row += &residual.row(i);
            }
            // Advance residuals with the old vectors before rewriting them.
            for i in 0..n {
                let k = indices[[i, s]] as usize;
                for dd in 0..self.dim {
                    residual[[i, dd]] -= stage.vectors[[k, dd]];
                }
            }
            for k in 0..self.codebook_size {
                stage.ema_cluster_size[k] = d * stage.ema_cluster_size[k] + (1.0 - d) * counts[k];
                for dd in 0..self.dim {
                    stage.ema_embed_sum[[k, dd]] =
                        d * stage.ema_embed_sum[[k, dd]] + (1.0 - d) * sums[[k, dd]];
                    stage.vectors[[k, dd]] =
                        stage.ema_embed_sum[[k, dd]] / stage.ema_cluster_size[k].max(COUNT_EPS);
                }
            }
        }
    }

    /// Overwrites every code whose EMA count fell below `threshold` with a
    /// uniformly sampled residual vector from the batch, resetting its EMA
    /// statistics to a single assignment. Stages are processed in order, so
    /// later stages see residuals of the already-revived earlier stages.
    /// Returns the number of replaced codes.
    pub fn replace_dead_codes(
        &mut self,
        frames: ArrayView2<f64>,
        threshold: f64,
        rng: &mut Rng,
    ) -> usize {
        assert!(self.initialized, "replace_dead_codes before initialization");
        let n = frames.nrows();
        if n == 0 {
            return 0;
        }
        let mut residual = frames.to_owned();
        let mut replaced = 0;
        for stage in &mut self.stages {
            for k in 0..self.codebook_size {
                if stage.ema_cluster_size[k] < threshold {
                    let i = rng.below(n);
                    let v = residual.row(i).to_owned();
                    stage.vectors.row_mut(k).assign(&v);
                    stage.ema_embed_sum.row_mut(k).assign(&v);
                    stage.ema_cluster_size[k] = 1.0;
                    replaced += 1;
                }
            }
            for mut row in residual.outer_iter_mut() {
                let k = nearest(stage.vectors.view(), row.view());
                row -= &stage.vectors.row(k);
            }
        }
        replaced
    }
}

/// (batch, dim, time) latents to flat frames (batch*time, dim); frame b*T+t.
pub fn frames_from_latents(latents: &Arr) -> Array2<f64> {
    assert_eq!(latents.ndim(), 3, "latents must be (batch, dim, time)");
    let (b, d, t) = (latents.shape()[0], latents.shape()[1], latents.shape()[2]);
    let mut frames = Array2::<f64>::zeros((b * t, d));
    for bi in 0..b {
        for ti in 0..t {
            for di in 0..d {
                frames[[bi * t + ti, di]] = latents[[bi, di, ti]];
            }
        }
    }
    frames
}

/// Inverse of [`frames_from_latents`].
pub fn latents_from_frames(frames: &Array2<f64>, batch: usize, t_lat: usize) -> Arr {
    assert_eq!(frames.nrows(), batch * t_lat);
    let d = frames.ncols();
    let mut out = Arr::zeros(ndarray::IxDyn(&[batch, d, t_lat]));
    for bi in 0..batch {
        for ti in 0..t_lat {
            for di in 0..d {
                out[[bi, di, ti]] = frames[[bi * t_lat + ti, di]];
            }
        }
    }
    out
}

/// Splits flat frame indices (batch*t_lat, stages) into per-item grids of
/// shape (stages, t_lat).
pub fn grids_from_frame_indices(
    indices: &Array2<u32>,
    batch: usize,
    t_lat: usize,
) -> Vec<CodeGrid> {
    assert_eq!(indices.nrows(), batch * t_lat);
    let stages = indices.ncols();
    (0..batch)
        .map(|bi| {
            let mut g = Array2::<u32>::zeros((stages, t_lat));
            for ti in 0..t_lat {
                for s in 0..stages {
                    g[[s, ti]] = indices[[bi * t_lat + ti, s]];
                }
            }
            CodeGrid { indices: g }
        })
        .collect()
}

/// Concatenates per-item grids back into flat frame indices.
pub fn frame_indices_from_grids(grids: &[CodeGrid]) -> Result<Array2<u32>, QuantizerError> {
    if grids.is_empty() {
        return Ok(Array2::zeros((0, 0)));
    }
    let (stages, t_lat) = (grids[0].indices.nrows(), grids[0].indices.ncols());
    for g in grids {
        if g.indices.nrows() != stages || g.indices.ncols() != t_lat {
            return Err(QuantizerError::GridShapeMismatch(format!(
                "{}x{} vs {stages}x{t_lat}",
                g.indices.nrows(),
                g.indices.ncols()
            )));
        }
    }
    let mut out = Array2::<u32>::zeros((grids.len() * t_lat, stages));
    for (bi, g) in grids.iter().enumerate() {
        for ti in 0..t_lat {
            for s in 0..stages {
                out[[bi * t_lat + ti, s]] = g.indices[[s, ti]];
            }
        }
    }
    Ok(out)
}

/// Quantizes a (batch, dim, time) latent var on the tape. Returns the
/// straight-through quantized latents (gradients pass to `z` unchanged) and
/// the commit loss as a scalar var whose gradient reaches `z` only.
pub fn quantize_st<'t>(
    rvq: &ResidualQuantizer,
    z: Var<'t>,
) -> Result<(Var<'t>, Var<'t>, QuantizedFrames), QuantizerError> {
    let zv = z.value();
    assert_eq!(zv.ndim(), 3, "latents must be (batch, dim, time)");
    let (b, t) = (zv.shape()[0], zv.shape()[2]);
    let frames = frames_from_latents(&zv);
    let qf = rvq.quantize_frames(frames.view())?;
    let zq = z.straight_through(latents_from_frames(&qf.quantized, b, t));
    let commit = z.injected_scalar(qf.commit_loss, latents_from_frames(&qf.commit_grad, b, t));
    Ok((zq, commit, qf))
}
