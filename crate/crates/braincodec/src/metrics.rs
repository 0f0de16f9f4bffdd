//! Reconstruction-fidelity metrics and cross-patch aggregation.
//!
//! All metrics operate on equal-length sample slices, reject non-finite
//! inputs, and are pure. Exact reconstruction yields a +infinity sentinel
//! for SNR/PSNR rather than an error.

use crate::tensor::stft::StftPlan;
use ndarray::Array2;

pub const DEFAULT_SPEC_WINDOW: usize = 256;
pub const DEFAULT_SPEC_HOP: usize = 128;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("reference signal has zero norm")]
    ZeroReference,
    #[error("shape mismatch: {0} vs {1} samples")]
    ShapeMismatch(usize, usize),
    #[error("non-finite sample in input")]
    NonFinite,
    #[error("signal shorter than the spectrogram window ({len} < {window})")]
    TooShort { len: usize, window: usize },
    #[error("no reports to aggregate")]
    Empty,
}

fn check_pair(x: &[f64], xhat: &[f64]) -> Result<(), MetricError> {
    if x.len() != xhat.len() {
        return Err(MetricError::ShapeMismatch(x.len(), xhat.len()));
    }
    if x.iter().chain(xhat.iter()).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Percentage root-mean-square difference: relative L2 error times 100.
pub fn prd(x: &[f64], xhat: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, xhat)?;
    let nx = l2(x);
    if nx == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let err = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(err / nx * 100.0)
}

/// 20·log10(‖x‖₂ / ‖x−x̂‖₂); +∞ for exact reconstruction. Satisfies
/// snr_db = −20·log10(prd/100) identically per patch.
pub fn snr_db(x: &[f64], xhat: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, xhat)?;
    let nx = l2(x);
    if nx == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let err = x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (nx / err).log10())
}

pub fn rmse(x: &[f64], xhat: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, xhat)?;
    if x.is_empty() {
        return Err(MetricError::ShapeMismatch(0, 0));
    }
    Ok((x.iter().zip(xhat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64).sqrt())
}

/// 20·log10(max|x| / rmse); +∞ for exact reconstruction.
pub fn psnr_db(x: &[f64], xhat: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, xhat)?;
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(MetricError::ZeroReference);
    }
    let r = rmse(x, xhat)?;
    if r == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / r).log10())
}

/// PRD between magnitude spectrograms (flattened across frames and bins).
/// Not a quantity defined by upstream literature; window/hop are part of the
/// reported configuration.
pub fn prd_spec(x: &[f64], xhat: &[f64], window: usize, hop: usize) -> Result<f64, MetricError> {
    check_pair(x, xhat)?;
    if x.len() < window {
        return Err(MetricError::TooShort { len: x.len(), window });
    }
    let plan = StftPlan::new(window, hop);
    let mag = |s: &[f64]| -> Vec<f64> {
        let arr = Array2::from_shape_vec((1, s.len()), s.to_vec()).unwrap();
        let (re, im) = plan.forward(&arr);
        re.iter().zip(im.iter()).map(|(r, i)| (r * r + i * i).sqrt()).collect()
    };
    let mx = mag(x);
    let mxh = mag(xhat);
    prd(&mx, &mxh)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Median,
    Mean,
}

/// Fidelity numbers for one patch.
#[derive(Clone, Copy, Debug)]
pub struct PatchMetrics {
    pub prd: f64,
    pub prd_spec: Option<f64>,
    pub rmse: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
}

/// Computes all per-patch metrics at once; prd_spec is skipped for patches
/// shorter than the spectrogram window.
pub fn patch_metrics(
    x: &[f64],
    xhat: &[f64],
    spec_window: usize,
    spec_hop: usize,
) -> Result<PatchMetrics, MetricError> {
    Ok(PatchMetrics {
        prd: prd(x, xhat)?,
        prd_spec: match prd_spec(x, xhat, spec_window, spec_hop) {
            Ok(v) => Some(v),
            Err(MetricError::TooShort { .. }) => None,
            Err(e) => return Err(e),
        },
        rmse: rmse(x, xhat)?,
        snr_db: snr_db(x, xhat)?,
        psnr_db: psnr_db(x, xhat)?,
    })
}

/// Aggregated report. PRD-family fields use the requested mode (median is
/// the default reporting convention); RMSE/SNR/PSNR always use the mean.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricReport {
    pub prd: f64,
    pub prd_spec: Option<f64>,
    pub rmse: f64,
    pub snr_db: f64,
    pub psnr_db: f64,
    pub nominal_cr: f64,
    pub aggregation: Aggregation,
    pub n_patches: usize,
}

pub fn median(xs: &mut Vec<f64>) -> f64 {
    assert!(!xs.is_empty());
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn aggregate(
    patches: &[PatchMetrics],
    mode: Aggregation,
    nominal_cr: f64,
) -> Result<MetricReport, MetricError> {
    if patches.is_empty() {
        return Err(MetricError::Empty);
    }
    if patches.iter().any(|p| {
        p.prd.is_nan()
            || p.rmse.is_nan()
            || p.snr_db.is_nan()
            || p.psnr_db.is_nan()
            || p.prd_spec.is_some_and(f64::is_nan)
    }) {
        return Err(MetricError::NonFinite);
    }
    let pick = |mut vals: Vec<f64>| -> f64 {
        match mode {
            Aggregation::Median => median(&mut vals),
            Aggregation::Mean => mean(&vals),
        }
    };
    let spec: Vec<f64> = patches.iter().filter_map(|p| p.prd_spec).collect();
    Ok(MetricReport {
        prd: pick(patches.iter().map(|p| p.prd).collect()),
        prd_spec: if spec.is_empty() { None } else { Some(pick(spec)) },
        rmse: mean(&patches.iter().map(|p| p.rmse).collect::<Vec<_>>()),
        snr_db: mean(&patches.iter().map(|p| p.snr_db).collect::<Vec<_>>()),
        psnr_db: mean(&patches.iter().map(|p| p.psnr_db).collect::<Vec<_>>()),
        nominal_cr,
        aggregation: mode,
        n_patches: patches.len(),
    })
}
