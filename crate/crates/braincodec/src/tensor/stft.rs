//! Short-time Fourier transforms with exact adjoints for gradient flow.
//!
//! Frames are non-overlapping with the signal's own length (no centering):
//! frame f covers samples [f*hop, f*hop + win). Signals shorter than the
//! window must be padded by the caller. The analysis window is periodic Hann.
//! Only the non-redundant half spectrum (win/2 + 1 bins) is produced.

use ndarray::{Array2, Array3, Ix2};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::rc::Rc;
use std::sync::Arc;

use super::ops::{nary, reflect_pad1d, reflect_pad1d_adjoint};
use super::{Arr, Tape, Var};

/// Number of analysis frames for a signal of `len` samples.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Reusable FFT plan for one (window, hop) pair.
pub struct StftPlan {
    pub win: usize,
    pub hop: usize,
    window: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftPlan {
    pub fn new(win: usize, hop: usize) -> Self {
        assert!(win >= 2 && hop >= 1, "degenerate stft geometry");
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(win);
        let inv = planner.plan_fft_inverse(win);
        // Periodic Hann: w[n] = 0.5 * (1 - cos(2 pi n / win))
        let window = (0..win)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos()))
            .collect();
        StftPlan { win, hop, window, fwd, inv }
    }

    pub fn bins(&self) -> usize {
        self.win / 2 + 1
    }

    /// Complex STFT of each row of `x` (batch, time); returns (re, im) with
    /// shape (batch, frames, bins). Requires time >= win.
    pub fn forward(&self, x: &Array2<f64>) -> (Array3<f64>, Array3<f64>) {
        let (b, t) = x.dim();
        let frames = frame_count(t, self.win, self.hop);
        assert!(frames > 0, "signal shorter than stft window");
        let bins = self.bins();
        let mut re = Array3::<f64>::zeros((b, frames, bins));
        let mut im = Array3::<f64>::zeros((b, frames, bins));
        let mut buf = vec![Complex64::default(); self.win];
        for bi in 0..b {
            for f in 0..frames {
                let start = f * self.hop;
                for n in 0..self.win {
                    buf[n] = Complex64::new(x[[bi, start + n]] * self.window[n], 0.0);
                }
                self.fwd.process(&mut buf);
                for k in 0..bins {
                    re[[bi, f, k]] = buf[k].re;
                    im[[bi, f, k]] = buf[k].im;
                }
            }
        }
        (re, im)
    }

    /// Adjoint of [`forward`]: maps spectrum-domain gradients back to the
    /// time domain. `len` is the original signal length.
    pub fn adjoint(&self, gre: &Array3<f64>, gim: &Array3<f64>, len: usize) -> Array2<f64> {
        let (b, frames, bins) = gre.dim();
        assert_eq!(gim.dim(), (b, frames, bins));
        assert_eq!(bins, self.bins());
        assert_eq!(frames, frame_count(len, self.win, self.hop));
        let mut dx = Array2::<f64>::zeros((b, len));
        let mut buf = vec![Complex64::default(); self.win];
        for bi in 0..b {
            for f in 0..frames {
                for slot in buf.iter_mut() {
                    *slot = Complex64::default();
                }
                for k in 0..bins {
                    buf[k] = Complex64::new(gre[[bi, f, k]], gim[[bi, f, k]]);
                }
                // Unnormalized inverse FFT computes sum_k G_k e^{+2 pi i k n / N},
                // exactly the adjoint of the forward half-spectrum map.
                self.inv.process(&mut buf);
                let start = f * self.hop;
                for n in 0..self.win {
                    dx[[bi, start + n]] += buf[n].re * self.window[n];
                }
            }
        }
        dx
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 array expected")
}

/// Tape-recorded reflect padding of (batch, time) rows.
pub fn reflect_pad<'t>(tape: &'t Tape, x: Var<'t>, l: usize, r: usize) -> Var<'t> {
    let xv = x.value();
    let t = as2(&xv).dim().1;
    let y = reflect_pad1d(&as2(&xv).to_owned(), l, r);
    nary(
        tape,
        &[x],
        y.into_dyn(),
        Box::new(move |g| {
            let g2 = as2(g).to_owned();
            vec![reflect_pad1d_adjoint(&g2, l, r, t).into_dyn()]
        }),
    )
}

/// Tape-recorded magnitude spectrogram: (batch, time) -> (batch, frames, bins).
/// The gradient of the magnitude is guarded to 0 at zero-magnitude bins.
pub fn stft_magnitude<'t>(tape: &'t Tape, x: Var<'t>, plan: Rc<StftPlan>) -> Var<'t> {
    let xv = x.value();
    let x2 = as2(&xv).to_owned();
    let len = x2.dim().1;
    let (re, im) = plan.forward(&x2);
    let mag = {
        let mut m = Array3::<f64>::zeros(re.dim());
        for ((mi, &r), &i) in m.iter_mut().zip(re.iter()).zip(im.iter()) {
            *mi = (r * r + i * i).sqrt();
        }
        m
    };
    let saved_re = Rc::new(re);
    let saved_im = Rc::new(im);
    let saved_mag = Rc::new(mag.clone());
    nary(
        tape,
        &[x],
        mag.into_dyn(),
        Box::new(move |g| {
            let g3 = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut gre = Array3::<f64>::zeros(g3.raw_dim());
            let mut gim = Array3::<f64>::zeros(g3.raw_dim());
            for (((((gr, gi), &gv), &r), &i), &m) in gre
                .iter_mut()
                .zip(gim.iter_mut())
                .zip(g3.iter())
                .zip(saved_re.iter())
                .zip(saved_im.iter())
                .zip(saved_mag.iter())
            {
                if m > 1e-300 {
                    *gr = gv * r / m;
                    *gi = gv * i / m;
                }
            }
            vec![plan.adjoint(&gre, &gim, len).into_dyn()]
        }),
    )
}

/// Tape-recorded complex spectrogram as two real channels:
/// (batch, time) -> (batch, 2, frames, bins), channel 0 = re, 1 = im.
pub fn stft_complex<'t>(tape: &'t Tape, x: Var<'t>, plan: Rc<StftPlan>) -> Var<'t> {
    let xv = x.value();
    let x2 = as2(&xv).to_owned();
    let len = x2.dim().1;
    let (re, im) = plan.forward(&x2);
    let (b, frames, bins) = re.dim();
    let mut out = ndarray::Array4::<f64>::zeros((b, 2, frames, bins));
    out.slice_mut(ndarray::s![.., 0, .., ..]).assign(&re);
    out.slice_mut(ndarray::s![.., 1, .., ..]).assign(&im);
    nary(
        tape,
        &[x],
        out.into_dyn(),
        Box::new(move |g| {
            let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
            let gre = g4.slice(ndarray::s![.., 0, .., ..]).to_owned();
            let gim = g4.slice(ndarray::s![.., 1, .., ..]).to_owned();
            vec![plan.adjoint(&gre, &gim, len).into_dyn()]
        }),
    )
}
