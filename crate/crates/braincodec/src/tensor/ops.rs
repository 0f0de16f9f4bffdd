//! Convolution kernels (im2col + GEMM) and their tape-recorded wrappers.
//!
//! Layouts: 1-d signals are (batch, channels, time); 2-d maps are
//! (batch, channels, height, width). Conv weights are (out, in, k...);
//! transposed-conv weights are (in, out, k). All kernels run single-threaded
//! through `matrixmultiply` via `ndarray::dot`, which is deterministic.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4, Ix1, Ix3, Ix4};
use std::rc::Rc;

use super::{Arr, Tape, Var};

/// Registers an n-ary op: `back(grad_out)` returns per-parent gradients in
/// `parents` order.
pub fn nary<'t>(
    tape: &'t Tape,
    parents: &[Var<'t>],
    value: Arr,
    back: Box<dyn Fn(&Arr) -> Vec<Arr>>,
) -> Var<'t> {
    let ids: Vec<usize> = parents
        .iter()
        .map(|p| {
            assert!(std::ptr::eq(p.tape, tape), "parent from another tape");
            p.id
        })
        .collect();
    let id = tape.push(
        value,
        Some(Box::new(move |g| {
            let gs = back(g);
            assert_eq!(gs.len(), ids.len());
            gs.into_iter().zip(ids.iter()).map(|(ga, &pid)| (pid, ga)).collect()
        })),
    );
    tape.var(id)
}

fn im2col1d(
    x: &ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad_l: usize,
    to: usize,
) -> Array2<f64> {
    let (b, ci, t) = x.dim();
    let mut col = Array2::<f64>::zeros((b * to, ci * k));
    for bi in 0..b {
        for ot in 0..to {
            let row = bi * to + ot;
            let start = ot * stride;
            for c in 0..ci {
                for kk in 0..k {
                    let ip = start + kk;
                    if ip >= pad_l && ip < pad_l + t {
                        col[[row, c * k + kk]] = x[[bi, c, ip - pad_l]];
                    }
                }
            }
        }
    }
    col
}

fn col2im1d(
    dcol: &Array2<f64>,
    b: usize,
    ci: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad_l: usize,
    to: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((b, ci, t));
    for bi in 0..b {
        for ot in 0..to {
            let row = bi * to + ot;
            let start = ot * stride;
            for c in 0..ci {
                for kk in 0..k {
                    let ip = start + kk;
                    if ip >= pad_l && ip < pad_l + t {
                        dx[[bi, c, ip - pad_l]] += dcol[[row, c * k + kk]];
                    }
                }
            }
        }
    }
    dx
}

pub fn conv1d_out_len(t: usize, k: usize, stride: usize, pad_l: usize, pad_r: usize) -> usize {
    let tp = t + pad_l + pad_r;
    assert!(tp >= k, "conv input shorter than kernel");
    (tp - k) / stride + 1
}

pub fn conv1d_fwd(
    x: &ArrayView3<f64>,
    w: &ArrayView3<f64>,
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> Array3<f64> {
    let (bsz, ci, t) = x.dim();
    let (co, ci2, k) = w.dim();
    assert_eq!(ci, ci2, "conv1d channel mismatch");
    let to = conv1d_out_len(t, k, stride, pad_l, pad_r);
    let col = im2col1d(x, k, stride, pad_l, to);
    let w2 = w.to_shape((co, ci * k)).unwrap();
    let y2 = col.dot(&w2.t());
    let mut y = Array3::<f64>::zeros((bsz, co, to));
    for bi in 0..bsz {
        for c in 0..co {
            let bias = b.map_or(0.0, |bv| bv[c]);
            for ot in 0..to {
                y[[bi, c, ot]] = y2[[bi * to + ot, c]] + bias;
            }
        }
    }
    y
}

pub fn conv1d_bwd(
    x: &ArrayView3<f64>,
    w: &ArrayView3<f64>,
    dy: &ArrayView3<f64>,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (bsz, ci, t) = x.dim();
    let (co, _, k) = w.dim();
    let to = conv1d_out_len(t, k, stride, pad_l, pad_r);
    assert_eq!(dy.dim(), (bsz, co, to));
    let col = im2col1d(x, k, stride, pad_l, to);
    let mut dy2 = Array2::<f64>::zeros((bsz * to, co));
    let mut db = Array1::<f64>::zeros(co);
    for bi in 0..bsz {
        for c in 0..co {
            for ot in 0..to {
                let g = dy[[bi, c, ot]];
                dy2[[bi * to + ot, c]] = g;
                db[c] += g;
            }
        }
    }
    let dw2 = dy2.t().dot(&col);
    let dw = dw2.to_shape((co, ci, k)).unwrap().to_owned();
    let w2 = w.to_shape((co, ci * k)).unwrap();
    let dcol = dy2.dot(&w2);
    let dx = col2im1d(&dcol, bsz, ci, t, k, stride, pad_l, to);
    (dx, dw, db)
}

pub fn tconv1d_out_len(t: usize, k: usize, stride: usize, pad_l: usize, pad_r: usize) -> usize {
    let full = (t - 1) * stride + k;
    assert!(full >= pad_l + pad_r, "transposed conv crop exceeds output");
    full - pad_l - pad_r
}

pub fn tconv1d_fwd(
    x: &ArrayView3<f64>,
    w: &ArrayView3<f64>, // (ci, co, k)
    b: Option<&ArrayView1<f64>>,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> Array3<f64> {
    let (bsz, ci, t) = x.dim();
    let (ci2, co, k) = w.dim();
    assert_eq!(ci, ci2, "tconv1d channel mismatch");
    let full = (t - 1) * stride + k;
    let to = tconv1d_out_len(t, k, stride, pad_l, pad_r);
    let mut x2 = Array2::<f64>::zeros((bsz * t, ci));
    for bi in 0..bsz {
        for c in 0..ci {
            for it in 0..t {
                x2[[bi * t + it, c]] = x[[bi, c, it]];
            }
        }
    }
    let w2 = w.to_shape((ci, co * k)).unwrap();
    let prod = x2.dot(&w2); // (b*t, co*k)
    let mut yfull = Array3::<f64>::zeros((bsz, co, full));
    for bi in 0..bsz {
        for it in 0..t {
            let row = bi * t + it;
            for c in 0..co {
                for kk in 0..k {
                    yfull[[bi, c, it * stride + kk]] += prod[[row, c * k + kk]];
                }
            }
        }
    }
    let mut y = Array3::<f64>::zeros((bsz, co, to));
    for bi in 0..bsz {
        for c in 0..co {
            let bias = b.map_or(0.0, |bv| bv[c]);
            for ot in 0..to {
                y[[bi, c, ot]] = yfull[[bi, c, ot + pad_l]] + bias;
            }
        }
    }
    y
}

pub fn tconv1d_bwd(
    x: &ArrayView3<f64>,
    w: &ArrayView3<f64>,
    dy: &ArrayView3<f64>,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> (Array3<f64>, Array3<f64>, Array1<f64>) {
    let (bsz, ci, t) = x.dim();
    let (_, co, k) = w.dim();
    let full = (t - 1) * stride + k;
    let to = tconv1d_out_len(t, k, stride, pad_l, pad_r);
    assert_eq!(dy.dim(), (bsz, co, to));
    let mut dyfull = Array3::<f64>::zeros((bsz, co, full));
    let mut db = Array1::<f64>::zeros(co);
    for bi in 0..bsz {
        for c in 0..co {
            for ot in 0..to {
                let g = dy[[bi, c, ot]];
                dyfull[[bi, c, ot + pad_l]] = g;
                db[c] += g;
            }
        }
    }
    // col_dy[b*t + it, c*k + kk] = dyfull[b, c, it*stride + kk]
    let mut col_dy = Array2::<f64>::zeros((bsz * t, co * k));
    for bi in 0..bsz {
        for it in 0..t {
            let row = bi * t + it;
            for c in 0..co {
                for kk in 0..k {
                    col_dy[[row, c * k + kk]] = dyfull[[bi, c, it * stride + kk]];
                }
            }
        }
    }
    let w2 = w.to_shape((ci, co * k)).unwrap();
    let dx2 = col_dy.dot(&w2.t()); // (b*t, ci)
    let mut dx = Array3::<f64>::zeros((bsz, ci, t));
    for bi in 0..bsz {
        for c in 0..ci {
            for it in 0..t {
                dx[[bi, c, it]] = dx2[[bi * t + it, c]];
            }
        }
    }
    let mut x2 = Array2::<f64>::zeros((bsz * t, ci));
    for bi in 0..bsz {
        for c in 0..ci {
            for it in 0..t {
                x2[[bi * t + it, c]] = x[[bi, c, it]];
            }
        }
    }
    let dw2 = x2.t().dot(&col_dy); // (ci, co*k)
    let dw = dw2.to_shape((ci, co, k)).unwrap().to_owned();
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeom {
    pub stride: (usize, usize),
    pub dilation: (usize, usize),
    /// (top, bottom, left, right)
    pub pad: (usize, usize, usize, usize),
}

pub fn conv2d_out_dims(h: usize, w: usize, kh: usize, kw: usize, g: &Conv2dGeom) -> (usize, usize) {
    let kh_eff = (kh - 1) * g.dilation.0 + 1;
    let kw_eff = (kw - 1) * g.dilation.1 + 1;
    let hp = h + g.pad.0 + g.pad.1;
    let wp = w + g.pad.2 + g.pad.3;
    assert!(hp >= kh_eff && wp >= kw_eff, "conv2d input smaller than dilated kernel");
    ((hp - kh_eff) / g.stride.0 + 1, (wp - kw_eff) / g.stride.1 + 1)
}

fn im2col2d(
    x: &ArrayView4<f64>,
    kh: usize,
    kw: usize,
    g: &Conv2dGeom,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (b, ci, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((b * ho * wo, ci * kh * kw));
    for bi in 0..b {
        for i in 0..ho {
            for j in 0..wo {
                let row = (bi * ho + i) * wo + j;
                for c in 0..ci {
                    for ki in 0..kh {
                        let ii = i * g.stride.0 + ki * g.dilation.0;
                        if ii < g.pad.0 || ii >= g.pad.0 + h {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = j * g.stride.1 + kj * g.dilation.1;
                            if jj >= g.pad.2 && jj < g.pad.2 + w {
                                col[[row, (c * kh + ki) * kw + kj]] =
                                    x[[bi, c, ii - g.pad.0, jj - g.pad.2]];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

pub fn conv2d_fwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    b: Option<&ArrayView1<f64>>,
    g: &Conv2dGeom,
) -> Array4<f64> {
    let (bsz, ci, h, wd) = x.dim();
    let (co, ci2, kh, kw) = w.dim();
    assert_eq!(ci, ci2, "conv2d channel mismatch");
    let (ho, wo) = conv2d_out_dims(h, wd, kh, kw, g);
    let col = im2col2d(x, kh, kw, g, ho, wo);
    let w2 = w.to_shape((co, ci * kh * kw)).unwrap();
    let y2 = col.dot(&w2.t());
    let mut y = Array4::<f64>::zeros((bsz, co, ho, wo));
    for bi in 0..bsz {
        for c in 0..co {
            let bias = b.map_or(0.0, |bv| bv[c]);
            for i in 0..ho {
                for j in 0..wo {
                    y[[bi, c, i, j]] = y2[[(bi * ho + i) * wo + j, c]] + bias;
                }
            }
        }
    }
    y
}

pub fn conv2d_bwd(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    dy: &ArrayView4<f64>,
    g: &Conv2dGeom,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (bsz, ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let (ho, wo) = conv2d_out_dims(h, wd, kh, kw, g);
    assert_eq!(dy.dim(), (bsz, co, ho, wo));
    let col = im2col2d(x, kh, kw, g, ho, wo);
    let mut dy2 = Array2::<f64>::zeros((bsz * ho * wo, co));
    let mut db = Array1::<f64>::zeros(co);
    for bi in 0..bsz {
        for c in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let v = dy[[bi, c, i, j]];
                    dy2[[(bi * ho + i) * wo + j, c]] = v;
                    db[c] += v;
                }
            }
        }
    }
    let dw2 = dy2.t().dot(&col);
    let dw = dw2.to_shape((co, ci, kh, kw)).unwrap().to_owned();
    let w2 = w.to_shape((co, ci * kh * kw)).unwrap();
    let dcol = dy2.dot(&w2);
    let mut dx = Array4::<f64>::zeros((bsz, ci, h, wd));
    for bi in 0..bsz {
        for i in 0..ho {
            for j in 0..wo {
                let row = (bi * ho + i) * wo + j;
                for c in 0..ci {
                    for ki in 0..kh {
                        let ii = i * g.stride.0 + ki * g.dilation.0;
                        if ii < g.pad.0 || ii >= g.pad.0 + h {
                            continue;
                        }
                        for kj in 0..kw {
                            let jj = j * g.stride.1 + kj * g.dilation.1;
                            if jj >= g.pad.2 && jj < g.pad.2 + wd {
                                dx[[bi, c, ii - g.pad.0, jj - g.pad.2]] +=
                                    dcol[[row, (c * kh + ki) * kw + kj]];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Reflect padding (no edge repeat) on the last axis of a (batch, time) array.
/// Requires `l, r <= t - 1`.
pub fn reflect_pad1d(x: &Array2<f64>, l: usize, r: usize) -> Array2<f64> {
    let (b, t) = x.dim();
    assert!(t >= 2 || (l == 0 && r == 0), "reflect pad needs at least 2 samples");
    assert!(l <= t - 1 && r <= t - 1, "reflect pad wider than signal");
    let mut y = Array2::<f64>::zeros((b, t + l + r));
    for bi in 0..b {
        for n in 0..t + l + r {
            let i = n as isize - l as isize;
            let m = if i < 0 {
                (-i) as usize
            } else if i as usize >= t {
                2 * (t - 1) - i as usize
            } else {
                i as usize
            };
            y[[bi, n]] = x[[bi, m]];
        }
    }
    y
}

pub fn reflect_pad1d_adjoint(g: &Array2<f64>, l: usize, r: usize, t: usize) -> Array2<f64> {
    let (b, tp) = g.dim();
    assert_eq!(tp, t + l + r);
    let mut dx = Array2::<f64>::zeros((b, t));
    for bi in 0..b {
        for n in 0..tp {
            let i = n as isize - l as isize;
            let m = if i < 0 {
                (-i) as usize
            } else if i as usize >= t {
                2 * (t - 1) - i as usize
            } else {
                i as usize
            };
            dx[[bi, m]] += g[[bi, n]];
        }
    }
    dx
}

fn as3(a: &Arr) -> ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 array expected")
}

fn as4(a: &Arr) -> ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 array expected")
}

fn as1(a: &Arr) -> ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 array expected")
}

/// Tape-recorded conv1d with bias.
pub fn conv1d<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> Var<'t> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let y = conv1d_fwd(&as3(&xv), &as3(&wv), Some(&as1(&bv)), stride, pad_l, pad_r);
    let (xs, ws) = (Rc::clone(&xv), Rc::clone(&wv));
    nary(
        tape,
        &[x, w, b],
        y.into_dyn(),
        Box::new(move |g| {
            let (dx, dw, db) = conv1d_bwd(&as3(&xs), &as3(&ws), &as3(g), stride, pad_l, pad_r);
            vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
        }),
    )
}

/// Tape-recorded transposed conv1d with bias.
pub fn tconv1d<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> Var<'t> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let y = tconv1d_fwd(&as3(&xv), &as3(&wv), Some(&as1(&bv)), stride, pad_l, pad_r);
    let (xs, ws) = (Rc::clone(&xv), Rc::clone(&wv));
    nary(
        tape,
        &[x, w, b],
        y.into_dyn(),
        Box::new(move |g| {
            let (dx, dw, db) = tconv1d_bwd(&as3(&xs), &as3(&ws), &as3(g), stride, pad_l, pad_r);
            vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
        }),
    )
}

/// Tape-recorded conv2d with bias.
pub fn conv2d<'t>(
    tape: &'t Tape,
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    geom: Conv2dGeom,
) -> Var<'t> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let y = conv2d_fwd(&as4(&xv), &as4(&wv), Some(&as1(&bv)), &geom);
    let (xs, ws) = (Rc::clone(&xv), Rc::clone(&wv));
    nary(
        tape,
        &[x, w, b],
        y.into_dyn(),
        Box::new(move |g| {
            let (dx, dw, db) = conv2d_bwd(&as4(&xs), &as4(&ws), &as4(g), &geom);
            vec![dx.into_dyn(), dw.into_dyn(), db.into_dyn()]
        }),
    )
}
