//! Layer kernels with hand-written backward passes.
//!
//! Activations are `C×H×W` fields, i.e. `C × (H·W)` row-major matrices, so
//! convolutions reduce to GEMMs over an im2col buffer.

use crate::field::ImageField;

pub(crate) const GN_EPS: f64 = 1e-5;

/// `c = a · b + beta · c` for row-major, possibly transposed operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the caller passes slices whose extents cover every index
    // implied by the dimensions and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col3(x: &ImageField) -> Vec<f64> {
    let (cin, h, w) = x.shape();
    let hw = h * w;
    let mut col = vec![0.0; cin * 9 * hw];
    for ci in 0..cin {
        let plane = x.plane(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * w..][..w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im3(col: &[f64], cin: usize, h: usize, w: usize) -> ImageField {
    let hw = h * w;
    let mut dx = ImageField::zeros(cin, h, w);
    for ci in 0..cin {
        let plane = dx.plane_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * w..][..w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    dx
}

/// 3×3 convolution, stride 1, zero padding 1. `weight` is `cout × cin × 3 × 3`.
pub(crate) fn conv3x3(weight: &[f64], bias: &[f64], x: &ImageField) -> ImageField {
    let (cin, h, w) = x.shape();
    let cout = bias.len();
    let hw = h * w;
    let col = im2col3(x);
    let mut out = vec![0.0; cout * hw];
    for (co, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, cin * 9, hw, weight, (cin * 9, 1), &col, (hw, 1), 1.0, &mut out);
    ImageField::from_vec(cout, h, w, out).expect("conv output size")
}

/// Accumulates into `dweight`/`dbias` when given and returns the input gradient.
pub(crate) fn conv3x3_backward(
    weight: &[f64],
    x: &ImageField,
    dout: &ImageField,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> ImageField {
    let (cin, h, w) = x.shape();
    let cout = dout.channels();
    let hw = h * w;
    let k = cin * 9;
    if let Some((dweight, dbias)) = grads {
        let col = im2col3(x);
        gemm(cout, hw, k, dout.as_slice(), (hw, 1), &col, (1, hw), 1.0, dweight);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += dout.plane(co).iter().sum::<f64>();
        }
    }
    let mut dcol = vec![0.0; k * hw];
    gemm(k, cout, hw, weight, (1, k), dout.as_slice(), (hw, 1), 0.0, &mut dcol);
    col2im3(&dcol, cin, h, w)
}

/// 1×1 convolution; `weight` is `cout × cin`.
pub(crate) fn conv1x1(weight: &[f64], bias: &[f64], x: &ImageField) -> ImageField {
    let (cin, h, w) = x.shape();
    let cout = bias.len();
    let hw = h * w;
    let mut out = vec![0.0; cout * hw];
    for (co, row) in out.chunks_mut(hw).enumerate() {
        row.fill(bias[co]);
    }
    gemm(cout, cin, hw, weight, (cin, 1), x.as_slice(), (hw, 1), 1.0, &mut out);
    ImageField::from_vec(cout, h, w, out).expect("conv output size")
}

pub(crate) fn conv1x1_backward(
    weight: &[f64],
    x: &ImageField,
    dout: &ImageField,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> ImageField {
    let (cin, h, w) = x.shape();
    let cout = dout.channels();
    let hw = h * w;
    if let Some((dweight, dbias)) = grads {
        gemm(cout, hw, cin, dout.as_slice(), (hw, 1), x.as_slice(), (1, hw), 1.0, dweight);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db += dout.plane(co).iter().sum::<f64>();
        }
    }
    let mut dx = vec![0.0; cin * hw];
    gemm(cin, cout, hw, weight, (1, cin), dout.as_slice(), (hw, 1), 0.0, &mut dx);
    ImageField::from_vec(cin, h, w, dx).expect("conv input size")
}

/// Dense layer `out = W x + b` with `W` stored `out × in`.
pub(crate) fn dense(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + weight[o * n_in..][..n_in].iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

pub(crate) fn dense_backward(
    weight: &[f64],
    x: &[f64],
    dout: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Vec<f64> {
    let n_in = x.len();
    if let Some((dweight, dbias)) = grads {
        for (o, &d) in dout.iter().enumerate() {
            dbias[o] += d;
            for (dw, v) in dweight[o * n_in..][..n_in].iter_mut().zip(x) {
                *dw += d * v;
            }
        }
    }
    let mut dx = vec![0.0; n_in];
    for (o, &d) in dout.iter().enumerate() {
        for (dxi, w) in dx.iter_mut().zip(&weight[o * n_in..][..n_in]) {
            *dxi += d * w;
        }
    }
    dx
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu_slice(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub(crate) fn silu_backward_slice(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect()
}

pub(crate) fn silu(x: &ImageField) -> ImageField {
    x.map(|v| v * sigmoid(v))
}

pub(crate) fn silu_backward(x: &ImageField, dy: &ImageField) -> ImageField {
    let (c, h, w) = x.shape();
    ImageField::from_vec(c, h, w, silu_backward_slice(x.as_slice(), dy.as_slice())).expect("same size")
}

#[derive(Debug, Clone)]
pub(crate) struct GroupNormCache {
    xhat: ImageField,
    inv_std: Vec<f64>,
}

pub(crate) fn group_norm(x: &ImageField, scale: &[f64], shift: &[f64], groups: usize) -> (ImageField, GroupNormCache) {
    let (c, h, w) = x.shape();
    let per = c / groups;
    let n = (per * h * w) as f64;
    let mut xhat = x.clone();
    let mut out = ImageField::zeros(c, h, w);
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let chans = g * per..(g + 1) * per;
        let mean = chans.clone().map(|ch| x.plane(ch).iter().sum::<f64>()).sum::<f64>() / n;
        let var = chans
            .clone()
            .map(|ch| x.plane(ch).iter().map(|v| (v - mean).powi(2)).sum::<f64>())
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var + GN_EPS).sqrt();
        inv_std.push(inv);
        for ch in chans {
            let (gamma, beta) = (scale[ch], shift[ch]);
            let xh = xhat.plane_mut(ch);
            for v in xh.iter_mut() {
                *v = (*v - mean) * inv;
            }
            for (o, v) in out.plane_mut(ch).iter_mut().zip(xhat.plane(ch)) {
                *o = gamma * v + beta;
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

pub(crate) fn group_norm_backward(
    cache: &GroupNormCache,
    scale: &[f64],
    dout: &ImageField,
    groups: usize,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> ImageField {
    let (c, h, w) = dout.shape();
    let per = c / groups;
    let n = (per * h * w) as f64;
    if let Some((dscale, dshift)) = grads {
        for ch in 0..c {
            let d = dout.plane(ch);
            dscale[ch] += d.iter().zip(cache.xhat.plane(ch)).map(|(a, b)| a * b).sum::<f64>();
            dshift[ch] += d.iter().sum::<f64>();
        }
    }
    let mut dx = ImageField::zeros(c, h, w);
    for g in 0..groups {
        let chans = g * per..(g + 1) * per;
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for ch in chans.clone() {
            for (d, xh) in dout.plane(ch).iter().zip(cache.xhat.plane(ch)) {
                let dxh = d * scale[ch];
                sum_d += dxh;
                sum_dx += dxh * xh;
            }
        }
        let inv = cache.inv_std[g];
        for ch in chans {
            let gamma = scale[ch];
            let out = dx.plane_mut(ch);
            for ((o, d), xh) in out.iter_mut().zip(dout.plane(ch)).zip(cache.xhat.plane(ch)) {
                *o = inv / n * (n * d * gamma - sum_d - xh * sum_dx);
            }
        }
    }
    dx
}

pub(crate) fn avg_pool2(x: &ImageField) -> ImageField {
    let (c, h, w) = x.shape();
    ImageField::from_fn(c, h / 2, w / 2, |ch, y, xx| {
        0.25 * (x.get(ch, 2 * y, 2 * xx) + x.get(ch, 2 * y, 2 * xx + 1) + x.get(ch, 2 * y + 1, 2 * xx) + x.get(ch, 2 * y + 1, 2 * xx + 1))
    })
}

pub(crate) fn avg_pool2_backward(dy: &ImageField) -> ImageField {
    let (c, h, w) = dy.shape();
    ImageField::from_fn(c, h * 2, w * 2, |ch, y, x| 0.25 * dy.get(ch, y / 2, x / 2))
}

pub(crate) fn upsample2(x: &ImageField) -> ImageField {
    let (c, h, w) = x.shape();
    ImageField::from_fn(c, h * 2, w * 2, |ch, y, xx| x.get(ch, y / 2, xx / 2))
}

pub(crate) fn upsample2_backward(dy: &ImageField) -> ImageField {
    let (c, h, w) = dy.shape();
    ImageField::from_fn(c, h / 2, w / 2, |ch, y, x| {
        dy.get(ch, 2 * y, 2 * x) + dy.get(ch, 2 * y, 2 * x + 1) + dy.get(ch, 2 * y + 1, 2 * x) + dy.get(ch, 2 * y + 1, 2 * x + 1)
    })
}
