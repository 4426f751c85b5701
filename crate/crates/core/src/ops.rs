//! Forward and backward kernels on plain [`Tensor`]s.
//!
//! Every differentiable primitive lives here as a pair of pure functions;
//! [`crate::autograd`] wires them onto the tape. Feature maps are `[H, W, D]`,
//! matrices `[rows, cols]`. Bilinear resampling uses the align-corners
//! convention throughout.

use crate::error::{Error, Result};
use crate::instrument;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;

// ---------------------------------------------------------------- matmul

/// `op(a) * op(b)` where `op` optionally transposes a matrix.
pub fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = a.rc()?;
    let (br, bc) = b.rc()?;
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {:?}{} x {:?}{}",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" }
        )));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if trans_a { (1, ac as isize) } else { (ac as isize, 1) };
        let (rsb, csb) = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
        // whose lengths were checked against their shapes above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    instrument::add((m * k * n) as u64);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    gemm(a, false, b, false)
}

/// Returns `(dA, dB)` for `C = A B` given `dC`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((gemm(g, false, b, true)?, gemm(a, true, g, false)?))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.rc()?;
    let mut out = vec![0.0; r * c];
    let d = a.data();
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

// ---------------------------------------------------------------- softmax

/// Splits a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Non-finite temperatures come from diverged learnable scales and are
/// numeric failures; finite non-positive ones are caller errors.
fn check_temperature(t: f64) -> Result<()> {
    if !t.is_finite() {
        Err(Error::Numeric(format!("temperature is not finite: {t}")))
    } else if t > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("temperature must be positive, got {t}")))
    }
}

/// Softmax of `temperature * x` along `axis`, stabilized by max-subtraction.
pub fn softmax(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (temperature * (src[idx(k)] - mx)).exp();
                out[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[idx(k)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Backward of [`softmax`]: returns `(dx, dtemperature)`.
pub fn softmax_backward(
    x: &Tensor,
    y: &Tensor,
    g: &Tensor,
    axis: usize,
    temperature: f64,
) -> Result<(Tensor, f64)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let (xs, ys, gs) = (x.data(), y.data(), g.data());
    let mut dx = vec![0.0; xs.len()];
    let mut dt = 0.0;
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| gs[idx(k)] * ys[idx(k)]).sum();
            for k in 0..len {
                let dz = ys[idx(k)] * (gs[idx(k)] - dot);
                dx[idx(k)] = temperature * dz;
                dt += xs[idx(k)] * dz;
            }
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), dx), dt))
}

/// Log-softmax of `x` along `axis` (unit temperature).
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mx = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..len).map(|k| (src[idx(k)] - mx).exp()).sum::<f64>().ln();
            for k in 0..len {
                out[idx(k)] = src[idx(k)] - lse;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn log_softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(y.shape(), axis)?;
    let (ys, gs) = (y.data(), g.data());
    let mut dx = vec![0.0; ys.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let gsum: f64 = (0..len).map(|k| gs[idx(k)]).sum();
            for k in 0..len {
                dx[idx(k)] = gs[idx(k)] - ys[idx(k)].exp() * gsum;
            }
        }
    }
    Ok(Tensor::from_parts(y.shape().to_vec(), dx))
}

// ---------------------------------------------------------------- pooling / resizing

pub fn pooled_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Mean over each `stride x stride` window; edge windows average their valid cells.
pub fn avg_pool(map: &Tensor, stride: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::param("pool stride must be >= 1"));
    }
    let (h, w, d) = map.hwd()?;
    let (oh, ow) = (pooled_extent(h, stride), pooled_extent(w, stride));
    let src = map.data();
    let mut out = vec![0.0; oh * ow * d];
    for oi in 0..oh {
        let rows = oi * stride..((oi + 1) * stride).min(h);
        for oj in 0..ow {
            let cols = oj * stride..((oj + 1) * stride).min(w);
            let count = (rows.len() * cols.len()) as f64;
            let dst = &mut out[(oi * ow + oj) * d..(oi * ow + oj + 1) * d];
            for i in rows.clone() {
                for j in cols.clone() {
                    let s = &src[(i * w + j) * d..(i * w + j + 1) * d];
                    dst.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                }
            }
            dst.iter_mut().for_each(|v| *v /= count);
        }
    }
    Ok(Tensor::from_parts(vec![oh, ow, d], out))
}

pub fn avg_pool_backward(input_shape: &[usize], g: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w, d) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow, _) = g.hwd()?;
    let gs = g.data();
    let mut dx = vec![0.0; h * w * d];
    for oi in 0..oh {
        let rows = oi * stride..((oi + 1) * stride).min(h);
        for oj in 0..ow {
            let cols = oj * stride..((oj + 1) * stride).min(w);
            let count = (rows.len() * cols.len()) as f64;
            let src = &gs[(oi * ow + oj) * d..(oi * ow + oj + 1) * d];
            for i in rows.clone() {
                for j in cols.clone() {
                    let dst = &mut dx[(i * w + j) * d..(i * w + j + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b / count);
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

/// Align-corners source taps for one output index: `(lo, hi, frac)`.
fn resize_taps(out_n: usize, in_n: usize) -> Vec<(usize, usize, f64)> {
    (0..out_n)
        .map(|o| {
            let pos = if out_n == 1 {
                (in_n as f64 - 1.0) / 2.0
            } else {
                o as f64 * (in_n as f64 - 1.0) / (out_n as f64 - 1.0)
            };
            let lo = (pos.floor() as usize).min(in_n - 1);
            let hi = (lo + 1).min(in_n - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::param("resize target must be at least 1x1"));
    }
    let (h, w, d) = map.hwd()?;
    if h == out_h && w == out_w {
        return Ok(map.clone());
    }
    let (ty, tx) = (resize_taps(out_h, h), resize_taps(out_w, w));
    let src = map.data();
    let mut out = vec![0.0; out_h * out_w * d];
    for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let dst = &mut out[(oi * out_w + oj) * d..(oi * out_w + oj + 1) * d];
            for (i, j, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let s = &src[(i * w + j) * d..(i * w + j + 1) * d];
                dst.iter_mut().zip(s).for_each(|(a, b)| *a += wt * b);
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, d], out))
}

pub fn resize_bilinear_backward(input_shape: &[usize], g: &Tensor) -> Result<Tensor> {
    let (h, w, d) = (input_shape[0], input_shape[1], input_shape[2]);
    let (out_h, out_w, _) = g.hwd()?;
    if h == out_h && w == out_w {
        return Ok(g.clone());
    }
    let (ty, tx) = (resize_taps(out_h, h), resize_taps(out_w, w));
    let gs = g.data();
    let mut dx = vec![0.0; h * w * d];
    for (oi, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (oj, &(x0, x1, fx)) in tx.iter().enumerate() {
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let src = &gs[(oi * out_w + oj) * d..(oi * out_w + oj + 1) * d];
            for (i, j, wt) in taps {
                if wt == 0.0 {
                    continue;
                }
                let dst = &mut dx[(i * w + j) * d..(i * w + j + 1) * d];
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += wt * b);
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}

// ---------------------------------------------------------------- bilinear sampling

/// Clamped bilinear stencil for one continuous coordinate along an axis of
/// length `n`: `(lo, hi, frac, inside)`. `inside` is false when the coordinate
/// was clamped, in which case its derivative is zero.
#[inline]
fn sample_stencil(c: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&c);
    let c = c.clamp(0.0, max);
    if n == 1 {
        return (0, 0, 0.0, inside);
    }
    let lo = (c.floor() as usize).min(n - 2);
    (lo, lo + 1, c - lo as f64, inside)
}

fn check_coords(coords: &Tensor) -> Result<usize> {
    match coords.shape() {
        [n, 2] => Ok(*n),
        s => Err(Error::dim(format!("sample coordinates must be [n, 2], got {s:?}"))),
    }
}

/// Samples `map` at continuous `(x, y)` = (column, row) coordinates given as
/// an `[n, 2]` tensor. Out-of-range coordinates are clamped to the border.
pub fn bilinear_sample(map: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (h, w, d) = map.hwd()?;
    let n = check_coords(coords)?;
    let (src, cs) = (map.data(), coords.data());
    let mut out = vec![0.0; n * d];
    for p in 0..n {
        let (x0, x1, fx, _) = sample_stencil(cs[2 * p], w);
        let (y0, y1, fy, _) = sample_stencil(cs[2 * p + 1], h);
        let taps = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        let dst = &mut out[p * d..(p + 1) * d];
        for (i, j, wt) in taps {
            let s = &src[(i * w + j) * d..(i * w + j + 1) * d];
            dst.iter_mut().zip(s).for_each(|(a, b)| *a += wt * b);
        }
    }
    instrument::add((4 * n * d) as u64);
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Backward of [`bilinear_sample`]: returns `(dmap, dcoords)`.
pub fn bilinear_sample_backward(
    map: &Tensor,
    coords: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (h, w, d) = map.hwd()?;
    let n = check_coords(coords)?;
    let (src, cs, gs) = (map.data(), coords.data(), g.data());
    let mut dmap = vec![0.0; src.len()];
    let mut dcoords = vec![0.0; 2 * n];
    for p in 0..n {
        let (x0, x1, fx, x_in) = sample_stencil(cs[2 * p], w);
        let (y0, y1, fy, y_in) = sample_stencil(cs[2 * p + 1], h);
        let gp = &gs[p * d..(p + 1) * d];
        let at = |i: usize, j: usize| &src[(i * w + j) * d..(i * w + j + 1) * d];
        let (v00, v01, v10, v11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
        let mut gx = 0.0;
        let mut gy = 0.0;
        for c in 0..d {
            gx += gp[c] * ((1.0 - fy) * (v01[c] - v00[c]) + fy * (v11[c] - v10[c]));
            gy += gp[c] * ((1.0 - fx) * (v10[c] - v00[c]) + fx * (v11[c] - v01[c]));
        }
        if x_in && w > 1 {
            dcoords[2 * p] = gx;
        }
        if y_in && h > 1 {
            dcoords[2 * p + 1] = gy;
        }
        let taps = [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ];
        for (i, j, wt) in taps {
            let dst = &mut dmap[(i * w + j) * d..(i * w + j + 1) * d];
            dst.iter_mut().zip(gp).for_each(|(a, b)| *a += wt * b);
        }
    }
    Ok((
        Tensor::from_parts(map.shape().to_vec(), dmap),
        Tensor::from_parts(vec![n, 2], dcoords),
    ))
}

// ---------------------------------------------------------------- convolution

fn im2col3x3(map: &Tensor) -> Result<Tensor> {
    let (h, w, d) = map.hwd()?;
    let src = map.data();
    let k = 9 * d;
    let mut cols = vec![0.0; h * w * k];
    for i in 0..h {
        for j in 0..w {
            let row = &mut cols[(i * w + j) * k..(i * w + j + 1) * k];
            for ky in 0..3 {
                let si = i as isize + ky as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sj = j as isize + kx as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let s = (si as usize * w + sj as usize) * d;
                    let o = (ky * 3 + kx) * d;
                    row[o..o + d].copy_from_slice(&src[s..s + d]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![h * w, k], cols))
}

fn col2im3x3(cols: &Tensor, h: usize, w: usize, d: usize) -> Tensor {
    let k = 9 * d;
    let cs = cols.data();
    let mut out = vec![0.0; h * w * d];
    for i in 0..h {
        for j in 0..w {
            let row = &cs[(i * w + j) * k..(i * w + j + 1) * k];
            for ky in 0..3 {
                let si = i as isize + ky as isize - 1;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sj = j as isize + kx as isize - 1;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let s = (si as usize * w + sj as usize) * d;
                    let o = (ky * 3 + kx) * d;
                    out[s..s + d].iter_mut().zip(&row[o..o + d]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
    Tensor::from_parts(vec![h, w, d], out)
}

fn check_conv(map: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (h, w, din) = map.hwd()?;
    let (kin, kout) = match kernel.shape() {
        [3, 3, i, o] => (*i, *o),
        s => return Err(Error::dim(format!("conv kernel must be [3,3,Din,Dout], got {s:?}"))),
    };
    if kin != din {
        return Err(Error::dim(format!("conv expects {kin} input channels, map has {din}")));
    }
    if bias.shape() != [kout] {
        return Err(Error::dim(format!("conv bias must be [{kout}], got {:?}", bias.shape())));
    }
    Ok((h, w, din, kout))
}

/// 3x3 cross-correlation with zero padding of one cell; spatial shape preserved.
pub fn conv3x3(map: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, din, dout) = check_conv(map, kernel, bias)?;
    let cols = im2col3x3(map)?;
    let k2 = Tensor::from_parts(vec![9 * din, dout], kernel.data().to_vec());
    let mut out = matmul(&cols, &k2)?.into_data();
    for row in out.chunks_exact_mut(dout) {
        row.iter_mut().zip(bias.data()).for_each(|(a, b)| *a += b);
    }
    Ok(Tensor::from_parts(vec![h, w, dout], out))
}

/// Backward of [`conv3x3`]: returns `(dmap, dkernel, dbias)`.
pub fn conv3x3_backward(
    map: &Tensor,
    kernel: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, din) = map.hwd()?;
    let dout = kernel.last_dim();
    let cols = im2col3x3(map)?;
    let g2 = Tensor::from_parts(vec![h * w, dout], g.data().to_vec());
    let k2 = Tensor::from_parts(vec![9 * din, dout], kernel.data().to_vec());
    let dk = gemm(&cols, true, &g2, false)?.into_shape(kernel.shape())?;
    let dcols = gemm(&g2, false, &k2, true)?;
    let dmap = col2im3x3(&dcols, h, w, din);
    let mut db = vec![0.0; dout];
    for row in g2.data().chunks_exact(dout) {
        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok((dmap, dk, Tensor::from_parts(vec![dout], db)))
}

// ---------------------------------------------------------------- layer norm

/// Per-position normalization over the trailing axis followed by `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim(format!(
            "layer norm over {d} channels needs gain/bias of [{d}], got {:?}/{:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for c in 0..d {
            out.push((row[c] - mean) * inv * gain.data()[c] + bias.data()[c]);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Backward of [`layer_norm`]: returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let d = x.last_dim();
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![0.0; d];
    let mut dbias = vec![0.0; d];
    for (row, grow) in x.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let gh: Vec<f64> = (0..d).map(|c| grow[c] * gain.data()[c]).collect();
        let mean_gh = gh.iter().sum::<f64>() / d as f64;
        let mean_ghx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for c in 0..d {
            dx.push(inv * (gh[c] - mean_gh - xhat[c] * mean_ghx));
            dgain[c] += grow[c] * xhat[c];
            dbias[c] += grow[c];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![d], dgain),
        Tensor::from_parts(vec![d], dbias),
    ))
}

// ---------------------------------------------------------------- channel plumbing

/// Concatenates tensors along their trailing axis; leading shapes must agree.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::dim(format!(
                "concat leading shapes differ: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &wd) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * wd..(r + 1) * wd]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, out))
}

/// Channels `[start, start + len)` of the trailing axis.
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let d = x.last_dim();
    if start + len > d {
        return Err(Error::dim(format!("channel slice {start}+{len} exceeds {d}")));
    }
    let out = x
        .data()
        .chunks_exact(d)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor::from_parts(shape, out))
}
