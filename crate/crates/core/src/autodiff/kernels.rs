//! Forward and backward kernels shared by the tape and the no-tape path.
//!
//! Convolutions are stride-1 and lowered to a single-precision GEMM over an
//! im2col buffer, one batch item at a time.

use super::tensor::Tensor4;
use crate::error::{Error, Result};

pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor4, weight: &Tensor4, bias_len: usize, pad: usize) -> Result<Self> {
        let [_, c_in, h, w] = input.dims();
        let [c_out, w_in, kh, kw] = weight.dims();
        if w_in != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {w_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        if bias_len != c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {bias_len} entries for {c_out} output channels"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        Ok(Self {
            c_in,
            c_out,
            k: kh,
            pad,
            h,
            w,
            out_h: h + 2 * pad + 1 - kh,
            out_w: w + 2 * pad + 1 - kw,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1x1 kernel without padding reads the input directly.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox + kx - pad` lies inside `0..w`.
fn valid_span(kx: usize, pad: usize, w: usize, out_w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).min(out_w);
    let hi = (w + pad).saturating_sub(kx).min(out_w).max(lo);
    (lo, hi)
}

fn im2col(g: &ConvGeometry, item: &[f32], cols: &mut [f32]) {
    let (k, pad) = (g.k, g.pad);
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let src = &item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_span(kx, pad, g.w, g.out_w);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= g.h {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[(iy - pad) * g.w..(iy - pad + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    line[lo..hi].copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f32], item: &mut [f32]) {
    let (k, pad) = (g.k, g.pad);
    let plane = g.out_plane();
    for ci in 0..g.c_in {
        let dst = &mut item[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_span(kx, pad, g.w, g.out_w);
                for oy in 0..g.out_h {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= g.h {
                        continue;
                    }
                    let dst_row = &mut dst[(iy - pad) * g.w + lo + kx - pad..(iy - pad) * g.w + hi + kx - pad];
                    for (d, s) in dst_row.iter_mut().zip(&src[oy * g.out_w + lo..oy * g.out_w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// `c (m x n) = beta * c + a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (isize, isize),
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover every index reachable through the given
    // dims and strides; callers pass dense row- or column-major views.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Forward convolution. With `keep_cols` the im2col buffers of every batch
/// item are returned for reuse by [`conv2d_backward`].
pub(crate) fn conv2d_forward(
    input: &Tensor4,
    weight: &Tensor4,
    bias: &[f32],
    pad: usize,
    keep_cols: bool,
) -> Result<(Tensor4, Option<Vec<f32>>)> {
    let g = ConvGeometry::new(input, weight, bias.len(), pad)?;
    let n = input.batch();
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = Tensor4::zeros([n, g.c_out, g.out_h, g.out_w]);
    let per_item = if g.is_pointwise() { 0 } else { patch * plane };
    let mut cols = vec![0.0f32; if keep_cols { n * per_item } else { per_item }];
    for b in 0..n {
        let item = input.item_slice(b);
        let dst = &mut out.data_mut()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let src: &[f32] = if g.is_pointwise() {
            item
        } else {
            let slot = if keep_cols { b * per_item } else { 0 };
            let buf = &mut cols[slot..slot + per_item];
            im2col(&g, item, buf);
            buf
        };
        gemm(
            g.c_out,
            patch,
            plane,
            weight.data(),
            (patch as isize, 1),
            src,
            (plane as isize, 1),
            1.0,
            dst,
            (plane as isize, 1),
        );
    }
    Ok((out, (keep_cols && per_item > 0).then_some(cols)))
}

pub(crate) struct ConvGrads {
    pub input: Option<Tensor4>,
    pub weight: Tensor4,
    pub bias: Vec<f32>,
}

/// Backward convolution. `cached_cols` must come from the matching forward
/// call when present; otherwise the columns are rebuilt.
pub(crate) fn conv2d_backward(
    input: &Tensor4,
    weight: &Tensor4,
    pad: usize,
    grad_out: &Tensor4,
    need_input: bool,
    cached_cols: Option<&[f32]>,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weight, weight.dims()[0], pad)?;
    let n = input.batch();
    let plane = g.out_plane();
    let patch = g.patch_len();
    let per_item = if g.is_pointwise() { 0 } else { patch * plane };
    let mut grad_w = Tensor4::zeros(weight.dims());
    let mut grad_b = vec![0.0f32; g.c_out];
    let mut grad_in = need_input.then(|| Tensor4::zeros(input.dims()));
    let mut scratch = vec![0.0f32; if cached_cols.is_some() { 0 } else { per_item }];
    let mut dcols = vec![0.0f32; if need_input { patch * plane } else { 0 }];

    for b in 0..n {
        let item = input.item_slice(b);
        let gout = &grad_out.data()[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        for (co, chunk) in gout.chunks(plane).enumerate() {
            grad_b[co] += chunk.iter().sum::<f32>();
        }
        let src: &[f32] = if g.is_pointwise() {
            item
        } else if let Some(cached) = cached_cols {
            &cached[b * per_item..(b + 1) * per_item]
        } else {
            im2col(&g, item, &mut scratch);
            &scratch
        };
        // dW^T (patch x c_out) += cols (patch x plane) * dOut^T (plane x c_out)
        gemm(
            patch,
            plane,
            g.c_out,
            src,
            (plane as isize, 1),
            gout,
            (1, plane as isize),
            1.0,
            grad_w.data_mut(),
            (1, patch as isize),
        );
        if let Some(gin) = grad_in.as_mut() {
            // dcols (patch x plane) = W^T (patch x c_out) * dOut (c_out x plane)
            gemm(
                patch,
                g.c_out,
                plane,
                weight.data(),
                (1, patch as isize),
                gout,
                (plane as isize, 1),
                0.0,
                &mut dcols,
                (plane as isize, 1),
            );
            let dst = &mut gin.data_mut()[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
            if g.is_pointwise() {
                dst.copy_from_slice(&dcols);
            } else {
                col2im(&g, &dcols, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    })
}

pub(crate) fn relu_forward(input: &Tensor4) -> Tensor4 {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor4::new(input.dims(), data).expect("same dims")
}

pub(crate) fn relu_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor4::new(input.dims(), data).expect("same dims")
}

pub(crate) fn softmax_channels_forward(input: &Tensor4) -> Result<Tensor4> {
    let [n, c, _, _] = input.dims();
    if c < 2 {
        return Err(Error::shape("softmax_channels", format!("{c} channels, need at least 2")));
    }
    let plane = input.plane_len();
    let mut out = Tensor4::zeros(input.dims());
    let src = input.data();
    let dst = out.data_mut();
    let mut row = vec![0.0f32; c];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for (ch, slot) in row.iter_mut().enumerate() {
                *slot = src[base + ch * plane + p];
                max = max.max(*slot);
            }
            let mut total = 0.0f32;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                total += *slot;
            }
            for (ch, slot) in row.iter().enumerate() {
                dst[base + ch * plane + p] = slot / total;
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_channels_backward(output: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let [n, c, _, _] = output.dims();
    let plane = output.plane_len();
    let y = output.data();
    let gy = grad_out.data();
    let mut grad = Tensor4::zeros(output.dims());
    let gx = grad.data_mut();
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let dot: f32 = (0..c)
                .map(|ch| y[base + ch * plane + p] * gy[base + ch * plane + p])
                .sum();
            for ch in 0..c {
                let i = base + ch * plane + p;
                gx[i] = y[i] * (gy[i] - dot);
            }
        }
    }
    grad
}

/// 2x2 max pooling; returns the pooled tensor and, per output cell, the flat
/// input index that won. Ties go to the first index in row-major scan order.
pub(crate) fn maxpool2x2_forward(input: &Tensor4) -> Result<(Tensor4, Vec<u32>)> {
    let [n, c, h, w] = input.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2x2", format!("odd spatial dims {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ibase + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = ibase + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[obase + oy * ow + ox] = src[best];
                argmax[obase + oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub(crate) fn maxpool2x2_backward(input_dims: [usize; 4], argmax: &[u32], grad_out: &Tensor4) -> Tensor4 {
    let mut grad = Tensor4::zeros(input_dims);
    let gx = grad.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gx[idx as usize] += g;
    }
    grad
}

pub(crate) fn upsample_nearest2x_forward(input: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input.dims();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let src = input.data();
    let dst = out.data_mut();
    for nc in 0..n * c {
        for oy in 0..oh {
            let srow = &src[nc * h * w + (oy / 2) * w..nc * h * w + (oy / 2 + 1) * w];
            let drow = &mut dst[nc * oh * ow + oy * ow..nc * oh * ow + (oy + 1) * ow];
            for (ox, v) in drow.iter_mut().enumerate() {
                *v = srow[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest2x_backward(input_dims: [usize; 4], grad_out: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = input_dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut grad = Tensor4::zeros(input_dims);
    let gy = grad_out.data();
    let gx = grad.data_mut();
    for nc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                gx[nc * h * w + (oy / 2) * w + ox / 2] += gy[nc * oh * ow + oy * ow + ox];
            }
        }
    }
    grad
}

pub(crate) fn concat_channels_forward(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    let [na, ca, ha, wa] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if na != nb || ha != hb || wa != wb {
        return Err(Error::shape(
            "concat_channels",
            format!("{:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let plane = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for item in 0..na {
        data.extend_from_slice(&a.data()[item * ca * plane..(item + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[item * cb * plane..(item + 1) * cb * plane]);
    }
    Tensor4::new([na, ca + cb, ha, wa], data)
}

pub(crate) fn concat_channels_backward(
    a_dims: [usize; 4],
    b_dims: [usize; 4],
    grad_out: &Tensor4,
) -> (Tensor4, Tensor4) {
    let plane = a_dims[2] * a_dims[3];
    let (ca, cb) = (a_dims[1], b_dims[1]);
    let mut ga = Vec::with_capacity(a_dims.iter().product());
    let mut gb = Vec::with_capacity(b_dims.iter().product());
    for item in 0..a_dims[0] {
        let base = item * (ca + cb) * plane;
        ga.extend_from_slice(&grad_out.data()[base..base + ca * plane]);
        gb.extend_from_slice(&grad_out.data()[base + ca * plane..base + (ca + cb) * plane]);
    }
    (
        Tensor4::new(a_dims, ga).expect("split dims"),
        Tensor4::new(b_dims, gb).expect("split dims"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &Tensor4, weight: &Tensor4, bias: &[f32], pad: usize) -> Vec<f32> {
        let [n, c_in, h, w] = input.dims();
        let [c_out, _, k, _] = weight.dims();
        let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
        let mut out = vec![0.0f32; n * c_out * oh * ow];
        for b in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += input.at(b, ci, iy as usize, ix as usize)
                                            * weight.at(co, ci, ky, kx);
                                    }
                                }
                            }
                        }
                        out[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_nested_loops() {
        let input = Tensor4::new([2, 3, 5, 6], (0..180).map(|i| ((i * 37) % 11) as f32 - 5.0).collect()).unwrap();
        let weight = Tensor4::new([4, 3, 3, 3], (0..108).map(|i| ((i * 13) % 7) as f32 * 0.25 - 0.75).collect()).unwrap();
        let bias = [0.5, -1.0, 0.0, 2.0];
        for pad in [0, 1, 2] {
            let (fast, _) = conv2d_forward(&input, &weight, &bias, pad, false).unwrap();
            let slow = naive_conv(&input, &weight, &bias, pad);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() < 1e-4, "pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let input = Tensor4::zeros([1, 2, 4, 4]);
        let weight = Tensor4::zeros([1, 3, 3, 3]);
        let err = conv2d_forward(&input, &weight, &[0.0], 1, false).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn maxpool_tie_goes_to_first_scanned() {
        let input = Tensor4::new([1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap();
        let (out, argmax) = maxpool2x2_forward(&input).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool2x2_forward(&Tensor4::zeros([1, 1, 3, 4])).is_err());
    }
}
