//! Convolution, transposed convolution and max-pooling tape ops.
//!
//! Convolutions run as an explicit patch-gather (im2col) followed by one
//! GEMM per batch item; the gather respects stride, zero padding and
//! dilation. A direct quadruple-loop path lives in [`crate::reference`]
//! and serves as the independent oracle in tests.

use alloc::{format, vec};

use super::{Op, Tape, VarId};
use crate::tensor::{Element, Tensor4};
use crate::{Error, Result};

/// Stride / zero-padding / dilation of a forward convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvCfg {
    pub fn unit() -> Self {
        ConvCfg {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

/// Geometry of a transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTransposeCfg {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

pub(crate) fn conv_out_dim(input: usize, k: usize, cfg: &ConvCfg) -> Option<usize> {
    let span = cfg.dilation.checked_mul(k - 1)? + 1;
    let padded = input + 2 * cfg.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / cfg.stride + 1)
}

/// Gathers convolution patches of one image into a
/// `(c*kh*kw, out_h*out_w)` row-major matrix. Out-of-range taps stay zero.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    src: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: &ConvCfg,
    out_h: usize,
    out_w: usize,
    cols: &mut [T],
) {
    cols.fill(T::zero());
    let ohw = out_h * out_w;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohw;
                let off_x = (kj * cfg.dilation) as isize - cfg.padding as isize;
                let off_y = (ki * cfg.dilation) as isize - cfg.padding as isize;
                // valid output-x range so that ix = ox*stride + off_x is in [0, w)
                let ox_lo = if off_x < 0 {
                    ((-off_x) as usize).div_ceil(cfg.stride)
                } else {
                    0
                };
                let ox_hi = if (w as isize) > off_x {
                    (((w as isize - off_x) as usize).div_ceil(cfg.stride)).min(out_w)
                } else {
                    0
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..out_h {
                    let iy = oy as isize * cfg.stride as isize + off_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    let dst = row + oy * out_w;
                    if cfg.stride == 1 {
                        let ix0 = (ox_lo as isize + off_x) as usize;
                        cols[dst + ox_lo..dst + ox_hi]
                            .copy_from_slice(&src[src_row + ix0..src_row + ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = (ox as isize * cfg.stride as isize + off_x) as usize;
                            cols[dst + ox] = src[src_row + ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    cfg: &ConvCfg,
    out_h: usize,
    out_w: usize,
    dst: &mut [T],
) {
    let ohw = out_h * out_w;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * ohw;
                let off_x = (kj * cfg.dilation) as isize - cfg.padding as isize;
                let off_y = (ki * cfg.dilation) as isize - cfg.padding as isize;
                let ox_lo = if off_x < 0 {
                    ((-off_x) as usize).div_ceil(cfg.stride)
                } else {
                    0
                };
                let ox_hi = if (w as isize) > off_x {
                    (((w as isize - off_x) as usize).div_ceil(cfg.stride)).min(out_w)
                } else {
                    0
                };
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..out_h {
                    let iy = oy as isize * cfg.stride as isize + off_y;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    let src = row + oy * out_w;
                    for ox in ox_lo..ox_hi {
                        let ix = (ox as isize * cfg.stride as isize + off_x) as usize;
                        dst[dst_row + ix] = dst[dst_row + ix] + cols[src + ox];
                    }
                }
            }
        }
    }
}

/// Per-tap overlap of a stride-1 convolution: output rows/cols where the
/// shifted input stays in bounds, and the matching input origin.
#[inline]
fn tap_overlap(
    len: usize,
    out_len: usize,
    k_off: usize,
    dilation: usize,
    padding: usize,
) -> Option<(usize, usize, usize)> {
    let shift = (k_off * dilation) as isize - padding as isize;
    let lo = if shift < 0 { (-shift) as usize } else { 0 };
    let hi = if shift < 0 {
        out_len.min(len + (-shift) as usize)
    } else {
        out_len.min(len.saturating_sub(shift as usize))
    };
    if lo >= hi {
        return None;
    }
    Some((lo, hi, (lo as isize + shift) as usize))
}

/// Direct stride-1 convolution: for every kernel tap, a fused
/// multiply-add of a shifted input plane onto the output plane,
/// accumulating into `out`. Beats the im2col route when channel counts
/// are small.
fn conv2d_direct_forward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    cfg: &ConvCfg,
    out: &mut Tensor4<T>,
) {
    let [b, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let [_, _, out_h, out_w] = out.shape();
    for bi in 0..b {
        for co in 0..c_out {
            let y_base = (bi * c_out + co) * out_h * out_w;
            for ci in 0..c_in {
                let x_base = (bi * c_in + ci) * h * wd;
                for ki in 0..kh {
                    let Some((oy_lo, oy_hi, iy0)) =
                        tap_overlap(h, out_h, ki, cfg.dilation, cfg.padding)
                    else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some((ox_lo, ox_hi, ix0)) =
                            tap_overlap(wd, out_w, kj, cfg.dilation, cfg.padding)
                        else {
                            continue;
                        };
                        let weight = w.at(co, ci, ki, kj);
                        if weight == T::zero() {
                            continue;
                        }
                        let run = ox_hi - ox_lo;
                        for (row, oy) in (oy_lo..oy_hi).enumerate() {
                            let y_off = y_base + oy * out_w + ox_lo;
                            let x_off = x_base + (iy0 + row) * wd + ix0;
                            let xrow = &x.data()[x_off..x_off + run];
                            let yrow = &mut out.data_mut()[y_off..y_off + run];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv = *yv + weight * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Direct input-gradient: the adjoint shifted FMA.
fn conv2d_direct_backward_dx<T: Element>(
    dy: &Tensor4<T>,
    w: &Tensor4<T>,
    cfg: &ConvCfg,
    dx: &mut Tensor4<T>,
) {
    let [b, c_out, out_h, out_w] = dy.shape();
    let [_, c_in, kh, kw] = w.shape();
    let [_, _, h, wd] = dx.shape();
    for bi in 0..b {
        for co in 0..c_out {
            let dy_base = (bi * c_out + co) * out_h * out_w;
            for ci in 0..c_in {
                let dx_base = (bi * c_in + ci) * h * wd;
                for ki in 0..kh {
                    let Some((oy_lo, oy_hi, iy0)) =
                        tap_overlap(h, out_h, ki, cfg.dilation, cfg.padding)
                    else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some((ox_lo, ox_hi, ix0)) =
                            tap_overlap(wd, out_w, kj, cfg.dilation, cfg.padding)
                        else {
                            continue;
                        };
                        let weight = w.at(co, ci, ki, kj);
                        if weight == T::zero() {
                            continue;
                        }
                        let run = ox_hi - ox_lo;
                        for (row, oy) in (oy_lo..oy_hi).enumerate() {
                            let dy_off = dy_base + oy * out_w + ox_lo;
                            let dx_off = dx_base + (iy0 + row) * wd + ix0;
                            let dyrow = &dy.data()[dy_off..dy_off + run];
                            let dxrow = &mut dx.data_mut()[dx_off..dx_off + run];
                            for (dv, &gv) in dxrow.iter_mut().zip(dyrow) {
                                *dv = *dv + weight * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Direct weight-gradient: per-tap dot products of shifted planes.
fn conv2d_direct_backward_dw<T: Element>(
    x: &Tensor4<T>,
    dy: &Tensor4<T>,
    cfg: &ConvCfg,
    dw: &mut Tensor4<T>,
) {
    let [b, c_out, out_h, out_w] = dy.shape();
    let [_, c_in, kh, kw] = dw.shape();
    let [_, _, h, wd] = x.shape();
    for bi in 0..b {
        for co in 0..c_out {
            let dy_base = (bi * c_out + co) * out_h * out_w;
            for ci in 0..c_in {
                let x_base = (bi * c_in + ci) * h * wd;
                for ki in 0..kh {
                    let Some((oy_lo, oy_hi, iy0)) =
                        tap_overlap(h, out_h, ki, cfg.dilation, cfg.padding)
                    else {
                        continue;
                    };
                    for kj in 0..kw {
                        let Some((ox_lo, ox_hi, ix0)) =
                            tap_overlap(wd, out_w, kj, cfg.dilation, cfg.padding)
                        else {
                            continue;
                        };
                        let run = ox_hi - ox_lo;
                        let mut acc = T::zero();
                        for (row, oy) in (oy_lo..oy_hi).enumerate() {
                            let dy_off = dy_base + oy * out_w + ox_lo;
                            let x_off = x_base + (iy0 + row) * wd + ix0;
                            let dyrow = &dy.data()[dy_off..dy_off + run];
                            let xrow = &x.data()[x_off..x_off + run];
                            for (&gv, &xv) in dyrow.iter().zip(xrow) {
                                acc = acc + gv * xv;
                            }
                        }
                        *dw.at_mut(co, ci, ki, kj) = dw.at(co, ci, ki, kj) + acc;
                    }
                }
            }
        }
    }
}

/// Product of channel counts under which the direct kernel beats
/// im2col + GEMM (GEMM packing dominates at small M and K).
const DIRECT_CONV_MAX_CHANNEL_PRODUCT: usize = 512;

fn use_direct_path(c_in: usize, c_out: usize, stride: usize) -> bool {
    stride == 1 && c_in * c_out <= DIRECT_CONV_MAX_CHANNEL_PRODUCT
}

fn add_channel_bias<T: Element>(data: &mut [T], bias: &[T], batch: usize, c: usize, plane: usize) {
    for bi in 0..batch {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let add = bias[ci];
            for v in &mut data[base..base + plane] {
                *v = *v + add;
            }
        }
    }
}

fn validate_conv_cfg(cfg: &ConvCfg) -> Result<()> {
    if cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::config(format!(
            "stride and dilation must be positive, got stride {} dilation {}",
            cfg.stride, cfg.dilation
        )));
    }
    Ok(())
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    cfg: &ConvCfg,
) -> Result<Tensor4<T>> {
    validate_conv_cfg(cfg)?;
    let [b, c_in, h, wd] = x.shape();
    let [c_out, wc_in, kh, kw] = w.shape();
    if c_in != wc_in {
        return Err(Error::dim(format!(
            "conv2d: input has {c_in} channels but kernel expects {wc_in}"
        )));
    }
    if let Some(bs) = bias {
        if bs.len() != c_out {
            return Err(Error::dim(format!(
                "conv2d: bias length {} != out channels {c_out}",
                bs.len()
            )));
        }
    }
    let (out_h, out_w) = match (conv_out_dim(h, kh, cfg), conv_out_dim(wd, kw, cfg)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
        _ => {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} dilation {} does not fit {h}x{wd} input with padding {}",
                cfg.dilation, cfg.padding
            )))
        }
    };
    let mut out = Tensor4::zeros([b, c_out, out_h, out_w]);
    if let Some(bs) = bias {
        add_channel_bias(out.data_mut(), bs, b, c_out, out_h * out_w);
    }
    conv2d_accumulate(x, w, cfg, &mut out);
    Ok(out)
}

/// Adds `conv(x, w)` onto `out`, routing between the direct kernel and
/// the im2col + GEMM path by channel count.
pub(crate) fn conv2d_accumulate<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    cfg: &ConvCfg,
    out: &mut Tensor4<T>,
) {
    let [b, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let [_, _, out_h, out_w] = out.shape();
    if use_direct_path(c_in, c_out, cfg.stride) {
        conv2d_direct_forward(x, w, cfg, out);
        return;
    }
    let ckk = c_in * kh * kw;
    let ohw = out_h * out_w;
    let mut cols = vec![T::zero(); ckk * ohw];
    for bi in 0..b {
        let src = &x.data()[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
        im2col(src, c_in, h, wd, kh, kw, cfg, out_h, out_w, &mut cols);
        let dst = &mut out.data_mut()[bi * c_out * ohw..(bi + 1) * c_out * ohw];
        T::gemm(
            c_out,
            ckk,
            ohw,
            T::one(),
            w.data(),
            ckk as isize,
            1,
            &cols,
            ohw as isize,
            1,
            T::one(),
            dst,
            ohw as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    cfg: &ConvCfg,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let [b, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let [_, _, out_h, out_w] = dy.shape();
    let ckk = c_in * kh * kw;
    let ohw = out_h * out_w;

    let db = need_db.then(|| {
        let mut db = Tensor4::zeros([1, c_out, 1, 1]);
        for bi in 0..b {
            for co in 0..c_out {
                let base = (bi * c_out + co) * ohw;
                let s: T = dy.data()[base..base + ohw].iter().copied().sum();
                db.data_mut()[co] = db.data_mut()[co] + s;
            }
        }
        db
    });

    let mut dw = need_dw.then(|| Tensor4::zeros(w.shape()));
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    if dw.is_none() && dx.is_none() {
        return (None, None, db);
    }
    if use_direct_path(c_in, c_out, cfg.stride) {
        if let Some(dx) = dx.as_mut() {
            conv2d_direct_backward_dx(dy, w, cfg, dx);
        }
        if let Some(dw) = dw.as_mut() {
            conv2d_direct_backward_dw(x, dy, cfg, dw);
        }
        return (dx, dw, db);
    }

    let mut cols = vec![T::zero(); ckk * ohw];
    let mut dcols = vec![T::zero(); ckk * ohw];
    for bi in 0..b {
        let dy_b = &dy.data()[bi * c_out * ohw..(bi + 1) * c_out * ohw];
        if let Some(dw) = dw.as_mut() {
            let src = &x.data()[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
            im2col(src, c_in, h, wd, kh, kw, cfg, out_h, out_w, &mut cols);
            // dW += dY * cols^T
            T::gemm(
                c_out,
                ohw,
                ckk,
                T::one(),
                dy_b,
                ohw as isize,
                1,
                &cols,
                1,
                ohw as isize,
                T::one(),
                dw.data_mut(),
                ckk as isize,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T * dY, then scatter back onto the input.
            T::gemm(
                ckk,
                c_out,
                ohw,
                T::one(),
                w.data(),
                1,
                ckk as isize,
                dy_b,
                ohw as isize,
                1,
                T::zero(),
                &mut dcols,
                ohw as isize,
                1,
            );
            let dst = &mut dx.data_mut()[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
            col2im_add(&dcols, c_in, h, wd, kh, kw, cfg, out_h, out_w, dst);
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    cfg: &ConvTransposeCfg,
) -> Result<Tensor4<T>> {
    let [b, c_from, h, wd] = x.shape();
    let [wc_from, c_to, kh, kw] = w.shape();
    if c_from != wc_from {
        return Err(Error::dim(format!(
            "conv_transpose2d: input has {c_from} channels but kernel expects {wc_from}"
        )));
    }
    if cfg.stride == 0 {
        return Err(Error::config("conv_transpose2d: stride must be positive"));
    }
    if cfg.output_padding >= cfg.stride {
        return Err(Error::config(format!(
            "conv_transpose2d: output_padding {} must be smaller than stride {}",
            cfg.output_padding, cfg.stride
        )));
    }
    if let Some(bs) = bias {
        if bs.len() != c_to {
            return Err(Error::dim(format!(
                "conv_transpose2d: bias length {} != out channels {c_to}",
                bs.len()
            )));
        }
    }
    let out_dim = |i: usize, k: usize| -> Result<usize> {
        let v = (i as isize - 1) * cfg.stride as isize - 2 * cfg.padding as isize
            + k as isize
            + cfg.output_padding as isize;
        if v < 1 {
            Err(Error::dim(format!(
                "conv_transpose2d: output dim {v} < 1 for input {i}"
            )))
        } else {
            Ok(v as usize)
        }
    };
    let out_h = out_dim(h, kh)?;
    let out_w = out_dim(wd, kw)?;
    let mut out = Tensor4::zeros([b, c_to, out_h, out_w]);
    if let Some(bs) = bias {
        add_channel_bias(out.data_mut(), bs, b, c_to, out_h * out_w);
    }
    conv_transpose2d_accumulate(x, w, cfg, &mut out);
    Ok(out)
}

/// Adds `conv_transpose(x, w)` onto `out`.
pub(crate) fn conv_transpose2d_accumulate<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    cfg: &ConvTransposeCfg,
    out: &mut Tensor4<T>,
) {
    let [b, c_from, h, wd] = x.shape();
    let [_, c_to, kh, kw] = w.shape();
    let [_, _, out_h, out_w] = out.shape();
    let ckk = c_to * kh * kw;
    let hw = h * wd;
    let conv_cfg = ConvCfg {
        stride: cfg.stride,
        padding: cfg.padding,
        dilation: 1,
    };
    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        let src = &x.data()[bi * c_from * hw..(bi + 1) * c_from * hw];
        // cols = W^T * x, viewing w as (c_from, c_to*kh*kw)
        T::gemm(
            ckk,
            c_from,
            hw,
            T::one(),
            w.data(),
            1,
            ckk as isize,
            src,
            hw as isize,
            1,
            T::zero(),
            &mut cols,
            hw as isize,
            1,
        );
        let dst = &mut out.data_mut()[bi * c_to * out_h * out_w..(bi + 1) * c_to * out_h * out_w];
        col2im_add(&cols, c_to, out_h, out_w, kh, kw, &conv_cfg, h, wd, dst);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    dy: &Tensor4<T>,
    cfg: &ConvTransposeCfg,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor4<T>>, Option<Tensor4<T>>, Option<Tensor4<T>>) {
    let [b, c_from, h, wd] = x.shape();
    let [_, c_to, kh, kw] = w.shape();
    let [_, _, out_h, out_w] = dy.shape();
    let ckk = c_to * kh * kw;
    let hw = h * wd;
    let ohw = out_h * out_w;
    let conv_cfg = ConvCfg {
        stride: cfg.stride,
        padding: cfg.padding,
        dilation: 1,
    };

    let db = need_db.then(|| {
        let mut db = Tensor4::zeros([1, c_to, 1, 1]);
        for bi in 0..b {
            for co in 0..c_to {
                let base = (bi * c_to + co) * ohw;
                let s: T = dy.data()[base..base + ohw].iter().copied().sum();
                db.data_mut()[co] = db.data_mut()[co] + s;
            }
        }
        db
    });

    let mut dw = need_dw.then(|| Tensor4::zeros(w.shape()));
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));
    if dw.is_none() && dx.is_none() {
        return (None, None, db);
    }

    let mut cols = vec![T::zero(); ckk * hw];
    for bi in 0..b {
        // Patches of the upstream gradient under the adjoint conv geometry.
        let dy_b = &dy.data()[bi * c_to * ohw..(bi + 1) * c_to * ohw];
        im2col(dy_b, c_to, out_h, out_w, kh, kw, &conv_cfg, h, wd, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[bi * c_from * hw..(bi + 1) * c_from * hw];
            T::gemm(
                c_from,
                ckk,
                hw,
                T::one(),
                w.data(),
                ckk as isize,
                1,
                &cols,
                hw as isize,
                1,
                T::zero(),
                dst,
                hw as isize,
                1,
            );
        }
        if let Some(dw) = dw.as_mut() {
            let src = &x.data()[bi * c_from * hw..(bi + 1) * c_from * hw];
            // dW += x * cols^T
            T::gemm(
                c_from,
                hw,
                ckk,
                T::one(),
                src,
                hw as isize,
                1,
                &cols,
                1,
                hw as isize,
                T::one(),
                dw.data_mut(),
                ckk as isize,
                1,
            );
        }
    }
    (dx, dw, db)
}

/// Geometry of one contribution to a fused sum-of-convolutions node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeGeom {
    Conv(ConvCfg),
    Transpose(ConvTransposeCfg),
}

pub(crate) struct FusedEdge {
    pub x: VarId,
    pub w: VarId,
    pub geom: EdgeGeom,
}

impl<T: Element> Tape<T> {
    /// Sum of several convolution/transpose-convolution edges plus an
    /// optional shared bias, evaluated into a single output buffer.
    ///
    /// This is the execution form of a sum-aggregating graph node: no
    /// per-edge intermediate tensors are materialized and the backward
    /// pass scatters straight into each operand's gradient.
    pub fn conv_sum(
        &mut self,
        edges: &[(VarId, VarId, EdgeGeom)],
        bias: Option<VarId>,
    ) -> Result<VarId> {
        if edges.is_empty() {
            return Err(Error::usage("conv_sum of zero edges"));
        }
        let mut out_shape: Option<[usize; 4]> = None;
        for (i, &(x, w, geom)) in edges.iter().enumerate() {
            let [b, c_in, h, wd] = self.value(x).shape();
            let shape = match geom {
                EdgeGeom::Conv(cfg) => {
                    validate_conv_cfg(&cfg)?;
                    let [c_out, wc_in, kh, kw] = self.value(w).shape();
                    if c_in != wc_in {
                        return Err(Error::dim(format!(
                            "conv_sum edge {i}: input has {c_in} channels, kernel expects {wc_in}"
                        )));
                    }
                    match (conv_out_dim(h, kh, &cfg), conv_out_dim(wd, kw, &cfg)) {
                        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => [b, c_out, oh, ow],
                        _ => {
                            return Err(Error::dim(format!(
                                "conv_sum edge {i}: kernel does not fit {h}x{wd} input"
                            )))
                        }
                    }
                }
                EdgeGeom::Transpose(cfg) => {
                    let [wc_from, c_to, kh, _] = self.value(w).shape();
                    if c_in != wc_from {
                        return Err(Error::dim(format!(
                            "conv_sum edge {i}: input has {c_in} channels, kernel expects {wc_from}"
                        )));
                    }
                    if cfg.output_padding >= cfg.stride {
                        return Err(Error::config(
                            "conv_sum: output_padding must be smaller than stride",
                        ));
                    }
                    let oh = (h as isize - 1) * cfg.stride as isize - 2 * cfg.padding as isize
                        + kh as isize
                        + cfg.output_padding as isize;
                    if oh < 1 {
                        return Err(Error::dim("conv_sum: transpose output dim < 1"));
                    }
                    let ow = (wd as isize - 1) * cfg.stride as isize - 2 * cfg.padding as isize
                        + kh as isize
                        + cfg.output_padding as isize;
                    [b, c_to, oh as usize, ow as usize]
                }
            };
            match out_shape {
                None => out_shape = Some(shape),
                Some(prev) if prev != shape => {
                    return Err(Error::dim(format!(
                        "conv_sum edge {i} produces {shape:?}, expected {prev:?}"
                    )))
                }
                _ => {}
            }
        }
        let shape = out_shape.expect("at least one edge");
        let mut out = Tensor4::zeros(shape);
        if let Some(bv) = bias {
            if self.value(bv).shape() != [1, shape[1], 1, 1] {
                return Err(Error::dim(format!(
                    "conv_sum bias shape {:?}, expected (1, {}, 1, 1)",
                    self.value(bv).shape(),
                    shape[1]
                )));
            }
            let bias_data = self.value(bv).data().to_vec();
            add_channel_bias(out.data_mut(), &bias_data, shape[0], shape[1], shape[2] * shape[3]);
        }
        for &(x, w, geom) in edges {
            match geom {
                EdgeGeom::Conv(cfg) => conv2d_accumulate(self.value(x), self.value(w), &cfg, &mut out),
                EdgeGeom::Transpose(cfg) => {
                    conv_transpose2d_accumulate(self.value(x), self.value(w), &cfg, &mut out)
                }
            }
        }
        let needs = edges
            .iter()
            .any(|&(x, w, _)| self.needs(x) || self.needs(w))
            || bias.map_or(false, |bv| self.needs(bv));
        let fused: alloc::vec::Vec<FusedEdge> = edges
            .iter()
            .map(|&(x, w, geom)| FusedEdge { x, w, geom })
            .collect();
        Ok(self.push(out, Op::ConvSum { edges: fused, bias }, needs))
    }

    /// 2D cross-correlation with stride, zero padding and dilation.
    ///
    /// `w` has shape `(c_out, c_in, k, k)`; `b`, when given, `(1, c_out, 1, 1)`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        cfg: ConvCfg,
    ) -> Result<VarId> {
        let bias_data = b.map(|bv| self.value(bv).data().to_vec());
        let out = conv2d_forward(self.value(x), self.value(w), bias_data.as_deref(), &cfg)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        Ok(self.push(out, Op::Conv2d { x, w, b, cfg }, needs))
    }

    /// Transposed convolution (learnable upsampling), the adjoint of
    /// [`Tape::conv2d`] on the same geometry.
    ///
    /// `w` has shape `(c_in, c_out, k, k)`.
    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        cfg: ConvTransposeCfg,
    ) -> Result<VarId> {
        let bias_data = b.map(|bv| self.value(bv).data().to_vec());
        let out =
            conv_transpose2d_forward(self.value(x), self.value(w), bias_data.as_deref(), &cfg)?;
        let needs =
            self.needs(x) || self.needs(w) || b.map_or(false, |bv| self.needs(bv));
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, cfg }, needs))
    }

    /// Non-overlapping max pooling over `k x k` windows.
    ///
    /// Gradient flows to the window argmax only; ties resolve to the first
    /// maximum in row-major scan order.
    pub fn maxpool2d(&mut self, x: VarId, k: usize) -> Result<VarId> {
        let v = self.value(x);
        let [b, c, h, w] = v.shape();
        if k == 0 {
            return Err(Error::config("maxpool window must be positive"));
        }
        if h % k != 0 || w % k != 0 {
            return Err(Error::config(format!(
                "maxpool window {k} does not divide spatial dims {h}x{w}"
            )));
        }
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor4::zeros([b, c, oh, ow]);
        let mut argmax = vec![0u32; b * c * oh * ow];
        for bc in 0..b * c {
            let plane = bc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for wy in 0..k {
                        for wx in 0..k {
                            let idx = plane + (oy * k + wy) * w + ox * k + wx;
                            let val = v.data()[idx];
                            if val > best {
                                best = val;
                                best_idx = idx;
                            }
                        }
                    }
                    let o = bc * oh * ow + oy * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, needs))
    }
}
