//! Direct-loop reference implementations of the convolution kernels.
//!
//! These quadruple-loop paths are deliberately naive and independent of
//! the im2col/GEMM route in [`crate::autodiff`]; tests pit the two
//! against each other.

use crate::autodiff::{ConvCfg, ConvTransposeCfg};
use crate::tensor::{Element, Tensor4};

/// Cross-correlation by explicit loops over every output tap.
pub fn conv2d_reference<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    cfg: &ConvCfg,
) -> Tensor4<T> {
    let [b, c_in, h, wd] = x.shape();
    let [c_out, _, kh, kw] = w.shape();
    let out_h = (h + 2 * cfg.padding - cfg.dilation * (kh - 1) - 1) / cfg.stride + 1;
    let out_w = (wd + 2 * cfg.padding - cfg.dilation * (kw - 1) - 1) / cfg.stride + 1;
    let mut out = Tensor4::zeros([b, c_out, out_h, out_w]);
    for bi in 0..b {
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = bias.map_or(T::zero(), |bs| bs[co]);
                    for ci in 0..c_in {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * cfg.stride + ki * cfg.dilation) as isize
                                    - cfg.padding as isize;
                                let ix = (ox * cfg.stride + kj * cfg.dilation) as isize
                                    - cfg.padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc = acc
                                    + x.at(bi, ci, iy as usize, ix as usize)
                                        * w.at(co, ci, ki, kj);
                            }
                        }
                    }
                    *out.at_mut(bi, co, oy, ox) = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution by scattering each input tap onto the output.
pub fn conv_transpose2d_reference<T: Element>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&[T]>,
    cfg: &ConvTransposeCfg,
) -> Tensor4<T> {
    let [b, c_from, h, wd] = x.shape();
    let [_, c_to, kh, kw] = w.shape();
    let out_h =
        ((h - 1) * cfg.stride + kh + cfg.output_padding) as isize - 2 * cfg.padding as isize;
    let out_w =
        ((wd - 1) * cfg.stride + kw + cfg.output_padding) as isize - 2 * cfg.padding as isize;
    let (out_h, out_w) = (out_h as usize, out_w as usize);
    let mut out = Tensor4::zeros([b, c_to, out_h, out_w]);
    for bi in 0..b {
        for cf in 0..c_from {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.at(bi, cf, iy, ix);
                    for ct in 0..c_to {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy =
                                    (iy * cfg.stride + ki) as isize - cfg.padding as isize;
                                let ox =
                                    (ix * cfg.stride + kj) as isize - cfg.padding as isize;
                                if oy < 0
                                    || oy >= out_h as isize
                                    || ox < 0
                                    || ox >= out_w as isize
                                {
                                    continue;
                                }
                                let cur = out.at(bi, ct, oy as usize, ox as usize);
                                *out.at_mut(bi, ct, oy as usize, ox as usize) =
                                    cur + xv * w.at(cf, ct, ki, kj);
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bs) = bias {
        for bi in 0..b {
            for ct in 0..c_to {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let cur = out.at(bi, ct, oy, ox);
                        *out.at_mut(bi, ct, oy, ox) = cur + bs[ct];
                    }
                }
            }
        }
    }
    out
}

/// Windowed max by explicit loops.
pub fn maxpool2d_reference<T: Element>(x: &Tensor4<T>, k: usize) -> Tensor4<T> {
    let [b, c, h, w] = x.shape();
    let (oh, ow) = (h / k, w / k);
    let mut out = Tensor4::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    for wy in 0..k {
                        for wx in 0..k {
                            best = best.max(x.at(bi, ci, oy * k + wy, ox * k + wx));
                        }
                    }
                    *out.at_mut(bi, ci, oy, ox) = best;
                }
            }
        }
    }
    out
}
