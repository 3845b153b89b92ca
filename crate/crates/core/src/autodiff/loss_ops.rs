//! Differentiable, mask-aware objectives recorded as single tape ops.
//!
//! Every objective averages or sums over *included* pixels only: a pixel
//! is included when its label is not the unlabeled sentinel and the
//! optional [`PixelMask`] selects it. Excluded pixels contribute nothing
//! to the value or the gradient.

use alloc::vec::Vec;
use alloc::{format, vec};

use super::{LossSaved, Op, Tape, VarId};
use crate::tensor::{Element, LabelMap, PixelMask, Tensor4};
use crate::{Error, Result};

fn check_pixel_frame(
    value_shape: [usize; 4],
    target: &LabelMap,
    mask: Option<&PixelMask>,
) -> Result<()> {
    let [b, _, h, w] = value_shape;
    if target.shape() != [b, h, w] {
        return Err(Error::dim(format!(
            "target shape {:?} does not match ({b}, {h}, {w})",
            target.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != [b, h, w] {
            return Err(Error::dim(format!(
                "mask shape {:?} does not match ({b}, {h}, {w})",
                m.shape()
            )));
        }
    }
    Ok(())
}

#[inline]
fn included(target: &LabelMap, mask: Option<&PixelMask>, pix: usize) -> bool {
    target.data()[pix] >= 0 && mask.map_or(true, |m| m.data()[pix])
}

fn count_included(target: &LabelMap, mask: Option<&PixelMask>) -> usize {
    (0..target.data().len())
        .filter(|&p| included(target, mask, p))
        .count()
}

fn check_classes(target: &LabelMap, classes: usize) -> Result<()> {
    if let Some(max) = target.max_class() {
        if max as usize >= classes {
            return Err(Error::dim(format!(
                "target contains class {max} but the model has {classes} output channels"
            )));
        }
    }
    Ok(())
}

/// Stable per-pixel softmax of a `(b, c, h, w)` logits buffer.
fn softmax_buffer<T: Element>(logits: &Tensor4<T>) -> Vec<T> {
    let [b, c, h, w] = logits.shape();
    let plane = h * w;
    let mut probs = vec![T::zero(); logits.numel()];
    for bi in 0..b {
        for p in 0..plane {
            let mut max = T::neg_infinity();
            for ci in 0..c {
                max = max.max(logits.data()[(bi * c + ci) * plane + p]);
            }
            let mut denom = T::zero();
            for ci in 0..c {
                let e = (logits.data()[(bi * c + ci) * plane + p] - max).exp();
                probs[(bi * c + ci) * plane + p] = e;
                denom = denom + e;
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * plane + p;
                probs[idx] = probs[idx] / denom;
            }
        }
    }
    probs
}

fn finite_scalar<T: Element>(value: T, what: &str) -> Result<T> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(format!("{what} evaluated to {value:?}")))
    }
}

impl<T: Element> Tape<T> {
    /// Mean masked cross entropy of raw logits against integer labels.
    pub fn cross_entropy(
        &mut self,
        logits: VarId,
        target: &LabelMap,
        mask: Option<&PixelMask>,
    ) -> Result<VarId> {
        let v = self.value(logits);
        let [b, c, h, w] = v.shape();
        if c < 2 {
            return Err(Error::config(format!(
                "cross entropy needs at least 2 channels, got {c}"
            )));
        }
        check_pixel_frame(v.shape(), target, mask)?;
        check_classes(target, c)?;
        let n = count_included(target, mask);
        if n == 0 {
            return Err(Error::undefined(
                "cross entropy: every pixel is unlabeled or masked out",
            ));
        }
        let plane = h * w;
        let probs = softmax_buffer(v);
        let mut total = T::zero();
        for bi in 0..b {
            for p in 0..plane {
                let pix = bi * plane + p;
                if !included(target, mask, pix) {
                    continue;
                }
                let t = target.data()[pix] as usize;
                // log p_t computed stably straight from the logits
                let mut max = T::neg_infinity();
                for ci in 0..c {
                    max = max.max(v.data()[(bi * c + ci) * plane + p]);
                }
                let mut lse = T::zero();
                for ci in 0..c {
                    lse = lse + (v.data()[(bi * c + ci) * plane + p] - max).exp();
                }
                let logp = v.data()[(bi * c + t) * plane + p] - max - lse.ln();
                total = total - logp;
            }
        }
        let loss = finite_scalar(total / T::from_f64(n as f64), "cross entropy")?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::CrossEntropy(LossSaved {
                input: logits,
                target: target.clone(),
                mask: mask.cloned(),
                included: n,
                probs,
            }),
            needs,
        ))
    }

    /// Focal loss `-(1 - p_t)^gamma * log p_t`, optionally class-weighted.
    ///
    /// `gamma = 0` with no weights reduces exactly to [`Tape::cross_entropy`].
    pub fn focal_loss(
        &mut self,
        logits: VarId,
        target: &LabelMap,
        mask: Option<&PixelMask>,
        gamma: f64,
        class_weights: Option<&[f64]>,
    ) -> Result<VarId> {
        if gamma < 0.0 {
            return Err(Error::config(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let v = self.value(logits);
        let [b, c, h, w] = v.shape();
        if c < 2 {
            return Err(Error::config(format!(
                "focal loss needs at least 2 channels, got {c}"
            )));
        }
        if let Some(ws) = class_weights {
            if ws.len() != c {
                return Err(Error::dim(format!(
                    "focal class_weights length {} != channels {c}",
                    ws.len()
                )));
            }
        }
        check_pixel_frame(v.shape(), target, mask)?;
        check_classes(target, c)?;
        let n = count_included(target, mask);
        if n == 0 {
            return Err(Error::undefined(
                "focal loss: every pixel is unlabeled or masked out",
            ));
        }
        let plane = h * w;
        let probs = softmax_buffer(v);
        let g = T::from_f64(gamma);
        let mut total = T::zero();
        for bi in 0..b {
            for p in 0..plane {
                let pix = bi * plane + p;
                if !included(target, mask, pix) {
                    continue;
                }
                let t = target.data()[pix] as usize;
                let mut max = T::neg_infinity();
                for ci in 0..c {
                    max = max.max(v.data()[(bi * c + ci) * plane + p]);
                }
                let mut lse = T::zero();
                for ci in 0..c {
                    lse = lse + (v.data()[(bi * c + ci) * plane + p] - max).exp();
                }
                let logp = v.data()[(bi * c + t) * plane + p] - max - lse.ln();
                let pt = probs[(bi * c + t) * plane + p];
                let weight =
                    T::from_f64(class_weights.map_or(1.0, |ws| ws[t]));
                let focus = (T::one() - pt).max(T::zero()).powf(g);
                total = total - weight * focus * logp;
            }
        }
        let loss = finite_scalar(total / T::from_f64(n as f64), "focal loss")?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::Focal {
                saved: LossSaved {
                    input: logits,
                    target: target.clone(),
                    mask: mask.cloned(),
                    included: n,
                    probs,
                },
                gamma,
                class_weights: class_weights.map(|w| w.to_vec()),
            },
            needs,
        ))
    }

    /// Soft Dice loss `1 - mean_c (2*I_c + s) / (P_c + T_c + s)` over
    /// class-probability maps (softmax output).
    pub fn dice_loss(
        &mut self,
        probs: VarId,
        target: &LabelMap,
        mask: Option<&PixelMask>,
        smooth: f64,
    ) -> Result<VarId> {
        if smooth < 0.0 {
            return Err(Error::config(format!("dice smooth must be >= 0, got {smooth}")));
        }
        let v = self.value(probs);
        let [b, c, h, w] = v.shape();
        check_pixel_frame(v.shape(), target, mask)?;
        check_classes(target, c)?;
        let n = count_included(target, mask);
        if n == 0 {
            return Err(Error::undefined(
                "dice loss: every pixel is unlabeled or masked out",
            ));
        }
        let plane = h * w;
        let s = T::from_f64(smooth);
        let mut terms = Vec::with_capacity(c);
        let mut mean_ti = T::zero();
        for ci in 0..c {
            let mut inter = T::zero();
            let mut psum = T::zero();
            let mut tsum = T::zero();
            for bi in 0..b {
                for p in 0..plane {
                    let pix = bi * plane + p;
                    if !included(target, mask, pix) {
                        continue;
                    }
                    let pv = v.data()[(bi * c + ci) * plane + p];
                    let tv = if target.data()[pix] as usize == ci {
                        T::one()
                    } else {
                        T::zero()
                    };
                    inter = inter + pv * tv;
                    psum = psum + pv;
                    tsum = tsum + tv;
                }
            }
            let two = T::one() + T::one();
            let num = two * inter + s;
            let den = psum + tsum + s;
            if den <= T::zero() {
                return Err(Error::undefined(
                    "dice loss: zero denominator (use smooth > 0)",
                ));
            }
            terms.push((num, den));
            mean_ti = mean_ti + num / den;
        }
        let loss = finite_scalar(T::one() - mean_ti / T::from_f64(c as f64), "dice loss")?;
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::Dice {
                saved: LossSaved {
                    input: probs,
                    target: target.clone(),
                    mask: mask.cloned(),
                    included: n,
                    probs: Vec::new(),
                },
                terms,
            },
            needs,
        ))
    }

    /// Tversky loss with false-positive weight `alpha` and false-negative
    /// weight `beta`. `alpha = beta = 0.5` matches [`Tape::dice_loss`]
    /// with half its smoothing constant.
    pub fn tversky_loss(
        &mut self,
        probs: VarId,
        target: &LabelMap,
        mask: Option<&PixelMask>,
        alpha: f64,
        beta: f64,
        smooth: f64,
    ) -> Result<VarId> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(Error::config(format!(
                "tversky alpha/beta must be >= 0, got {alpha}/{beta}"
            )));
        }
        if smooth < 0.0 {
            return Err(Error::config(format!(
                "tversky smooth must be >= 0, got {smooth}"
            )));
        }
        let v = self.value(probs);
        let [b, c, h, w] = v.shape();
        check_pixel_frame(v.shape(), target, mask)?;
        check_classes(target, c)?;
        let n = count_included(target, mask);
        if n == 0 {
            return Err(Error::undefined(
                "tversky loss: every pixel is unlabeled or masked out",
            ));
        }
        let plane = h * w;
        let s = T::from_f64(smooth);
        let (a, bt) = (T::from_f64(alpha), T::from_f64(beta));
        let mut terms = Vec::with_capacity(c);
        let mut mean_ti = T::zero();
        for ci in 0..c {
            let mut inter = T::zero();
            let mut fp = T::zero();
            let mut fnv = T::zero();
            for bi in 0..b {
                for p in 0..plane {
                    let pix = bi * plane + p;
                    if !included(target, mask, pix) {
                        continue;
                    }
                    let pv = v.data()[(bi * c + ci) * plane + p];
                    let tv = if target.data()[pix] as usize == ci {
                        T::one()
                    } else {
                        T::zero()
                    };
                    inter = inter + pv * tv;
                    fp = fp + pv * (T::one() - tv);
                    fnv = fnv + (T::one() - pv) * tv;
                }
            }
            let num = inter + s;
            let den = inter + a * fp + bt * fnv + s;
            if den <= T::zero() {
                return Err(Error::undefined(
                    "tversky loss: zero denominator (use smooth > 0)",
                ));
            }
            terms.push((num, den));
            mean_ti = mean_ti + num / den;
        }
        let loss = finite_scalar(T::one() - mean_ti / T::from_f64(c as f64), "tversky loss")?;
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::Tversky {
                saved: LossSaved {
                    input: probs,
                    target: target.clone(),
                    mask: mask.cloned(),
                    included: n,
                    probs: Vec::new(),
                },
                alpha,
                beta,
                terms,
            },
            needs,
        ))
    }

    /// Mean squared error against a same-shape target, with an optional
    /// pixel mask replicated over channels.
    pub fn mse_loss(
        &mut self,
        pred: VarId,
        target: &Tensor4<T>,
        mask: Option<&PixelMask>,
    ) -> Result<VarId> {
        let v = self.value(pred);
        let [b, c, h, w] = v.shape();
        if target.shape() != v.shape() {
            return Err(Error::dim(format!(
                "mse target shape {:?} != prediction shape {:?}",
                target.shape(),
                v.shape()
            )));
        }
        if let Some(m) = mask {
            if m.shape() != [b, h, w] {
                return Err(Error::dim(format!(
                    "mse mask shape {:?} does not match ({b}, {h}, {w})",
                    m.shape()
                )));
            }
        }
        let plane = h * w;
        let mut total = T::zero();
        let mut n = 0usize;
        for bi in 0..b {
            for p in 0..plane {
                if let Some(m) = mask {
                    if !m.data()[bi * plane + p] {
                        continue;
                    }
                }
                n += c;
                for ci in 0..c {
                    let idx = (bi * c + ci) * plane + p;
                    let d = v.data()[idx] - target.data()[idx];
                    total = total + d * d;
                }
            }
        }
        if n == 0 {
            return Err(Error::undefined("mse: every pixel is masked out"));
        }
        let loss = finite_scalar(total / T::from_f64(n as f64), "mse")?;
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor4::scalar(loss),
            Op::Mse {
                x: pred,
                target: target.clone(),
                mask: mask.cloned(),
                included: n,
            },
            needs,
        ))
    }
}

pub(crate) fn cross_entropy_backward<T: Element>(saved: &LossSaved<T>, g: T) -> Tensor4<T> {
    let [b, h, w] = saved.target.shape();
    let plane = h * w;
    let c = saved.probs.len() / (b * plane);
    let scale = g / T::from_f64(saved.included as f64);
    let mut dx = Tensor4::zeros([b, c, h, w]);
    for bi in 0..b {
        for p in 0..plane {
            let pix = bi * plane + p;
            if !included(&saved.target, saved.mask.as_ref(), pix) {
                continue;
            }
            let t = saved.target.data()[pix] as usize;
            for ci in 0..c {
                let idx = (bi * c + ci) * plane + p;
                let delta = if ci == t { T::one() } else { T::zero() };
                dx.data_mut()[idx] = scale * (saved.probs[idx] - delta);
            }
        }
    }
    dx
}

pub(crate) fn focal_backward<T: Element>(
    saved: &LossSaved<T>,
    gamma: f64,
    class_weights: Option<&[f64]>,
    g: T,
) -> Tensor4<T> {
    let [b, h, w] = saved.target.shape();
    let plane = h * w;
    let c = saved.probs.len() / (b * plane);
    let scale = g / T::from_f64(saved.included as f64);
    let gm = T::from_f64(gamma);
    let mut dx = Tensor4::zeros([b, c, h, w]);
    for bi in 0..b {
        for p in 0..plane {
            let pix = bi * plane + p;
            if !included(&saved.target, saved.mask.as_ref(), pix) {
                continue;
            }
            let t = saved.target.data()[pix] as usize;
            let pt = saved.probs[(bi * c + t) * plane + p];
            let weight = T::from_f64(class_weights.map_or(1.0, |ws| ws[t]));
            let one_minus = T::one() - pt;
            // dL/dp_t, with the gamma > 0 saturation limit handled explicitly
            let dl_dpt = if gamma == 0.0 {
                -weight / pt.max(T::min_positive_value())
            } else if one_minus <= T::zero() {
                T::zero()
            } else {
                let logp = pt.max(T::min_positive_value()).ln();
                weight * (gm * one_minus.powf(gm - T::one()) * logp - one_minus.powf(gm) / pt.max(T::min_positive_value()))
            };
            for ci in 0..c {
                let idx = (bi * c + ci) * plane + p;
                let delta = if ci == t { T::one() } else { T::zero() };
                let dpt_dz = pt * (delta - saved.probs[idx]);
                dx.data_mut()[idx] = scale * dl_dpt * dpt_dz;
            }
        }
    }
    dx
}

pub(crate) fn dice_backward<T: Element>(
    saved: &LossSaved<T>,
    terms: &[(T, T)],
    g: T,
) -> Tensor4<T> {
    let [b, h, w] = saved.target.shape();
    let plane = h * w;
    let c = terms.len();
    let scale = g / T::from_f64(c as f64);
    let two = T::one() + T::one();
    let mut dx = Tensor4::zeros([b, c, h, w]);
    for (ci, &(num, den)) in terms.iter().enumerate() {
        let den2 = den * den;
        for bi in 0..b {
            for p in 0..plane {
                let pix = bi * plane + p;
                if !included(&saved.target, saved.mask.as_ref(), pix) {
                    continue;
                }
                let tv = if saved.target.data()[pix] as usize == ci {
                    T::one()
                } else {
                    T::zero()
                };
                // d(1 - mean TI)/dp = -(2t*den - num) / (C * den^2)
                let dti = (two * tv * den - num) / den2;
                dx.data_mut()[(bi * c + ci) * plane + p] = -scale * dti;
            }
        }
    }
    dx
}

pub(crate) fn tversky_backward<T: Element>(
    saved: &LossSaved<T>,
    alpha: f64,
    beta: f64,
    terms: &[(T, T)],
    g: T,
) -> Tensor4<T> {
    let [b, h, w] = saved.target.shape();
    let plane = h * w;
    let c = terms.len();
    let scale = g / T::from_f64(c as f64);
    let (a, bt) = (T::from_f64(alpha), T::from_f64(beta));
    let mut dx = Tensor4::zeros([b, c, h, w]);
    for (ci, &(num, den)) in terms.iter().enumerate() {
        let den2 = den * den;
        for bi in 0..b {
            for p in 0..plane {
                let pix = bi * plane + p;
                if !included(&saved.target, saved.mask.as_ref(), pix) {
                    continue;
                }
                let tv = if saved.target.data()[pix] as usize == ci {
                    T::one()
                } else {
                    T::zero()
                };
                let dden = tv + a * (T::one() - tv) - bt * tv;
                let dti = (tv * den - num * dden) / den2;
                dx.data_mut()[(bi * c + ci) * plane + p] = -scale * dti;
            }
        }
    }
    dx
}

pub(crate) fn mse_backward<T: Element>(
    pred: &Tensor4<T>,
    target: &Tensor4<T>,
    mask: Option<&PixelMask>,
    included: usize,
    g: T,
) -> Tensor4<T> {
    let [b, c, h, w] = pred.shape();
    let plane = h * w;
    let two = T::one() + T::one();
    let scale = two * g / T::from_f64(included as f64);
    let mut dx = Tensor4::zeros(pred.shape());
    for bi in 0..b {
        for p in 0..plane {
            if let Some(m) = mask {
                if !m.data()[bi * plane + p] {
                    continue;
                }
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * plane + p;
                dx.data_mut()[idx] = scale * (pred.data()[idx] - target.data()[idx]);
            }
        }
    }
    dx
}
