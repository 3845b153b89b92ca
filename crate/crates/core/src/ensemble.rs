//! Multi-model prediction aggregation.
//!
//! An ensemble stacks per-model class-probability maps; downstream
//! consumers use the per-pixel mean and the population standard
//! deviation across models, and the conservative keep rule
//! `(mean - std) > tau`.

use alloc::format;
use alloc::vec::Vec;

use crate::tensor::{Element, PixelMask, Tensor4};
use crate::{Error, Result};

/// Per-pixel, per-class mean and population standard deviation across
/// the model axis. A single-model stack yields zero deviation;
/// `single_model` flags it so callers can warn.
pub struct EnsembleStats<T: Element> {
    pub mean: Tensor4<T>,
    pub std: Tensor4<T>,
    pub single_model: bool,
}

pub fn ensemble_stats<T: Element>(stack: &[&Tensor4<T>]) -> Result<EnsembleStats<T>> {
    let first = stack
        .first()
        .ok_or_else(|| Error::usage("ensemble of zero models"))?;
    let shape = first.shape();
    for (i, t) in stack.iter().enumerate() {
        if t.shape() != shape {
            return Err(Error::dim(format!(
                "model {i} prediction shape {:?} != {:?}",
                t.shape(),
                shape
            )));
        }
    }
    let n = T::from_f64(stack.len() as f64);
    let mut mean = Tensor4::zeros(shape);
    for t in stack {
        for (m, &v) in mean.data_mut().iter_mut().zip(t.iter()) {
            *m = *m + v;
        }
    }
    for m in mean.data_mut() {
        *m = *m / n;
    }
    let mut std = Tensor4::zeros(shape);
    for t in stack {
        for ((s, &v), &m) in std.data_mut().iter_mut().zip(t.iter()).zip(mean.iter()) {
            let d = v - m;
            *s = *s + d * d;
        }
    }
    for s in std.data_mut().iter_mut() {
        let v: T = *s / n;
        *s = v.sqrt();
    }
    Ok(EnsembleStats {
        mean,
        std,
        single_model: stack.len() == 1,
    })
}

/// Keeps the pixels of `class` whose mean probability stays above `tau`
/// after subtracting one ensemble standard deviation.
pub fn threshold_minus_std<T: Element>(
    mean: &Tensor4<T>,
    std: &Tensor4<T>,
    tau: f64,
    class: usize,
) -> Result<PixelMask> {
    if mean.shape() != std.shape() {
        return Err(Error::dim(format!(
            "mean shape {:?} != std shape {:?}",
            mean.shape(),
            std.shape()
        )));
    }
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let [b, c, h, w] = mean.shape();
    if class >= c {
        return Err(Error::dim(format!(
            "class {class} out of range for {c} channels"
        )));
    }
    let tau = T::from_f64(tau);
    let plane = h * w;
    let mut data = Vec::with_capacity(b * plane);
    for bi in 0..b {
        let base = (bi * c + class) * plane;
        for p in 0..plane {
            data.push(mean.data()[base + p] - std.data()[base + p] > tau);
        }
    }
    PixelMask::new([b, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn identical_models_have_zero_std() {
        let mut rng = StreamRng::new(1, "ens");
        let a = Tensor4::<f64>::random_uniform([1, 2, 3, 3], 0.0, 1.0, &mut rng);
        let stats = ensemble_stats(&[&a, &a, &a]).unwrap();
        for (m, &v) in stats.mean.iter().zip(a.iter()) {
            assert!((m - v).abs() < 1e-15);
        }
        assert!(stats.std.iter().all(|&s| s.abs() < 1e-12));
        assert!(!stats.single_model);
        assert!(ensemble_stats(&[&a]).unwrap().single_model);
    }

    #[test]
    fn two_model_mean_and_std() {
        let a = Tensor4::<f64>::full([1, 1, 1, 1], 0.4);
        let b = Tensor4::<f64>::full([1, 1, 1, 1], 0.6);
        let stats = ensemble_stats(&[&a, &b]).unwrap();
        assert!((stats.mean.data()[0] - 0.5).abs() < 1e-12);
        assert!((stats.std.data()[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stats_match_loop_oracle_and_ignore_model_order() {
        let mut rng = StreamRng::new(2, "ens-oracle");
        let maps: Vec<Tensor4<f64>> = (0..5)
            .map(|_| Tensor4::random_uniform([2, 3, 4, 4], 0.0, 1.0, &mut rng))
            .collect();
        let refs: Vec<&Tensor4<f64>> = maps.iter().collect();
        let stats = ensemble_stats(&refs).unwrap();
        for i in 0..maps[0].numel() {
            let vals: Vec<f64> = maps.iter().map(|m| m.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / 5.0;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            assert!((stats.mean.data()[i] - mean).abs() < 1e-7);
            assert!((stats.std.data()[i] - var.sqrt()).abs() < 1e-7);
        }
        let permuted: Vec<&Tensor4<f64>> = [4, 2, 0, 1, 3].iter().map(|&i| &maps[i]).collect();
        let stats2 = ensemble_stats(&permuted).unwrap();
        for i in 0..maps[0].numel() {
            assert!((stats.mean.data()[i] - stats2.mean.data()[i]).abs() < 1e-12);
            assert!((stats.std.data()[i] - stats2.std.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn keep_rule_cases() {
        let mean = Tensor4::<f64>::new([1, 1, 1, 2], alloc::vec![0.9, 0.55]).unwrap();
        let std = Tensor4::<f64>::full([1, 1, 1, 2], 0.1);
        let mask = threshold_minus_std(&mean, &std, 0.5, 0).unwrap();
        assert_eq!(mask.data(), &[true, false]); // 0.8 > 0.5, 0.45 <= 0.5
    }

    #[test]
    fn kept_mask_is_subset_of_plain_threshold() {
        let mut rng = StreamRng::new(3, "subset");
        let mean = Tensor4::<f64>::random_uniform([1, 2, 8, 8], 0.0, 1.0, &mut rng);
        let std = Tensor4::<f64>::random_uniform([1, 2, 8, 8], 0.0, 0.3, &mut rng);
        let zero = Tensor4::<f64>::zeros([1, 2, 8, 8]);
        let kept = threshold_minus_std(&mean, &std, 0.5, 1).unwrap();
        let plain = threshold_minus_std(&mean, &zero, 0.5, 1).unwrap();
        for (k, p) in kept.data().iter().zip(plain.data()) {
            assert!(!k | p, "kept pixel missing from plain threshold mask");
        }
    }

    #[test]
    fn keep_rule_is_monotone_in_tau() {
        let mut rng = StreamRng::new(4, "mono");
        let mean = Tensor4::<f64>::random_uniform([1, 1, 8, 8], 0.0, 1.0, &mut rng);
        let std = Tensor4::<f64>::random_uniform([1, 1, 8, 8], 0.0, 0.2, &mut rng);
        let m3 = threshold_minus_std(&mean, &std, 0.3, 0).unwrap();
        let m5 = threshold_minus_std(&mean, &std, 0.5, 0).unwrap();
        let m7 = threshold_minus_std(&mean, &std, 0.7, 0).unwrap();
        assert!(m7.count() <= m5.count() && m5.count() <= m3.count());
        for (hi, lo) in m7.data().iter().zip(m5.data()) {
            assert!(!hi | lo);
        }
        for (hi, lo) in m5.data().iter().zip(m3.data()) {
            assert!(!hi | lo);
        }
    }
}
