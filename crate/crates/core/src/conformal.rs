//! Split-conformal calibrated prediction sets.
//!
//! Calibration scores each labeled pixel with `s = 1 - p(true class)`
//! and takes the `ceil((n+1)(1-alpha))/n` empirical quantile as the
//! threshold `qhat`; prediction sets then contain every class whose
//! score is within the threshold. Under exchangeability the sets cover
//! the true class with probability at least `1 - alpha`.

use alloc::vec::Vec;
use alloc::{format, vec};

#[allow(unused_imports)]
use num_traits::Float as _;

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, LabelMap, Tensor4};
use crate::{Error, Result};

/// Calibrated threshold plus the miscoverage level it targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub qhat: f64,
    pub n_cal: usize,
}

/// Per-pixel label sets packed as one bit per class, plus summary stats.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSets {
    /// Shape of the pixel frame `(batch, height, width)`.
    pub shape: [usize; 3],
    pub num_classes: usize,
    /// One byte per pixel; bit `c` set means class `c` is in the set.
    pub bits: Vec<u8>,
    pub mean_set_size: f64,
    pub empty_count: usize,
}

impl PredictionSets {
    pub fn contains(&self, pixel: usize, class: usize) -> bool {
        self.bits[pixel] & (1 << class) != 0
    }

    /// Fraction of labeled pixels whose true class lies in the set.
    pub fn coverage(&self, labels: &LabelMap) -> Result<f64> {
        if labels.shape() != self.shape {
            return Err(Error::dim("coverage: label shape mismatch"));
        }
        let mut hit = 0usize;
        let mut total = 0usize;
        for (i, &l) in labels.data().iter().enumerate() {
            if l < 0 {
                continue;
            }
            total += 1;
            if self.contains(i, l as usize) {
                hit += 1;
            }
        }
        if total == 0 {
            return Err(Error::undefined("coverage: no labeled pixels"));
        }
        Ok(hit as f64 / total as f64)
    }
}

fn check_probs_frame<T: Element>(probs: &Tensor4<T>, labels: &LabelMap) -> Result<()> {
    let [b, c, h, w] = probs.shape();
    if labels.shape() != [b, h, w] {
        return Err(Error::dim(format!(
            "labels shape {:?} does not match probability maps ({b}, {h}, {w})",
            labels.shape()
        )));
    }
    if let Some(max) = labels.max_class() {
        if max as usize >= c {
            return Err(Error::dim(format!(
                "labels contain class {max} but maps have {c} channels"
            )));
        }
    }
    Ok(())
}

/// Split-conformal calibration over every labeled pixel.
pub fn conformal_calibrate<T: Element>(
    probs: &Tensor4<T>,
    labels: &LabelMap,
    alpha: f64,
) -> Result<ConformalCalibration> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    check_probs_frame(probs, labels)?;
    let [_, c, h, w] = probs.shape();
    let plane = h * w;
    let mut scores: Vec<f64> = Vec::new();
    for (i, &l) in labels.data().iter().enumerate() {
        if l < 0 {
            continue;
        }
        let (bi, p) = (i / plane, i % plane);
        let pt = probs.data()[(bi * c + l as usize) * plane + p].to_f64();
        scores.push(1.0 - pt);
    }
    let n = scores.len();
    // smallest n for which the quantile rank ceil((n+1)(1-alpha)) is
    // attainable, i.e. n >= (1 - alpha)/alpha
    let mut minimum = (((1.0 - alpha) / alpha) - 1e-9).ceil().max(1.0) as usize;
    while ((minimum as f64 + 1.0) * (1.0 - alpha)).ceil() as usize > minimum {
        minimum += 1;
    }
    if n < minimum {
        return Err(Error::config(format!(
            "conformal calibration needs at least {minimum} labeled pixels at alpha = {alpha}, got {n}"
        )));
    }
    // qhat = the ceil((n+1)(1-alpha))-th smallest score (1-indexed)
    let rank = ((n as f64 + 1.0) * (1.0 - alpha)).ceil() as usize;
    let qhat = if rank > n {
        1.0
    } else {
        let mut sorted = scores;
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
        sorted[rank - 1]
    };
    Ok(ConformalCalibration {
        alpha,
        qhat,
        n_cal: n,
    })
}

/// Builds the per-pixel label sets `{c : 1 - p(c) <= qhat}`.
pub fn conformal_predict<T: Element>(
    probs: &Tensor4<T>,
    cal: &ConformalCalibration,
) -> Result<PredictionSets> {
    let [b, c, h, w] = probs.shape();
    if c > 8 {
        return Err(Error::config(format!(
            "prediction sets pack one bit per class into a byte; {c} classes exceed 8"
        )));
    }
    let plane = h * w;
    let mut bits = vec![0u8; b * plane];
    let mut size_sum = 0usize;
    let mut empty = 0usize;
    for bi in 0..b {
        for p in 0..plane {
            let mut mask = 0u8;
            let mut size = 0usize;
            for ci in 0..c {
                let score = 1.0 - probs.data()[(bi * c + ci) * plane + p].to_f64();
                if score <= cal.qhat {
                    mask |= 1 << ci;
                    size += 1;
                }
            }
            bits[bi * plane + p] = mask;
            size_sum += size;
            if size == 0 {
                empty += 1;
            }
        }
    }
    let total = b * plane;
    Ok(PredictionSets {
        shape: [b, h, w],
        num_classes: c,
        bits,
        mean_set_size: size_sum as f64 / total as f64,
        empty_count: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn softmax2(z0: f64, z1: f64) -> (f64, f64) {
        let m = z0.max(z1);
        let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
        (e0 / (e0 + e1), e1 / (e0 + e1))
    }

    /// Noisy two-class model over `n` pixels: labels are balanced, logits
    /// are the one-hot signal plus Gaussian noise.
    fn noisy_model(n: usize, signal: f64, sigma: f64, seed: u64) -> (Tensor4<f64>, LabelMap) {
        let mut rng = StreamRng::new(seed, "conformal-sim");
        let mut probs = vec![0.0f64; 2 * n];
        let mut labels = vec![0i32; n];
        for i in 0..n {
            let t = (rng.below(2)) as i32;
            labels[i] = t;
            let z0 = if t == 0 { signal } else { 0.0 } + sigma * rng.normal();
            let z1 = if t == 1 { signal } else { 0.0 } + sigma * rng.normal();
            let (p0, p1) = softmax2(z0, z1);
            probs[i] = p0;
            probs[n + i] = p1;
        }
        (
            Tensor4::new([1, 2, 1, n], probs).unwrap(),
            LabelMap::new([1, 1, n], labels).unwrap(),
        )
    }

    #[test]
    fn perfect_model_calibrates_to_zero() {
        let n = 64;
        let mut probs = vec![0.0f64; 2 * n];
        let mut labels = vec![0i32; n];
        for i in 0..n {
            let t = (i % 2) as i32;
            labels[i] = t;
            probs[t as usize * n + i] = 1.0;
        }
        let probs = Tensor4::new([1, 2, 1, n], probs).unwrap();
        let labels = LabelMap::new([1, 1, n], labels).unwrap();
        let cal = conformal_calibrate(&probs, &labels, 0.1).unwrap();
        assert_eq!(cal.qhat, 0.0);
        assert_eq!(cal.n_cal, n);
    }

    #[test]
    fn quantile_rank_matches_hand_computation() {
        // n=9 scores 0.1..0.9, alpha=0.1: rank ceil(10*0.9)=9 -> 0.9
        let n = 9;
        let mut probs = vec![0.0f64; 2 * n];
        let labels = LabelMap::new([1, 1, n], vec![0; n]).unwrap();
        for i in 0..n {
            probs[i] = 1.0 - (0.1 * (i + 1) as f64); // p_true, score = 0.1(i+1)
            probs[n + i] = 1.0 - probs[i];
        }
        let probs = Tensor4::new([1, 2, 1, n], probs).unwrap();
        let cal = conformal_calibrate(&probs, &labels, 0.1).unwrap();
        assert!((cal.qhat - 0.9).abs() < 1e-12);
    }

    #[test]
    fn too_few_calibration_pixels_is_a_config_error() {
        let (probs, labels) = noisy_model(5, 2.0, 0.5, 1);
        let err = conformal_calibrate(&probs, &labels, 0.1).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("at least 9"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn qhat_one_gives_full_sets_and_qhat_zero_gives_argmax_singletons() {
        let (probs, _) = noisy_model(50, 2.0, 0.5, 2);
        let full = conformal_predict(
            &probs,
            &ConformalCalibration {
                alpha: 0.1,
                qhat: 1.0,
                n_cal: 50,
            },
        )
        .unwrap();
        assert_eq!(full.mean_set_size, 2.0);
        assert_eq!(full.empty_count, 0);

        // a perfectly confident model with qhat = 0 keeps exactly p = 1 classes
        let n = 8;
        let mut p = vec![0.0f64; 2 * n];
        for i in 0..n {
            p[i] = 1.0;
        }
        let confident = Tensor4::new([1, 2, 1, n], p).unwrap();
        let sets = conformal_predict(
            &confident,
            &ConformalCalibration {
                alpha: 0.1,
                qhat: 0.0,
                n_cal: 50,
            },
        )
        .unwrap();
        assert_eq!(sets.mean_set_size, 1.0);
        for i in 0..n {
            assert!(sets.contains(i, 0));
            assert!(!sets.contains(i, 1));
        }
    }

    #[test]
    fn coverage_holds_on_exchangeable_splits() {
        let alpha = 0.1;
        for trial in 0..5 {
            let (cal_probs, cal_labels) = noisy_model(2000, 1.5, 1.0, 100 + trial);
            let (test_probs, test_labels) = noisy_model(2000, 1.5, 1.0, 200 + trial);
            let cal = conformal_calibrate(&cal_probs, &cal_labels, alpha).unwrap();
            let sets = conformal_predict(&test_probs, &cal).unwrap();
            let cov = sets.coverage(&test_labels).unwrap();
            assert!(cov >= 1.0 - alpha - 0.02, "trial {trial}: coverage {cov}");
        }
    }

    #[test]
    fn set_size_shrinks_as_confidence_grows() {
        let alpha = 0.1;
        // common random numbers across the sweep: only the signal varies
        let mut sizes = Vec::new();
        for signal in [0.5, 1.5, 3.0, 6.0] {
            let (cal_probs, cal_labels) = noisy_model(2000, signal, 1.0, 300);
            let (test_probs, _) = noisy_model(2000, signal, 1.0, 400);
            let cal = conformal_calibrate(&cal_probs, &cal_labels, alpha).unwrap();
            let sets = conformal_predict(&test_probs, &cal).unwrap();
            sizes.push(sets.mean_set_size);
        }
        for pair in sizes.windows(2) {
            assert!(pair[1] <= pair[0] + 0.01, "sizes not monotone: {sizes:?}");
        }
    }
}
