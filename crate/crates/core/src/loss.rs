//! Loss configuration and non-differentiable evaluation metrics.
//!
//! The differentiable objectives live on the tape
//! ([`Tape::cross_entropy`] and friends); this module holds the
//! serializable loss selector the training engine dispatches on, plus
//! hard-prediction metrics: per-class/macro F1 and Pearson correlation.

use alloc::vec::Vec;
use alloc::{format, vec};

#[allow(unused_imports)]
use num_traits::Float as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::tensor::{Element, LabelMap, PixelMask, Tensor4};
use crate::{Error, Result};

fn default_smooth() -> f64 {
    1.0
}

/// Serializable objective selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossCfg {
    CrossEntropy,
    Dice {
        #[serde(default = "default_smooth")]
        smooth: f64,
    },
    Focal {
        gamma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        class_weights: Option<Vec<f64>>,
    },
    Tversky {
        alpha: f64,
        beta: f64,
        #[serde(default = "default_smooth")]
        smooth: f64,
    },
    /// Mean squared error against a same-shape target (reconstruction).
    Mse,
}

impl LossCfg {
    /// Whether this objective compares against integer class labels
    /// (as opposed to a regression target).
    pub fn is_classification(&self) -> bool {
        !matches!(self, LossCfg::Mse)
    }

    /// Records the objective on the tape over raw network output.
    pub fn apply_class_loss<T: Element>(
        &self,
        tape: &mut Tape<T>,
        logits: VarId,
        target: &LabelMap,
        mask: Option<&PixelMask>,
    ) -> Result<VarId> {
        match self {
            LossCfg::CrossEntropy => tape.cross_entropy(logits, target, mask),
            LossCfg::Focal {
                gamma,
                class_weights,
            } => tape.focal_loss(logits, target, mask, *gamma, class_weights.as_deref()),
            LossCfg::Dice { smooth } => {
                let probs = tape.softmax_channels(logits);
                tape.dice_loss(probs, target, mask, *smooth)
            }
            LossCfg::Tversky {
                alpha,
                beta,
                smooth,
            } => {
                let probs = tape.softmax_channels(logits);
                tape.tversky_loss(probs, target, mask, *alpha, *beta, *smooth)
            }
            LossCfg::Mse => Err(Error::usage(
                "mse is a regression objective; it takes a tensor target",
            )),
        }
    }
}

/// Per-class and macro F1 of hard predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    pub macro_f1: f64,
}

/// `F1_c = 2 TP / (2 TP + FP + FN)` per class over included pixels;
/// classes absent from both prediction and target score 1.0. The macro
/// score is the unweighted class mean.
pub fn f1_score(
    pred: &LabelMap,
    target: &LabelMap,
    mask: Option<&PixelMask>,
    num_classes: usize,
) -> Result<F1Scores> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "f1: prediction shape {:?} != target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != target.shape() {
            return Err(Error::dim("f1: mask shape mismatch"));
        }
    }
    if num_classes == 0 {
        return Err(Error::config("f1: num_classes must be >= 1"));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fnc = vec![0usize; num_classes];
    for i in 0..target.data().len() {
        let t = target.data()[i];
        if t < 0 || mask.map_or(false, |m| !m.data()[i]) {
            continue;
        }
        let p = pred.data()[i];
        if p < 0 {
            continue;
        }
        let (t, p) = (t as usize, p as usize);
        if t >= num_classes || p >= num_classes {
            return Err(Error::dim(format!(
                "f1: class {} out of range 0..{num_classes}",
                t.max(p)
            )));
        }
        if p == t {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fnc[t] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fnc[c];
            if denom == 0 {
                1.0 // class absent everywhere
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / num_classes as f64;
    Ok(F1Scores {
        per_class,
        macro_f1,
    })
}

/// Sample Pearson correlation coefficient of two equal-length sequences.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!(
            "pearson: lengths {} and {} differ",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::undefined("pearson needs at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::undefined(
            "pearson undefined: an input has zero variance",
        ));
    }
    Ok(sxy / num_traits::Float::sqrt(sxx * syy))
}

/// Pearson correlation between two tensors, flattened.
pub fn pearson_tensors<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<f64> {
    let xs: Vec<f64> = a.iter().map(|&v| v.to_f64()).collect();
    let ys: Vec<f64> = b.iter().map(|&v| v.to_f64()).collect();
    pearson(&xs, &ys)
}

/// Hard per-pixel argmax over the channel axis.
pub fn argmax_labels<T: Element>(probs: &Tensor4<T>) -> LabelMap {
    let [b, c, h, w] = probs.shape();
    let plane = h * w;
    let mut data = Vec::with_capacity(b * plane);
    for bi in 0..b {
        for p in 0..plane {
            let mut best = T::neg_infinity();
            let mut best_c = 0i32;
            for ci in 0..c {
                let v = probs.data()[(bi * c + ci) * plane + p];
                if v > best {
                    best = v;
                    best_c = ci as i32;
                }
            }
            data.push(best_c);
        }
    }
    LabelMap::new([b, h, w], data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_perfect_and_inverted() {
        let t = LabelMap::new([1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let perfect = f1_score(&t, &t, None, 2).unwrap();
        assert_eq!(perfect.per_class, vec![1.0, 1.0]);
        assert_eq!(perfect.macro_f1, 1.0);

        let inverted = LabelMap::new([1, 2, 2], vec![1, 0, 0, 1]).unwrap();
        let scores = f1_score(&inverted, &t, None, 2).unwrap();
        assert_eq!(scores.per_class, vec![0.0, 0.0]);
    }

    #[test]
    fn f1_formula_case() {
        // class 1: TP=8, FP=2, FN=4 -> F1 = 16/22
        let mut target = vec![1i32; 12]; // 8 TP + 4 FN
        let mut pred = vec![1i32; 8];
        pred.extend([0, 0, 0, 0]); // 4 misses
        target.extend([0, 0]); // 2 FP sites
        pred.extend([1, 1]);
        let t = LabelMap::new([1, 1, 14], target).unwrap();
        let p = LabelMap::new([1, 1, 14], pred).unwrap();
        let scores = f1_score(&p, &t, None, 2).unwrap();
        assert!((scores.per_class[1] - 16.0 / 22.0).abs() < 1e-12);
    }

    #[test]
    fn f1_absent_class_scores_one() {
        let t = LabelMap::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
        let scores = f1_score(&t, &t, None, 5).unwrap();
        assert_eq!(scores.per_class[3], 1.0);
        assert_eq!(scores.macro_f1, 1.0);
    }

    #[test]
    fn pearson_affine_and_negated() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let z: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &z).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pearson_fixed_dataset_matches_hand_computation() {
        // means 3 and 3.2; sxy = 10, sxx = 10, syy = 14.8
        // r = 10 / sqrt(148) = 0.8219949...
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 6.0];
        let want = 10.0 / 148.0f64.sqrt();
        assert!((pearson(&x, &y).unwrap() - want).abs() < 1e-15);
        assert!((pearson(&x, &y).unwrap() - 0.8219949).abs() < 1e-6);
    }

    #[test]
    fn pearson_zero_variance_is_undefined() {
        let x = [1.0, 1.0, 1.0];
        let y = [1.0, 2.0, 3.0];
        assert!(matches!(
            pearson(&x, &y),
            Err(crate::Error::Undefined(_))
        ));
    }

    #[test]
    fn argmax_picks_largest_channel() {
        // channel-major layout: c0 = (0.2, 0.8), c1 = (0.3, 0.1), c2 = (0.5, 0.0)
        let probs = Tensor4::<f32>::new(
            [1, 3, 1, 2],
            vec![0.2, 0.8, 0.3, 0.1, 0.5, 0.0],
        )
        .unwrap();
        let labels = argmax_labels(&probs);
        assert_eq!(labels.data(), &[2, 0]);
    }

    #[test]
    fn loss_cfg_round_trips_and_rejects_unknown_fields() {
        let cfg = LossCfg::Tversky {
            alpha: 0.3,
            beta: 0.7,
            smooth: 1.0,
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: LossCfg = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        let bad = r#"{"type":"dice","smooth":1.0,"oops":2}"#;
        assert!(serde_json::from_str::<LossCfg>(bad).is_err());
    }
}
