//! Batch normalization with train/eval modes.

use alloc::vec::Vec;
use alloc::{format, vec};

use super::{Op, Tape, VarId};
use crate::tensor::{Element, Tensor4};
use crate::{Error, Result};

/// Whether batch statistics (train) or running statistics (eval) normalize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

pub(crate) struct BnSaved<T> {
    /// Per-channel mean actually used for normalization.
    pub mean: Vec<T>,
    /// Per-channel `1 / sqrt(var + eps)` actually used.
    pub inv_std: Vec<T>,
    pub train: bool,
    /// Unbiased per-channel batch variance (train mode), for running-stat updates.
    pub batch_var_unbiased: Vec<T>,
}

impl<T: Element> Tape<T> {
    /// Per-channel batch normalization.
    ///
    /// `gamma`/`beta` are `(1, c, 1, 1)` learnable tensors; `running_mean`
    /// and `running_var` are plain per-channel buffers consulted in eval
    /// mode. In train mode the computed batch statistics are retrievable
    /// via [`Tape::bn_batch_stats`] so the caller can blend them into its
    /// running buffers.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: f64,
    ) -> Result<VarId> {
        let v = self.value(x);
        let [b, c, h, w] = v.shape();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [1, c, 1, 1] {
                return Err(Error::dim(format!(
                    "batchnorm {name} shape {:?}, expected (1, {c}, 1, 1)",
                    self.value(id).shape()
                )));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(format!(
                "batchnorm running stats length {}/{} != channels {c}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let n = b * h * w;
        let eps_t = T::from_f64(eps);
        let plane = h * w;

        let (mean, inv_std, batch_var_unbiased) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::config(
                        "batchnorm in train mode needs more than one value per channel",
                    ));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut sum = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        sum = sum + v.data()[base..base + plane].iter().copied().sum();
                    }
                    let m = sum / T::from_f64(n as f64);
                    let mut sq = T::zero();
                    for bi in 0..b {
                        let base = (bi * c + ci) * plane;
                        for &val in &v.data()[base..base + plane] {
                            let d = val - m;
                            sq = sq + d * d;
                        }
                    }
                    mean[ci] = m;
                    var[ci] = sq / T::from_f64(n as f64);
                }
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&vv| T::one() / (vv + eps_t).sqrt())
                    .collect();
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&vv| vv * T::from_f64(n as f64 / (n as f64 - 1.0)))
                    .collect();
                (mean, inv_std, unbiased)
            }
            BnMode::Eval => {
                let inv_std: Vec<T> = running_var
                    .iter()
                    .map(|&vv| T::one() / (vv + eps_t).sqrt())
                    .collect();
                (running_mean.to_vec(), inv_std, Vec::new())
            }
        };

        let mut data = vec![T::zero(); v.numel()];
        {
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let (m, is) = (mean[ci], inv_std[ci]);
                    let (gc, bc) = (g[ci], bt[ci]);
                    for i in 0..plane {
                        data[base + i] = (v.data()[base + i] - m) * is * gc + bc;
                    }
                }
            }
        }
        let out = Tensor4::new([b, c, h, w], data)?;
        if !out.all_finite() {
            return Err(Error::numeric("batchnorm produced non-finite values"));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved: BnSaved {
                    mean,
                    inv_std,
                    train: matches!(mode, BnMode::Train),
                    batch_var_unbiased,
                },
            },
            needs,
        ))
    }

    /// Batch statistics `(mean, unbiased_var)` of a train-mode batchnorm op.
    pub fn bn_batch_stats(&self, id: VarId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { saved, .. } if saved.train => {
                Some((&saved.mean, &saved.batch_var_unbiased))
            }
            _ => None,
        }
    }
}

pub(crate) fn batchnorm_backward<T: Element>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    dy: &Tensor4<T>,
    saved: &BnSaved<T>,
    need_dx: bool,
) -> (Option<Tensor4<T>>, Tensor4<T>, Tensor4<T>) {
    let [b, c, h, w] = x.shape();
    let plane = h * w;
    let n = T::from_f64((b * plane) as f64);

    let mut dgamma = Tensor4::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor4::zeros([1, c, 1, 1]);
    let mut dx = need_dx.then(|| Tensor4::zeros(x.shape()));

    for ci in 0..c {
        let m = saved.mean[ci];
        let is = saved.inv_std[ci];
        let g = gamma.data()[ci];

        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * plane;
            for i in 0..plane {
                let xhat = (x.data()[base + i] - m) * is;
                let d = dy.data()[base + i];
                sum_dy = sum_dy + d;
                sum_dy_xhat = sum_dy_xhat + d * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;

        if let Some(dx) = dx.as_mut() {
            if saved.train {
                // dx = gamma*inv_std/N * (N*dy - sum_dy - xhat*sum_dy_xhat)
                let scale = g * is / n;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        let xhat = (x.data()[base + i] - m) * is;
                        let d = dy.data()[base + i];
                        dx.data_mut()[base + i] =
                            scale * (n * d - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            } else {
                // Running stats are constants: dx = dy * gamma * inv_std.
                let scale = g * is;
                for bi in 0..b {
                    let base = (bi * c + ci) * plane;
                    for i in 0..plane {
                        dx.data_mut()[base + i] = dy.data()[base + i] * scale;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
