use crate::error::{dim_err, Result, TensorError};
use crate::tensor::Tensor;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics owned by a batch-norm layer.
///
/// Stored as plain (non-differentiable) tensors so they can be checkpointed
/// alongside parameters.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

impl Tensor {
    /// Batch normalization of a `B×C×H×W` input over `(B, H, W)` per channel.
    ///
    /// Train mode uses biased batch statistics and folds them into `stats`
    /// (unbiased variance) with momentum 0.1. Eval mode uses `stats` and
    /// leaves them untouched.
    pub fn batch_norm2d(&self, gamma: &Tensor, beta: &Tensor, stats: &RunningStats, mode: Mode) -> Result<Tensor> {
        let [batch, channels, h, w] = *self.shape() else {
            return dim_err("batch_norm2d", format!("input must be B×C×H×W, got {:?}", self.shape()));
        };
        for t in [gamma, beta, &stats.mean, &stats.var] {
            if t.shape() != [channels] {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm2d",
                    lhs: self.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if mode == Mode::Train && batch < 2 {
            return Err(TensorError::Contract(format!(
                "batch_norm2d in train mode needs batch >= 2, got {batch}"
            )));
        }
        let hw = h * w;
        let count = (batch * hw) as f64;
        let xd = self.data();
        let gd = gamma.data().clone();
        let bd = beta.data().clone();
        let idx = move |n: usize, c: usize| (n * channels + c) * hw;

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for n in 0..batch {
                        s += xd[idx(n, c)..idx(n, c) + hw].iter().sum::<f64>();
                    }
                    let m = s / count;
                    let mut v = 0.0;
                    for n in 0..batch {
                        v += xd[idx(n, c)..idx(n, c) + hw].iter().map(|x| (x - m) * (x - m)).sum::<f64>();
                    }
                    mean[c] = m;
                    var[c] = v / count;
                }
                let unbias = count / (count - 1.0);
                let mut rm = stats.mean.data_mut();
                let mut rv = stats.var.data_mut();
                for c in 0..channels {
                    rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                    rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.to_vec(), stats.var.to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for n in 0..batch {
            for c in 0..channels {
                let base = idx(n, c);
                for i in base..base + hw {
                    let nh = (xd[i] - mean[c]) * inv_std[c];
                    xhat[i] = nh;
                    out[i] = gd[c] * nh + bd[c];
                }
            }
        }
        drop(xd);

        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |_, g| {
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; channels];
                let mut gbeta = vec![0.0; channels];
                for c in 0..channels {
                    let (mut sum_g, mut sum_gx) = (0.0, 0.0);
                    for n in 0..batch {
                        let base = idx(n, c);
                        for i in base..base + hw {
                            sum_g += g[i];
                            sum_gx += g[i] * xhat[i];
                        }
                    }
                    ggamma[c] = sum_gx;
                    gbeta[c] = sum_g;
                    let k = gd[c] * inv_std[c];
                    for n in 0..batch {
                        let base = idx(n, c);
                        for i in base..base + hw {
                            gx[i] = match mode {
                                // dx = γ/σ · (dy − mean(dy) − x̂·mean(dy·x̂))
                                Mode::Train => k * (g[i] - sum_g / count - xhat[i] * sum_gx / count),
                                Mode::Eval => k * g[i],
                            };
                        }
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn_input() -> Tensor {
        // Spread large enough that ε/σ² stays below 1e-6.
        let data = (0..2 * 3 * 2 * 2).map(|i| ((i * 37 % 11) as f64) * 30.0 - 100.0).collect();
        Tensor::new(&[2, 3, 2, 2], data).unwrap()
    }

    #[test]
    fn train_output_is_standardized() {
        let x = bn_input();
        let stats = RunningStats::new(3);
        let y = x
            .batch_norm2d(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), &stats, Mode::Train)
            .unwrap();
        let yd = y.to_vec();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| yd[(n * 3 + c) * 4..(n * 3 + c) * 4 + 4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::full(&[2, 2, 3, 3], 4.0);
        let beta = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let stats = RunningStats::new(2);
        let y = x.batch_norm2d(&Tensor::ones(&[2]), &beta, &stats, Mode::Train).unwrap().to_vec();
        assert!(y[..9].iter().all(|&v| v == 0.5));
        assert!(y[9..18].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn running_stats_only_move_in_train() {
        let x = bn_input();
        let stats = RunningStats::new(3);
        let (g, b) = (Tensor::ones(&[3]), Tensor::zeros(&[3]));
        x.batch_norm2d(&g, &b, &stats, Mode::Eval).unwrap();
        assert_eq!(stats.mean.to_vec(), vec![0.0; 3]);
        x.batch_norm2d(&g, &b, &stats, Mode::Train).unwrap();
        assert!(stats.mean.to_vec().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn train_needs_two_samples() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let stats = RunningStats::new(1);
        assert!(x
            .batch_norm2d(&Tensor::ones(&[1]), &Tensor::zeros(&[1]), &stats, Mode::Train)
            .is_err());
    }
}
