use crate::error::{dim_err, Result, TensorError};
use crate::ops::shape::split_axis;
use crate::tensor::Tensor;

impl Tensor {
    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return dim_err("softmax", format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let src = self.data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| (o * ext + e) * inner + i;
                let max = (0..ext).map(|e| src[at(e)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for e in 0..ext {
                    let v = (src[at(e)] - max).exp();
                    out[at(e)] = v;
                    total += v;
                }
                for e in 0..ext {
                    out[at(e)] /= total;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(self.shape().to_vec(), out, vec![self.clone()], move |y, g| {
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |e: usize| (o * ext + e) * inner + i;
                    let dot: f64 = (0..ext).map(|e| g[at(e)] * y[at(e)]).sum();
                    for e in 0..ext {
                        gx[at(e)] = y[at(e)] * (g[at(e)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `B×N` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let [batch, classes] = *self.shape() else {
            return dim_err("cross_entropy", format!("logits must be B×N, got {:?}", self.shape()));
        };
        if labels.len() != batch {
            return dim_err("cross_entropy", format!("{} labels for batch {batch}", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                bound: classes,
            });
        }
        let src = self.data();
        if src.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; batch * classes];
        let mut loss = 0.0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &src[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for (p, v) in probs[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        drop(src);
        let labels = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![loss / batch as f64],
            vec![self.clone()],
            move |_, g| {
                let scale = g[0] / batch as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (b, &label) in labels.iter().enumerate() {
                    gx[b * classes + label] -= scale;
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Spatial mean per channel: `C×H×W → 1×C`, or `B×C×H×W → B×C`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        match self.rank() {
            3 => {
                let c = self.shape()[0];
                let hw = self.shape()[1] * self.shape()[2];
                self.reshape(&[1, c, hw])?.mean_axis(2)?.reshape(&[1, c])
            }
            4 => {
                let (b, c) = (self.shape()[0], self.shape()[1]);
                let hw = self.shape()[2] * self.shape()[3];
                self.reshape(&[b, c, hw])?.mean_axis(2)
            }
            r => dim_err("global_avg_pool", format!("expected rank 3 or 4, got {r}")),
        }
    }
}
