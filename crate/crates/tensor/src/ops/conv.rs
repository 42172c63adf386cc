use crate::error::{dim_err, Result, TensorError};
use crate::ops::linalg::{gemm, Layout};
use crate::tensor::Tensor;

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output extent for one spatial axis, flooring like the usual framework
    /// convention. `None` when the kernel does not fit the padded input.
    pub fn out_extent(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }

    fn out_hw(&self) -> (usize, usize) {
        (
            Self::out_extent(self.height, self.kernel, self.stride, self.pad).unwrap(),
            Self::out_extent(self.width, self.kernel, self.stride, self.pad).unwrap(),
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = oh as isize * s + ki as isize - p;
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in line.iter_mut().enumerate() {
                        let iw = ow as isize * s + kj as isize - p;
                        *d = if iw < 0 || iw >= w { 0.0 } else { src[iw as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let (h, w, k, s, p) = (g.height as isize, g.width as isize, g.kernel, g.stride as isize, g.pad as isize);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oh in 0..ho {
                    let ih = oh as isize * s + ki as isize - p;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let line = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..wo {
                        let iw = ow as isize * s + kj as isize - p;
                        if iw >= 0 && iw < w {
                            line[iw as usize] += src[oh * wo + ow];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation (kernel not flipped) plus optional bias.
    ///
    /// `x` is `C_in×H×W` or `B×C_in×H×W`; `weight` is `C_out×C_in×k×k` with
    /// odd `k`; `bias` is `[C_out]`. Output extents floor
    /// `(H + 2·pad − k)/stride + 1`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
        let (batch, unbatched) = match self.rank() {
            3 => (1, true),
            4 => (self.shape()[0], false),
            r => return dim_err("conv2d", format!("input must be rank 3 or 4, got {r}")),
        };
        let xs = &self.shape()[self.rank() - 3..];
        let [c_out, c_in, kh, kw] = *weight.shape() else {
            return dim_err("conv2d", format!("kernel must be rank 4, got {:?}", weight.shape()));
        };
        if c_in != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return dim_err("conv2d", format!("kernel must be square with odd size, got {kh}×{kw}"));
        }
        if stride == 0 {
            return dim_err("conv2d", "stride must be positive");
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: weight.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        }
        let geo = ConvGeometry {
            channels: c_in,
            height: xs[1],
            width: xs[2],
            kernel: kh,
            stride,
            pad,
        };
        let (Some(ho), Some(wo)) = (
            ConvGeometry::out_extent(geo.height, kh, stride, pad),
            ConvGeometry::out_extent(geo.width, kh, stride, pad),
        ) else {
            return dim_err(
                "conv2d",
                format!("kernel {kh} with pad {pad} does not fit input {}×{}", geo.height, geo.width),
            );
        };
        let in_len = c_in * geo.height * geo.width;
        let out_len = c_out * ho * wo;
        let krows = geo.col_rows();
        let direct = kh == 1 && stride == 1 && pad == 0;

        let mut out = vec![0.0; batch * out_len];
        {
            let xd = self.data();
            let wd = weight.data();
            let bd = bias.map(|b| b.data().clone());
            let mut cols = if direct { Vec::new() } else { vec![0.0; krows * ho * wo] };
            for n in 0..batch {
                let x_n = &xd[n * in_len..(n + 1) * in_len];
                let y_n = &mut out[n * out_len..(n + 1) * out_len];
                if let Some(bd) = &bd {
                    for (co, chunk) in y_n.chunks_mut(ho * wo).enumerate() {
                        chunk.fill(bd[co]);
                    }
                }
                let src: &[f64] = if direct {
                    x_n
                } else {
                    im2col(x_n, &geo, &mut cols);
                    &cols
                };
                let beta = if bd.is_some() { 1.0 } else { 0.0 };
                gemm(c_out, krows, ho * wo, 1.0, &wd, Layout::normal(krows), src, Layout::normal(ho * wo), beta, y_n);
            }
        }

        let shape = if unbatched {
            vec![c_out, ho, wo]
        } else {
            vec![batch, c_out, ho, wo]
        };
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (x, w) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let (x_rg, w_rg) = (x.is_requires_grad(), w.is_requires_grad());
        Ok(Tensor::from_op(shape, out, parents, move |_, g| {
            let xd = x.data();
            let wd = w.data();
            let mut gx = x_rg.then(|| vec![0.0; batch * in_len]);
            let mut gw = w_rg.then(|| vec![0.0; c_out * krows]);
            let mut cols = vec![0.0; krows * ho * wo];
            for n in 0..batch {
                let g_n = &g[n * out_len..(n + 1) * out_len];
                if let Some(gw) = gw.as_mut() {
                    let x_n = &xd[n * in_len..(n + 1) * in_len];
                    let src: &[f64] = if direct {
                        x_n
                    } else {
                        im2col(x_n, &geo, &mut cols);
                        &cols
                    };
                    // dW += dY · colsᵀ
                    gemm(c_out, ho * wo, krows, 1.0, g_n, Layout::normal(ho * wo), src, Layout::transposed(ho * wo), 1.0, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    let gx_n = &mut gx[n * in_len..(n + 1) * in_len];
                    // dcols = Wᵀ · dY
                    if direct {
                        gemm(krows, c_out, ho * wo, 1.0, &wd, Layout::transposed(krows), g_n, Layout::normal(ho * wo), 0.0, gx_n);
                    } else {
                        gemm(krows, c_out, ho * wo, 1.0, &wd, Layout::transposed(krows), g_n, Layout::normal(ho * wo), 0.0, &mut cols);
                        col2im(&cols, &geo, gx_n);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; c_out];
                for n in 0..batch {
                    for (co, chunk) in g[n * out_len..(n + 1) * out_len].chunks(ho * wo).enumerate() {
                        gb[co] += chunk.iter().sum::<f64>();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(&[1, 3, 4], (0..12).map(f64::from).collect()).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn same_padding_preserves_extent() {
        let x = Tensor::zeros(&[1, 16, 24]);
        let w = Tensor::zeros(&[4, 1, 7, 7]);
        let y = x.conv2d(&w, None, 1, 3).unwrap();
        assert_eq!(y.shape(), &[4, 16, 24]);
    }

    #[test]
    fn stride_two_halves_even_extents() {
        let x = Tensor::zeros(&[2, 3, 16, 64]);
        let y = x.conv2d(&Tensor::zeros(&[5, 3, 3, 3]), None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 8, 32]);
        let y = x.conv2d(&Tensor::zeros(&[5, 3, 1, 1]), None, 2, 0).unwrap();
        assert_eq!(y.shape(), &[2, 5, 8, 32]);
    }

    #[test]
    fn rejects_even_kernel_and_oversized_kernel() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(x.conv2d(&Tensor::zeros(&[1, 1, 2, 2]), None, 1, 0).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 1, 7, 7]), None, 1, 0).is_err());
        assert!(x.conv2d(&Tensor::zeros(&[1, 2, 3, 3]), None, 1, 1).is_err());
    }
}
