use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Row/column strides of a dense operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows × cols` matrix.
    pub fn normal(cols: usize) -> Self {
        Layout { rs: cols as isize, cs: 1 }
    }

    /// Row-major `cols × rows` matrix read as its transpose.
    pub fn transposed(rows: usize) -> Self {
        Layout { rs: 1, cs: rows as isize }
    }
}

/// `c = alpha * a(m×k) * b(k×n) + beta * c`, with `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slice lengths cover every index reachable through the given
    // extents and strides; `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn mismatch(a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tensor {
    /// Matrix product of `m×k` by `k×n`, or batched `B×m×k` by `B×k×n`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (batch, m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(mismatch(self, other)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &ad[i * m * k..],
                    Layout::normal(k),
                    &bd[i * k * n..],
                    Layout::normal(n),
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if self.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let (a, b) = (self.clone(), other.clone());
        let (a_rg, b_rg) = (a.is_requires_grad(), b.is_requires_grad());
        Ok(Tensor::from_op(shape, out, vec![self.clone(), other.clone()], move |_, g| {
            let ad = a.data();
            let bd = b.data();
            let ga = a_rg.then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for i in 0..batch {
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g[i * m * n..],
                        Layout::normal(n),
                        &bd[i * k * n..],
                        Layout::transposed(n),
                        0.0,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
                ga
            });
            let gb = b_rg.then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for i in 0..batch {
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &ad[i * m * k..],
                        Layout::transposed(k),
                        &g[i * m * n..],
                        Layout::normal(n),
                        0.0,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
                gb
            });
            vec![ga, gb]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_left() {
        let a = Tensor::new(&[3, 3], (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(Tensor::eye(3).matmul(&a).unwrap().to_vec(), a.to_vec());
    }

    #[test]
    fn zeros_product() {
        let b = Tensor::new(&[3, 4], (0..12).map(f64::from).collect()).unwrap();
        let c = Tensor::zeros(&[2, 3]).matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inner_mismatch_names_shapes() {
        let err = Tensor::zeros(&[2, 3]).matmul(&Tensor::zeros(&[4, 2])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_matches_per_slice() {
        let a = Tensor::new(&[2, 2, 3], (0..12).map(|v| v as f64 * 0.5).collect()).unwrap();
        let b = Tensor::new(&[2, 3, 1], (0..6).map(|v| 1.0 - v as f64).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..2 {
            let ai = a.narrow(0, i, 1).unwrap().reshape(&[2, 3]).unwrap();
            let bi = b.narrow(0, i, 1).unwrap().reshape(&[3, 1]).unwrap();
            let ci = c.narrow(0, i, 1).unwrap().to_vec();
            assert_eq!(ai.matmul(&bi).unwrap().to_vec(), ci);
        }
    }
}
