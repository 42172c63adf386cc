use crate::error::{dim_err, Result, TensorError};
use crate::tensor::{numel, Tensor};

/// (outer, extent, inner) sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather indices so that `out[i] = src[map[i]]` realizes the permutation.
fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |_, g| vec![Some(g.to_vec())],
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return dim_err("permute", format!("{perm:?} is not a permutation of rank {rank}"));
        }
        let map = permute_map(self.shape(), perm);
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        drop(src);
        let out_shape = perm.iter().map(|&p| self.shape()[p]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; n];
            for (gi, &si) in g.iter().zip(&map) {
                gx[si] = *gi;
            }
            vec![Some(gx)]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return dim_err("transpose_last", format!("rank {r} < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        if axis >= first.rank() {
            return dim_err("concat", format!("axis {axis} out of range for rank {}", first.rank()));
        }
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; outer * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for o in 0..outer {
                data[o * total + offset..o * total + offset + w].copy_from_slice(&src[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total / inner;
        Ok(Tensor::from_op(
            shape,
            data,
            parts.iter().map(|&p| p.clone()).collect(),
            move |_, g| {
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let mut gp = vec![0.0; outer * w];
                        for o in 0..outer {
                            gp[o * w..(o + 1) * w].copy_from_slice(&g[o * total + offset..o * total + offset + w]);
                        }
                        offset += w;
                        Some(gp)
                    })
                    .collect()
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || len == 0 || start + len > self.shape()[axis] {
            return dim_err(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape()),
            );
        }
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |_, g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Mean over `axis`, removing it. A rank-1 input yields shape `[1]`.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return dim_err("mean_axis", format!("axis {axis} out of range for {:?}", self.shape()));
        }
        let (outer, ext, inner) = split_axis(self.shape(), axis);
        let src = self.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let row = &src[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, v) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        drop(src);
        let inv = 1.0 / ext as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let n = self.numel();
        Ok(Tensor::from_op(shape, data, vec![self.clone()], move |_, g| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                for e in 0..ext {
                    let base = (o * ext + e) * inner;
                    for i in 0..inner {
                        gx[base + i] = g[o * inner + i] * inv;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}
