use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn one_element(op: &'static str, s: &Tensor) -> Result<f64> {
    if s.numel() != 1 {
        return Err(TensorError::Dimension {
            op,
            msg: format!("expected a one-element tensor, got {:?}", s.shape()),
        });
    }
    Ok(s.item())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |_, g| vec![Some(g.to_vec()), Some(g.to_vec())],
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data: Vec<f64> = self.data().iter().zip(other.data().iter()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            |_, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())],
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let a = self.clone();
        let b = other.clone();
        let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(x, y)| x * y).collect();
        let (pa, pb) = (a.clone(), b.clone());
        Ok(Tensor::from_op(a.shape().to_vec(), data, vec![a, b], move |_, g| {
            let ad = pa.data();
            let bd = pb.data();
            let ga = g.iter().zip(bd.iter()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(ad.iter()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |_, g| {
            vec![Some(g.iter().map(|v| v * c).collect())]
        })
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |_, g| vec![Some(g.to_vec())])
    }

    /// Multiplies every element by the value of a one-element tensor `s`,
    /// differentiating with respect to both.
    pub fn scale_by(&self, s: &Tensor) -> Result<Tensor> {
        let c = one_element("scale_by", s)?;
        let data = self.data().iter().map(|v| v * c).collect();
        let x = self.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            move |_, g| {
                let xd = x.data();
                let gs: f64 = g.iter().zip(xd.iter()).map(|(g, v)| g * v).sum();
                vec![Some(g.iter().map(|v| v * c).collect()), Some(vec![gs])]
            },
        ))
    }

    /// Adds the value of a one-element tensor `s` to every element.
    pub fn shift_by(&self, s: &Tensor) -> Result<Tensor> {
        let c = one_element("shift_by", s)?;
        let data = self.data().iter().map(|v| v + c).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), s.clone()],
            |_, g| vec![Some(g.to_vec()), Some(vec![g.iter().sum()])],
        ))
    }

    /// Adds `bias` (shape `[n]`) along the last axis, which must have extent `n`.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let n = *self.shape().last().expect("rank >= 1");
        if bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let b = bias.data().clone();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), bias.clone()],
            move |_, g| {
                let mut gb = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
                vec![Some(g.to_vec()), Some(gb)]
            },
        ))
    }

    /// `x` where `x >= 0`, otherwise `slope * x`.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let x = self.clone();
        let data = self
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |_, g| {
            let xd = x.data();
            let gx = g
                .iter()
                .zip(xd.iter())
                .map(|(g, &v)| if v >= 0.0 { *g } else { slope * g })
                .collect();
            vec![Some(gx)]
        })
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], |out, g| {
            vec![Some(g.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect())]
        })
    }
}
