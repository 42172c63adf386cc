//! Self-attentive pooling and the masked cross self-attentive encoder.
//!
//! Pooled stage vectors are handled in batches: a `B×d` tensor holds one
//! pooled vector per row and every formula applies to each row on its own.

use mcsae_tensor::{Mode, Parameter, Tensor, TensorError};
use rand::Rng;

use crate::error::{Error, Result};
use crate::regularization::{mask_gate, RandomMask};

fn dim_error(op: &'static str, msg: String) -> Error {
    Error::Tensor(TensorError::Dimension { op, msg })
}

/// `softmax(Q·Kᵀ / √d) · V` with each query row normalized over the keys.
///
/// `Q` is `n×d`, `K` is `m×d` and `V` is `m×d_v`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (&[_, d], &[m, dk], &[mv, _]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(dim_error(
            "scaled_dot_attention",
            format!("expected matrices, got {:?}, {:?}, {:?}", q.shape(), k.shape(), v.shape()),
        ));
    };
    if d != dk || m != mv {
        return Err(dim_error(
            "scaled_dot_attention",
            format!("incompatible Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let scores = q.matmul(&k.transpose_last()?)?.scale(1.0 / (d as f64).sqrt());
    Ok(scores.softmax(1)?.matmul(v)?)
}

/// Attention weights `w_l ∝ exp(h_lᵀ u)` over the `L` rows of `H`.
///
/// `H` is `L×d` (result `[L]`) or `B×L×d` (result `B×L`); `u` is `[d]`.
pub fn sap_weights(h: &Tensor, u: &Tensor) -> Result<Tensor> {
    let d = *h.shape().last().unwrap();
    if u.shape() != [d] {
        return Err(dim_error("sap_weights", format!("context {:?} vs hidden {:?}", u.shape(), h.shape())));
    }
    let rows = h.numel() / d;
    let scores = h.reshape(&[rows, d])?.matmul(&u.reshape(&[d, 1])?)?;
    match *h.shape() {
        [l, _] => Ok(scores.reshape(&[l])?.softmax(0)?),
        [b, l, _] => Ok(scores.reshape(&[b, l])?.softmax(1)?),
        _ => Err(dim_error("sap_weights", format!("H must be L×d or B×L×d, got {:?}", h.shape()))),
    }
}

/// Weighted sum `Σ_l w_l x_l`: `L×d` with `[L]` gives `[d]`; `B×L×d` with
/// `B×L` gives `B×d`.
pub fn sap_pool(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    match (x.shape(), w.shape()) {
        (&[l, d], &[lw]) if l == lw => Ok(w.reshape(&[1, l])?.matmul(x)?.reshape(&[d])?),
        (&[b, l, d], &[bw, lw]) if b == bw && l == lw => Ok(w.reshape(&[b, 1, l])?.matmul(x)?.reshape(&[b, d])?),
        _ => Err(dim_error("sap_pool", format!("X {:?} vs weights {:?}", x.shape(), w.shape()))),
    }
}

/// Hidden projection and context vector of one self-attentive pooling layer.
#[derive(Clone, Debug)]
pub struct SapHead {
    pub proj_w: Parameter,
    pub proj_b: Parameter,
    pub context: Parameter,
}

impl SapHead {
    pub fn new(prefix: &str, proj_w: Tensor, context: Tensor) -> Self {
        let d = context.numel();
        Self {
            proj_w: Parameter::new(format!("{prefix}.proj.w"), proj_w),
            proj_b: Parameter::new(format!("{prefix}.proj.b"), Tensor::zeros(&[d])),
            context: Parameter::new(format!("{prefix}.context"), context),
        }
    }

    pub fn dim(&self) -> usize {
        self.context.tensor.numel()
    }

    /// Pools a `B×L×d` frame sequence into `B×d` using `H = tanh(X·W + b)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let &[b, l, d] = x.shape() else {
            return Err(dim_error("sap", format!("expected B×L×d frames, got {:?}", x.shape())));
        };
        let h = x
            .reshape(&[b * l, d])?
            .matmul(&self.proj_w.tensor)?
            .add_bias(&self.proj_b.tensor)?
            .tanh()
            .reshape(&[b, l, d])?;
        let w = sap_weights(&h, &self.context.tensor)?;
        sap_pool(x, &w)
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.proj_w, &self.proj_b, &self.context]
    }
}

/// `max{λ(W·p + b), W·p + b}` elementwise, with scalar `W` and `b` shared by
/// all channels.
pub fn transform_layer(p: &Tensor, w: &Tensor, b: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(p.scale_by(w)?.shift_by(b)?.leaky_relu(slope))
}

/// One cross self-attention branch. For each batch row, the query vector
/// `q` (`d_q` entries) attends over the key/value vector `kv` (`d_k`
/// entries): `softmax(qᵀ·kv / √d_k) · kvᵀ`, a `d_q×1` column.
///
/// Inputs are `B×d_q` and `B×d_k`; the result is `B×d_q×1`.
pub fn cross_branch(q: &Tensor, kv: &Tensor) -> Result<Tensor> {
    let (&[b, dq], &[bk, dk]) = (q.shape(), kv.shape()) else {
        return Err(dim_error("cross_branch", format!("expected B×d inputs, got {:?} and {:?}", q.shape(), kv.shape())));
    };
    if b != bk {
        return Err(dim_error("cross_branch", format!("batch {b} vs {bk}")));
    }
    let scores = q
        .reshape(&[b, dq, 1])?
        .matmul(&kv.reshape(&[b, 1, dk])?)?
        .scale(1.0 / (dk as f64).sqrt());
    Ok(scores.softmax(2)?.matmul(&kv.reshape(&[b, dk, 1])?)?)
}

/// The per-stage learnable state of the masked cross self-attentive encoder.
#[derive(Clone, Debug)]
pub struct McsaeStage {
    /// 1-based stage number.
    pub index: usize,
    pub dims: (usize, usize),
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub slope: f64,
    pub mask: RandomMask,
}

/// Segment matrix of one stage together with its two branch outputs.
#[derive(Clone, Debug)]
pub struct StageAttention {
    /// `B×d_i×d_{i+1}`.
    pub segment: Tensor,
    /// `B×d_i×1`, attending from `P_i` over `P_{i+1}`.
    pub branch1: Tensor,
    /// `B×d_{i+1}×1`, attending from `P_{i+1}` over `P_i`.
    pub branch2: Tensor,
}

impl McsaeStage {
    /// Transform weights start at `W = 1, b = 0`, i.e. a plain leaky ReLU.
    pub fn new(index: usize, dims: (usize, usize), slope: f64, mask_factor: f64) -> Self {
        let p = |name: &str, v: f64| Parameter::new(format!("mcsae{index}.{name}"), Tensor::scalar(v));
        Self {
            index,
            dims,
            w1: p("w1", 1.0),
            b1: p("b1", 0.0),
            w2: p("w2", 1.0),
            b2: p("b2", 0.0),
            slope,
            mask: RandomMask::new(format!("mcsae{index}.mask_factor"), mask_factor),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2, &self.mask.factor]
    }

    /// `z_i = branch1 × branch2ᵀ`, where each branch masks (train mode only)
    /// and transforms its query side before attending over the other input.
    pub fn forward<R: Rng + ?Sized>(&self, p_i: &Tensor, p_next: &Tensor, mode: Mode, rng: &mut R) -> Result<StageAttention> {
        let stage_err = |source| Error::Stage { stage: self.index, source };
        let ok = matches!((p_i.shape(), p_next.shape()), (&[b, di], &[b2, dj]) if b == b2 && (di, dj) == self.dims);
        if !ok {
            return Err(stage_err(TensorError::Dimension {
                op: "mcsae_forward",
                msg: format!(
                    "inputs {:?} and {:?} do not match configured dims {:?}",
                    p_i.shape(),
                    p_next.shape(),
                    self.dims
                ),
            }));
        }
        let run = |rng: &mut R| -> std::result::Result<StageAttention, Error> {
            let q1 = transform_layer(&mask_gate(p_i, &self.mask, mode, rng)?, &self.w1.tensor, &self.b1.tensor, self.slope)?;
            let branch1 = cross_branch(&q1, p_next)?;
            let q2 = transform_layer(&mask_gate(p_next, &self.mask, mode, rng)?, &self.w2.tensor, &self.b2.tensor, self.slope)?;
            let branch2 = cross_branch(&q2, p_i)?;
            let segment = branch1.matmul(&branch2.transpose_last()?)?;
            Ok(StageAttention { segment, branch1, branch2 })
        };
        run(rng).map_err(|e| match e {
            Error::Tensor(source) => stage_err(source),
            other => other,
        })
    }
}

/// `Z = P1 × z1 × z2 × … × z_k`, one row per batch element.
#[derive(Clone, Debug)]
pub struct AttentionMatrix {
    /// `B×d_last`.
    pub z: Tensor,
}

pub fn build_attention_matrix(p1: &Tensor, segments: &[Tensor]) -> Result<AttentionMatrix> {
    let &[b, c1] = p1.shape() else {
        return Err(Error::Chain { link: 0, msg: format!("P1 must be B×c, got {:?}", p1.shape()) });
    };
    let mut acc = p1.reshape(&[b, 1, c1])?;
    for (link, seg) in segments.iter().enumerate() {
        let width = acc.shape()[2];
        match *seg.shape() {
            [sb, rows, _] if sb == b && rows == width => acc = acc.matmul(seg)?,
            _ => {
                return Err(Error::Chain {
                    link: link + 1,
                    msg: format!("running product is {:?} but z{} is {:?}", acc.shape(), link + 1, seg.shape()),
                })
            }
        }
    }
    let width = acc.shape()[2];
    Ok(AttentionMatrix {
        z: acc.reshape(&[b, width])?,
    })
}

/// `C = [Z ‖ P5]` along the feature axis.
pub fn concat_embedding(z: &Tensor, p5: &Tensor) -> Result<Tensor> {
    Ok(Tensor::concat(&[z, p5], 1)?)
}
