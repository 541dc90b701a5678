use cbamnet_tensor::{Result, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::params::{join, LeafFn};

/// Projections of scaled dot-product attention over spatial tokens. `wq`,
/// `wk`, `wv` are `C×d`; `wo` (`d×C`) is required exactly when `d ≠ C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttentionParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: Option<T>,
}

impl SelfAttentionParams<Tensor> {
    /// Zero projections of width `d`, with an output projection when `d ≠ C`.
    pub fn zeros(channels: usize, d: usize) -> Self {
        Self {
            wq: Tensor::zeros(&[channels, d]),
            wk: Tensor::zeros(&[channels, d]),
            wv: Tensor::zeros(&[channels, d]),
            wo: (d != channels).then(|| Tensor::zeros(&[d, channels])),
        }
    }
}

impl<T> SelfAttentionParams<T> {
    pub fn map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut LeafFn<'_, 'a, T, U>,
    ) -> SelfAttentionParams<U> {
        SelfAttentionParams {
            wq: f(&join(prefix, "wq"), &self.wq),
            wk: f(&join(prefix, "wk"), &self.wk),
            wv: f(&join(prefix, "wv"), &self.wv),
            wo: self.wo.as_ref().map(|wo| f(&join(prefix, "wo"), wo)),
        }
    }
}

/// Residual self-attention returning the output map and the `(N, HW, HW)`
/// attention matrix `softmax(QKᵀ/√d)`.
pub fn self_attention_with_weights<'t>(
    f: Var<'t>,
    p: &SelfAttentionParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let [b, c, h, w] = f.shape()[..] else {
        return Err(TensorError::Shape(format!(
            "self_attention expects (N, C, H, W), got {:?}",
            f.shape()
        )));
    };
    let wq = p.wq.shape();
    if wq.len() != 2 || wq[0] != c || p.wk.shape() != wq || p.wv.shape() != wq {
        return Err(TensorError::Shape(format!(
            "projection shapes {:?}/{:?}/{:?} do not match {c} channels",
            wq,
            p.wk.shape(),
            p.wv.shape()
        )));
    }
    let d = wq[1];
    match (&p.wo, d == c) {
        (None, false) => {
            return Err(TensorError::Config(format!(
                "projection width {d} differs from {c} channels but no output projection is given"
            )))
        }
        (Some(wo), _) if wo.shape() != [d, c] => {
            return Err(TensorError::Shape(format!(
                "output projection must be {d}x{c}, got {:?}",
                wo.shape()
            )))
        }
        _ => {}
    }
    let n = h * w;
    let tokens = f
        .reshape(&[b, c, n])?
        .permute(&[0, 2, 1])?
        .reshape(&[b * n, c])?;
    let project = |wt: Var<'t>| -> Result<Var<'t>> { tokens.matmul(wt)?.reshape(&[b, n, d]) };
    let (q, k, v) = (project(p.wq)?, project(p.wk)?, project(p.wv)?);
    let attn = q
        .matmul(k.transpose()?)?
        .scale(1.0 / (d as f64).sqrt())
        .softmax(2)?;
    let mut mixed = attn.matmul(v)?;
    if let Some(wo) = p.wo {
        mixed = mixed.reshape(&[b * n, d])?.matmul(wo)?;
    }
    let back = mixed
        .reshape(&[b, n, c])?
        .permute(&[0, 2, 1])?
        .reshape(&[b, c, h, w])?;
    Ok((f.add(back)?, attn))
}

pub fn self_attention<'t>(f: Var<'t>, p: &SelfAttentionParams<Var<'t>>) -> Result<Var<'t>> {
    Ok(self_attention_with_weights(f, p)?.0)
}
