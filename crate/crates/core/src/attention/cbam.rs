use cbamnet_tensor::{concat, Conv2dSpec, PoolKind, ReduceKind, Result, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::params::{join, LeafFn};

/// Shared two-layer MLP of the channel gate: `w0` is `C×(C/r)`, `w1` is `(C/r)×C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelAttentionParams<T> {
    pub w0: T,
    pub w1: T,
}

/// `1×2×7×7` kernel over the stacked channel-mean and channel-max maps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialAttentionParams<T> {
    pub kernel: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbamParams<T> {
    pub channel: ChannelAttentionParams<T>,
    pub spatial: SpatialAttentionParams<T>,
}

pub const SPATIAL_KERNEL: usize = 7;

impl ChannelAttentionParams<Tensor> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(TensorError::Config(format!(
                "channel count {channels} is not divisible by reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            w0: Tensor::zeros(&[channels, hidden]),
            w1: Tensor::zeros(&[hidden, channels]),
        })
    }
}

impl SpatialAttentionParams<Tensor> {
    pub fn zeros() -> Self {
        Self {
            kernel: Tensor::zeros(&[1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL]),
        }
    }
}

impl CbamParams<Tensor> {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttentionParams::zeros(channels, reduction)?,
            spatial: SpatialAttentionParams::zeros(),
        })
    }
}

impl<T> ChannelAttentionParams<T> {
    pub fn map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut LeafFn<'_, 'a, T, U>,
    ) -> ChannelAttentionParams<U> {
        ChannelAttentionParams {
            w0: f(&join(prefix, "w0"), &self.w0),
            w1: f(&join(prefix, "w1"), &self.w1),
        }
    }
}

impl<T> SpatialAttentionParams<T> {
    pub fn map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut LeafFn<'_, 'a, T, U>,
    ) -> SpatialAttentionParams<U> {
        SpatialAttentionParams {
            kernel: f(&join(prefix, "kernel"), &self.kernel),
        }
    }
}

impl<T> CbamParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut LeafFn<'_, 'a, T, U>) -> CbamParams<U> {
        CbamParams {
            channel: self.channel.map(&join(prefix, "channel"), f),
            spatial: self.spatial.map(&join(prefix, "spatial"), f),
        }
    }
}

fn channels_of(f: &Var<'_>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match f.shape()[..] {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(TensorError::Shape(format!(
            "{what} expects (N, C, H, W), got {s:?}"
        ))),
    }
}

/// Channel gate `m_c = σ(MLP(avg) + MLP(max))` of shape `(N, C)` and the
/// gated map `m_c ⊙ f`.
pub fn channel_attention<'t>(
    f: Var<'t>,
    p: &ChannelAttentionParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (b, c, _, _) = channels_of(&f, "channel_attention")?;
    let w0 = p.w0.shape();
    if w0.len() != 2 || w0[0] != c || p.w1.shape() != [w0[1], c] {
        return Err(TensorError::Shape(format!(
            "channel attention weights {:?}/{:?} do not match {c} channels",
            w0,
            p.w1.shape()
        )));
    }
    let mlp = |x: Var<'t>| -> Result<Var<'t>> { x.matmul(p.w0)?.relu().matmul(p.w1) };
    let avg = mlp(f.global_pool(PoolKind::Avg)?)?;
    let max = mlp(f.global_pool(PoolKind::Max)?)?;
    let m = avg.add(max)?.sigmoid();
    let gated = f.mul(m.reshape(&[b, c, 1, 1])?)?;
    Ok((m, gated))
}

/// Spatial gate `m_s = σ(conv7×7([mean_c f; max_c f]))` of shape
/// `(N, 1, H, W)` and the gated map `m_s ⊙ f`.
pub fn spatial_attention<'t>(
    f: Var<'t>,
    p: &SpatialAttentionParams<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    channels_of(&f, "spatial_attention")?;
    if p.kernel.shape() != [1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL] {
        return Err(TensorError::Shape(format!(
            "spatial attention kernel must be 1x2x7x7, got {:?}",
            p.kernel.shape()
        )));
    }
    let avg = f.reduce_axis(1, ReduceKind::Mean)?;
    let max = f.reduce_axis(1, ReduceKind::Max)?;
    let stacked = concat(&[avg, max], 1)?;
    let m = stacked
        .conv2d(p.kernel, Conv2dSpec::same(SPATIAL_KERNEL))?
        .sigmoid();
    let gated = f.mul(m)?;
    Ok((m, gated))
}

/// Channel gating followed by spatial gating.
pub fn cbam<'t>(f: Var<'t>, p: &CbamParams<Var<'t>>) -> Result<Var<'t>> {
    let (_, fc) = channel_attention(f, &p.channel)?;
    let (_, fs) = spatial_attention(fc, &p.spatial)?;
    Ok(fs)
}
