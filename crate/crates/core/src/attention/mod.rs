//! CBAM channel/spatial gating, residual self-attention over spatial tokens,
//! and deformable-convolution attention.

mod cbam;
mod deformable;
mod self_attention;

use cbamnet_tensor::{Result, Tensor, Var};
use serde::{Deserialize, Serialize};

pub use cbam::{
    cbam, channel_attention, spatial_attention, CbamParams, ChannelAttentionParams,
    SpatialAttentionParams, SPATIAL_KERNEL,
};
pub use deformable::{
    bilinear_sample, bilinear_sample_grad, deform_conv2d, deformable_attention,
    DeformableAttentionParams, OFFSET_KERNEL,
};
pub use self_attention::{self_attention, self_attention_with_weights, SelfAttentionParams};

use crate::params::LeafFn;
use crate::preprocess::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Cbam,
    #[serde(rename = "self")]
    SelfAttention,
    Deformable,
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "cbam" => Ok(Self::Cbam),
            "self" => Ok(Self::SelfAttention),
            "deformable" => Ok(Self::Deformable),
            _ => Err(format!(
                "unknown attention variant {s:?} (none, cbam, self, deformable)"
            )),
        }
    }
}

/// Parameters of one attention insertion point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AttentionParams<T> {
    Cbam(CbamParams<T>),
    SelfAttention(SelfAttentionParams<T>),
    Deformable(DeformableAttentionParams<T>),
}

impl<T> AttentionParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut LeafFn<'_, 'a, T, U>) -> AttentionParams<U> {
        match self {
            Self::Cbam(p) => AttentionParams::Cbam(p.map(prefix, f)),
            Self::SelfAttention(p) => AttentionParams::SelfAttention(p.map(prefix, f)),
            Self::Deformable(p) => AttentionParams::Deformable(p.map(prefix, f)),
        }
    }
}

pub fn apply_attention<'t>(f: Var<'t>, p: &AttentionParams<Var<'t>>) -> Result<Var<'t>> {
    match p {
        AttentionParams::Cbam(p) => cbam(f, p),
        AttentionParams::SelfAttention(p) => self_attention(f, p),
        AttentionParams::Deformable(p) => deformable_attention(f, p),
    }
}

/// Linear rescale of a `H×W` map (any tensor whose last two axes are
/// spatial, first element plane taken) to a grey image. A flat map is black.
pub fn heatmap(map: &Tensor) -> Image {
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = &map.data()[..h * w];
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let px = plane
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Image::new(h, w, 1, px).expect("heatmap extents come from a tensor")
}
