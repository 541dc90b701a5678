use cbamnet_tensor::{
    dense, standard_normal, Conv2dSpec, PoolKind, ReduceKind, Result as TResult, Tape, Tensor,
    TensorError, Var,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{se_width, Activation, Initializer, ModelConfig};
use crate::attention::{
    apply_attention, channel_attention, self_attention_with_weights, spatial_attention,
    AttentionKind, AttentionParams, CbamParams, DeformableAttentionParams, SelfAttentionParams,
    OFFSET_KERNEL,
};
use crate::error::Result;
use crate::params::{join, LeafFn};

pub const STEM_KERNEL: usize = 3;
pub const DEPTHWISE_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseParams<T> {
    /// `in×out`
    pub w: T,
    pub b: T,
}

/// Squeeze-and-excitation: `C→R` and `R→C` dense layers with biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeParams<T> {
    pub reduce: DenseParams<T>,
    pub expand: DenseParams<T>,
}

/// Bias-free convolutions of one inverted-bottleneck block. `expand` is
/// absent when the expansion ratio is 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbConvParams<T> {
    pub expand: Option<T>,
    pub depthwise: T,
    pub se: SeParams<T>,
    pub project: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams<T> {
    pub blocks: Vec<MbConvParams<T>>,
    pub attention: Option<AttentionParams<T>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network<T> {
    pub stem: T,
    pub stages: Vec<StageParams<T>>,
    /// Hidden layers followed by the classifier.
    pub head: Vec<DenseParams<T>>,
}

impl<T> DenseParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut LeafFn<'_, 'a, T, U>) -> DenseParams<U> {
        DenseParams {
            w: f(&join(prefix, "w"), &self.w),
            b: f(&join(prefix, "b"), &self.b),
        }
    }
}

impl<T> SeParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut LeafFn<'_, 'a, T, U>) -> SeParams<U> {
        SeParams {
            reduce: self.reduce.map(&join(prefix, "reduce"), f),
            expand: self.expand.map(&join(prefix, "expand"), f),
        }
    }
}

impl<T> MbConvParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut LeafFn<'_, 'a, T, U>) -> MbConvParams<U> {
        MbConvParams {
            expand: self.expand.as_ref().map(|e| f(&join(prefix, "expand"), e)),
            depthwise: f(&join(prefix, "depthwise"), &self.depthwise),
            se: self.se.map(&join(prefix, "se"), f),
            project: f(&join(prefix, "project"), &self.project),
        }
    }
}

impl<T> StageParams<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut LeafFn<'_, 'a, T, U>) -> StageParams<U> {
        StageParams {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("blocks.{i}")), f))
                .collect(),
            attention: self
                .attention
                .as_ref()
                .map(|a| a.map(&join(prefix, "attention"), f)),
        }
    }
}

impl<T> Network<T> {
    pub fn map<'a, U>(&'a self, f: &mut LeafFn<'_, 'a, T, U>) -> Network<U> {
        Network {
            stem: f("stem", &self.stem),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| s.map(&format!("stages.{i}"), f))
                .collect(),
            head: self
                .head
                .iter()
                .enumerate()
                .map(|(i, d)| d.map(&format!("head.{i}"), f))
                .collect(),
        }
    }

    /// `(name, leaf)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(&mut |name, t| out.push((name.to_string(), t)));
        out
    }

    pub fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, _| n += 1);
        n
    }

    /// The same structure populated from `leaves` in canonical order, or
    /// `None` when the count differs.
    pub fn rebuild<U>(&self, leaves: Vec<U>) -> Option<Network<U>> {
        if leaves.len() != self.leaf_count() {
            return None;
        }
        let mut it = leaves.into_iter();
        Some(self.map(&mut |_, _| it.next().expect("count checked")))
    }
}

impl DenseParams<Tensor> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Tensor::zeros(&[input, output]),
            b: Tensor::zeros(&[output]),
        }
    }
}

impl MbConvParams<Tensor> {
    pub fn zeros(cin: usize, cout: usize, expansion: usize, se_ratio: f64) -> Self {
        let ce = cin * expansion;
        let r = se_width(ce, se_ratio);
        Self {
            expand: (expansion != 1).then(|| Tensor::zeros(&[ce, cin, 1, 1])),
            depthwise: Tensor::zeros(&[ce, 1, DEPTHWISE_KERNEL, DEPTHWISE_KERNEL]),
            se: SeParams {
                reduce: DenseParams::zeros(ce, r),
                expand: DenseParams::zeros(r, ce),
            },
            project: Tensor::zeros(&[cout, ce, 1, 1]),
        }
    }
}

impl Network<Tensor> {
    /// All-zero parameters with the shapes implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for s in &cfg.stages {
            let blocks = (0..s.blocks)
                .map(|i| {
                    let input = if i == 0 { cin } else { s.channels };
                    MbConvParams::zeros(input, s.channels, s.expansion_ratio, s.se_ratio)
                })
                .collect();
            let c = s.channels;
            let attention = match cfg.attention {
                AttentionKind::None => None,
                AttentionKind::Cbam => Some(AttentionParams::Cbam(CbamParams::zeros(
                    c,
                    cfg.reduction_for(c),
                )?)),
                AttentionKind::SelfAttention => Some(AttentionParams::SelfAttention(
                    SelfAttentionParams::zeros(c, cfg.self_attention_dim.unwrap_or(c)),
                )),
                AttentionKind::Deformable => Some(AttentionParams::Deformable(
                    DeformableAttentionParams::zeros(
                        c,
                        cfg.deformable_kernel,
                        cfg.deformable_kernel,
                    ),
                )),
            };
            stages.push(StageParams { blocks, attention });
            cin = c;
        }
        let hidden = cfg.head.hidden;
        let mut head = vec![DenseParams::zeros(cin, hidden)];
        if cfg.head.dense_layers == 3 {
            head.push(DenseParams::zeros(hidden, hidden));
        }
        head.push(DenseParams::zeros(hidden, cfg.num_classes));
        Ok(Self {
            stem: Tensor::zeros(&[cfg.stem_channels, cfg.in_channels, STEM_KERNEL, STEM_KERNEL]),
            stages,
            head,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.map(&mut |_, t| n += t.len());
        n
    }

    /// Registers every parameter as a gradient-requiring leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Network<Var<'t>> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }
}

fn fan_in(shape: &[usize]) -> usize {
    match shape {
        [_, cin, kh, kw] => cin * kh * kw,
        [input, _] => *input,
        _ => 1,
    }
}

/// Biases and deformable offset kernels start at zero; other weights are
/// drawn from the configured initializer in canonical parameter order.
pub fn init_params(cfg: &ModelConfig) -> Result<Network<Tensor>> {
    let zeros = Network::zeros(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(zeros.map(&mut |name, t| {
        if t.rank() < 2 || name.ends_with("offset_kernel") {
            return t.clone();
        }
        let std = match cfg.initializer {
            Initializer::He => (2.0 / fan_in(t.shape()) as f64).sqrt(),
            Initializer::Normal => 0.02,
        };
        Tensor::from_fn(t.shape(), |_| std * standard_normal(&mut rng))
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Network<Tensor>,
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    Ok(Model {
        config: cfg.clone(),
        params: init_params(cfg)?,
    })
}

pub fn se_block<'t>(f: Var<'t>, p: &SeParams<Var<'t>>) -> TResult<Var<'t>> {
    let shape = f.shape();
    let pooled = f.global_pool(PoolKind::Avg)?;
    let hidden = dense(pooled, p.reduce.w, p.reduce.b)?.relu();
    let gate = dense(hidden, p.expand.w, p.expand.b)?.sigmoid();
    f.mul(gate.reshape(&[shape[0], shape[1], 1, 1])?)
}

/// Expand (1×1) → ReLU → depthwise 3×3 → ReLU → SE → project (1×1), plus
/// the identity when the block keeps both stride and width.
pub fn mbconv<'t>(f: Var<'t>, p: &MbConvParams<Var<'t>>, stride: usize) -> TResult<Var<'t>> {
    let cin = f.shape()[1];
    let mut h = match p.expand {
        Some(w) => f.conv2d(w, Conv2dSpec::new(1, 0, 1))?.relu(),
        None => f,
    };
    let ce = h.shape()[1];
    if p.depthwise.shape()[0] != ce {
        return Err(TensorError::Shape(format!(
            "depthwise kernel {:?} does not match {ce} expanded channels",
            p.depthwise.shape()
        )));
    }
    h = h
        .conv2d(
            p.depthwise,
            Conv2dSpec::new(stride, DEPTHWISE_KERNEL / 2, ce),
        )?
        .relu();
    h = se_block(h, &p.se)?;
    let out = h.conv2d(p.project, Conv2dSpec::new(1, 0, 1))?;
    if stride == 1 && out.shape()[1] == cin {
        out.add(f)
    } else {
        Ok(out)
    }
}

fn activate(x: Var<'_>, a: Activation) -> Var<'_> {
    match a {
        Activation::Relu => x.relu(),
        Activation::Tanh => x.tanh(),
    }
}

/// Feature extractor: stem, stages with their attention, then GAP.
fn features<'t>(cfg: &ModelConfig, p: &Network<Var<'t>>, x: Var<'t>) -> TResult<Var<'t>> {
    let mut h = x
        .conv2d(p.stem, Conv2dSpec::new(2, STEM_KERNEL / 2, 1))?
        .relu();
    for (s, sp) in cfg.stages.iter().zip(&p.stages) {
        for (i, block) in sp.blocks.iter().enumerate() {
            h = mbconv(h, block, if i == 0 { s.stride } else { 1 })?;
        }
        if let Some(a) = &sp.attention {
            h = apply_attention(h, a)?;
        }
    }
    h.global_pool(PoolKind::Avg)
}

/// Logits `(N, num_classes)`. Dropout follows the first hidden layer and is
/// active only when `training`.
pub fn forward<'t>(
    cfg: &ModelConfig,
    p: &Network<Var<'t>>,
    x: Var<'t>,
    training: bool,
    dropout_seed: u64,
) -> TResult<Var<'t>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] != cfg.in_channels {
        return Err(TensorError::Shape(format!(
            "model expects (N, {}, H, W) input, got {xs:?}",
            cfg.in_channels
        )));
    }
    let mut h = features(cfg, p, x)?;
    let (last, hidden) = p.head.split_last().expect("head has a classifier");
    for (i, layer) in hidden.iter().enumerate() {
        h = activate(dense(h, layer.w, layer.b)?, cfg.head.final_activation);
        if i == 0 {
            h = h.dropout(cfg.head.dropout_p, training, dropout_seed)?;
        }
    }
    dense(h, last.w, last.b)
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Eval-mode logits without keeping a tape.
    pub fn predict(&self, x: &Tensor) -> TResult<Tensor> {
        let tape = Tape::new();
        let p = self.params.map(&mut |_, t| tape.constant(t.clone()));
        Ok(
            forward(&self.config, &p, tape.constant(x.clone()), false, 0)?
                .value()
                .as_ref()
                .clone(),
        )
    }

    /// Per-stage attention maps for one input batch, each `(N, 1, H, W)`:
    /// the spatial gate for CBAM, the mean attention each position receives
    /// for self-attention, and the mean offset magnitude for deformable.
    pub fn attention_maps(&self, x: &Tensor) -> TResult<Vec<(String, Tensor)>> {
        let tape = Tape::new();
        let p = self.params.map(&mut |_, t| tape.constant(t.clone()));
        let mut h = tape
            .constant(x.clone())
            .conv2d(p.stem, Conv2dSpec::new(2, STEM_KERNEL / 2, 1))?
            .relu();
        let mut maps = Vec::new();
        for (i, (s, sp)) in self.config.stages.iter().zip(&p.stages).enumerate() {
            for (j, block) in sp.blocks.iter().enumerate() {
                h = mbconv(h, block, if j == 0 { s.stride } else { 1 })?;
            }
            let Some(a) = &sp.attention else { continue };
            let shape = h.shape();
            let (n, hh, ww) = (shape[0], shape[2], shape[3]);
            let map = match a {
                AttentionParams::Cbam(c) => {
                    let (_, fc) = channel_attention(h, &c.channel)?;
                    spatial_attention(fc, &c.spatial)?.0
                }
                AttentionParams::SelfAttention(sa) => {
                    let (_, attn) = self_attention_with_weights(h, sa)?;
                    attn.reduce_axis(1, ReduceKind::Mean)?
                        .reshape(&[n, 1, hh, ww])?
                }
                AttentionParams::Deformable(d) => {
                    let off = h.conv2d(d.offset_kernel, Conv2dSpec::same(OFFSET_KERNEL))?;
                    off.mul(off)?.reduce_axis(1, ReduceKind::Mean)?
                }
            };
            maps.push((format!("stage{i}"), map.value().as_ref().clone()));
            h = apply_attention(h, a)?;
        }
        Ok(maps)
    }
}
