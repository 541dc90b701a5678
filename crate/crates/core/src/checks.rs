//! Finite-difference gradient checks of every differentiable building block
//! and of the toy model with its loss.

use std::fmt;
use std::str::FromStr;

use cbamnet_tensor::gradcheck::{
    check_gradients_with, scalar_fn, CheckOptions, InputReport, DEFAULT_TOLERANCE,
};
use cbamnet_tensor::{dense, Conv2dSpec, PoolKind, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    cbam, deformable_attention, self_attention, CbamParams, ChannelAttentionParams,
    DeformableAttentionParams, SelfAttentionParams, SpatialAttentionParams,
};
use crate::backbone::{
    build_model, forward, mbconv, se_block, DenseParams, MbConvParams, ModelConfig, Network,
    SeParams, DEPTHWISE_KERNEL,
};
use crate::error::{Error, Result};
use crate::training::bce_loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CheckTarget {
    Cbam,
    SelfAttention,
    Deformable,
    Se,
    MbConv,
    Model,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 6] = [
        CheckTarget::Cbam,
        CheckTarget::SelfAttention,
        CheckTarget::Deformable,
        CheckTarget::Se,
        CheckTarget::MbConv,
        CheckTarget::Model,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckTarget::Cbam => "cbam",
            CheckTarget::SelfAttention => "self",
            CheckTarget::Deformable => "deformable",
            CheckTarget::Se => "se",
            CheckTarget::MbConv => "mbconv",
            CheckTarget::Model => "model",
        }
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckTarget::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck target {s:?}")))
    }
}

/// Targets named by a `--which` value; `all` expands to every target.
pub fn parse_targets(which: &str) -> Result<Vec<CheckTarget>> {
    if which == "all" {
        return Ok(CheckTarget::ALL.to_vec());
    }
    Ok(vec![which.parse()?])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetReport {
    pub target: CheckTarget,
    pub seed: u64,
    pub groups: Vec<InputReport>,
}

impl TargetReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.groups.iter().all(|g| g.passes(TOLERANCE))
    }
}

/// Largest relative error a passing parameter group may show.
pub const TOLERANCE: f64 = DEFAULT_TOLERANCE;

/// Sampled coordinates per parameter group of the full model.
pub const MODEL_COORDS: usize = 8;
/// Dropout seed used while checking the model in training mode.
pub const MODEL_DROPOUT_SEED: u64 = 17;

/// Smallest distance of any ReLU input in a drawn MBConv point from zero.
pub const KINK_MARGIN: f64 = 1e-3;

/// Smallest `|z|` over the inputs of the three ReLUs of a stride-1 MBConv
/// block with an expansion layer.
fn mbconv_relu_margin(x: &Tensor, p: &MbConvParams<Tensor>) -> Result<f64> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let expand = p
        .expand
        .as_ref()
        .ok_or_else(|| Error::Config("margin needs an expansion layer".into()))?;
    let z1 = c(x).conv2d(c(expand), Conv2dSpec::new(1, 0, 1))?;
    let ce = z1.shape()[1];
    let z2 = z1.relu().conv2d(
        c(&p.depthwise),
        Conv2dSpec::new(1, DEPTHWISE_KERNEL / 2, ce),
    )?;
    let pooled = z2.relu().global_pool(PoolKind::Avg)?;
    let z3 = dense(pooled, c(&p.se.reduce.w), c(&p.se.reduce.b))?;
    Ok([z1, z2, z3]
        .iter()
        .flat_map(|z| z.value().data().iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(f64::INFINITY, f64::min))
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element carries a
/// distinct weight into the scalar.
fn project<'t>(out: Var<'t>, r: &Tensor) -> cbamnet_tensor::Result<Var<'t>> {
    Ok(out.mul(out.tape().constant(r.clone()))?.sum())
}

fn named<T: Clone>(prefix: &str, inputs: Vec<(&str, T)>) -> Vec<(String, T)> {
    inputs
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Gradient check of one target at one seed. With `corrupt`, every analytic
/// gradient is shifted by 0.5 before comparison, which must fail.
pub fn check_target(target: CheckTarget, seed: u64, corrupt: bool) -> Result<TargetReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opts = CheckOptions {
        seed,
        ..CheckOptions::default()
    };
    let adjust = |_: usize, g: &mut Tensor| {
        if corrupt {
            *g = g.map(|v| v + 0.5);
        }
    };
    let groups = match target {
        CheckTarget::Cbam => {
            let x = randn(&[2, 8, 6, 6], 1.0, &mut rng);
            let p = CbamParams {
                channel: ChannelAttentionParams {
                    w0: randn(&[8, 2], 0.5, &mut rng),
                    w1: randn(&[2, 8], 0.5, &mut rng),
                },
                spatial: SpatialAttentionParams {
                    kernel: randn(&[1, 2, 7, 7], 0.3, &mut rng),
                },
            };
            let r = randn(x.shape(), 1.0, &mut rng);
            let mut inputs = vec![("cbam.input".to_string(), x)];
            p.map("cbam", &mut |n, t| inputs.push((n.to_string(), t.clone())));
            let f = scalar_fn(|v| {
                let p = CbamParams {
                    channel: ChannelAttentionParams { w0: v[1], w1: v[2] },
                    spatial: SpatialAttentionParams { kernel: v[3] },
                };
                project(cbam(v[0], &p)?, &r)
            });
            check_gradients_with(f, &inputs, &opts, adjust)?
        }
        CheckTarget::SelfAttention => {
            let (c, d) = (4, 3);
            let x = randn(&[2, c, 3, 3], 1.0, &mut rng);
            let inputs = named(
                "self",
                vec![
                    ("input", x),
                    ("wq", randn(&[c, d], 0.5, &mut rng)),
                    ("wk", randn(&[c, d], 0.5, &mut rng)),
                    ("wv", randn(&[c, d], 0.5, &mut rng)),
                    ("wo", randn(&[d, c], 0.5, &mut rng)),
                ],
            );
            let r = randn(inputs[0].1.shape(), 1.0, &mut rng);
            let f = scalar_fn(|v| {
                let p = SelfAttentionParams {
                    wq: v[1],
                    wk: v[2],
                    wv: v[3],
                    wo: Some(v[4]),
                };
                project(self_attention(v[0], &p)?, &r)
            });
            check_gradients_with(f, &inputs, &opts, adjust)?
        }
        CheckTarget::Deformable => {
            // Non-zero offsets keep sampling points off the integer grid,
            // where bilinear interpolation has kinks.
            let c = 3;
            let inputs = named(
                "deformable",
                vec![
                    ("input", randn(&[1, c, 5, 5], 1.0, &mut rng)),
                    ("offset_kernel", randn(&[18, c, 3, 3], 0.3, &mut rng)),
                    ("value_kernel", randn(&[c, c, 3, 3], 0.5, &mut rng)),
                ],
            );
            let r = randn(inputs[0].1.shape(), 1.0, &mut rng);
            let f = scalar_fn(|v| {
                let p = DeformableAttentionParams {
                    offset_kernel: v[1],
                    value_kernel: v[2],
                };
                project(deformable_attention(v[0], &p)?, &r)
            });
            check_gradients_with(f, &inputs, &opts, adjust)?
        }
        CheckTarget::Se => {
            let inputs = named(
                "se",
                vec![
                    ("input", randn(&[2, 6, 4, 4], 1.0, &mut rng)),
                    ("reduce.w", randn(&[6, 2], 0.5, &mut rng)),
                    ("reduce.b", randn(&[2], 0.5, &mut rng)),
                    ("expand.w", randn(&[2, 6], 0.5, &mut rng)),
                    ("expand.b", randn(&[6], 0.5, &mut rng)),
                ],
            );
            let r = randn(inputs[0].1.shape(), 1.0, &mut rng);
            let f = scalar_fn(|v| {
                let p = SeParams {
                    reduce: DenseParams { w: v[1], b: v[2] },
                    expand: DenseParams { w: v[3], b: v[4] },
                };
                project(se_block(v[0], &p)?, &r)
            });
            check_gradients_with(f, &inputs, &opts, adjust)?
        }
        CheckTarget::MbConv => {
            // Redraw until no ReLU input sits within KINK_MARGIN of zero, so
            // the ±h probes stay on one linear piece.
            let template = MbConvParams::zeros(4, 4, 2, 0.25);
            let (x, p) = loop {
                let x = randn(&[2, 4, 6, 6], 1.0, &mut rng);
                let p = template.map("", &mut |_, t| randn(t.shape(), 0.4, &mut rng));
                if mbconv_relu_margin(&x, &p)? >= KINK_MARGIN {
                    break (x, p);
                }
            };
            let r = randn(x.shape(), 1.0, &mut rng);
            let mut inputs = vec![("mbconv.input".to_string(), x)];
            p.map("mbconv", &mut |n, t| {
                inputs.push((n.to_string(), t.clone()))
            });
            let f = scalar_fn(|v| {
                let p = MbConvParams {
                    expand: Some(v[1]),
                    depthwise: v[2],
                    se: SeParams {
                        reduce: DenseParams { w: v[3], b: v[4] },
                        expand: DenseParams { w: v[5], b: v[6] },
                    },
                    project: v[7],
                };
                project(mbconv(v[0], &p, 1)?, &r)
            });
            check_gradients_with(f, &inputs, &opts, adjust)?
        }
        CheckTarget::Model => {
            let cfg = ModelConfig {
                seed,
                ..ModelConfig::default()
            };
            let model = build_model(&cfg)?;
            let x = randn(&[2, 3, 32, 32], 1.0, &mut rng);
            let labels = Tensor::new(vec![2], vec![0.0, 1.0])?;
            let mut inputs = vec![("model.input".to_string(), x)];
            inputs.extend(
                model
                    .params
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("model.{n}"), t.clone())),
            );
            let template: &Network<Tensor> = &model.params;
            opts.max_coords = Some(MODEL_COORDS);
            let f = scalar_fn(|v| {
                let params = template
                    .rebuild(v[1..].to_vec())
                    .expect("one leaf per parameter");
                let logits = forward(&cfg, &params, v[0], true, MODEL_DROPOUT_SEED)?;
                bce_loss(logits, &labels).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => cbamnet_tensor::TensorError::Contract(other.to_string()),
                })
            });
            check_gradients_with(f, &inputs, &opts, adjust)?
        }
    };
    Ok(TargetReport {
        target,
        seed,
        groups,
    })
}

/// Every target at every seed.
pub fn run_suite(
    targets: &[CheckTarget],
    seeds: impl IntoIterator<Item = u64> + Clone,
    corrupt: bool,
) -> Result<Vec<TargetReport>> {
    let mut out = Vec::new();
    for &t in targets {
        for seed in seeds.clone() {
            out.push(check_target(t, seed, corrupt)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_names() {
        assert_eq!(parse_targets("all").unwrap().len(), 6);
        assert_eq!(
            parse_targets("self").unwrap(),
            vec![CheckTarget::SelfAttention]
        );
        assert!(parse_targets("resnet").is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let r = check_target(CheckTarget::Se, 0, true).unwrap();
        assert!(!r.passes());
        assert!(check_target(CheckTarget::Se, 0, false).unwrap().passes());
    }
}
