//! Image preprocessing: zero padding, median denoising, CLAHE, resizing,
//! seeded augmentation and normalization to `[0, 1]`.

mod clahe;
mod filters;
mod geometry;
mod image;

use std::fs;
use std::path::Path;

use cbamnet_tensor::Tensor;
use serde::{Deserialize, Serialize};

pub use clahe::{clahe, clahe_plane, clip_histogram};
pub use filters::{median_filter, zero_pad};
pub use geometry::{
    adjust_brightness, augment, flip_horizontal, flip_vertical, resize, rotate90, zoom,
    AugmentDraw, AugmentSpec,
};
pub use image::{decode_image, encode_png, encode_pnm, read_image, write_pnm, Image};

use crate::error::{config_err, data_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub pad: usize,
    pub median_kernel: usize,
    /// `(rows, cols)`
    pub clahe_tiles: (usize, usize),
    pub clahe_clip_limit: f64,
    /// `(height, width)`
    pub target_size: (usize, usize),
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            pad: 4,
            median_kernel: 3,
            clahe_tiles: (8, 8),
            clahe_clip_limit: 2.0,
            target_size: (96, 96),
            augment: AugmentSpec::default(),
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.median_kernel == 0 || self.median_kernel.is_multiple_of(2) {
            return config_err(format!(
                "median_kernel must be odd and >= 1, got {}",
                self.median_kernel
            ));
        }
        if self.clahe_tiles.0 == 0 || self.clahe_tiles.1 == 0 {
            return config_err("clahe_tiles must be positive");
        }
        if !(self.clahe_clip_limit > 1.0 && self.clahe_clip_limit.is_finite()) {
            return config_err(format!(
                "clahe_clip_limit must exceed 1, got {}",
                self.clahe_clip_limit
            ));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return config_err("target_size must be positive");
        }
        self.augment.validate()
    }
}

/// `(C, H, W)` tensor of `pixel / 255`.
pub fn normalize(img: &Image) -> Tensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        img.pixels()[rest * c + ch] as f64 / 255.0
    })
}

/// Inverse of [`normalize`] using `⌊t·255 + 0.5⌋`.
pub fn denormalize(t: &Tensor) -> Result<Image> {
    let &[c, h, w] = t.shape() else {
        return data_err(format!("expected a (C, H, W) tensor, got {:?}", t.shape()));
    };
    Image::from_fn(h, w, c, |y, x, ch| {
        (t.data()[(ch * h + y) * w + x] * 255.0 + 0.5)
            .floor()
            .clamp(0.0, 255.0) as u8
    })
}

/// Deterministic stages: pad, median, CLAHE, resize.
pub fn prepare(img: &Image, cfg: &PreprocessConfig) -> Result<Image> {
    let padded = zero_pad(img, cfg.pad);
    let denoised = median_filter(&padded, cfg.median_kernel)?;
    let contrast = clahe(&denoised, cfg.clahe_tiles, cfg.clahe_clip_limit)?;
    resize(&contrast, cfg.target_size)
}

/// Augments a prepared image when a seed is given, then normalizes.
pub fn finish(prepared: &Image, cfg: &PreprocessConfig, augment_seed: Option<u64>) -> Tensor {
    match augment_seed {
        Some(seed) => normalize(&augment(prepared, &cfg.augment, seed)),
        None => normalize(prepared),
    }
}

/// The full pipeline. `augment_seed` is `Some` for training samples only.
pub fn run_pipeline(
    img: &Image,
    cfg: &PreprocessConfig,
    augment_seed: Option<u64>,
) -> Result<Tensor> {
    cfg.validate()?;
    Ok(finish(&prepare(img, cfg)?, cfg, augment_seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub config_hash: String,
}

pub const DUMP_DTYPE: &str = "f64le";

/// Writes `<stem>.f64` (raw little-endian data) and `<stem>.json`.
pub fn write_tensor_dump(dir: &Path, stem: &str, t: &Tensor, config_hash: &str) -> Result<()> {
    let data = dir.join(format!("{stem}.f64"));
    fs::write(&data, t.to_le_bytes()).map_err(|e| Error::io(&data, e))?;
    let sidecar = TensorSidecar {
        shape: t.shape().to_vec(),
        dtype: DUMP_DTYPE.into(),
        config_hash: config_hash.into(),
    };
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_tensor_dump(dir: &Path, stem: &str) -> Result<(Tensor, TensorSidecar)> {
    let json = dir.join(format!("{stem}.json"));
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let sidecar: TensorSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", json.display())))?;
    if sidecar.dtype != DUMP_DTYPE {
        return data_err(format!("unsupported dump dtype {}", sidecar.dtype));
    }
    let data = dir.join(format!("{stem}.f64"));
    let bytes = fs::read(&data).map_err(|e| Error::io(&data, e))?;
    let t = Tensor::from_le_bytes(&sidecar.shape, &bytes)?;
    Ok((t, sidecar))
}
