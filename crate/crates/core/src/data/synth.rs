//! Synthetic two-class texture set. Benign images are smooth sums of
//! Gaussian bumps; malignant images add fine speckle and dark elongated
//! blobs. Lower magnifications are blurred more.

use std::fs;
use std::path::Path;

use cbamnet_tensor::standard_normal;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Label, Magnification};
use crate::error::{config_err, Error, Result};
use crate::preprocess::{write_pnm, Image};
use crate::rng::derive_seed;

pub const SYNTH_EXTENSION: &str = "pgm";

const BACKGROUND: f64 = 150.0;
const SPECKLE_STD: f64 = 22.0;
const SPECKLE_SIGMA: f64 = 1.0;
const NUCLEUS_DEPTH: f64 = 70.0;

fn blur_sigma(m: Magnification) -> f64 {
    match m {
        Magnification::X40 => 1.5,
        Magnification::X100 => 1.0,
        Magnification::X200 => 0.5,
        Magnification::X400 => 0.0,
    }
}

/// Separable Gaussian blur with edge clamping; `sigma == 0` is the identity.
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let d = k as isize - r;
                    let (yy, xx) = if along_x {
                        (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                    } else {
                        ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                    };
                    acc += kv * src[yy as usize * w + xx as usize];
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

fn add_bumps(plane: &mut [f64], h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let scale = h.min(w) as f64;
    for _ in 0..rng.random_range(4..=8) {
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let sigma = rng.random_range(0.08..0.2) * scale;
        let amp = rng.random_range(-50.0..60.0);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                plane[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
}

fn add_speckle(plane: &mut [f64], h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let noise: Vec<f64> = (0..h * w).map(|_| standard_normal(rng)).collect();
    let smooth = gaussian_blur(&noise, h, w, SPECKLE_SIGMA);
    let std = (smooth.iter().map(|v| v * v).sum::<f64>() / smooth.len() as f64).sqrt();
    for (p, s) in plane.iter_mut().zip(smooth) {
        *p += SPECKLE_STD * s / std.max(1e-12);
    }
}

fn add_nuclei(plane: &mut [f64], h: usize, w: usize, rng: &mut ChaCha8Rng) {
    let scale = h.min(w) as f64 / 96.0;
    for _ in 0..rng.random_range(3..=8) {
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let a = rng.random_range(3.0..7.0) * scale;
        let b = rng.random_range(1.5..3.0) * scale;
        let (sin, cos) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                let r = (u / a).powi(2) + (v / b).powi(2);
                let weight = ((1.3 - r) / 0.3).clamp(0.0, 1.0);
                plane[y * w + x] -= NUCLEUS_DEPTH * weight;
            }
        }
    }
}

/// Image of patient `index` of class `label` at magnification `mag`. The
/// underlying texture depends only on `(seed, label, index)`; the
/// magnification sets the blur.
pub fn synthetic_image(
    label: Label,
    mag: Magnification,
    index: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Image> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return config_err("synthetic image size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        seed,
        (index as u64) << 1 | label.index() as u64,
    ));
    let mut plane = vec![BACKGROUND; h * w];
    add_bumps(&mut plane, h, w, &mut rng);
    if label == Label::Malignant {
        add_speckle(&mut plane, h, w, &mut rng);
        add_nuclei(&mut plane, h, w, &mut rng);
    }
    let plane = gaussian_blur(&plane, h, w, blur_sigma(mag));
    Image::new(
        h,
        w,
        1,
        plane
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0) as u8)
            .collect(),
    )
}

/// Writes `n_per_class` grey images per class and magnification to
/// `root/<label>/<mag>/<patient>/<patient>-<mag>.pgm`; returns the file count.
pub fn generate_synthetic(
    root: impl AsRef<Path>,
    n_per_class: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<usize> {
    let root = root.as_ref();
    if n_per_class == 0 {
        return config_err("n_per_class must be at least 1");
    }
    let mut written = 0;
    for label in Label::ALL {
        for index in 0..n_per_class {
            let patient = format!("{label}-{index:04}");
            for mag in Magnification::ALL {
                let dir = root.join(label.as_str()).join(mag.as_str()).join(&patient);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                let img = synthetic_image(label, mag, index, size, seed)?;
                write_pnm(dir.join(format!("{patient}-{mag}.{SYNTH_EXTENSION}")), &img)?;
                written += 1;
            }
        }
    }
    Ok(written)
}
