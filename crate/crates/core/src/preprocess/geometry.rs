use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{config_err, Result};

/// Bilinear sample of channel `c` at real coordinates, clamping to the border.
fn sample_clamped(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    let (h, w) = (img.height(), img.width());
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy: usize, xx: usize| img.get(yy, xx, c) as f64;
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Bilinear resize with half-pixel centres: output pixel `i` samples the
/// source at `(i + 0.5)·in/out − 0.5`.
pub fn resize(img: &Image, size: (usize, usize)) -> Result<Image> {
    let (oh, ow) = size;
    if oh == 0 || ow == 0 {
        return config_err(format!("resize target {oh}x{ow} is empty"));
    }
    if (oh, ow) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let sy = img.height() as f64 / oh as f64;
    let sx = img.width() as f64 / ow as f64;
    Image::from_fn(oh, ow, img.channels(), |y, x, c| {
        to_u8(sample_clamped(
            img,
            (y as f64 + 0.5) * sy - 0.5,
            (x as f64 + 0.5) * sx - 0.5,
            c,
        ))
    })
}

/// Rotates by a multiple of 90° counter-clockwise.
pub fn rotate90(img: &Image, quarter_turns: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    match quarter_turns % 4 {
        0 => Ok(img.clone()),
        1 => Image::from_fn(w, h, img.channels(), |y, x, c| img.get(x, w - 1 - y, c)),
        2 => Image::from_fn(h, w, img.channels(), |y, x, c| {
            img.get(h - 1 - y, w - 1 - x, c)
        }),
        _ => Image::from_fn(w, h, img.channels(), |y, x, c| img.get(h - 1 - x, y, c)),
    }
    .expect("rotation preserves pixel count")
}

pub fn flip_horizontal(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, img.channels(), |y, x, c| {
        img.get(y, w - 1 - x, c)
    })
    .expect("same extents")
}

pub fn flip_vertical(img: &Image) -> Image {
    let h = img.height();
    Image::from_fn(h, img.width(), img.channels(), |y, x, c| {
        img.get(h - 1 - y, x, c)
    })
    .expect("same extents")
}

/// Scales content about the image centre, keeping extents. `factor > 1`
/// crops in; `factor < 1` shrinks the content with replicated borders.
pub fn zoom(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let (cy, cx) = (img.height() as f64 / 2.0, img.width() as f64 / 2.0);
    Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
        let sy = cy + (y as f64 + 0.5 - cy) / factor - 0.5;
        let sx = cx + (x as f64 + 0.5 - cx) / factor - 0.5;
        to_u8(sample_clamped(img, sy, sx, c))
    })
    .expect("same extents")
}

/// Adds `delta·255` to every value and clamps.
pub fn adjust_brightness(img: &Image, delta: f64) -> Image {
    if delta == 0.0 {
        return img.clone();
    }
    let shift = delta * 255.0;
    let px = img
        .pixels()
        .iter()
        .map(|&v| to_u8(v as f64 + shift))
        .collect();
    Image::new(img.height(), img.width(), img.channels(), px).expect("same extents")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Allowed rotations in degrees, drawn uniformly.
    pub rotation_degrees: Vec<u32>,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub zoom_range: (f64, f64),
    /// Brightness shifts are drawn from `[-δ, δ]` as a fraction of full scale.
    pub brightness_delta: f64,
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            rotation_degrees: vec![0],
            horizontal_flip: false,
            vertical_flip: false,
            zoom_range: (1.0, 1.0),
            brightness_delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation_degrees.is_empty() {
            return config_err("augment.rotation_degrees must not be empty");
        }
        if let Some(bad) = self
            .rotation_degrees
            .iter()
            .find(|d| ![0, 90, 180, 270].contains(*d))
        {
            return config_err(format!("rotation {bad} is not one of 0, 90, 180, 270"));
        }
        let (lo, hi) = self.zoom_range;
        if !(0.8..=1.2).contains(&lo) || !(0.8..=1.2).contains(&hi) || lo > hi {
            return config_err(format!(
                "zoom range ({lo}, {hi}) must be ordered within [0.8, 1.2]"
            ));
        }
        if !(0.0..=0.2).contains(&self.brightness_delta) {
            return config_err(format!(
                "brightness delta {} must lie in [0, 0.2]",
                self.brightness_delta
            ));
        }
        Ok(())
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation_degrees: vec![0, 90, 180, 270],
            horizontal_flip: true,
            vertical_flip: true,
            zoom_range: (0.9, 1.1),
            brightness_delta: 0.1,
        }
    }
}

/// Concrete transform drawn from an [`AugmentSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub rotation_degrees: u32,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub zoom: f64,
    pub brightness: f64,
}

impl AugmentDraw {
    /// Draws parameters in a fixed order. Quarter turns are only eligible for
    /// square images so extents never change.
    pub fn sample(spec: &AugmentSpec, square: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let allowed: Vec<u32> = spec
            .rotation_degrees
            .iter()
            .copied()
            .filter(|d| square || d % 180 == 0)
            .collect();
        let rotation_degrees = if allowed.is_empty() {
            0
        } else {
            allowed[rng.random_range(0..allowed.len())]
        };
        let flip_horizontal = spec.horizontal_flip && rng.random_bool(0.5);
        let flip_vertical = spec.vertical_flip && rng.random_bool(0.5);
        let (lo, hi) = spec.zoom_range;
        let zoom = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let d = spec.brightness_delta;
        let brightness = if d > 0.0 {
            rng.random_range(-d..=d)
        } else {
            0.0
        };
        Self {
            rotation_degrees,
            flip_horizontal,
            flip_vertical,
            zoom,
            brightness,
        }
    }

    /// Rotate, flip, zoom, then brightness.
    pub fn apply(&self, img: &Image) -> Image {
        let mut out = rotate90(img, (self.rotation_degrees / 90) as usize);
        if self.flip_horizontal {
            out = flip_horizontal(&out);
        }
        if self.flip_vertical {
            out = flip_vertical(&out);
        }
        out = zoom(&out, self.zoom);
        adjust_brightness(&out, self.brightness)
    }
}

/// Seeded augmentation; a pure function of its arguments.
pub fn augment(img: &Image, spec: &AugmentSpec, seed: u64) -> Image {
    AugmentDraw::sample(spec, img.height() == img.width(), seed).apply(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |y, x, ch| (y * 17 + x * 5 + ch * 60) as u8).unwrap()
    }

    #[test]
    fn resize_identity_and_constants() {
        let img = ramp(7, 9, 3);
        assert_eq!(resize(&img, (7, 9)).unwrap(), img);
        let flat = Image::filled(13, 5, 1, 42).unwrap();
        let r = resize(&flat, (8, 8)).unwrap();
        assert!(r.pixels().iter().all(|&v| v == 42));
    }

    #[test]
    fn resize_half_pixel_downsample_averages_pairs() {
        let img = Image::new(1, 4, 1, vec![0, 100, 200, 250]).unwrap();
        let r = resize(&img, (1, 2)).unwrap();
        assert_eq!(r.pixels(), &[50, 225]);
    }

    #[test]
    fn rotations_compose() {
        let img = ramp(5, 5, 1);
        assert_eq!(rotate90(&rotate90(&img, 2), 2), img);
        assert_eq!(rotate90(&rotate90(&img, 1), 3), img);
        let r = rotate90(&ramp(2, 3, 1), 1);
        assert_eq!((r.height(), r.width()), (3, 2));
    }

    #[test]
    fn flips_are_involutions() {
        let img = ramp(4, 6, 3);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_vertical(&flip_vertical(&img)), img);
    }

    #[test]
    fn identity_spec_is_identity() {
        let img = ramp(6, 6, 3);
        for seed in 0..20 {
            assert_eq!(augment(&img, &AugmentSpec::identity(), seed), img);
        }
    }

    #[test]
    fn brightness_clamps() {
        let img = Image::new(1, 3, 1, vec![0, 128, 250]).unwrap();
        assert_eq!(adjust_brightness(&img, 0.1).pixels(), &[26, 154, 255]);
        assert_eq!(adjust_brightness(&img, -0.2).pixels(), &[0, 77, 199]);
    }

    #[test]
    fn non_square_images_keep_extents() {
        let img = ramp(4, 7, 1);
        for seed in 0..32 {
            let out = augment(&img, &AugmentSpec::default(), seed);
            assert_eq!((out.height(), out.width()), (4, 7));
        }
    }

    #[test]
    fn spec_validation() {
        assert!(AugmentSpec::default().validate().is_ok());
        let s = AugmentSpec {
            rotation_degrees: vec![45],
            ..AugmentSpec::default()
        };
        assert!(s.validate().is_err());
        let s = AugmentSpec {
            zoom_range: (1.1, 0.9),
            ..AugmentSpec::default()
        };
        assert!(s.validate().is_err());
        let s = AugmentSpec {
            brightness_delta: 0.3,
            ..AugmentSpec::default()
        };
        assert!(s.validate().is_err());
    }
}
