use super::image::Image;
use crate::error::{config_err, Result};

/// Surrounds the image with `pad` rows and columns of zeros.
pub fn zero_pad(img: &Image, pad: usize) -> Image {
    if pad == 0 {
        return img.clone();
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0u8; ph * pw * c];
    for y in 0..h {
        let src = &img.pixels()[y * w * c..(y + 1) * w * c];
        let dst = ((y + pad) * pw + pad) * c;
        out[dst..dst + w * c].copy_from_slice(src);
    }
    Image::new(ph, pw, c, out).expect("padded extents are positive")
}

/// Per-channel median over a `k×k` window with edge replication.
pub fn median_filter(img: &Image, k: usize) -> Result<Image> {
    if k.is_multiple_of(2) {
        return config_err(format!("median kernel must be odd, got {k}"));
    }
    if k == 1 {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = (k / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = vec![0u8; img.pixels().len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                window.clear();
                for dy in -r..=r {
                    let sy = clamp(y as isize + dy, h);
                    for dx in -r..=r {
                        window.push(img.get(sy, clamp(x as isize + dx, w), ch));
                    }
                }
                let mid = window.len() / 2;
                out[(y * w + x) * c + ch] = *window.select_nth_unstable(mid).1;
            }
        }
    }
    Image::new(h, w, c, out)
}
