//! Straight-line reference implementations. They share no code with the
//! library beyond the `Tensor` container and `Image` accessors.
#![allow(dead_code, clippy::needless_range_loop)]

use cbamnet_core::preprocess::Image;
use cbamnet_tensor::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense NCHW convolution, `groups == 1`, zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = (y * stride + ky) as isize - pad as isize;
                                let sx = (xx * stride + kx) as isize - pad as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += x.at(&[n, i, sy as usize, sx as usize])
                                        * w.at(&[o, i, ky, kx]);
                                }
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

pub struct CbamOut {
    pub out: Tensor,
    /// `(b, C)`
    pub channel_gate: Vec<Vec<f64>>,
    /// `(b, H·W)`
    pub spatial_gate: Vec<Vec<f64>>,
}

/// Channel gate then spatial gate, written out loop by loop.
pub fn cbam(x: &Tensor, w0: &Tensor, w1: &Tensor, kernel: &Tensor) -> CbamOut {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let hidden = w0.shape()[1];
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut channel_gate = Vec::new();
    let mut spatial_gate = Vec::new();
    for n in 0..b {
        let mut avg = vec![0.0; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for ch in 0..c {
            for p in 0..hw {
                let v = x.data()[(n * c + ch) * hw + p];
                avg[ch] += v;
                if v > max[ch] {
                    max[ch] = v;
                }
            }
            avg[ch] /= hw as f64;
        }
        let mlp = |v: &[f64]| -> Vec<f64> {
            let mut mid = vec![0.0; hidden];
            for (i, m) in mid.iter_mut().enumerate() {
                let mut s = 0.0;
                for (ch, vc) in v.iter().enumerate() {
                    s += vc * w0.at(&[ch, i]);
                }
                *m = s.max(0.0);
            }
            (0..c)
                .map(|j| (0..hidden).map(|i| mid[i] * w1.at(&[i, j])).sum())
                .collect()
        };
        let (ma, mm) = (mlp(&avg), mlp(&max));
        let mc: Vec<f64> = (0..c).map(|j| sigmoid(ma[j] + mm[j])).collect();
        let mut fc = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                fc[ch * hw + p] = mc[ch] * x.data()[(n * c + ch) * hw + p];
            }
        }
        let mut mean_map = vec![0.0; hw];
        let mut max_map = vec![f64::NEG_INFINITY; hw];
        for p in 0..hw {
            for ch in 0..c {
                mean_map[p] += fc[ch * hw + p];
                max_map[p] = max_map[p].max(fc[ch * hw + p]);
            }
            mean_map[p] /= c as f64;
        }
        let mut ms = vec![0.0; hw];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ky in 0..7 {
                    for kx in 0..7 {
                        let sy = y as isize + ky as isize - 3;
                        let sx = xx as isize + kx as isize - 3;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        let p = sy as usize * w + sx as usize;
                        s += kernel.at(&[0, 0, ky, kx]) * mean_map[p]
                            + kernel.at(&[0, 1, ky, kx]) * max_map[p];
                    }
                }
                ms[y * w + xx] = sigmoid(s);
            }
        }
        for ch in 0..c {
            for p in 0..hw {
                out.data_mut()[(n * c + ch) * hw + p] = ms[p] * fc[ch * hw + p];
            }
        }
        channel_gate.push(mc);
        spatial_gate.push(ms);
    }
    CbamOut {
        out,
        channel_gate,
        spatial_gate,
    }
}

/// `x + softmax(QKᵀ/√d)·V·(Wo)` over the `H·W` tokens of each item.
pub fn self_attention(
    x: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: Option<&Tensor>,
) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = wq.shape()[1];
    let n = h * w;
    let mut out = x.clone();
    for bi in 0..b {
        let tok = |p: usize, ch: usize| x.data()[(bi * c + ch) * n + p];
        let proj = |wt: &Tensor| -> Vec<Vec<f64>> {
            (0..n)
                .map(|p| {
                    (0..d)
                        .map(|j| (0..c).map(|ch| tok(p, ch) * wt.at(&[ch, j])).sum())
                        .collect()
                })
                .collect()
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        for p in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|m| (0..d).map(|j| q[p][j] * k[m][j]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            let mixed: Vec<f64> = (0..d)
                .map(|j| (0..n).map(|m| e[m] / z * v[m][j]).sum())
                .collect();
            for ch in 0..c {
                let add = match wo {
                    Some(wo) => (0..d).map(|j| mixed[j] * wo.at(&[j, ch])).sum(),
                    None => mixed[ch],
                };
                out.data_mut()[(bi * c + ch) * n + p] += add;
            }
        }
    }
    out
}

/// Squeeze-and-excitation with biased dense layers.
pub fn se_block(x: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let r = w1.shape()[1];
    let hw = h * w;
    let mut out = x.clone();
    for n in 0..b {
        let gap: Vec<f64> = (0..c)
            .map(|ch| {
                x.data()[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                    .iter()
                    .sum::<f64>()
                    / hw as f64
            })
            .collect();
        let mid: Vec<f64> = (0..r)
            .map(|i| {
                ((0..c).map(|ch| gap[ch] * w1.at(&[ch, i])).sum::<f64>() + b1.data()[i]).max(0.0)
            })
            .collect();
        for ch in 0..c {
            let g = sigmoid((0..r).map(|i| mid[i] * w2.at(&[i, ch])).sum::<f64>() + b2.data()[ch]);
            for v in &mut out.data_mut()[(n * c + ch) * hw..(n * c + ch + 1) * hw] {
                *v *= g;
            }
        }
    }
    out
}

fn bilinear(x: &Tensor, n: usize, ch: usize, py: f64, px: f64) -> f64 {
    let (h, w) = (x.shape()[2] as isize, x.shape()[3] as isize);
    let (y0, x0) = (py.floor(), px.floor());
    let (ty, tx) = (py - y0, px - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
            if yy >= 0 && xx >= 0 && yy < h && xx < w {
                acc += wy * wx * x.at(&[n, ch, yy as usize, xx as usize]);
            }
        }
    }
    acc
}

/// Deformable convolution, stride 1, `k/2` padding; offset channel `2k`
/// shifts tap `k` in x and `2k+1` in y.
pub fn deform_conv2d(x: &Tensor, offsets: &Tensor, w: &Tensor) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let mut out = Tensor::zeros(&[b, co, h, wd]);
    for n in 0..b {
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let k = ky * kw + kx;
                            let px =
                                (xx + kx) as f64 - (kw / 2) as f64 + offsets.at(&[n, 2 * k, y, xx]);
                            let py = (y + ky) as f64 - (kh / 2) as f64
                                + offsets.at(&[n, 2 * k + 1, y, xx]);
                            for i in 0..c {
                                acc += w.at(&[o, i, ky, kx]) * bilinear(x, n, i, py, px);
                            }
                        }
                    }
                    out.data_mut()[((n * co + o) * h + y) * wd + xx] = acc;
                }
            }
        }
    }
    out
}

/// Median of the edge-replicated `k×k` window by full sort.
pub fn median_filter(img: &Image, k: usize) -> Image {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = (k / 2) as isize;
    Image::from_fn(h, w, c, |y, x, ch| {
        let mut vals = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                let sy = (y as isize + dy).max(0).min(h as isize - 1) as usize;
                let sx = (x as isize + dx).max(0).min(w as isize - 1) as usize;
                vals.push(img.get(sy, sx, ch));
            }
        }
        vals.sort();
        vals[vals.len() / 2]
    })
    .unwrap()
}

/// CLAHE for a grey image split into two side-by-side tiles: per-tile
/// clipped-histogram tables, blended linearly in x between the two tile
/// centres and held constant outside them.
pub fn clahe_two_tiles(img: &Image, clip: f64) -> Image {
    let (h, w) = (img.height(), img.width());
    let half = w / 2;
    let mut luts = [[0u8; 256]; 2];
    for (t, lut) in luts.iter_mut().enumerate() {
        let (x0, x1) = if t == 0 { (0, half) } else { (half, w) };
        let mut hist = [0f64; 256];
        for y in 0..h {
            for x in x0..x1 {
                hist[img.get(y, x, 0) as usize] += 1.0;
            }
        }
        let n = (h * (x1 - x0)) as f64;
        let occupied = hist.iter().filter(|&&v| v > 0.0).count();
        if occupied <= 1 {
            for v in 0..256 {
                lut[v] = v as u8;
            }
            continue;
        }
        let limit = clip * n / 256.0;
        loop {
            let mut excess = 0.0;
            for v in hist.iter_mut() {
                if *v > limit {
                    excess += *v - limit;
                    *v = limit;
                }
            }
            for v in hist.iter_mut() {
                *v += excess / 256.0;
            }
            if excess < 1.0 {
                break;
            }
        }
        let total: f64 = hist.iter().sum();
        let mut cdf = 0.0;
        for v in 0..256 {
            cdf += hist[v];
            lut[v] = (255.0 * cdf / total).round().clamp(0.0, 255.0) as u8;
        }
    }
    let c0 = (half - 1) as f64 / 2.0;
    let c1 = (half + w - 1) as f64 / 2.0;
    Image::from_fn(h, w, 1, |y, x, _| {
        let v = img.get(y, x, 0) as usize;
        let fx = ((x as f64 - c0) / (c1 - c0)).clamp(0.0, 1.0);
        let a = luts[0][v] as f64;
        let b = luts[1][v] as f64;
        ((1.0 - fx) * a + fx * b).round().clamp(0.0, 255.0) as u8
    })
    .unwrap()
}

/// Mean of `−(y ln p + (1−y) ln(1−p))` with `p = e^{l1}/(e^{l0}+e^{l1})`.
pub fn bce(logits: &[[f64; 2]], labels: &[f64]) -> f64 {
    let mut total = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        let p = l[1].exp() / (l[0].exp() + l[1].exp());
        total += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    }
    total / labels.len() as f64
}

/// `P(s₊ > s₋) + ½·P(s₊ = s₋)` over all positive/negative pairs.
pub fn mann_whitney_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
