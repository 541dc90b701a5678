//! Deformable convolution: every kernel tap is displaced by a learned
//! per-position offset and read with zero-padded bilinear interpolation.
//!
//! Offset channel `2k` holds the x (column) shift of tap `k = ky·kw + kx`
//! and channel `2k + 1` its y (row) shift.

use cbamnet_tensor::{Conv2dSpec, Result, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::params::{join, LeafFn};

/// `offset_kernel` is `(2·kh·kw)×C×3×3`; `value_kernel` is `C×C×kh×kw`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformableAttentionParams<T> {
    pub offset_kernel: T,
    pub value_kernel: T,
}

pub const OFFSET_KERNEL: usize = 3;

impl DeformableAttentionParams<Tensor> {
    pub fn zeros(channels: usize, kh: usize, kw: usize) -> Self {
        Self {
            offset_kernel: Tensor::zeros(&[2 * kh * kw, channels, OFFSET_KERNEL, OFFSET_KERNEL]),
            value_kernel: Tensor::zeros(&[channels, channels, kh, kw]),
        }
    }
}

impl<T> DeformableAttentionParams<T> {
    pub fn map<'a, U>(
        &'a self,
        prefix: &str,
        f: &mut LeafFn<'_, 'a, T, U>,
    ) -> DeformableAttentionParams<U> {
        DeformableAttentionParams {
            offset_kernel: f(&join(prefix, "offset_kernel"), &self.offset_kernel),
            value_kernel: f(&join(prefix, "value_kernel"), &self.value_kernel),
        }
    }
}

/// One in-bounds neighbour of a bilinear read with its weight and the
/// weight's partial derivatives in x and y.
#[derive(Clone, Copy, Debug)]
struct Tap {
    y: usize,
    x: usize,
    w: f64,
    dwdx: f64,
    dwdy: f64,
}

fn taps(h: usize, w: usize, x: f64, y: f64, out: &mut Vec<Tap>) {
    out.clear();
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let corners = [
        (0, 0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1, 1, fx * fy, fy, fx),
    ];
    for (ox, oy, wt, dwdx, dwdy) in corners {
        let (cx, cy) = (x0 + ox as f64, y0 + oy as f64);
        if cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64 {
            out.push(Tap {
                y: cy as usize,
                x: cx as usize,
                w: wt,
                dwdx,
                dwdy,
            });
        }
    }
}

/// Bilinear read of `f[b, c]` at column `x`, row `y`; zero outside the map.
pub fn bilinear_sample(f: &Tensor, x: f64, y: f64, b: usize, c: usize) -> f64 {
    bilinear_sample_grad(f, x, y, b, c).0
}

/// Value and its partial derivatives `(value, ∂/∂x, ∂/∂y)`.
///
/// At integer coordinates the derivative is the one-sided value from the
/// cell whose top-left corner is the sample point.
pub fn bilinear_sample_grad(f: &Tensor, x: f64, y: f64, b: usize, c: usize) -> (f64, f64, f64) {
    let s = f.shape();
    let (ch, h, w) = (s[1], s[2], s[3]);
    let plane = &f.data()[(b * ch + c) * h * w..][..h * w];
    let mut buf = Vec::with_capacity(4);
    taps(h, w, x, y, &mut buf);
    buf.iter().fold((0.0, 0.0, 0.0), |(v, gx, gy), t| {
        let p = plane[t.y * w + t.x];
        (v + t.w * p, gx + t.dwdx * p, gy + t.dwdy * p)
    })
}

#[derive(Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }

    /// Sampling point of tap `k` for output position `pos`.
    fn point(&self, offsets: &[f64], b: usize, k: usize, pos: usize) -> (f64, f64) {
        let (oy, ox) = (pos / self.w, pos % self.w);
        let (ky, kx) = (k / self.kw, k % self.kw);
        let base = (b * 2 * self.taps() + 2 * k) * self.hw() + pos;
        let x = ox as f64 + kx as f64 - (self.kw / 2) as f64 + offsets[base];
        let y = oy as f64 + ky as f64 - (self.kh / 2) as f64 + offsets[base + self.hw()];
        (x, y)
    }
}

/// Sampled columns of batch item `b`: row `ic·K + k`, column `pos`.
fn columns(f: &[f64], offsets: &[f64], g: &Geometry, b: usize) -> Vec<f64> {
    let (hw, k_n) = (g.hw(), g.taps());
    let mut cols = vec![0.0; g.c * k_n * hw];
    let mut buf = Vec::with_capacity(4);
    for k in 0..k_n {
        for pos in 0..hw {
            let (x, y) = g.point(offsets, b, k, pos);
            taps(g.h, g.w, x, y, &mut buf);
            if buf.is_empty() {
                continue;
            }
            for ic in 0..g.c {
                let plane = &f[(b * g.c + ic) * hw..][..hw];
                cols[(ic * k_n + k) * hw + pos] =
                    buf.iter().map(|t| t.w * plane[t.y * g.w + t.x]).sum();
            }
        }
    }
    cols
}

/// Deformable convolution with stride 1 and `k/2` padding. `offsets` is
/// `(N, 2·kh·kw, H, W)` and `weight` is `(Cout, C, kh, kw)` with odd kernels.
pub fn deform_conv2d<'t>(f: Var<'t>, offsets: Var<'t>, weight: Var<'t>) -> Result<Var<'t>> {
    let (fv, ov, wv) = (f.value(), offsets.value(), weight.value());
    let (&[b, c, h, w], &[cout, cin, kh, kw]) = (fv.shape(), wv.shape()) else {
        return Err(TensorError::Shape(format!(
            "deform_conv2d expects rank-4 input and weight, got {:?} and {:?}",
            fv.shape(),
            wv.shape()
        )));
    };
    if cin != c || kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::Shape(format!(
            "weight {:?} incompatible with {c} input channels or even kernel",
            wv.shape()
        )));
    }
    if ov.shape() != [b, 2 * kh * kw, h, w] {
        return Err(TensorError::Shape(format!(
            "offsets must be {:?}, got {:?}",
            [b, 2 * kh * kw, h, w],
            ov.shape()
        )));
    }
    let g = Geometry {
        b,
        c,
        h,
        w,
        cout,
        kh,
        kw,
    };
    let (hw, ck) = (g.hw(), c * g.taps());
    let mut out = vec![0.0; b * cout * hw];
    let mut saved = Vec::with_capacity(b);
    for bi in 0..b {
        let cols = columns(fv.data(), ov.data(), &g, bi);
        for oc in 0..cout {
            let orow = &mut out[(bi * cout + oc) * hw..][..hw];
            for (j, &wt) in wv.data()[oc * ck..(oc + 1) * ck].iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                for (o, &col) in orow.iter_mut().zip(&cols[j * hw..(j + 1) * hw]) {
                    *o += wt * col;
                }
            }
        }
        saved.push(cols);
    }
    let out = Tensor::new(vec![b, cout, h, w], out)?;
    Ok(f.tape()
        .custom_op(out, &[f, offsets, weight], move |grad, needs| {
            let gd = grad.data();
            let mut df = needs[0].then(|| vec![0.0; fv.len()]);
            let mut doff = needs[1].then(|| vec![0.0; ov.len()]);
            let mut dw = needs[2].then(|| vec![0.0; wv.len()]);
            let mut buf = Vec::with_capacity(4);
            for bi in 0..g.b {
                let gb = &gd[bi * g.cout * hw..][..g.cout * hw];
                if let Some(dw) = dw.as_mut() {
                    let cols = &saved[bi];
                    for oc in 0..g.cout {
                        let grow = &gb[oc * hw..(oc + 1) * hw];
                        for j in 0..ck {
                            let crow = &cols[j * hw..(j + 1) * hw];
                            dw[oc * ck + j] +=
                                grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if df.is_none() && doff.is_none() {
                    continue;
                }
                // Gradient with respect to the sampled columns: Wᵀ·g.
                let mut dcols = vec![0.0; ck * hw];
                for oc in 0..g.cout {
                    let grow = &gb[oc * hw..(oc + 1) * hw];
                    for j in 0..ck {
                        let wt = wv.data()[oc * ck + j];
                        if wt == 0.0 {
                            continue;
                        }
                        for (d, &gv) in dcols[j * hw..(j + 1) * hw].iter_mut().zip(grow) {
                            *d += wt * gv;
                        }
                    }
                }
                for k in 0..g.taps() {
                    for pos in 0..hw {
                        let (x, y) = g.point(ov.data(), bi, k, pos);
                        taps(g.h, g.w, x, y, &mut buf);
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ic in 0..g.c {
                            let dc = dcols[(ic * g.taps() + k) * hw + pos];
                            if dc == 0.0 {
                                continue;
                            }
                            let base = (bi * g.c + ic) * hw;
                            for t in &buf {
                                let idx = base + t.y * g.w + t.x;
                                if let Some(df) = df.as_mut() {
                                    df[idx] += dc * t.w;
                                }
                                gx += dc * t.dwdx * fv.data()[idx];
                                gy += dc * t.dwdy * fv.data()[idx];
                            }
                        }
                        if let Some(doff) = doff.as_mut() {
                            let base = (bi * 2 * g.taps() + 2 * k) * hw + pos;
                            doff[base] += gx;
                            doff[base + hw] += gy;
                        }
                    }
                }
            }
            let wrap = |v: Option<Vec<f64>>, shape: &[usize]| {
                v.map(|d| Tensor::new(shape.to_vec(), d).expect("gradient shape"))
            };
            vec![
                wrap(df, fv.shape()),
                wrap(doff, ov.shape()),
                wrap(dw, wv.shape()),
            ]
        }))
}

/// Offsets predicted from `f` by a 3×3 convolution, then a deformable
/// convolution with the value kernel.
pub fn deformable_attention<'t>(
    f: Var<'t>,
    p: &DeformableAttentionParams<Var<'t>>,
) -> Result<Var<'t>> {
    let offsets = f.conv2d(p.offset_kernel, Conv2dSpec::same(OFFSET_KERNEL))?;
    deform_conv2d(f, offsets, p.value_kernel)
}
