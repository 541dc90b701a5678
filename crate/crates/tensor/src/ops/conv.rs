//! Direct-loop 2-D convolution with groups.
//!
//! Input `(N, Cin, H, W)`, weight `(Cout, Cin/groups, kh, kw)`, output
//! `(N, Cout, Ho, Wo)` with `Ho = (H + 2p - kh)/s + 1`.

use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    /// Stride 1 with `k/2` padding, which keeps spatial extents for odd `k`.
    pub fn same(k: usize) -> Self {
        Self::new(1, k / 2, 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    s: usize,
    p: usize,
    groups: usize,
}

/// Output extent of a strided window; `None` when no window fits.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    (stride > 0 && padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

fn geometry(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Geometry> {
    let (&[n, cin, h, wd], &[cout, cin_g, kh, kw]) = (x, w) else {
        return shape_err(format!(
            "conv2d expects rank-4 input and weight, got {x:?} and {w:?}"
        ));
    };
    let g = spec.groups;
    if g == 0 || cin % g != 0 || cout % g != 0 || cin_g != cin / g {
        return shape_err(format!(
            "conv2d groups={g} incompatible with input channels {cin}, weight {w:?}"
        ));
    }
    let (Some(ho), Some(wo)) = (
        output_extent(h, kh, spec.stride, spec.padding),
        output_extent(wd, kw, spec.stride, spec.padding),
    ) else {
        return shape_err(format!(
            "conv2d kernel {kh}x{kw} (stride {}, pad {}) yields no output for {h}x{wd}",
            spec.stride, spec.padding
        ));
    };
    Ok(Geometry {
        n,
        cin,
        h,
        w: wd,
        cout,
        cin_g,
        kh,
        kw,
        ho,
        wo,
        s: spec.stride,
        p: spec.padding,
        groups: g,
    })
}

/// Output columns `ox` whose tap `kx` lands inside `[0, w)`.
#[inline]
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    // ix = ox*s + kx - p  ∈ [0, w)
    let lo = if kx >= g.p {
        0
    } else {
        (g.p - kx).div_ceil(g.s)
    };
    let hi_num = g.w as isize - 1 + g.p as isize - kx as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / g.s + 1).min(g.wo);
    (lo.min(hi), hi)
}

#[inline]
fn input_row(g: &Geometry, oy: usize, ky: usize) -> Option<usize> {
    let iy = (oy * g.s + ky) as isize - g.p as isize;
    (iy >= 0 && (iy as usize) < g.h).then_some(iy as usize)
}

fn forward(x: &[f64], wt: &[f64], g: &Geometry) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.cout * g.ho * g.wo];
    let cout_g = g.cout / g.groups;
    for b in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let plane = &mut out[(b * g.cout + oc) * g.ho * g.wo..][..g.ho * g.wo];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let xp = &x[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_cols(g, kx);
                        for oy in 0..g.ho {
                            let Some(iy) = input_row(g, oy, ky) else {
                                continue;
                            };
                            let xrow = &xp[iy * g.w..];
                            let orow = &mut plane[oy * g.wo..(oy + 1) * g.wo];
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox * g.s + kx - g.p];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn backward_input(gout: &[f64], wt: &[f64], g: &Geometry) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.cin * g.h * g.w];
    let cout_g = g.cout / g.groups;
    for b in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let gp = &gout[(b * g.cout + oc) * g.ho * g.wo..][..g.ho * g.wo];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let dxp = &mut dx[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = valid_cols(g, kx);
                        for oy in 0..g.ho {
                            let Some(iy) = input_row(g, oy, ky) else {
                                continue;
                            };
                            let grow = &gp[oy * g.wo..(oy + 1) * g.wo];
                            let drow = &mut dxp[iy * g.w..(iy + 1) * g.w];
                            for ox in lo..hi {
                                drow[ox * g.s + kx - g.p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn backward_weight(gout: &[f64], x: &[f64], g: &Geometry) -> Vec<f64> {
    let mut dw = vec![0.0; g.cout * g.cin_g * g.kh * g.kw];
    let cout_g = g.cout / g.groups;
    for oc in 0..g.cout {
        let grp = oc / cout_g;
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = valid_cols(g, kx);
                    let mut acc = 0.0;
                    for b in 0..g.n {
                        let gp = &gout[(b * g.cout + oc) * g.ho * g.wo..][..g.ho * g.wo];
                        let xp = &x[(b * g.cin + ic) * g.h * g.w..][..g.h * g.w];
                        for oy in 0..g.ho {
                            let Some(iy) = input_row(g, oy, ky) else {
                                continue;
                            };
                            let grow = &gp[oy * g.wo..];
                            let xrow = &xp[iy * g.w..];
                            for ox in lo..hi {
                                acc += grow[ox] * xrow[ox * g.s + kx - g.p];
                            }
                        }
                    }
                    dw[((oc * g.cin_g + icg) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    dw
}

/// Plain (tape-free) convolution.
pub fn conv2d_tensor(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = geometry(x.shape(), w.shape(), spec)?;
    Tensor::new(
        vec![g.n, g.cout, g.ho, g.wo],
        forward(x.data(), w.data(), &g),
    )
}

impl<'t> Var<'t> {
    pub fn conv2d(self, weight: Var<'t>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let g = geometry(x.shape(), w.shape(), spec)?;
        let out = Tensor::new(
            vec![g.n, g.cout, g.ho, g.wo],
            forward(x.data(), w.data(), &g),
        )?;
        Ok(self
            .tape()
            .custom_op(out, &[self, weight], move |gout, needs| {
                let dx = needs[0].then(|| {
                    Tensor::from_parts(
                        x.shape().to_vec(),
                        backward_input(gout.data(), w.data(), &g),
                    )
                });
                let dw = needs[1].then(|| {
                    Tensor::from_parts(
                        w.shape().to_vec(),
                        backward_weight(gout.data(), x.data(), &g),
                    )
                });
                vec![dx, dw]
            }))
    }
}
