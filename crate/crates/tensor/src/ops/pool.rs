use super::conv::output_extent;
use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err(format!("{what} expects (N, C, H, W), got {shape:?}")),
    }
}

impl<'t> Var<'t> {
    /// Windowed pooling without padding. Max routes gradient to the first
    /// maximal element of each window in scan order.
    pub fn pool2d(self, kind: PoolKind, kh: usize, kw: usize, stride: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = dims4(x.shape(), "pool2d")?;
        let (Some(ho), Some(wo)) = (
            output_extent(h, kh, stride, 0),
            output_extent(w, kw, stride, 0),
        ) else {
            return shape_err(format!("pool window {kh}x{kw} does not fit {h}x{w}"));
        };
        if kh == 0 || kw == 0 {
            return shape_err("empty pool window");
        }
        let d = x.data();
        let mut out = vec![0.0; n * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        let area = (kh * kw) as f64;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let slot = (plane * ho + oy) * wo + ox;
                    let mut acc = 0.0;
                    let mut best = usize::MAX;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let i = base + (oy * stride + ky) * w + ox * stride + kx;
                            match kind {
                                PoolKind::Avg => acc += d[i],
                                PoolKind::Max => {
                                    if best == usize::MAX || d[i] > d[best] {
                                        best = i;
                                    }
                                }
                            }
                        }
                    }
                    match kind {
                        PoolKind::Avg => out[slot] = acc / area,
                        PoolKind::Max => {
                            out[slot] = d[best];
                            arg[slot] = best;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, ho, wo], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let slot = (plane * ho + oy) * wo + ox;
                        match kind {
                            PoolKind::Max => dx[arg[slot]] += gd[slot],
                            PoolKind::Avg => {
                                let v = gd[slot] / area;
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        dx[plane * h * w
                                            + (oy * stride + ky) * w
                                            + ox * stride
                                            + kx] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }

    /// Reduces every spatial position of each channel: `(N, C, H, W) -> (N, C)`.
    pub fn global_pool(self, kind: PoolKind) -> Result<Var<'t>> {
        let x = self.value();
        let (n, c, h, w) = dims4(x.shape(), "global_pool")?;
        let area = h * w;
        let d = x.data();
        let mut out = Vec::with_capacity(n * c);
        let mut arg = Vec::with_capacity(n * c);
        for plane in d.chunks_exact(area) {
            match kind {
                PoolKind::Avg => out.push(plane.iter().sum::<f64>() / area as f64),
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    arg.push(best);
                }
            }
        }
        let out = Tensor::new(vec![n, c], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            let mut dx = vec![0.0; n * c * area];
            for (p, &gv) in g.data().iter().enumerate() {
                match kind {
                    PoolKind::Avg => dx[p * area..(p + 1) * area].fill(gv / area as f64),
                    PoolKind::Max => dx[p * area + arg[p]] = gv,
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), dx))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn constant_maps() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 4], 1.75));
        let avg = x.pool2d(PoolKind::Avg, 2, 2, 2).unwrap().value();
        assert!(avg.data().iter().all(|&v| v == 1.75));
        let gap = x.global_pool(PoolKind::Avg).unwrap().value();
        assert_eq!(gap.shape(), &[1, 2]);
        assert!(gap.data().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn small_windows() {
        let tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = x.pool2d(PoolKind::Max, 2, 2, 1).unwrap();
        assert_eq!(m.value().data(), &[4.0]);
        assert_eq!(x.global_pool(PoolKind::Avg).unwrap().value().data(), &[2.5]);
        assert_eq!(x.global_pool(PoolKind::Max).unwrap().value().data(), &[4.0]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_ties_pick_first() {
        let tape = Tape::new();
        let x = tape.param(Tensor::full(&[1, 1, 2, 2], 3.0));
        let g = tape
            .backward(x.pool2d(PoolKind::Max, 2, 2, 1).unwrap().sum())
            .unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0, 0.0]);
        let g = tape
            .backward(x.global_pool(PoolKind::Max).unwrap().sum())
            .unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 3]));
        assert!(x.pool2d(PoolKind::Avg, 3, 3, 1).is_err());
    }
}
