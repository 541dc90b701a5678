use super::shape::axis_split;
use crate::error::Result;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Mean,
    Max,
}

/// Reduces one axis to extent 1. Max keeps the first maximal index.
fn reduce_axis(x: &Tensor, axis: usize, kind: ReduceKind) -> Result<(Tensor, Vec<usize>)> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let slot = o * inner + i;
            match kind {
                ReduceKind::Mean => {
                    let s: f64 = (0..len).map(|k| d[base + k * inner]).sum();
                    out[slot] = s / len as f64;
                }
                ReduceKind::Max => {
                    let mut best = 0;
                    for k in 1..len {
                        if d[base + k * inner] > d[base + best * inner] {
                            best = k;
                        }
                    }
                    out[slot] = d[base + best * inner];
                    arg[slot] = best;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Ok((Tensor::from_parts(shape, out), arg))
}

fn softmax_rows(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..len).map(|k| (d[at(k)] - m).exp()).sum();
            let lz = z.ln();
            for k in 0..len {
                out[at(k)] = if log {
                    d[at(k)] - m - lz
                } else {
                    (d[at(k)] - m).exp() / z
                };
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Row-wise softmax of a plain tensor, shared by ops and evaluation code.
pub fn softmax_tensor(x: &Tensor, axis: usize) -> Result<Tensor> {
    softmax_rows(x, axis, false)
}

impl<'t> Var<'t> {
    /// Sum of all elements as a rank-0 scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .custom_op(Tensor::scalar(x.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.data()[0]))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean or max over `axis`, keeping it with extent 1.
    pub fn reduce_axis(self, axis: usize, kind: ReduceKind) -> Result<Var<'t>> {
        let x = self.value();
        let (out, arg) = reduce_axis(&x, axis, kind)?;
        let shape = x.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis)?;
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            let gd = g.data();
            let mut dx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let slot = o * inner + i;
                    let base = o * len * inner + i;
                    match kind {
                        ReduceKind::Mean => {
                            let v = gd[slot] / len as f64;
                            for k in 0..len {
                                dx[base + k * inner] = v;
                            }
                        }
                        ReduceKind::Max => dx[base + arg[slot] * inner] = gd[slot],
                    }
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }

    /// Softmax along `axis`, stabilised by subtracting the row maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = softmax_rows(&self.value(), axis, false)?;
        let y = out.clone();
        let (outer, len, inner) = axis_split(y.shape(), axis)?;
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = softmax_rows(&self.value(), axis, true)?;
        let y = out.clone();
        let (outer, len, inner) = axis_split(y.shape(), axis)?;
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            let (gd, yd) = (g.data(), y.data());
            let mut dx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| o * len * inner + k * inner + i;
                    let gsum: f64 = (0..len).map(|k| gd[at(k)]).sum();
                    for k in 0..len {
                        dx[at(k)] = gd[at(k)] - yd[at(k)].exp() * gsum;
                    }
                }
            }
            vec![Some(Tensor::from_parts(y.shape().to_vec(), dx))]
        }))
    }
}
