use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn batched_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        _ => shape_err(format!("matmul of {a:?} and {b:?}")),
    }
}

impl<'t> Var<'t> {
    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal batch extents.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (batch, m, k, n) = batched_dims(a.shape(), b.shape())?;
        let mut out = vec![0.0; batch * m * n];
        for s in 0..batch {
            gemm_nn(
                &a.data()[s * m * k..(s + 1) * m * k],
                &b.data()[s * k * n..(s + 1) * k * n],
                &mut out[s * m * n..(s + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if a.rank() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let out = Tensor::new(shape, out)?;
        Ok(self.tape().custom_op(out, &[self, other], move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                let mut da = vec![0.0; batch * m * k];
                for s in 0..batch {
                    gemm_nt(
                        &gd[s * m * n..(s + 1) * m * n],
                        &b.data()[s * k * n..(s + 1) * k * n],
                        &mut da[s * m * k..(s + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_parts(a.shape().to_vec(), da)
            });
            let gb = needs[1].then(|| {
                let mut db = vec![0.0; batch * k * n];
                for s in 0..batch {
                    gemm_tn(
                        &a.data()[s * m * k..(s + 1) * m * k],
                        &gd[s * m * n..(s + 1) * m * n],
                        &mut db[s * k * n..(s + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::from_parts(b.shape().to_vec(), db)
            });
            vec![ga, gb]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return shape_err("transpose needs rank >= 2");
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }
}

/// Fully connected layer: `x[b×in] · w[in×out] + bias[out]`.
pub fn dense<'t>(x: Var<'t>, w: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (xs, ws, bs) = (x.shape(), w.shape(), bias.shape());
    if xs.len() != 2 || ws.len() != 2 || bs != [ws[1]] {
        return shape_err(format!("dense with x {xs:?}, w {ws:?}, bias {bs:?}"));
    }
    x.matmul(w)?.add(bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::TensorError;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn hand_multiplication() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn identity_and_scalar_cases() {
        let tape = Tape::new();
        let x = t(&[3, 2], &[1.5, -2.0, 0.25, 4.0, 7.0, -1.0]);
        let c = tape
            .constant(Tensor::eye(3))
            .matmul(tape.constant(x.clone()))
            .unwrap();
        assert_eq!(*c.value(), x);
        let s = tape
            .constant(t(&[1, 1], &[3.0]))
            .matmul(tape.constant(t(&[1, 1], &[-2.5])))
            .unwrap();
        assert_eq!(s.value().data(), &[-7.5]);
    }

    #[test]
    fn inner_extent_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::ones(&[2, 3]));
        let b = tape.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn matmul_gradients_are_transposed_products() {
        let tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2, 1], &[5.0, 6.0]));
        let grads = tape.backward(a.matmul(b).unwrap().sum()).unwrap();
        // dA = 1·Bᵀ per row, dB = Aᵀ·1
        assert_eq!(grads.wrt(a).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.wrt(b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn dense_special_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let bias = tape.constant(t(&[2], &[0.5, -0.5]));
        let y = dense(x, tape.constant(Tensor::zeros(&[3, 2])), bias).unwrap();
        assert_eq!(y.value().data(), &[0.5, -0.5, 0.5, -0.5]);
        let y = dense(
            x,
            tape.constant(Tensor::eye(3)),
            tape.constant(Tensor::zeros(&[3])),
        )
        .unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }
}
