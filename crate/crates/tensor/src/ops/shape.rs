use crate::error::{shape_err, Result};
use crate::tape::Var;
use crate::tensor::{numel, Tensor};

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = out_shape.len();
    let n = t.len();
    let src = t.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            vec![Some(g.reshape(&orig).expect("same numel"))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank()
            || perm
                .iter()
                .any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true))
        {
            return shape_err(format!(
                "invalid permutation {perm:?} for rank {}",
                x.rank()
            ));
        }
        let out = permute_data(&x, perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.tape().custom_op(out, &[self], move |g, _| {
            vec![Some(permute_data(g, &inverse))]
        }))
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let Some(first) = parts.first() else {
        return shape_err("concat of nothing");
    };
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return shape_err(format!("concat axis {axis} out of range for {base:?}"));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || (0..s.len()).any(|d| d != axis && s[d] != base[d]) {
            return shape_err(format!("concat of {base:?} with {s:?} on axis {axis}"));
        }
    }
    let outer = numel(&base[..axis]);
    let inner = numel(&base[axis + 1..]);
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let mut shape = base.clone();
    shape[axis] = total;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for (v, &len) in values.iter().zip(&lens) {
            out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let out = Tensor::from_parts(shape, out);
    let tape = first.tape();
    Ok(tape.custom_op(out, parts, move |g, needs| {
        let gd = g.data();
        let mut offset = 0;
        lens.iter()
            .zip(needs)
            .zip(&values)
            .map(|((&len, &need), v)| {
                let start = offset;
                offset += len;
                need.then(|| {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let row = o * total * inner;
                        d.extend_from_slice(&gd[row + start * inner..row + (start + len) * inner]);
                    }
                    Tensor::from_parts(v.shape().to_vec(), d)
                })
            })
            .collect()
    }))
}

/// `(outer, axis_len, inner)` decomposition used by axis-wise kernels.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return shape_err(format!("axis {axis} out of range for {shape:?}"));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}
