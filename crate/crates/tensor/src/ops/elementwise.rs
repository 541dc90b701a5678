use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_pair, reduce_to_shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Relu,
    Tanh,
    Scale(f64),
}

impl ElementwiseOp {
    pub fn is_binary(self) -> bool {
        matches!(self, Self::Add | Self::Sub | Self::Mul)
    }
}

/// Numerically stable logistic function; `exp` only ever sees `-|x|`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    if x >= 0.0 {
        1.0 / (1.0 + e)
    } else {
        e / (1.0 + e)
    }
}

/// Applies `f` over the broadcast of `a` and `b`.
pub fn broadcast_apply(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = vec![0.0; out.iter().product()];
    for_each_pair(&out, &sa, &sb, |i, oa, ob| data[i] = f(ad[oa], bd[ob]));
    Tensor::new(out, data)
}

/// Dispatches a named elementwise op; binary ops need `b`.
pub fn elementwise<'t>(op: ElementwiseOp, a: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    match (op.is_binary(), b) {
        (true, Some(b)) => match op {
            ElementwiseOp::Add => a.add(b),
            ElementwiseOp::Sub => a.sub(b),
            ElementwiseOp::Mul => a.mul(b),
            _ => unreachable!(),
        },
        (true, None) => Err(TensorError::Contract(format!("{op:?} needs two operands"))),
        (false, Some(_)) => Err(TensorError::Contract(format!("{op:?} is unary"))),
        (false, None) => Ok(match op {
            ElementwiseOp::Sigmoid => a.sigmoid(),
            ElementwiseOp::Relu => a.relu(),
            ElementwiseOp::Tanh => a.tanh(),
            ElementwiseOp::Scale(s) => a.scale(s),
            _ => unreachable!(),
        }),
    }
}

// Fallible (shape-checked) methods, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_apply(&a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().custom_op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g, &sa)),
                needs[1].then(|| reduce_to_shape(g, &sb)),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_apply(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().custom_op(out, &[self, other], move |g, needs| {
            vec![
                needs[0].then(|| reduce_to_shape(g, &sa)),
                needs[1].then(|| reduce_to_shape(&g.map(|v| -v), &sb)),
            ]
        }))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = broadcast_apply(&a, &b, |x, y| x * y)?;
        Ok(self.tape().custom_op(out, &[self, other], move |g, needs| {
            let ga = needs[0].then(|| {
                let full = broadcast_apply(g, &b, |x, y| x * y).expect("broadcast checked");
                reduce_to_shape(&full, a.shape())
            });
            let gb = needs[1].then(|| {
                let full = broadcast_apply(g, &a, |x, y| x * y).expect("broadcast checked");
                reduce_to_shape(&full, b.shape())
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|v| v * s);
        self.tape()
            .custom_op(out, &[self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(sigmoid_scalar);
        let y = out.clone();
        self.tape().custom_op(out, &[self], move |g, _| {
            let d = broadcast_apply(g, &y, |g, y| g * y * (1.0 - y)).expect("same shape");
            vec![Some(d)]
        })
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let out = x.map(|v| v.max(0.0));
        self.tape().custom_op(out, &[self], move |g, _| {
            let d =
                broadcast_apply(g, &x, |g, x| if x > 0.0 { g } else { 0.0 }).expect("same shape");
            vec![Some(d)]
        })
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        let y = out.clone();
        self.tape().custom_op(out, &[self], move |g, _| {
            let d = broadcast_apply(g, &y, |g, y| g * (1.0 - y * y)).expect("same shape");
            vec![Some(d)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}
