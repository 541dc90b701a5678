use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Inverted-dropout keep mask: zero with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(shape: &[usize], p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    Tensor::from_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

impl<'t> Var<'t> {
    /// Identity in eval mode; the mask is a pure function of `(shape, p, seed)`.
    pub fn dropout(self, p: f64, training: bool, seed: u64) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self);
        }
        let mask = self.tape().constant(dropout_mask(&self.shape(), p, seed));
        self.mul(mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn identity_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 5], |i| i as f64));
        assert_eq!(*x.dropout(0.0, true, 1).unwrap().value(), *x.value());
        assert_eq!(*x.dropout(0.9, false, 1).unwrap().value(), *x.value());
        assert!(matches!(
            x.dropout(1.0, true, 1),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn empirical_drop_fraction() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[100_000]));
        let y = x.dropout(0.4, true, 7).unwrap().value();
        let dropped = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((dropped - 0.4).abs() < 0.01, "dropped fraction {dropped}");
        let kept = y.data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.6).abs() < 1e-15);
        let again = x.dropout(0.4, true, 7).unwrap().value();
        assert_eq!(*y, *again);
    }
}
