//! Parameter containers are generic over their leaf type so one structure
//! describes stored weights (`Tensor`), tape leaves (`Var`) and gradients.
//! Every container provides `map`, which visits leaves in a fixed order and
//! passes each one's dotted name.

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Leaf visitor used by every `map`.
pub type LeafFn<'f, 'a, T, U> = dyn FnMut(&str, &'a T) -> U + 'f;
