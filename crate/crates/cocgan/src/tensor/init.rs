use super::{Elem, Tensor};
use crate::error::Error;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Parameter initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; default for FC
    /// weights. `fan_in` is the first shape extent for matrices.
    UniformFanIn,
    /// All zeros; default for biases.
    Zeros,
    /// Every element set to the given value.
    Constant(f64),
}

/// Deterministic parameter init: the same rng state and scheme always
/// produce bitwise-identical tensors. Draws happen in f64 and are cast to
/// the target element type.
pub fn param_init<E: Elem>(
    shape: &[usize],
    scheme: InitScheme,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>, Error> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("param_init: degenerate shape {shape:?}")));
    }
    let n: usize = shape.iter().product();
    let data = match scheme {
        InitScheme::UniformFanIn => {
            let fan_in = shape[0];
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| E::from_f64(rng.random_range(-bound..=bound)))
                .collect()
        }
        InitScheme::Zeros => vec![E::ZERO; n],
        InitScheme::Constant(v) => vec![E::from_f64(v); n],
    };
    Ok(Tensor::new(data, shape))
}
