//! Dense `f64` tensors with reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Inverted dropout: keeps each entry with probability `1 - rate` and scales
/// survivors by `1 / (1 - rate)`. Identity when `rng` is `None` (eval) or
/// `rate` is zero.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - rate;
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::new(shape, mask).expect("mask matches input");
    tape.mul_const(x, mask).expect("mask matches input")
}
