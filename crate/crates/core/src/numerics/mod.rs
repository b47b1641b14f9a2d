//! Dense f64 kernel shared by the sequence model and the tabular baselines.

mod gradcheck;
mod matrix;
pub mod ops;
mod optim;
pub mod tensor_io;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, GradSample};
pub use matrix::{dot, Matrix};
pub use ops::{dropout, gelu, layer_norm, softmax_rows};
pub use optim::{AdamW, Parameter, Parameterized};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Matrix with entries drawn from `Normal(0, std²)`.
pub fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Deterministic RNG for a `(seed, stream, index)` triple, so independent work
/// items draw from independent streams regardless of evaluation order.
pub fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(stream ^ splitmix64(index)));
    rng
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
