//! Numerical toolkit: dense matrices, seeded randomness, reverse-mode
//! differentiation with nesting, the Gaussian kernel and squared MMD.

pub mod kernel;
pub mod linalg;
pub mod matrix;
pub mod rng;
pub mod tape;

pub use kernel::{gaussian_kernel, median_bandwidth, mmd2, mmd2_on_tape, BANDWIDTH_FLOOR};
pub use linalg::{least_squares, LstsqFit, RIDGE_JITTER};
pub use matrix::Matrix;
pub use rng::RngStream;
pub use tape::{sigmoid, Tape, Var};

/// Gradients of `output` with respect to `wrt`; see [`Tape::grad`].
pub fn grad(tape: &mut Tape, output: Var, wrt: &[Var], create_graph: bool) -> crate::Result<Vec<Var>> {
    tape.grad(output, wrt, create_graph)
}
