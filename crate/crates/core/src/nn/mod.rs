//! Small dense networks with hand-derived reverse-mode gradients, Adam, and a
//! finite-difference gradient audit.

mod adam;
mod gradcheck;
mod mlp;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_coords};
pub use mlp::{mlp_init, Dense, MlpParams, MlpTape, LEAKY_SLOPE};
