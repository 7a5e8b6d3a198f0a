//! Dense networks, Adam and finite-difference gradient checking.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod mlp;

pub use adam::Adam;
pub use gradcheck::{check_flat, grad_check};
pub use mlp::{Activation, ForwardCache, Gradients, Mlp};
