//! Numerical core: dense tensors, a reverse-mode tape, Adam, a seeded
//! counter PRNG, and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use params::{Bound, ParamHandle, ParamSet};
pub use rng::Rng;
pub use tape::{Tape, Var, LAYERNORM_EPS};
pub use tensor::{NumError, Scalar, Tensor};
