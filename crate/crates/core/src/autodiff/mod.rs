//! Dense 2-D planes and a tape-based reverse-mode differentiation engine.

pub mod kernels;
mod plane;
mod tape;

pub use kernels::{Axis, Boundary, FilterDecimate, Padding};
pub use plane::Plane;
pub use tape::{Fault, Gradients, RectRegion, Tape, Var};

#[cfg(test)]
mod tests;
