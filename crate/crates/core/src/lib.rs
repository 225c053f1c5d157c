//! Finite, infinite, limit and asymptotic shadowing for non-autonomous
//! hyperbolic map families on flat charts.

pub mod charts;
pub mod engine;
pub mod hyperbolicity;
mod linalg;
pub mod pseudoorbit;
pub mod serde_float;
pub mod systems;
pub mod verify;

pub use linalg::{condition_number, conorm, spectral_norm};
