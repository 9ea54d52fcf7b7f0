//! Ballistic transport laboratory for the one-dimensional quasi-periodic
//! Schrödinger equation `i∂_t q = −∂²_x q + V(ωx) q`.
//!
//! * [`potential`]: quasi-periodic potentials and the Diophantine margin.
//! * [`cocycle`]: rotation numbers, Lyapunov exponents, gap labels.
//! * [`evolve`]: split-step time evolution and diffusion-norm growth.
//! * [`reduce`]: KAM reducibility and Bloch waves.
//! * [`transform`]: the modified spectral transformation and its norms.

pub mod cocycle;
pub mod evolve;
pub mod lattice;
pub mod mat2;
pub mod potential;
pub mod quad;
pub mod reduce;
pub mod series;
pub mod transform;

pub use lattice::Mode;
pub use mat2::Mat2;
pub use potential::{FrequencyVector, QuasiPeriodicPotential};
