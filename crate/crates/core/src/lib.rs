//! Hamiltonian graph neural networks with a learnable symplectic structure.
//!
//! Node features evolve as Hamiltonian orbits integrated with RK4; the
//! structure matrix multiplying the energy gradient is either fixed, free,
//! or kept on the symplectic Stiefel manifold by Riemannian gradient descent.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod dynamics;
pub mod gnn;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod report;
pub mod selfcheck;
pub mod symplectic;

pub use linalg::{LinalgError, Matrix};
pub use symplectic::{ManifoldError, ProjectionMode, SymplecticPoint};

/// Independent stream seed derived from a base seed (SplitMix64 finalizer).
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
