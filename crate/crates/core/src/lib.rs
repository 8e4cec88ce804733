//! Particle samplers for generalised variational inference built on
//! Wasserstein gradient flows.
//!
//! The crate is organised around the free-energy particle system
//!
//! ```text
//! θ_{n,k+1} = θ_{n,k} − η (∇V(θ_{n,k}) + λ₁/N Σ_j ∇₁κ(θ_{n,k}, θ_{j,k})) + √(2ηλ₂) Z_{n,k}
//! ```
//!
//! with the potential `V = ℓ − λ₁ μ_P − λ₂ log p`. Setting the two weights
//! recovers deep ensembles (DE), deep Langevin ensembles (DLE), deep
//! repulsive Langevin ensembles (DRLE) and deep repulsive ensembles (DRE).
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`losses`] | toy losses and the MLP regression loss, with analytic gradients |
//! | [`kernels`] | SE kernel, median heuristic, mean embedding, squared MMD |
//! | [`measures`] | reference measures and initialisers |
//! | [`dynamics`] | drift assembly, Euler–Maruyama ensemble integrator, gradient flow |
//! | [`oracles`] | DE limit, Gibbs density, DRLE stationary density, 1-D W1 |
//! | [`fdgvi`] | mean-field Gaussian GVI baseline |
//! | [`neural`] | one-hidden-layer MLP, Kaiming init, datasets, ensemble NLL |

pub mod dynamics;
pub mod error;
pub mod fdgvi;
pub mod kernels;
pub mod losses;
pub mod measures;
pub mod neural;
pub mod oracles;
pub mod rng;

pub use error::{Error, Result};
