//! Multi-fidelity surrogate models for high-dimensional PDE solution fields.
//!
//! The model family treats simulation fidelity as a continuous coordinate
//! `m`: a low-dimensional latent output evolves over `m` as a neural ODE and
//! is mapped to the full field by a fidelity-varying basis matrix — either
//! element-wise ODE bases (`ifc`) or a GP prior over bases with a
//! tensor-Gaussian variational posterior (`gpode`). Supporting machinery:
//! from-scratch reverse-mode autodiff, RK4/DOPRI5 integrators, finite
//! difference data generators for Poisson/Heat/Burgers corpora, PCA-GP and
//! residual-coregionalization baselines, and an Adam training loop.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod gpode;
pub mod ifc;
pub mod linalg;
pub mod nn;
pub mod odeint;
pub mod pdegen;
pub mod rng;
pub mod trainer;
