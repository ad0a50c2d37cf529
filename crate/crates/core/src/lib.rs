//! Training stochastic neural networks to reconstruct random field models
//! with local squared Wasserstein-2 losses, plus the numerical studies that
//! check the convergence-rate and robustness predictions behind the method.

pub mod autodiff;
pub mod experiments;
pub mod locality;
pub mod ot;
pub mod rng;
pub mod snn;
pub mod theory_lab;
pub mod trainer;
