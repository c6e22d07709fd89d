//! Simulation library for benign overfitting of maximum-margin linear
//! classifiers trained with a bias (intercept) term.
//!
//! The library is organized around one data model: a two-class mixture
//!
//! ```text
//!     x = y * mu + z,      z = g * Sigma^{1/2} * xi,
//! ```
//!
//! where `y` is a Rademacher label, `g` a positive random scale with
//! `E[g^2] = 1`, and `xi` a vector of independent centered unit-variance
//! entries. Observed labels flip with probability `eta`. Appending a
//! constant coordinate to each sample turns the learned bias into an extra
//! weight; the modules below quantify what that appended coordinate does to
//! the usual concentration arguments and to the resulting test error.
//!
//! Module map:
//!
//! * [`sampler`]: distribution specifications with closed-form moments, the
//!   covariance models, and dataset generation.
//! * [`events`]: concentration events for the normalized noise Gram matrix
//!   and their counterparts after the constant coordinate is appended,
//!   together with explicit perturbation bounds.
//! * [`maxmargin`]: a hard-margin dual solver, gradient-descent training for
//!   comparison, and margin statistics.
//! * [`theory`]: regime condition checkers, error-bound evaluators and the
//!   exponent arithmetic for the isotropic specialization.
//! * [`experiments`]: seeded Monte Carlo sweeps over parameter grids with
//!   deterministic parallelism and CSV/Markdown reporting.
//! * [`linalg`] and [`rng`]: small shared numeric and seeding utilities.

pub mod events;
pub mod experiments;
pub mod linalg;
pub mod maxmargin;
pub mod rng;
pub mod sampler;
pub mod theory;
