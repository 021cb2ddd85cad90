//! Numerical building blocks: quadrature, ODE integration, matrix exponential,
//! one-dimensional and derivative-free optimizers, small linear algebra.

pub mod expm;
pub mod interp;
pub mod linalg;
pub mod ode;
pub mod optim;
pub mod quad;
