//! Barrier option pricing under stochastic-clock volatility models.
//!
//! The log-forward is modelled as a time-changed Brownian motion
//! `X_t = x0 + beta * Gamma_t + B(Gamma_t)` with `beta = -1/2`, where the clock
//! `Gamma_t` is the integrated activity of a variance factor. When the clock is
//! independent of `B`, every barrier price depends on the model only through the
//! Laplace transform `Phi_T(lambda) = E[exp(-lambda * Gamma_T)]`.
//!
//! Modules:
//! - [`clock`]: Laplace transforms of the supported clock families.
//! - [`barrier`]: single- and double-barrier prices from the transform.
//! - [`mc`]: Monte Carlo engine with bridge-corrected monitoring.
//! - [`leverage`]: correlation expansion, Padé resummation and error indicators.
//! - [`vanilla`]: COS pricing, implied volatility and variance swaps.
//! - [`calibrate`]: staged calibration workflow.

pub mod barrier;
pub mod calibrate;
pub mod clock;
pub mod error;
pub mod leverage;
pub mod market;
pub mod mc;
pub mod numerics;
pub mod vanilla;

pub use error::{Error, Result};
pub use market::{BarrierContract, ContractKind, MarketEnv};
