//! TOML run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use clockbarrier::calibrate::{CalibrationConfig, CalibrationDataset};
use clockbarrier::clock::ClockSpec;
use clockbarrier::leverage::{FallbackPolicy, PdeGrid};
use clockbarrier::mc::McConfig;
use clockbarrier::numerics::quad::QuadratureConfig;
use clockbarrier::vanilla::VanillaQuote;
use clockbarrier::{BarrierContract, MarketEnv};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub market: Option<MarketEnv>,
    pub clock: Option<ClockSpec>,
    #[serde(default)]
    pub contracts: Vec<BarrierContract>,
    #[serde(default)]
    pub vanillas: Vec<VanillaQuote>,
    #[serde(default)]
    pub quadrature: QuadSettings,
    pub mc: Option<McSettings>,
    pub expansion: Option<ExpansionSettings>,
    pub pade: Option<PadeSettings>,
    pub calibration: Option<CalibrationSettings>,
    #[serde(default)]
    pub output: OutputSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub initial_cutoff: f64,
}

impl Default for QuadSettings {
    fn default() -> Self {
        let q = QuadratureConfig::default();
        Self { rel_tol: q.rel_tol, abs_tol: q.abs_tol, initial_cutoff: q.initial_cutoff }
    }
}

impl QuadSettings {
    pub fn to_config(self) -> QuadratureConfig {
        QuadratureConfig { rel_tol: self.rel_tol, abs_tol: self.abs_tol, initial_cutoff: self.initial_cutoff, ..QuadratureConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSettings {
    pub n_paths: usize,
    #[serde(default = "desk_steps")]
    pub n_steps_per_year: usize,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "yes")]
    pub bridge: bool,
    #[serde(default)]
    pub rho: f64,
}

fn desk_steps() -> usize {
    520
}

fn yes() -> bool {
    true
}

impl McSettings {
    pub fn to_config(self, seed: u64) -> McConfig {
        McConfig {
            n_paths: self.n_paths,
            n_steps_per_year: self.n_steps_per_year,
            seed,
            antithetic: self.antithetic,
            bridge: self.bridge,
            ..McConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstOrderRoute {
    Pde,
    Duhamel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionSettings {
    #[serde(default = "five")]
    pub order: usize,
    #[serde(default = "pde_route")]
    pub first_order: FirstOrderRoute,
    #[serde(default)]
    pub grid: PdeGrid,
}

fn five() -> usize {
    5
}

fn pde_route() -> FirstOrderRoute {
    FirstOrderRoute::Pde
}

impl Default for ExpansionSettings {
    fn default() -> Self {
        Self { order: 5, first_order: FirstOrderRoute::Pde, grid: PdeGrid::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PadeSettings {
    /// `C_0..C_N`; computed from the first contract when absent.
    #[serde(default)]
    pub coefficients: Vec<f64>,
    pub rhos: Vec<f64>,
    #[serde(default)]
    pub policy: FallbackPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Dataset file (TOML), relative to the config file.
    pub dataset: Option<String>,
    /// Inline dataset; exclusive with `dataset`.
    pub data: Option<CalibrationDataset>,
    pub settings: CalibrationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSettings {
    pub path: Option<String>,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self { path: None }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<(Self, String), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::from_toml(&text)?, digest(&text)))
    }

    pub fn market(&self) -> Result<MarketEnv, CliError> {
        let m = self.market.ok_or_else(|| CliError::Validation("config needs a [market] table".into()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn clock(&self) -> Result<&ClockSpec, CliError> {
        let c = self.clock.as_ref().ok_or_else(|| CliError::Validation("config needs a [clock] table".into()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn contracts(&self) -> Result<&[BarrierContract], CliError> {
        if self.contracts.is_empty() {
            return Err(CliError::Validation("config needs at least one [[contracts]] entry".into()));
        }
        for c in &self.contracts {
            c.validate()?;
        }
        Ok(&self.contracts)
    }

    pub fn mc(&self) -> Result<McSettings, CliError> {
        self.mc.ok_or_else(|| CliError::Validation("config needs an [mc] table".into()))
    }
}

/// Hex SHA-256 of the raw config text.
pub fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
