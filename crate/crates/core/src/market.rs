//! Market environment and barrier contract descriptors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Drift of the time-changed Brownian motion that makes `exp(X)` a martingale.
pub const BETA: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketEnv {
    pub spot: f64,
    pub rate: f64,
    #[serde(default)]
    pub dividend: f64,
}

impl MarketEnv {
    pub fn new(spot: f64, rate: f64, dividend: f64) -> Self {
        Self { spot, rate, dividend }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.spot > 0.0 && self.spot.is_finite()) {
            return Err(Error::InvalidSpec(format!("spot must be positive, got {}", self.spot)));
        }
        if !self.rate.is_finite() || !self.dividend.is_finite() {
            return Err(Error::InvalidSpec("rate and dividend must be finite".into()));
        }
        Ok(())
    }

    pub fn forward(&self, t: f64) -> f64 {
        self.spot * ((self.rate - self.dividend) * t).exp()
    }

    pub fn discount(&self, t: f64) -> f64 {
        (-self.rate * t).exp()
    }

    /// Log-forward `x0 = log F(0,T)`.
    pub fn x0(&self, t: f64) -> f64 {
        self.forward(t).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContractKind {
    #[serde(alias = "uop", alias = "UOP")]
    UpOutPut,
    #[serde(alias = "doc", alias = "DOC")]
    DownOutCall,
    DkoCall,
    DkoPut,
}

impl ContractKind {
    pub fn label(&self) -> &'static str {
        match self {
            ContractKind::UpOutPut => "UOP",
            ContractKind::DownOutCall => "DOC",
            ContractKind::DkoCall => "DKO-call",
            ContractKind::DkoPut => "DKO-put",
        }
    }

    pub fn is_call(&self) -> bool {
        matches!(self, ContractKind::DownOutCall | ContractKind::DkoCall)
    }
}

/// Continuously monitored knock-out contract. Barriers are levels in forward
/// units, matching the log-forward state of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarrierContract {
    pub kind: ContractKind,
    pub strike: f64,
    #[serde(default)]
    pub upper: Option<f64>,
    #[serde(default)]
    pub lower: Option<f64>,
    pub maturity: f64,
}

impl BarrierContract {
    pub fn uop(strike: f64, upper: f64, maturity: f64) -> Self {
        Self { kind: ContractKind::UpOutPut, strike, upper: Some(upper), lower: None, maturity }
    }

    pub fn doc(strike: f64, lower: f64, maturity: f64) -> Self {
        Self { kind: ContractKind::DownOutCall, strike, upper: None, lower: Some(lower), maturity }
    }

    pub fn dko_call(strike: f64, lower: f64, upper: f64, maturity: f64) -> Self {
        Self { kind: ContractKind::DkoCall, strike, upper: Some(upper), lower: Some(lower), maturity }
    }

    pub fn dko_put(strike: f64, lower: f64, upper: f64, maturity: f64) -> Self {
        Self { kind: ContractKind::DkoPut, strike, upper: Some(upper), lower: Some(lower), maturity }
    }

    /// Static checks that do not need the forward.
    pub fn validate(&self) -> Result<()> {
        if !(self.strike > 0.0 && self.strike.is_finite()) {
            return Err(Error::InvalidSpec(format!("strike must be positive, got {}", self.strike)));
        }
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(Error::Domain(format!("maturity must be positive, got {}", self.maturity)));
        }
        let need_upper = matches!(self.kind, ContractKind::UpOutPut | ContractKind::DkoCall | ContractKind::DkoPut);
        let need_lower = matches!(self.kind, ContractKind::DownOutCall | ContractKind::DkoCall | ContractKind::DkoPut);
        match (need_upper, self.upper) {
            (true, None) => return Err(Error::InvalidSpec(format!("{} requires an upper barrier", self.kind.label()))),
            (_, Some(h)) if !(h > 0.0 && h.is_finite()) => {
                return Err(Error::InvalidSpec(format!("upper barrier must be positive, got {h}")))
            }
            _ => {}
        }
        match (need_lower, self.lower) {
            (true, None) => return Err(Error::InvalidSpec(format!("{} requires a lower barrier", self.kind.label()))),
            (_, Some(l)) if !(l > 0.0 && l.is_finite()) => {
                return Err(Error::InvalidSpec(format!("lower barrier must be positive, got {l}")))
            }
            _ => {}
        }
        if need_upper && need_lower && self.lower.unwrap() >= self.upper.unwrap() {
            return Err(Error::Geometry("lower barrier must be below upper barrier".into()));
        }
        Ok(())
    }

    /// Checks the forward against the barriers.
    pub fn check_geometry(&self, market: &MarketEnv) -> Result<()> {
        self.validate()?;
        market.validate()?;
        let f0 = market.forward(self.maturity);
        if let (true, Some(h)) = (self.has_upper(), self.upper) {
            if f0 >= h {
                return Err(Error::Geometry(format!(
                    "forward {f0:.6} is at or above the upper barrier {h}; the contract is knocked out"
                )));
            }
        }
        if let (true, Some(l)) = (self.has_lower(), self.lower) {
            if f0 <= l {
                return Err(Error::Geometry(format!(
                    "forward {f0:.6} is at or below the lower barrier {l}; the contract is knocked out"
                )));
            }
        }
        Ok(())
    }

    pub fn has_upper(&self) -> bool {
        !matches!(self.kind, ContractKind::DownOutCall)
    }

    pub fn has_lower(&self) -> bool {
        !matches!(self.kind, ContractKind::UpOutPut)
    }

    pub fn log_upper(&self) -> Option<f64> {
        if self.has_upper() {
            self.upper.map(f64::ln)
        } else {
            None
        }
    }

    pub fn log_lower(&self) -> Option<f64> {
        if self.has_lower() {
            self.lower.map(f64::ln)
        } else {
            None
        }
    }

    /// Terminal payoff at forward level `f`, ignoring the barriers.
    pub fn payoff(&self, f: f64) -> f64 {
        if self.kind.is_call() {
            (f - self.strike).max(0.0)
        } else {
            (self.strike - f).max(0.0)
        }
    }

    /// Canonical text used for digests.
    pub fn canonical(&self) -> String {
        format!(
            "{}|K={}|H={}|L={}|T={}",
            self.kind.label(),
            crate::clock::sig15(self.strike),
            self.log_upper().map(|_| crate::clock::sig15(self.upper.unwrap())).unwrap_or_default(),
            self.log_lower().map(|_| crate::clock::sig15(self.lower.unwrap())).unwrap_or_default(),
            crate::clock::sig15(self.maturity)
        )
    }

    pub fn digest(&self) -> String {
        crate::clock::digest_text(&self.canonical())
    }
}
