//! Exploration noise standard deviation as a function of environment steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Difficulty tier, selecting the decay horizon of the default schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Easy,
    Medium,
    Hard,
}

impl Tier {
    /// Decay horizon in environment steps.
    pub fn horizon(self) -> u64 {
        match self {
            Tier::Easy => 100_000,
            Tier::Medium => 500_000,
            Tier::Hard => 2_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSchedule {
    /// Linear decay from `init` at `t = 0` to `final` at `t = horizon`,
    /// constant afterwards.
    Linear {
        init: f64,
        #[serde(rename = "final")]
        final_: f64,
        horizon: u64,
    },
    Fixed { sigma: f64 },
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::for_tier(Tier::Medium)
    }
}

impl NoiseSchedule {
    pub fn for_tier(tier: Tier) -> Self {
        NoiseSchedule::Linear {
            init: 1.0,
            final_: 0.1,
            horizon: tier.horizon(),
        }
    }

    pub fn fixed(sigma: f64) -> Self {
        NoiseSchedule::Fixed { sigma }
    }

    /// `σ(t)` at environment step `t`.
    pub fn stddev(&self, t: u64) -> f64 {
        match *self {
            NoiseSchedule::Linear { init, final_, horizon } => {
                let frac = (t as f64 / horizon as f64).min(1.0);
                // init + frac·(final − init), written as a convex combination
                // so both endpoints are reproduced exactly
                (1.0 - frac) * init + frac * final_
            }
            NoiseSchedule::Fixed { sigma } => sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s.is_finite() && s >= 0.0;
        match *self {
            NoiseSchedule::Linear { init, final_, horizon } => {
                if !ok(init) || !ok(final_) || horizon == 0 {
                    return Err(Error::config(format!(
                        "linear schedule needs non-negative stddevs and a positive horizon, got ({init}, {final_}, {horizon})"
                    )));
                }
                if final_ > init {
                    return Err(Error::config(format!(
                        "noise schedule must not increase: init {init} < final {final_}"
                    )));
                }
            }
            NoiseSchedule::Fixed { sigma } => {
                if !ok(sigma) {
                    return Err(Error::config(format!("fixed noise stddev {sigma} must be non-negative")));
                }
            }
        }
        Ok(())
    }
}
