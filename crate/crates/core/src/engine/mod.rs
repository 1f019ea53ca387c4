//! Estimand, efficient influence function, and the plug-in / debiased
//! estimators built on cross-fitted nuisances.

pub(crate) mod estimators;
pub(crate) mod nuisances;
mod population;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::AlqrError;

pub use estimators::{
    binary_weighted_estimand, denominator, dml_estimate, dml_estimate_with_influence, eif_evaluate, plugin_estimate,
    plugin_estimate_with_influence, se_from_influence, weighted_mean_influence, EifRow,
};
pub use nuisances::{estimate_nuisances, estimate_nuisances_multi, NuisanceFits, NuisanceRequest, QuantileLearner};
pub use population::{estimand_population_value, PopulationValue, TruthModel};

/// Link applied to the conditional quantile before contrasting it with its
/// covariate-conditional mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    #[inline]
    pub fn g(self, q: f64) -> f64 {
        match self {
            Link::Identity => q,
            Link::Log => q.ln(),
        }
    }

    #[inline]
    pub fn g_prime(self, q: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Log => 1.0 / q,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Link {
    type Err = AlqrError;
    fn from_str(s: &str) -> Result<Self, AlqrError> {
        match s {
            "identity" => Ok(Link::Identity),
            "log" => Ok(Link::Log),
            _ => Err(AlqrError::InvalidConfig(format!("unknown link `{s}`"))),
        }
    }
}
