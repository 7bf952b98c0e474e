//! Named model configurations.

use std::fmt;
use std::str::FromStr;

use crate::decode::{DecodeConfig, Reclassify, Weighting};
use crate::error::{FhmmError, Result};
use crate::fixtures::{OPTIMAL_OMEGA, OPTIMAL_V};
use crate::model::EmissionFamily;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Independent log-normal marginals, no weighting.
    M0,
    /// Joint Gaussian on logs, unweighted decoding.
    M1a,
    /// Joint Gaussian on logs, normalized MI weights.
    M1b,
    /// Copula, unweighted.
    M2a,
    /// Copula, raw MI weights.
    M2b,
    /// Copula, normalized MI weights.
    M2c,
    /// Copula, normalized MI weights with tuned `Ω` and `v`.
    M2d,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::M0,
        Variant::M1a,
        Variant::M1b,
        Variant::M2a,
        Variant::M2b,
        Variant::M2c,
        Variant::M2d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::M0 => "m0",
            Variant::M1a => "m1a",
            Variant::M1b => "m1b",
            Variant::M2a => "m2a",
            Variant::M2b => "m2b",
            Variant::M2c => "m2c",
            Variant::M2d => "m2d",
        }
    }

    pub fn family(self) -> EmissionFamily {
        match self {
            Variant::M1a | Variant::M1b => EmissionFamily::JointGaussian,
            _ => EmissionFamily::LogNormalCopula,
        }
    }

    /// The copula correlation stays at the identity.
    pub fn fixed_identity_correlation(self) -> bool {
        self == Variant::M0
    }

    pub fn weighting(self) -> Weighting {
        match self {
            Variant::M0 | Variant::M1a | Variant::M2a => Weighting::None,
            Variant::M2b => Weighting::RawMi,
            Variant::M1b | Variant::M2c | Variant::M2d => Weighting::NormalizedMi,
        }
    }

    pub fn reclassify(self) -> Reclassify {
        match self {
            Variant::M0 | Variant::M1a | Variant::M1b => Reclassify::MergeToClear,
            _ => Reclassify::HumidityWindRule,
        }
    }

    /// Decoding settings. `omega` and `v` override the defaults (unit
    /// values, or the tuned pair for M2d).
    pub fn decode_config(self, omega: Option<f64>, v: Option<f64>) -> DecodeConfig {
        let (o, g) = if self == Variant::M2d {
            (OPTIMAL_OMEGA, OPTIMAL_V)
        } else {
            (1.0, 1.0)
        };
        DecodeConfig {
            weighting: self.weighting(),
            omega: omega.unwrap_or(o),
            v: v.unwrap_or(g),
            reclassify: self.reclassify(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = FhmmError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| FhmmError::InvalidInput(format!("unknown variant '{s}'")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping() {
        assert!(Variant::M0.fixed_identity_correlation());
        assert_eq!(Variant::M0.weighting(), Weighting::None);
        assert_eq!(Variant::M1b.family(), EmissionFamily::JointGaussian);
        assert_eq!(Variant::M2b.weighting(), Weighting::RawMi);
        let d = Variant::M2d.decode_config(None, None);
        assert_eq!((d.omega, d.v), (1.10, 16.47));
        let d = Variant::M2d.decode_config(Some(1.3), None);
        assert_eq!((d.omega, d.v), (1.3, 16.47));
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
        }
        assert!("m3".parse::<Variant>().is_err());
    }
}
