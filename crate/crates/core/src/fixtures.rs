//! Reference parameter sets from the published Beijing fit.
//!
//! Transition tables in the final-parameter tables are printed with columns
//! summing to one and are transposed on load; the initial tables are printed
//! row-stochastic. The shared correlation matrix of the final fit was only
//! published as a heat map, so [`reference_correlation`] is a hand-picked
//! positive-definite matrix with the same sign pattern.

use nalgebra::DMatrix;

use crate::model::{
    ChainParams, EmissionFamily, EmissionParams, FhmmModel, InflatedMixtureParams, Inflation,
    DEFAULT_FEATURES,
};

/// Feature index of visibility in the default ordering.
pub const VISIBILITY: usize = 2;
pub const PM10: usize = 0;
pub const WIND: usize = 1;
pub const HUMIDITY: usize = 3;

/// Visibility reporting ceiling (km).
pub const VISIBILITY_CEILING: f64 = 10.0;
pub const FIXED_PI0: f64 = 0.99;

/// Initial means (K-means), rows in joint-index order (0,0), (0,1), (1,0), (1,1).
pub const INITIAL_MU: [[f64; 4]; 4] = [
    [2.8276, 0.3483, 1.9637, 3.6430],
    [4.9151, 1.4853, 1.4630, 2.8348],
    [3.9571, -4.6052, 0.9672, 4.3288],
    [3.8999, -0.9239, 1.4646, 3.6022],
];
pub const INITIAL_SIGMA: [[f64; 4]; 4] = [
    [0.3794, 0.3466, 0.1163, 0.2063],
    [0.4478, 0.3875, 0.1400, 0.3234],
    [0.2908, 0.0100, 0.2055, 0.1840],
    [0.3782, 0.3002, 0.1585, 0.2456],
];

/// Final LNC means for (0,0), (0,1), (1,0); (1,1) has no published final
/// values.
pub const FINAL_MU: [[f64; 4]; 3] = [
    [3.73, 0.87, 2.04, 3.79],
    [5.33, 0.96, 1.90, 3.53],
    [4.50, 0.49, 1.65, 4.45],
];
pub const FINAL_SIGMA: [[f64; 4]; 3] = [
    [0.76, 0.67, 0.10, 0.56],
    [0.60, 0.72, 0.36, 0.72],
    [0.67, 0.49, 0.44, 0.13],
];

/// Printed final transition tables (columns sum to one).
pub const FINAL_HAZE_TABLE: [[f64; 2]; 2] = [[0.9887, 0.0830], [0.0113, 0.9170]];
pub const FINAL_DUST_TABLE: [[f64; 2]; 2] = [[0.9937, 0.0762], [0.0063, 0.9238]];

/// Normalized MI weights per state (rows clear, dust, haze, haze & dust;
/// columns pm10, wind, visibility, humidity).
pub const PUBLISHED_WEIGHTS: [[f64; 4]; 4] = [
    [0.2324, 0.1957, 0.3443, 0.2276],
    [0.2535, 0.2477, 0.2500, 0.2488],
    [0.2327, 0.1979, 0.3408, 0.2285],
    [0.2500, 0.2500, 0.2500, 0.2500],
];

/// Grid-optimal weight scale and global weight of the doubly weighted model.
pub const OPTIMAL_OMEGA: f64 = 1.10;
pub const OPTIMAL_V: f64 = 16.47;

pub fn default_feature_names() -> Vec<String> {
    DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect()
}

pub fn reference_correlation() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            1.0, -0.25, -0.45, 0.30, //
            -0.25, 1.0, 0.30, -0.40, //
            -0.45, 0.30, 1.0, -0.50, //
            0.30, -0.40, -0.50, 1.0,
        ],
    )
}

/// Common initial parameters. The dust table's first row prints as
/// (0.9998, 0.00023), which sums to 1.00003; it is renormalized.
pub fn initial_model() -> FhmmModel {
    let haze_a = [[0.9884, 0.0116], [0.1330, 0.8670]];
    let raw = [0.9998, 0.00023];
    let s = raw[0] + raw[1];
    let dust_a = [[raw[0] / s, 1.0 - raw[0] / s], [0.1250, 0.8750]];
    let haze = with_stationary_phi(haze_a);
    let dust = with_stationary_phi(dust_a);
    let mu: Vec<Vec<f64>> = INITIAL_MU.iter().map(|r| r.to_vec()).collect();
    let sigma: Vec<Vec<f64>> = INITIAL_SIGMA.iter().map(|r| r.to_vec()).collect();
    let inflated = InflatedMixtureParams {
        pi0: FIXED_PI0,
        theta: mu[0][VISIBILITY],
        eta2: sigma[0][VISIBILITY].powi(2),
        c: VISIBILITY_CEILING,
    };
    FhmmModel {
        chains: [haze, dust],
        emissions: EmissionParams {
            family: EmissionFamily::LogNormalCopula,
            mu,
            sigma,
            covariances: None,
            r_global: DMatrix::identity(4, 4),
            inflated: Some(Inflation {
                dim: VISIBILITY,
                params: inflated,
            }),
        },
        feature_names: default_feature_names(),
    }
}

/// Final parameters shared by the LNC variants; state (1,1) keeps its
/// initial emission parameters.
pub fn final_lnc_model() -> FhmmModel {
    let haze = ChainParams::from_column_stochastic([0.0; 2], FINAL_HAZE_TABLE);
    let dust = ChainParams::from_column_stochastic([0.0; 2], FINAL_DUST_TABLE);
    let haze = with_stationary_phi(haze.a);
    let dust = with_stationary_phi(dust.a);
    let mut mu: Vec<Vec<f64>> = FINAL_MU.iter().map(|r| r.to_vec()).collect();
    let mut sigma: Vec<Vec<f64>> = FINAL_SIGMA.iter().map(|r| r.to_vec()).collect();
    mu.push(INITIAL_MU[3].to_vec());
    sigma.push(INITIAL_SIGMA[3].to_vec());
    let inflated = InflatedMixtureParams {
        pi0: FIXED_PI0,
        theta: mu[0][VISIBILITY],
        eta2: sigma[0][VISIBILITY].powi(2),
        c: VISIBILITY_CEILING,
    };
    FhmmModel {
        chains: [haze, dust],
        emissions: EmissionParams {
            family: EmissionFamily::LogNormalCopula,
            mu,
            sigma,
            covariances: None,
            r_global: reference_correlation(),
            inflated: Some(Inflation {
                dim: VISIBILITY,
                params: inflated,
            }),
        },
        feature_names: default_feature_names(),
    }
}

fn with_stationary_phi(a: [[f64; 2]; 2]) -> ChainParams {
    let mut c = ChainParams::new([0.5, 0.5], a);
    let st = c.stationary();
    c.phi = [st[0], 1.0 - st[0]];
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{min_eigenvalue, validate_model};

    #[test]
    fn fixtures_are_valid() {
        assert!(validate_model(&initial_model()).is_empty());
        assert!(validate_model(&final_lnc_model()).is_empty());
        assert!(min_eigenvalue(&reference_correlation()) > 0.2);
    }

    #[test]
    fn final_diagonals() {
        let m = final_lnc_model();
        assert_eq!(m.chains[0].a[0][0], 0.9887);
        assert_eq!(m.chains[0].a[1][1], 0.9170);
        assert_eq!(m.chains[1].a[0][0], 0.9937);
        assert_eq!(m.chains[1].a[1][1], 0.9238);
    }

    #[test]
    fn published_weight_rows_sum_to_one() {
        for row in &PUBLISHED_WEIGHTS {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-3, "{s}");
        }
    }
}
