use nalgebra::DMatrix;

use super::{
    chains_from_path, fit_dependence, fit_marginals, one_hot, weighted_moments, EmissionFitSpec, InflatedFit,
    InflationSpec,
};
use crate::emissions::check_observations;
use crate::error::{FhmmError, Result};
use crate::model::{EmissionFamily, FhmmModel, HiddenState, NUM_STATES, PD_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub family: EmissionFamily,
    pub inflation: Option<InflationSpec>,
    pub eps_pd: f64,
    /// `(μ, σ)` used for the haze-and-dust state when fewer than two rows
    /// carry that label. `None` pools the haze-only and dust-only rows.
    pub both_fallback: Option<(Vec<f64>, Vec<f64>)>,
    pub feature_names: Vec<String>,
    /// Leave the copula correlation at the identity.
    pub fix_correlation: bool,
}

impl SupervisedConfig {
    pub fn new(family: EmissionFamily, feature_names: Vec<String>) -> Self {
        SupervisedConfig {
            family,
            inflation: None,
            eps_pd: PD_EPS,
            both_fallback: None,
            feature_names,
            fix_correlation: false,
        }
    }

    pub fn with_inflation(mut self, inflation: Option<InflationSpec>) -> Self {
        self.inflation = inflation;
        self
    }
}

/// Fits every parameter directly from a labeled sequence.
pub fn supervised_fit(obs: &[Vec<f64>], labels: &[HiddenState], cfg: &SupervisedConfig) -> Result<FhmmModel> {
    if obs.is_empty() {
        return Err(FhmmError::InvalidInput("no observations".into()));
    }
    if obs.len() != labels.len() {
        return Err(FhmmError::InvalidInput(format!(
            "{} observations but {} labels",
            obs.len(),
            labels.len()
        )));
    }
    let e = obs[0].len();
    check_observations(obs, e)?;
    if cfg.feature_names.len() != e {
        return Err(FhmmError::InvalidInput(format!(
            "{} feature names for {e} features",
            cfg.feature_names.len()
        )));
    }
    let mut counts = [0usize; NUM_STATES];
    for s in labels {
        counts[s.index()] += 1;
    }
    for s in [HiddenState::CLEAR, HiddenState::DUST, HiddenState::HAZE] {
        if counts[s.index()] < 2 {
            return Err(FhmmError::Estimation(format!(
                "state {s} ({}) has {} labeled rows, need at least 2",
                s.label(),
                counts[s.index()]
            )));
        }
    }

    let resp = one_hot(labels);
    let spec = EmissionFitSpec {
        family: cfg.family,
        inflation: cfg.inflation,
        inflated_fit: InflatedFit::ClosedForm,
        previous: None,
        min_mass: [0.0; NUM_STATES],
        eps_pd: cfg.eps_pd,
    };
    let mut emissions = fit_marginals(obs, &resp, &spec);

    let both = HiddenState::BOTH.index();
    let fallback = counts[both] < 2;
    if fallback {
        let (mu, sigma) = match &cfg.both_fallback {
            Some(f) => f.clone(),
            None => pooled_moments(obs, labels, e),
        };
        emissions.mu[both] = mu;
        emissions.sigma[both] = sigma;
    }
    fit_dependence(obs, &resp, &mut emissions, spec.eps_pd);
    if cfg.fix_correlation {
        emissions.r_global = DMatrix::identity(e, e);
    }
    if fallback {
        if let Some(covs) = emissions.covariances.as_mut() {
            covs[both] = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
                e,
                emissions.sigma[both].iter().map(|s| s * s),
            ));
        }
    }

    let model = FhmmModel {
        chains: chains_from_path(labels),
        emissions,
        feature_names: cfg.feature_names.clone(),
    };
    model.validate()?;
    Ok(model)
}

fn pooled_moments(obs: &[Vec<f64>], labels: &[HiddenState], e: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mu = vec![0.0; e];
    let mut sigma = vec![1.0; e];
    for i in 0..e {
        let ys = obs.iter().zip(labels).map(move |(x, s)| {
            let w = if *s == HiddenState::DUST || *s == HiddenState::HAZE { 1.0 } else { 0.0 };
            (w, x[i].ln())
        });
        if let Some((m, sd)) = weighted_moments(ys) {
            mu[i] = m;
            sigma[i] = sd;
        }
    }
    (mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn names() -> Vec<String> {
        fixtures::default_feature_names()
    }

    #[test]
    fn missing_required_state_is_named() {
        let obs = vec![vec![1.0, 2.0, 3.0, 4.0]; 6];
        let labels = vec![
            HiddenState::CLEAR,
            HiddenState::CLEAR,
            HiddenState::HAZE,
            HiddenState::HAZE,
            HiddenState::DUST,
            HiddenState::CLEAR,
        ];
        let cfg = SupervisedConfig::new(EmissionFamily::LogNormalCopula, names());
        let err = supervised_fit(&obs, &labels, &cfg).unwrap_err();
        assert!(err.to_string().contains("(0,1)"), "{err}");
    }

    #[test]
    fn absent_both_state_falls_back() {
        let m = fixtures::final_lnc_model();
        let s = crate::sample::sample_sequence(&m, 3000, 5).unwrap();
        let labels: Vec<HiddenState> = s
            .states
            .iter()
            .map(|&x| if x == HiddenState::BOTH { HiddenState::HAZE } else { x })
            .collect();
        let mut cfg = SupervisedConfig::new(EmissionFamily::LogNormalCopula, names());
        cfg.both_fallback = Some((fixtures::INITIAL_MU[3].to_vec(), fixtures::INITIAL_SIGMA[3].to_vec()));
        let fit = supervised_fit(&s.obs, &labels, &cfg).unwrap();
        assert_eq!(fit.emissions.mu[3], fixtures::INITIAL_MU[3].to_vec());
        let cfg = SupervisedConfig::new(EmissionFamily::JointGaussian, names());
        let fit = supervised_fit(&s.obs, &labels, &cfg).unwrap();
        assert!(fit.emissions.covariances.is_some());
    }

    #[test]
    fn length_mismatch_rejected() {
        let cfg = SupervisedConfig::new(EmissionFamily::LogNormalCopula, names());
        let obs = vec![vec![1.0; 4]; 3];
        assert!(supervised_fit(&obs, &[HiddenState::CLEAR; 2], &cfg).is_err());
    }
}
