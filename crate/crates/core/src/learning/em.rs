use log::debug;

use super::{fit_dependence, fit_marginals, pooled_copula_correlation, state_mass, EmissionFitSpec, InflatedFit, InflationSpec};
use crate::emissions::{check_observations, log_emission_matrix, EmissionMode};
use crate::error::{FhmmError, Result};
use crate::inference::{posteriors_from_log_emissions, PosteriorBundle, Tensor};
use crate::model::{EmissionFamily, EmissionParams, FhmmModel, HiddenState, K, NUM_STATES, PD_EPS};

/// Allowed loss of log-likelihood between iterations before the fit is
/// declared inconsistent.
const DECREASE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once an iteration gains less than this (absolute).
    pub tol: f64,
    pub eps_pd: f64,
    /// Seed for the K-means restarts that usually precede EM.
    pub seed: u64,
    /// Posterior mass below which the haze-and-dust state keeps its
    /// initial emission parameters.
    pub hold_mass: f64,
    /// Keep the copula correlation at its initial value.
    pub fix_correlation: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 200,
            tol: 1e-6,
            eps_pd: PD_EPS,
            seed: 0,
            hold_mass: 10.0,
            fix_correlation: false,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(FhmmError::InvalidInput("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(FhmmError::InvalidInput("tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub model: FhmmModel,
    /// Log-likelihood of the initial model followed by one entry per
    /// iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl EmResult {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

/// `Σ_t Σ_s γ_t(s)·ln b_s(x_t)`.
pub fn expected_emission_loglik(gamma: &[Tensor], logb: &[Tensor]) -> f64 {
    let mut q = 0.0;
    for (g, lb) in gamma.iter().zip(logb) {
        for s in 0..NUM_STATES {
            if g[s] > 0.0 {
                q += g[s] * lb[s];
            }
        }
    }
    q
}

/// Expectation-maximization from `init`.
///
/// Transition and initial-distribution updates are exact per-chain
/// maximizers. The emission update proposes closed-form / searched
/// estimates and keeps whichever candidate (including the current
/// parameters) has the highest expected complete-data log-likelihood, so
/// every iteration is a generalized EM step and the log-likelihood cannot
/// decrease.
pub fn em_fit(obs: &[Vec<f64>], init: &FhmmModel, cfg: &EmConfig) -> Result<EmResult> {
    cfg.validate()?;
    init.validate()?;
    check_observations(obs, init.dim())?;
    let mut model = init.clone();
    let mut logb = log_emission_matrix(&model.emissions, obs, EmissionMode::Native)?;
    let mut post = posteriors_from_log_emissions(&model, &logb, false)?;
    let mut trace = vec![post.loglik];
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        let (next, next_logb) = m_step(obs, &model, &logb, &post, cfg)?;
        let next_post = posteriors_from_log_emissions(&next, &next_logb, false)?;
        let prev = *trace.last().unwrap();
        let gain = next_post.loglik - prev;
        debug!("em iteration {iter}: loglik {} (gain {gain:e})", next_post.loglik);
        if gain < -DECREASE_TOL {
            return Err(FhmmError::LikelihoodDecrease {
                iteration: iter,
                decrease: -gain,
            });
        }
        model = next;
        logb = next_logb;
        post = next_post;
        trace.push(post.loglik);
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmResult { model, trace, converged })
}

fn m_step(
    obs: &[Vec<f64>],
    model: &FhmmModel,
    logb: &[Tensor],
    post: &PosteriorBundle,
    cfg: &EmConfig,
) -> Result<(FhmmModel, Vec<Tensor>)> {
    let mut next = model.clone();
    update_chains(&mut next, post);

    let gamma = &post.gamma;
    let old = &model.emissions;
    let mut min_mass = [1e-8; NUM_STATES];
    min_mass[HiddenState::BOTH.index()] = cfg.hold_mass;
    let mass = state_mass(gamma);
    let spec = EmissionFitSpec {
        family: old.family,
        inflation: old.inflated.map(|i| InflationSpec {
            dim: i.dim,
            c: i.params.c,
        }),
        inflated_fit: InflatedFit::Search,
        previous: Some(old),
        min_mass,
        eps_pd: cfg.eps_pd,
    };
    let marginals = fit_marginals(obs, gamma, &spec);

    let mut candidates: Vec<EmissionParams> = Vec::new();
    match old.family {
        EmissionFamily::LogNormalCopula => {
            if !cfg.fix_correlation {
                let mut full = marginals.clone();
                full.r_global = pooled_copula_correlation(obs, gamma, &marginals, cfg.eps_pd);
                candidates.push(full);
            }
            let mut keep_r = marginals;
            keep_r.r_global = old.r_global.clone();
            candidates.push(keep_r);
        }
        EmissionFamily::JointGaussian => {
            let mut full = marginals;
            fit_dependence(obs, gamma, &mut full, cfg.eps_pd);
            if let (Some(new_covs), Some(old_covs)) = (full.covariances.as_mut(), old.covariances.as_ref()) {
                for s in 0..NUM_STATES {
                    if mass[s] < min_mass[s] {
                        new_covs[s] = old_covs[s].clone();
                        full.sigma[s] = old.sigma[s].clone();
                    }
                }
            }
            candidates.push(full);
        }
    }

    let mut best_q = expected_emission_loglik(gamma, logb);
    let mut best: Option<(EmissionParams, Vec<Tensor>)> = None;
    for (k, cand) in candidates.into_iter().enumerate() {
        let Ok(cand_logb) = log_emission_matrix(&cand, obs, EmissionMode::Native) else {
            debug!("em candidate {k} rejected: emission evaluation failed");
            continue;
        };
        let q = expected_emission_loglik(gamma, &cand_logb);
        if q.is_finite() && q > best_q {
            best_q = q;
            best = Some((cand, cand_logb));
        }
    }
    let new_logb = match best {
        Some((params, lb)) => {
            next.emissions = params;
            lb
        }
        None => logb.to_vec(),
    };
    if let Err(e) = next.validate() {
        return Err(FhmmError::Numerical(format!("M-step produced invalid parameters: {e}")));
    }
    Ok((next, new_logb))
}

/// Exact per-chain maximizers: `φ` from the first posterior, `A` from the
/// pairwise posteriors summed over the other chain.
fn update_chains(model: &mut FhmmModel, post: &PosteriorBundle) {
    let g0 = &post.gamma[0];
    for chain in 0..2 {
        let bit = |s: usize| if chain == 0 { s / K } else { s % K };
        let mut phi = [0.0; K];
        for s in 0..NUM_STATES {
            phi[bit(s)] += g0[s];
        }
        let total: f64 = phi.iter().sum();
        if total > 0.0 {
            model.chains[chain].phi = phi.map(|v| v / total);
        }
        let mut counts = [[0.0; K]; K];
        for i in 0..NUM_STATES {
            for j in 0..NUM_STATES {
                counts[bit(i)][bit(j)] += post.xi_sum[i][j];
            }
        }
        for k in 0..K {
            let row: f64 = counts[k].iter().sum();
            if row > 0.0 {
                model.chains[chain].a[k] = counts[k].map(|v| v / row);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::sample::sample_sequence;

    #[test]
    fn trace_is_monotone_and_rows_stochastic() {
        let truth = fixtures::final_lnc_model();
        let s = sample_sequence(&truth, 1500, 21).unwrap();
        let mut init = fixtures::initial_model();
        init.emissions.inflated.as_mut().unwrap().params.pi0 = 0.9;
        let cfg = EmConfig {
            max_iters: 15,
            ..EmConfig::default()
        };
        let res = em_fit(&s.obs, &init, &cfg).unwrap();
        for w in res.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{:?}", res.trace);
        }
        for c in &res.model.chains {
            for row in &c.a {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn converged_fit_exits_after_one_iteration() {
        let truth = fixtures::final_lnc_model();
        let s = sample_sequence(&truth, 800, 4).unwrap();
        let cfg = EmConfig {
            max_iters: 400,
            tol: 1e-7,
            ..EmConfig::default()
        };
        let first = em_fit(&s.obs, &truth, &cfg).unwrap();
        assert!(first.converged);
        let again = em_fit(&s.obs, &first.model, &EmConfig { tol: 1e-6, ..cfg }).unwrap();
        assert_eq!(again.iterations(), 1);
    }

    #[test]
    fn zero_iterations_rejected() {
        let m = fixtures::final_lnc_model();
        let cfg = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(em_fit(&[vec![1.0; 4]], &m, &cfg).is_err());
    }
}
