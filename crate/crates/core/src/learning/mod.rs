//! Parameter estimation: supervised fitting, K-means initialization and EM.
//!
//! All three estimators share one emission fitter driven by a `T×4`
//! responsibility matrix: one-hot labels for supervised fitting, cluster
//! assignments for K-means and smoothed posteriors for EM.

mod em;
mod inflated;
mod kmeans;
mod supervised;

pub use em::{em_fit, expected_emission_loglik, EmConfig, EmResult};
pub use inflated::{fit_inflated, InflatedFit};
pub use kmeans::{kmeans_init, ClassPriors, KmeansConfig};
pub use supervised::{supervised_fit, SupervisedConfig};

use nalgebra::DMatrix;

use crate::emissions::transform_unchecked;
use crate::inference::Tensor;
use crate::model::{min_eigenvalue, ChainParams, EmissionFamily, EmissionParams, HiddenState, Inflation, K, NUM_STATES};

/// Lower bound on fitted log-scale standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Clamp on the fitted atom probability.
pub const PI0_CLAMP: f64 = 1e-6;

/// Feature carrying the clear-state atom, and the atom's value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflationSpec {
    pub dim: usize,
    pub c: f64,
}

/// Repairs a symmetric matrix into a correlation matrix whose smallest
/// eigenvalue is at least `eps`.
///
/// The matrix is first scaled to unit diagonal. If the smallest eigenvalue
/// is still below `eps` the diagonal is shifted by `δ = (eps − λ)/(1 − eps)`
/// and the result rescaled by `1/(1 + δ)`, which lands the smallest
/// eigenvalue exactly on `eps`. Inputs that already qualify are returned
/// unchanged.
pub fn pd_repair(r: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let n = r.nrows();
    let unit = (0..n).all(|i| r[(i, i)] == 1.0);
    let scaled = if unit {
        r.clone()
    } else {
        let d: Vec<f64> = (0..n).map(|i| r[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { r[(i, j)] / (d[i] * d[j]) })
    };
    let lmin = min_eigenvalue(&scaled);
    if lmin >= eps {
        return scaled;
    }
    let delta = (eps - lmin) / (1.0 - eps);
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            scaled[(i, j)] / (1.0 + delta)
        }
    })
}

/// Row-normalized transition counts with add-one smoothing.
pub(crate) fn smoothed_rows(counts: [[f64; K]; K]) -> [[f64; K]; K] {
    let mut a = [[0.0; K]; K];
    for (row, c) in a.iter_mut().zip(counts) {
        let total: f64 = c.iter().map(|v| v + 1.0).sum();
        for (o, v) in row.iter_mut().zip(c) {
            *o = (v + 1.0) / total;
        }
    }
    a
}

/// Per-chain transition counts and first-step distributions from a labeled
/// state path, with add-one smoothing.
pub(crate) fn chains_from_path(path: &[HiddenState]) -> [ChainParams; 2] {
    let mut out = Vec::with_capacity(2);
    for chain in 0..2 {
        let bit = |s: HiddenState| usize::from(if chain == 0 { s.haze } else { s.dust });
        let mut counts = [[0.0; K]; K];
        for w in path.windows(2) {
            counts[bit(w[0])][bit(w[1])] += 1.0;
        }
        let mut phi = [1.0; K];
        if let Some(&s) = path.first() {
            phi[bit(s)] += 1.0;
        }
        let total: f64 = phi.iter().sum();
        out.push(ChainParams::new(phi.map(|v| v / total), smoothed_rows(counts)));
    }
    [out[0].clone(), out[1].clone()]
}

pub(crate) fn one_hot(path: &[HiddenState]) -> Vec<Tensor> {
    path.iter()
        .map(|s| {
            let mut g = [0.0; NUM_STATES];
            g[s.index()] = 1.0;
            g
        })
        .collect()
}

/// Total responsibility per state.
pub(crate) fn state_mass(resp: &[Tensor]) -> Tensor {
    let mut m = [0.0; NUM_STATES];
    for g in resp {
        for s in 0..NUM_STATES {
            m[s] += g[s];
        }
    }
    m
}

/// Weighted mean and floored standard deviation of `ys`.
pub(crate) fn weighted_moments(ys: impl Iterator<Item = (f64, f64)> + Clone) -> Option<(f64, f64)> {
    let (mut sw, mut sy) = (0.0, 0.0);
    for (w, y) in ys.clone() {
        sw += w;
        sy += w * y;
    }
    if !(sw > 0.0) {
        return None;
    }
    let mu = sy / sw;
    let var = ys.map(|(w, y)| w * (y - mu) * (y - mu)).sum::<f64>() / sw;
    Some((mu, var.sqrt().max(SIGMA_FLOOR)))
}

/// How the state-dependent emission parameters are fitted from
/// responsibilities.
#[derive(Debug, Clone)]
pub(crate) struct EmissionFitSpec<'a> {
    pub family: EmissionFamily,
    pub inflation: Option<InflationSpec>,
    pub inflated_fit: InflatedFit,
    /// Previous parameters, used where a state has too little mass.
    pub previous: Option<&'a EmissionParams>,
    /// Responsibility mass below which a state keeps `previous`.
    pub min_mass: [f64; NUM_STATES],
    pub eps_pd: f64,
}

/// Marginal (μ, σ) per state plus the inflated mixture; `R`/`Σ` are left at
/// identity and filled in by [`fit_dependence`].
pub(crate) fn fit_marginals(obs: &[Vec<f64>], resp: &[Tensor], spec: &EmissionFitSpec) -> EmissionParams {
    let e = obs[0].len();
    let mass = state_mass(resp);
    let mut mu = vec![vec![0.0; e]; NUM_STATES];
    let mut sigma = vec![vec![1.0; e]; NUM_STATES];
    let mut inflated = None;
    let keep = |s: usize| mass[s] < spec.min_mass[s] && spec.previous.is_some();

    for s in 0..NUM_STATES {
        if keep(s) {
            let prev = spec.previous.unwrap();
            mu[s] = prev.mu[s].clone();
            sigma[s] = prev.sigma[s].clone();
            continue;
        }
        for i in 0..e {
            let ys = resp.iter().zip(obs).map(move |(g, x)| (g[s], x[i].ln()));
            if let Some((m, sd)) = weighted_moments(ys) {
                mu[s][i] = m;
                sigma[s][i] = sd;
            }
        }
    }

    if let Some(inf) = spec.inflation {
        let prev = spec
            .previous
            .and_then(|p| p.inflated.as_ref())
            .map(|i| i.params);
        let weights: Vec<f64> = resp.iter().map(|g| g[0]).collect();
        let vis: Vec<f64> = obs.iter().map(|x| x[inf.dim]).collect();
        let params = if keep(0) {
            prev.expect("previous parameters carry the mixture")
        } else {
            fit_inflated(&vis, &weights, inf.c, spec.inflated_fit, prev)
        };
        mu[0][inf.dim] = params.theta;
        sigma[0][inf.dim] = params.eta();
        inflated = Some(Inflation { dim: inf.dim, params });
    }

    EmissionParams {
        family: spec.family,
        mu,
        sigma,
        covariances: None,
        r_global: DMatrix::identity(e, e),
        inflated,
    }
}

/// Responsibility-weighted pooled correlation of copula scores. Where the
/// inflated feature sits on its atom in the clear state it has no score, so
/// each pair is averaged over the rows where both scores exist.
pub(crate) fn pooled_copula_correlation(
    obs: &[Vec<f64>],
    resp: &[Tensor],
    params: &EmissionParams,
    eps: f64,
) -> DMatrix<f64> {
    let e = params.dim();
    let mut s = DMatrix::<f64>::zeros(e, e);
    let mut w = DMatrix::<f64>::zeros(e, e);
    for (x, g) in obs.iter().zip(resp) {
        for state in HiddenState::ALL {
            let gs = g[state.index()];
            if gs <= 0.0 {
                continue;
            }
            let t = transform_unchecked(x, state, params);
            for i in 0..e {
                if t.dropped == Some(i) {
                    continue;
                }
                for j in 0..=i {
                    if t.dropped == Some(j) {
                        continue;
                    }
                    s[(i, j)] += gs * t.z[i] * t.z[j];
                    w[(i, j)] += gs;
                }
            }
        }
    }
    let raw = DMatrix::from_fn(e, e, |i, j| {
        let (a, b) = if i >= j { (i, j) } else { (j, i) };
        if w[(a, b)] > 0.0 {
            s[(a, b)] / w[(a, b)]
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    pd_repair(&raw, eps)
}

/// Responsibility-weighted log-scale covariances per state. In the clear
/// state the inflated feature is independent of the rest, with variance
/// `η²`.
pub(crate) fn state_covariances(obs: &[Vec<f64>], resp: &[Tensor], params: &EmissionParams) -> Vec<DMatrix<f64>> {
    let e = params.dim();
    let mass = state_mass(resp);
    HiddenState::ALL
        .iter()
        .map(|&state| {
            let s = state.index();
            let mut cov = DMatrix::<f64>::zeros(e, e);
            if mass[s] > 0.0 {
                for (x, g) in obs.iter().zip(resp) {
                    if g[s] <= 0.0 {
                        continue;
                    }
                    let r: Vec<f64> = (0..e).map(|i| x[i].ln() - params.mu[s][i]).collect();
                    for i in 0..e {
                        for j in 0..=i {
                            cov[(i, j)] += g[s] * r[i] * r[j];
                        }
                    }
                }
                cov /= mass[s];
            }
            for i in 0..e {
                for j in 0..i {
                    cov[(j, i)] = cov[(i, j)];
                }
            }
            if let (Some(inf), true) = (&params.inflated, state == HiddenState::CLEAR) {
                let d = inf.dim;
                for k in 0..e {
                    cov[(d, k)] = 0.0;
                    cov[(k, d)] = 0.0;
                }
                cov[(d, d)] = inf.params.eta2;
            }
            // keep the variances consistent with the floored marginals
            for i in 0..e {
                let floor = SIGMA_FLOOR * SIGMA_FLOOR;
                if cov[(i, i)] < floor || mass[s] <= 0.0 {
                    cov[(i, i)] = params.sigma[s][i].powi(2).max(floor);
                }
            }
            covariance_repair(cov)
        })
        .collect()
}

fn covariance_repair(cov: DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let scale = cov.diagonal().amax().max(SIGMA_FLOOR * SIGMA_FLOOR);
    let floor = 1e-9 * scale;
    let lmin = min_eigenvalue(&cov);
    if lmin >= floor {
        return cov;
    }
    &cov + DMatrix::identity(n, n) * (floor - lmin)
}

/// Fills `R` (copula family) or the per-state covariances (joint family).
pub(crate) fn fit_dependence(obs: &[Vec<f64>], resp: &[Tensor], params: &mut EmissionParams, eps: f64) {
    match params.family {
        EmissionFamily::LogNormalCopula => {
            params.r_global = pooled_copula_correlation(obs, resp, params, eps);
        }
        EmissionFamily::JointGaussian => {
            let covs = state_covariances(obs, resp, params);
            for (s, c) in covs.iter().enumerate() {
                for i in 0..params.dim() {
                    params.sigma[s][i] = c[(i, i)].sqrt();
                }
            }
            params.covariances = Some(covs);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pd_repair_identity_unchanged() {
        let r = DMatrix::<f64>::identity(3, 3);
        assert_eq!(pd_repair(&r, 1e-6), r);
    }

    #[test]
    fn pd_repair_singular_pair() {
        let eps = 1e-6;
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let out = pd_repair(&r, eps);
        // eigenvalues of [[1,ρ],[ρ,1]] are 1±ρ, so ρ' = 1 − eps exactly
        let delta = eps / (1.0 - eps);
        assert!((out[(0, 1)] - 1.0 / (1.0 + delta)).abs() < 1e-15);
        assert!((out[(0, 1)] - (1.0 - eps)).abs() < 1e-15);
        assert!(min_eigenvalue(&out) >= eps * (1.0 - 1e-6));
        assert_eq!(out[(0, 0)], 1.0);
    }

    #[test]
    fn pd_repair_no_op_is_bitwise() {
        let r = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, -0.1, 0.3, 1.0, 0.2, -0.1, 0.2, 1.0]);
        assert_eq!(pd_repair(&r, 1e-6), r);
    }

    #[test]
    fn smoothing_of_constant_labels() {
        let path = vec![HiddenState::CLEAR; 100];
        let ch = chains_from_path(&path);
        assert!((ch[0].a[0][0] - 100.0 / 101.0).abs() < 1e-15);
        assert_eq!(ch[0].a[1], [0.5, 0.5]);
        assert!((ch[1].phi[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_moments_degenerate_weights() {
        let ys = [(1.0, 2.0), (0.0, 100.0), (1.0, 4.0)];
        let (m, sd) = weighted_moments(ys.iter().copied()).unwrap();
        assert_eq!(m, 3.0);
        assert_eq!(sd, 1.0);
        assert!(weighted_moments([(0.0, 1.0)].iter().copied()).is_none());
    }
}
