//! Emission log-densities.
//!
//! All observation features are strictly positive and modeled on the log
//! scale. In the clear state the inflated feature (visibility) follows a
//! point mass at `c` plus a log-normal continuous part; densities of that
//! feature are taken with respect to counting measure at `c` plus Lebesgue
//! measure elsewhere.

use nalgebra::{DMatrix, DVector};

use crate::error::{FhmmError, Result};
use crate::model::{EmissionFamily, EmissionParams, HiddenState, InflatedMixtureParams, NUM_STATES};
use crate::special::{log_sum_exp, norm_cdf, norm_quantile, CDF_CLAMP, LN_2PI};

pub fn lognormal_logpdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(FhmmError::Domain(format!("log-normal density needs x > 0, got {x}")));
    }
    if !(sigma > 0.0) {
        return Err(FhmmError::Domain(format!("log-normal density needs sigma > 0, got {sigma}")));
    }
    Ok(ln_lognormal(x, mu, sigma))
}

#[inline]
pub(crate) fn ln_lognormal(x: f64, mu: f64, sigma: f64) -> f64 {
    let lx = x.ln();
    let s = (lx - mu) / sigma;
    -lx - sigma.ln() - 0.5 * LN_2PI - 0.5 * s * s
}

pub fn lognormal_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    norm_cdf((x.ln() - mu) / sigma)
}

pub fn inflated_logpdf(x: f64, params: &InflatedMixtureParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(FhmmError::Domain(format!("inflated density needs x > 0, got {x}")));
    }
    Ok(ln_inflated(x, params))
}

#[inline]
fn ln_inflated(x: f64, p: &InflatedMixtureParams) -> f64 {
    if x == p.c {
        p.pi0.ln()
    } else {
        (1.0 - p.pi0).ln() + ln_lognormal(x, p.theta, p.eta())
    }
}

/// `ln ∫₀^∞ f_LN(x; μ, σ)^w dx`, closed form.
pub fn lognormal_power_log_integral(w: f64, mu: f64, sigma: f64) -> f64 {
    let a = 1.0 - w;
    a * sigma.ln() + 0.5 * a * LN_2PI - 0.5 * w.ln() - (w - 1.0) * mu + (w - 1.0).powi(2) / (2.0 * w) * sigma * sigma
}

/// Log of the hybrid approximation to `∫ [f_mix(x)]^w`: a second-order
/// binomial expansion of the atom/continuous interaction at `c` plus the
/// closed-form body integral.
pub fn hybrid_normalization_constant(w: f64, params: &InflatedMixtureParams) -> f64 {
    let pi0 = params.pi0;
    let q = 1.0 - pi0;
    let d = ln_lognormal(params.c, params.theta, params.eta()).exp();
    let t1 = w * pi0.powf(w - 1.0) * q * d;
    let t2 = 0.5 * w * (w - 1.0) * pi0.powf(w - 2.0) * q * q * d * d;
    let interact = pi0.powf(w) + t1 + t2;
    let body = (w * q.ln() + lognormal_power_log_integral(w, params.theta, params.eta())).exp();
    (interact + body).ln()
}

/// Standard-normal scores of an observation under one state's marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct CopulaTransformed {
    pub z: Vec<f64>,
    /// Feature sitting at the inflation point, excluded from the copula.
    pub dropped: Option<usize>,
}

/// `Φ⁻¹(clamp(Φ(s)))`, evaluated through the lower tail on either side so
/// that large |s| keeps full precision.
#[inline]
fn normal_score(s: f64) -> f64 {
    if s <= 0.0 {
        norm_quantile(norm_cdf(s).max(CDF_CLAMP))
    } else {
        -norm_quantile(norm_cdf(-s).max(CDF_CLAMP))
    }
}

pub fn copula_transform(x: &[f64], state: HiddenState, params: &EmissionParams) -> Result<CopulaTransformed> {
    check_positive(x)?;
    Ok(transform_unchecked(x, state, params))
}

pub(crate) fn transform_unchecked(x: &[f64], state: HiddenState, params: &EmissionParams) -> CopulaTransformed {
    let mut dropped = None;
    let z = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            if let Some(p) = params.inflation_for(state, i) {
                if xi == p.c {
                    dropped = Some(i);
                    return 0.0;
                }
            }
            let (mu, sd) = params.marginal(state, i);
            normal_score((xi.ln() - mu) / sd)
        })
        .collect();
    CopulaTransformed { z, dropped }
}

fn check_positive(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| !(v > 0.0)) {
        Some(i) => Err(FhmmError::Domain(format!("feature {i} must be positive, got {}", x[i]))),
        None => Ok(()),
    }
}

/// Sum of per-feature marginal log-densities.
pub fn marginal_log_product(x: &[f64], state: HiddenState, params: &EmissionParams) -> Result<f64> {
    check_positive(x)?;
    Ok(marginal_sum(x, state, params))
}

fn marginal_sum(x: &[f64], state: HiddenState, params: &EmissionParams) -> f64 {
    (0..x.len()).map(|i| marginal_term(x, state, params, i)).sum()
}

#[inline]
fn marginal_term(x: &[f64], state: HiddenState, params: &EmissionParams, i: usize) -> f64 {
    match params.inflation_for(state, i) {
        Some(p) => ln_inflated(x[i], p),
        None => {
            let s = state.index();
            ln_lognormal(x[i], params.mu[s][i], params.sigma[s][i])
        }
    }
}

/// Precomputed `vᵀ M v` over a subset of dimensions, with `ln|S|` of the
/// matrix `S` that `M` was derived from.
#[derive(Debug, Clone)]
struct QuadForm {
    dims: Vec<usize>,
    m: Vec<f64>,
    logdet: f64,
}

impl QuadForm {
    fn eval(&self, v: &[f64]) -> f64 {
        let n = self.dims.len();
        let mut acc = 0.0;
        for a in 0..n {
            let va = v[self.dims[a]];
            let row = &self.m[a * n..(a + 1) * n];
            let mut s = 0.0;
            for b in 0..n {
                s += row[b] * v[self.dims[b]];
            }
            acc += va * s;
        }
        acc
    }
}

fn submatrix(m: &DMatrix<f64>, dims: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(dims.len(), dims.len(), |i, j| m[(dims[i], dims[j])])
}

/// Inverse and log-determinant of an SPD (sub)matrix; `subtract_identity`
/// stores `S⁻¹ − I` instead of `S⁻¹`.
fn quad_form(s: &DMatrix<f64>, dims: Vec<usize>, subtract_identity: bool, what: &str) -> Result<QuadForm> {
    let sub = submatrix(s, &dims);
    let chol = sub
        .cholesky()
        .ok_or_else(|| FhmmError::Numerical(format!("{what} is not positive definite")))?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let mut inv = chol.inverse();
    if subtract_identity {
        for i in 0..dims.len() {
            inv[(i, i)] -= 1.0;
        }
    }
    let n = dims.len();
    let m = (0..n * n).map(|k| inv[(k / n, k % n)]).collect();
    Ok(QuadForm { dims, m, logdet })
}

#[derive(Debug, Clone)]
struct CopulaCache {
    full: QuadForm,
    reduced: Option<QuadForm>,
}

impl CopulaCache {
    fn new(params: &EmissionParams) -> Result<Self> {
        let e = params.dim();
        let full = quad_form(&params.r_global, (0..e).collect(), true, "correlation matrix R")?;
        let reduced = match &params.inflated {
            Some(inf) => Some(quad_form(
                &params.r_global,
                (0..e).filter(|&i| i != inf.dim).collect(),
                true,
                "reduced correlation matrix",
            )?),
            None => None,
        };
        Ok(CopulaCache { full, reduced })
    }

    fn log_factor(&self, t: &CopulaTransformed) -> f64 {
        let q = match (t.dropped, &self.reduced) {
            (Some(_), Some(r)) => r,
            _ => &self.full,
        };
        -0.5 * q.logdet - 0.5 * q.eval(&t.z)
    }
}

/// Per-state log-scale Gaussian kernels for the joint-Gaussian family.
#[derive(Debug, Clone)]
struct JgCache {
    forms: Vec<QuadForm>,
}

impl JgCache {
    fn new(params: &EmissionParams) -> Result<Self> {
        let covs = params.covariances.as_ref().ok_or_else(|| {
            FhmmError::InvalidInput("joint-Gaussian emissions need per-state covariances".into())
        })?;
        let e = params.dim();
        let mut forms = Vec::with_capacity(NUM_STATES);
        for state in HiddenState::ALL {
            let dims: Vec<usize> = match &params.inflated {
                Some(inf) if state == HiddenState::CLEAR => (0..e).filter(|&i| i != inf.dim).collect(),
                _ => (0..e).collect(),
            };
            forms.push(quad_form(
                &covs[state.index()],
                dims,
                false,
                &format!("covariance of state {state}"),
            )?);
        }
        Ok(JgCache { forms })
    }

    fn log_density(&self, x: &[f64], state: HiddenState, params: &EmissionParams) -> f64 {
        let q = &self.forms[state.index()];
        let s = state.index();
        let resid: Vec<f64> = x.iter().zip(&params.mu[s]).map(|(&xi, &m)| xi.ln() - m).collect();
        let jac: f64 = q.dims.iter().map(|&i| x[i].ln()).sum();
        let n = q.dims.len() as f64;
        let mut ll = -jac - 0.5 * n * LN_2PI - 0.5 * q.logdet - 0.5 * q.eval(&resid);
        if let Some(inf) = &params.inflated {
            if state == HiddenState::CLEAR {
                ll += ln_inflated(x[inf.dim], &inf.params);
            }
        }
        ll
    }
}

pub fn jg_log_emission(x: &[f64], state: HiddenState, params: &EmissionParams) -> Result<f64> {
    if params.family != EmissionFamily::JointGaussian {
        return Err(FhmmError::InvalidInput("jg_log_emission on a non-JG model".into()));
    }
    check_positive(x)?;
    let cache = JgCache::new(params)?;
    Ok(cache.log_density(x, state, params))
}

pub fn lnc_log_emission(x: &[f64], state: HiddenState, params: &EmissionParams) -> Result<f64> {
    if params.family != EmissionFamily::LogNormalCopula {
        return Err(FhmmError::InvalidInput("lnc_log_emission on a non-LNC model".into()));
    }
    check_positive(x)?;
    let cache = CopulaCache::new(params)?;
    let t = transform_unchecked(x, state, params);
    Ok(cache.log_factor(&t) + marginal_sum(x, state, params))
}

/// Per-feature, per-state exponents applied to the marginal densities.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    /// Indexed `[feature][state]`.
    pub w: Vec<[f64; NUM_STATES]>,
    pub omega: f64,
}

impl WeightMatrix {
    pub fn uniform(e: usize, value: f64) -> Self {
        WeightMatrix {
            w: vec![[value; NUM_STATES]; e],
            omega: value * e as f64,
        }
    }

    pub fn get(&self, feature: usize, state: HiddenState) -> f64 {
        self.w[feature][state.index()]
    }

    pub fn column_sum(&self, state: HiddenState) -> f64 {
        self.w.iter().map(|r| r[state.index()]).sum()
    }

    /// Copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        WeightMatrix {
            w: self.w.iter().map(|r| r.map(|v| v * factor)).collect(),
            omega: self.omega * factor,
        }
    }

    pub fn validate(&self, e: usize) -> Result<()> {
        if self.w.len() != e {
            return Err(FhmmError::InvalidInput(format!(
                "weight matrix has {} rows for {e} features",
                self.w.len()
            )));
        }
        for (i, row) in self.w.iter().enumerate() {
            for (s, &v) in row.iter().enumerate() {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(FhmmError::InvalidInput(format!(
                        "weight for feature {i}, state {s} must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `Σ_i ln C_{i,state}` for the weighted marginals. A unit weight leaves a
/// normalized marginal unchanged, so its constant is exactly zero.
fn weighted_log_normalizer(state: HiddenState, params: &EmissionParams, weights: &WeightMatrix) -> f64 {
    (0..params.dim())
        .map(|i| {
            let w = weights.get(i, state);
            if w == 1.0 {
                return 0.0;
            }
            match params.inflation_for(state, i) {
                Some(p) => hybrid_normalization_constant(w, p),
                None => {
                    let (mu, sd) = params.marginal(state, i);
                    lognormal_power_log_integral(w, mu, sd)
                }
            }
        })
        .sum()
}

pub fn weighted_log_emission(
    x: &[f64],
    state: HiddenState,
    params: &EmissionParams,
    weights: &WeightMatrix,
) -> Result<f64> {
    weights.validate(params.dim())?;
    check_positive(x)?;
    let raw: f64 = (0..x.len())
        .map(|i| weights.get(i, state) * marginal_term(x, state, params, i))
        .sum();
    Ok(raw - weighted_log_normalizer(state, params, weights))
}

/// Log-softmax over states of `weighted_log_emission / v`.
pub fn global_weighted_log_scores(
    x: &[f64],
    params: &EmissionParams,
    weights: &WeightMatrix,
    v: f64,
) -> Result<[f64; NUM_STATES]> {
    if !(v > 0.0) {
        return Err(FhmmError::InvalidInput(format!("global weight v must be positive, got {v}")));
    }
    let mut s = [0.0; NUM_STATES];
    for state in HiddenState::ALL {
        s[state.index()] = weighted_log_emission(x, state, params, weights)? / v;
    }
    Ok(log_softmax(s))
}

pub fn log_softmax(mut s: [f64; NUM_STATES]) -> [f64; NUM_STATES] {
    let lse = log_sum_exp(&s);
    for v in &mut s {
        *v -= lse;
    }
    s
}

/// How per-state emission log-densities are formed for a whole sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmissionMode {
    /// The family's own density: full multivariate log-normal for JG,
    /// marginals times Gaussian copula for LNC.
    Native,
    /// Product of marginals only.
    MarginalProduct,
}

/// Batch evaluator with per-model caches (inverses, determinants,
/// normalizing constants).
#[derive(Debug, Clone)]
pub struct EmissionEvaluator<'a> {
    params: &'a EmissionParams,
    copula: Option<CopulaCache>,
    jg: Option<JgCache>,
}

impl<'a> EmissionEvaluator<'a> {
    pub fn new(params: &'a EmissionParams, mode: EmissionMode) -> Result<Self> {
        let (copula, jg) = match (mode, params.family) {
            (EmissionMode::MarginalProduct, _) => (None, None),
            (EmissionMode::Native, EmissionFamily::LogNormalCopula) => (Some(CopulaCache::new(params)?), None),
            (EmissionMode::Native, EmissionFamily::JointGaussian) => (None, Some(JgCache::new(params)?)),
        };
        Ok(EmissionEvaluator { params, copula, jg })
    }

    pub fn log_emission(&self, x: &[f64], state: HiddenState) -> f64 {
        if let Some(c) = &self.copula {
            let t = transform_unchecked(x, state, self.params);
            c.log_factor(&t) + marginal_sum(x, state, self.params)
        } else if let Some(j) = &self.jg {
            j.log_density(x, state, self.params)
        } else {
            marginal_sum(x, state, self.params)
        }
    }

    pub fn log_emissions(&self, x: &[f64]) -> [f64; NUM_STATES] {
        let mut out = [0.0; NUM_STATES];
        for s in HiddenState::ALL {
            out[s.index()] = self.log_emission(x, s);
        }
        out
    }
}

/// T×4 matrix of log-emissions.
pub fn log_emission_matrix(params: &EmissionParams, obs: &[Vec<f64>], mode: EmissionMode) -> Result<Vec<[f64; NUM_STATES]>> {
    check_observations(obs, params.dim())?;
    let ev = EmissionEvaluator::new(params, mode)?;
    Ok(obs.iter().map(|x| ev.log_emissions(x)).collect())
}

/// T×4 matrix of MI-weighted log-emissions.
pub fn weighted_log_emission_matrix(
    params: &EmissionParams,
    obs: &[Vec<f64>],
    weights: &WeightMatrix,
) -> Result<Vec<[f64; NUM_STATES]>> {
    check_observations(obs, params.dim())?;
    weights.validate(params.dim())?;
    let norm: Vec<f64> = HiddenState::ALL
        .iter()
        .map(|&s| weighted_log_normalizer(s, params, weights))
        .collect();
    Ok(obs
        .iter()
        .map(|x| {
            let mut out = [0.0; NUM_STATES];
            for s in HiddenState::ALL {
                let raw: f64 = (0..x.len())
                    .map(|i| weights.get(i, s) * marginal_term(x, s, params, i))
                    .sum();
                out[s.index()] = raw - norm[s.index()];
            }
            out
        })
        .collect())
}

pub(crate) fn check_observations(obs: &[Vec<f64>], e: usize) -> Result<()> {
    for (t, x) in obs.iter().enumerate() {
        if x.len() != e {
            return Err(FhmmError::InvalidInput(format!(
                "observation {t} has {} features, expected {e}",
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(FhmmError::Domain(format!(
                "observation {t}, feature {i} must be positive and finite, got {}",
                x[i]
            )));
        }
    }
    Ok(())
}

/// Multivariate log-normal log-density with full covariance, used as an
/// independent reference for the copula factorization.
pub fn mvln_logpdf(x: &[f64], mu: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    check_positive(x)?;
    let n = x.len();
    let y = DVector::from_iterator(n, x.iter().zip(mu).map(|(&xi, &m)| xi.ln() - m));
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| FhmmError::Numerical("covariance is not positive definite".into()))?;
    let sol = chol.solve(&y);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let jac: f64 = x.iter().map(|v| v.ln()).sum();
    Ok(-jac - 0.5 * n as f64 * LN_2PI - 0.5 * logdet - 0.5 * y.dot(&sol))
}
