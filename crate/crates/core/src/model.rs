//! Parameter types for the two-chain factorial HMM.
//!
//! Chain 1 tracks haze, chain 2 tracks dust. Joint states are indexed
//! row-major as `2·haze + dust`, so index 0 is clear, 1 is dust only,
//! 2 is haze only and 3 is both.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{FhmmError, Result};

/// States per chain.
pub const K: usize = 2;
/// Number of joint hidden states.
pub const NUM_STATES: usize = K * K;
/// Smallest admissible eigenvalue of the shared correlation matrix.
pub const PD_EPS: f64 = 1e-6;

const STOCHASTIC_TOL: f64 = 1e-12;

pub const DEFAULT_FEATURES: [&str; 4] = ["pm10", "wind", "visibility", "humidity"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HiddenState {
    pub haze: bool,
    pub dust: bool,
}

impl HiddenState {
    pub const CLEAR: HiddenState = HiddenState { haze: false, dust: false };
    pub const DUST: HiddenState = HiddenState { haze: false, dust: true };
    pub const HAZE: HiddenState = HiddenState { haze: true, dust: false };
    pub const BOTH: HiddenState = HiddenState { haze: true, dust: true };

    pub const ALL: [HiddenState; NUM_STATES] = [Self::CLEAR, Self::DUST, Self::HAZE, Self::BOTH];

    pub fn new(haze: bool, dust: bool) -> Self {
        HiddenState { haze, dust }
    }

    pub fn index(self) -> usize {
        2 * usize::from(self.haze) + usize::from(self.dust)
    }

    pub fn from_index(index: usize) -> Option<Self> {
        (index < NUM_STATES).then_some(HiddenState {
            haze: index & 2 != 0,
            dust: index & 1 != 0,
        })
    }

    /// `(k1, k2)` as 0/1 integers.
    pub fn bits(self) -> (u8, u8) {
        (u8::from(self.haze), u8::from(self.dust))
    }

    pub fn label(self) -> &'static str {
        match (self.haze, self.dust) {
            (false, false) => "clear",
            (false, true) => "dust",
            (true, false) => "haze",
            (true, true) => "haze_dust",
        }
    }
}

impl fmt::Display for HiddenState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (a, b) = self.bits();
        write!(f, "({a},{b})")
    }
}

/// Joint index `2·k1 + k2` for binary chain states.
pub fn joint_index(k1: u8, k2: u8) -> Result<usize> {
    if k1 > 1 || k2 > 1 {
        return Err(FhmmError::InvalidInput(format!(
            "chain states must be binary, got ({k1},{k2})"
        )));
    }
    Ok(2 * k1 as usize + k2 as usize)
}

/// Inverse of [`joint_index`].
pub fn split_index(index: usize) -> Option<(u8, u8)> {
    HiddenState::from_index(index).map(HiddenState::bits)
}

/// Initial distribution and row-stochastic transition matrix of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainParams {
    pub phi: [f64; K],
    pub a: [[f64; K]; K],
}

impl ChainParams {
    pub fn new(phi: [f64; K], a: [[f64; K]; K]) -> Self {
        ChainParams { phi, a }
    }

    /// Builds a chain from a table whose *columns* sum to one, as printed
    /// in the reference transition tables.
    pub fn from_column_stochastic(phi: [f64; K], table: [[f64; K]; K]) -> Self {
        let mut a = [[0.0; K]; K];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = table[j][i];
            }
        }
        ChainParams { phi, a }
    }

    /// Stationary distribution of a two-state chain.
    pub fn stationary(&self) -> [f64; K] {
        let p01 = self.a[0][1];
        let p10 = self.a[1][0];
        let s = p01 + p10;
        if s <= 0.0 {
            return self.phi;
        }
        [p10 / s, p01 / s]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InflatedMixtureParams {
    /// Probability mass at the inflation point.
    pub pi0: f64,
    /// Log-scale location of the continuous component.
    pub theta: f64,
    /// Log-scale variance of the continuous component.
    pub eta2: f64,
    /// Inflation (censoring) point.
    pub c: f64,
}

impl InflatedMixtureParams {
    pub fn eta(&self) -> f64 {
        self.eta2.sqrt()
    }
}

/// The inflated mixture and the feature it applies to (clear state only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inflation {
    pub dim: usize,
    pub params: InflatedMixtureParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EmissionFamily {
    /// Multivariate log-normal with per-state covariance.
    JointGaussian,
    /// Log-normal marginals coupled by a shared Gaussian copula.
    LogNormalCopula,
}

impl EmissionFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            EmissionFamily::JointGaussian => "joint_gaussian",
            EmissionFamily::LogNormalCopula => "lognormal_copula",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "joint_gaussian" | "jg" => Some(EmissionFamily::JointGaussian),
            "lognormal_copula" | "lnc" => Some(EmissionFamily::LogNormalCopula),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmissionParams {
    pub family: EmissionFamily,
    /// Log-scale means, indexed `[state][feature]`.
    pub mu: Vec<Vec<f64>>,
    /// Log-scale standard deviations, indexed `[state][feature]`.
    pub sigma: Vec<Vec<f64>>,
    /// Per-state log-scale covariances (joint-Gaussian family only).
    pub covariances: Option<Vec<DMatrix<f64>>>,
    /// Shared copula correlation matrix.
    pub r_global: DMatrix<f64>,
    pub inflated: Option<Inflation>,
}

impl EmissionParams {
    pub fn dim(&self) -> usize {
        self.mu.first().map_or(0, Vec::len)
    }

    /// Location and scale of the continuous marginal of `feature` in `state`.
    /// In the clear state the inflated feature uses the mixture's continuous
    /// component.
    pub fn marginal(&self, state: HiddenState, feature: usize) -> (f64, f64) {
        match self.inflation_for(state, feature) {
            Some(p) => (p.theta, p.eta()),
            None => {
                let s = state.index();
                (self.mu[s][feature], self.sigma[s][feature])
            }
        }
    }

    pub fn inflation_for(&self, state: HiddenState, feature: usize) -> Option<&InflatedMixtureParams> {
        match &self.inflated {
            Some(inf) if state == HiddenState::CLEAR && inf.dim == feature => Some(&inf.params),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FhmmModel {
    /// Haze chain, then dust chain.
    pub chains: [ChainParams; 2],
    pub emissions: EmissionParams,
    pub feature_names: Vec<String>,
}

impl FhmmModel {
    pub fn dim(&self) -> usize {
        self.emissions.dim()
    }

    pub fn haze(&self) -> &ChainParams {
        &self.chains[0]
    }

    pub fn dust(&self) -> &ChainParams {
        &self.chains[1]
    }

    pub fn validate(&self) -> Result<()> {
        let v = validate_model(self);
        if v.is_empty() {
            Ok(())
        } else {
            Err(FhmmError::InvalidModel(v))
        }
    }

    /// Joint initial distribution `φ¹ ⊗ φ²`.
    pub fn joint_initial(&self) -> [f64; NUM_STATES] {
        let mut out = [0.0; NUM_STATES];
        for s in HiddenState::ALL {
            out[s.index()] = self.chains[0].phi[usize::from(s.haze)] * self.chains[1].phi[usize::from(s.dust)];
        }
        out
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl Violation {
    fn new(location: impl Into<String>, message: impl Into<String>) -> Self {
        Violation {
            location: location.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}", self.message, self.location)
    }
}

/// Checks every parameter invariant and returns all violations found, in a
/// fixed traversal order (chains, emissions, correlation, mixture).
pub fn validate_model(model: &FhmmModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let chain_names = ["haze", "dust"];
    for (chain, name) in model.chains.iter().zip(chain_names) {
        check_distribution(&chain.phi, &format!("phi[{name}]"), &mut out);
        for (k, row) in chain.a.iter().enumerate() {
            check_distribution(row, &format!("A[{name}][{k}]"), &mut out);
        }
    }

    let em = &model.emissions;
    let e = em.dim();
    if e == 0 {
        out.push(Violation::new("mu", "empty emission parameters"));
        return out;
    }
    if model.feature_names.len() != e {
        out.push(Violation::new(
            "feature_names",
            format!("{} names for {} features", model.feature_names.len(), e),
        ));
    }
    if em.mu.len() != NUM_STATES || em.sigma.len() != NUM_STATES {
        out.push(Violation::new("mu/sigma", "expected one row per joint state"));
        return out;
    }
    for s in 0..NUM_STATES {
        if em.mu[s].len() != e || em.sigma[s].len() != e {
            out.push(Violation::new(format!("state {s}"), "parameter width mismatch"));
            continue;
        }
        for i in 0..e {
            if !em.mu[s][i].is_finite() {
                out.push(Violation::new(format!("mu[{s}][{i}]"), "non-finite mu"));
            }
            let sd = em.sigma[s][i];
            if !(sd > 0.0 && sd.is_finite()) {
                out.push(Violation::new(format!("sigma[{s}][{i}]"), "nonpositive sigma"));
            }
        }
    }

    let r = &em.r_global;
    if r.nrows() != e || r.ncols() != e {
        out.push(Violation::new("R", "correlation matrix has wrong shape"));
    } else {
        check_correlation(r, &mut out);
    }

    if let Some(covs) = &em.covariances {
        if covs.len() != NUM_STATES {
            out.push(Violation::new("Sigma", "expected one covariance per joint state"));
        }
        for (s, c) in covs.iter().enumerate() {
            if c.nrows() != e || c.ncols() != e {
                out.push(Violation::new(format!("Sigma[{s}]"), "covariance has wrong shape"));
                continue;
            }
            if !is_symmetric(c, 1e-10) {
                out.push(Violation::new(format!("Sigma[{s}]"), "covariance not symmetric"));
                continue;
            }
            let lmin = min_eigenvalue(c);
            if lmin < -1e-10 * c.diagonal().amax().max(1.0) {
                out.push(Violation::new(
                    format!("Sigma[{s}]"),
                    format!("covariance not positive semidefinite (lambda_min={lmin:e})"),
                ));
            }
        }
    } else if em.family == EmissionFamily::JointGaussian {
        out.push(Violation::new("Sigma", "joint-Gaussian family requires covariances"));
    }

    if let Some(inf) = &em.inflated {
        let p = &inf.params;
        if inf.dim >= e {
            out.push(Violation::new("inflated", "inflated feature out of range"));
        }
        if !(p.pi0 > 0.0 && p.pi0 < 1.0) {
            out.push(Violation::new("inflated.pi0", "pi0 outside (0,1)"));
        }
        if !(p.eta2 > 0.0 && p.eta2.is_finite()) {
            out.push(Violation::new("inflated.eta2", "nonpositive eta2"));
        }
        if !(p.c > 0.0 && p.c.is_finite()) {
            out.push(Violation::new("inflated.c", "nonpositive inflation point"));
        }
        if !p.theta.is_finite() {
            out.push(Violation::new("inflated.theta", "non-finite theta"));
        }
    }
    out
}

fn check_distribution(p: &[f64], loc: &str, out: &mut Vec<Violation>) {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        out.push(Violation::new(loc, "negative probability"));
        return;
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        out.push(Violation::new(loc, format!("row not stochastic (sum={sum})")));
    }
}

fn check_correlation(r: &DMatrix<f64>, out: &mut Vec<Violation>) {
    if !is_symmetric(r, 1e-12) {
        out.push(Violation::new("R", "correlation matrix not symmetric"));
        return;
    }
    if r.diagonal().iter().any(|&d| (d - 1.0).abs() > 1e-12) {
        out.push(Violation::new("R", "correlation diagonal not unit"));
    }
    let lmin = min_eigenvalue(r);
    if lmin < PD_EPS * (1.0 - 1e-6) {
        out.push(Violation::new(
            "R",
            format!("correlation not positive definite (lambda_min={lmin:e})"),
        ));
    }
}

pub(crate) fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Joint transition matrix `A¹ ⊗ A²` over joint indices. Oracle and
/// diagnostic use only; inference never materializes it.
pub fn kron_transition(a1: &[[f64; K]; K], a2: &[[f64; K]; K]) -> Result<[[f64; NUM_STATES]; NUM_STATES]> {
    let mut v = Vec::new();
    for (name, a) in [("A1", a1), ("A2", a2)] {
        for (k, row) in a.iter().enumerate() {
            check_distribution(row, &format!("{name}[{k}]"), &mut v);
        }
    }
    if !v.is_empty() {
        return Err(FhmmError::InvalidModel(v));
    }
    let mut out = [[0.0; NUM_STATES]; NUM_STATES];
    for from in HiddenState::ALL {
        for to in HiddenState::ALL {
            out[from.index()][to.index()] =
                a1[usize::from(from.haze)][usize::from(to.haze)] * a2[usize::from(from.dust)][usize::from(to.dust)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn joint_index_ordering() {
        assert_eq!(joint_index(0, 0).unwrap(), 0);
        assert_eq!(joint_index(0, 1).unwrap(), 1);
        assert_eq!(joint_index(1, 0).unwrap(), 2);
        assert_eq!(joint_index(1, 1).unwrap(), 3);
        assert!(joint_index(2, 0).is_err());
        for i in 0..NUM_STATES {
            let (a, b) = split_index(i).unwrap();
            assert_eq!(joint_index(a, b).unwrap(), i);
            assert_eq!(HiddenState::from_index(i).unwrap().index(), i);
        }
        assert!(split_index(4).is_none());
    }

    #[test]
    fn kron_identity() {
        let i2 = [[1.0, 0.0], [0.0, 1.0]];
        let k = kron_transition(&i2, &i2).unwrap();
        for (r, row) in k.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(v, if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn kron_published_final_entry() {
        let m = fixtures::final_lnc_model();
        let k = kron_transition(&m.chains[0].a, &m.chains[1].a).unwrap();
        // direct product of the two "stay clear" entries
        assert!((k[0][0] - 0.9887 * 0.9937).abs() < 1e-15);
        assert!((k[0][0] - 0.98247).abs() < 1e-5);
        for row in &k {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kron_rejects_non_stochastic() {
        let bad = [[0.5, 0.4], [0.0, 1.0]];
        let ok = [[1.0, 0.0], [0.0, 1.0]];
        assert!(kron_transition(&bad, &ok).is_err());
    }

    #[test]
    fn validate_reports_bad_row_and_sigma() {
        let mut m = fixtures::initial_model();
        assert!(validate_model(&m).is_empty(), "{:?}", validate_model(&m));
        m.chains[0].a[1] = [0.5, 0.4];
        m.emissions.sigma[2][1] = 0.0;
        let v = validate_model(&m);
        assert_eq!(v.len(), 2);
        assert!(v[0].message.starts_with("row not stochastic"));
        assert_eq!(v[0].location, "A[haze][1]");
        assert_eq!(v[1].message, "nonpositive sigma");
        assert_eq!(v[1].location, "sigma[2][1]");
    }

    #[test]
    fn validate_flags_non_pd_correlation() {
        let mut m = fixtures::final_lnc_model();
        m.emissions.r_global = DMatrix::from_row_slice(4, 4, &[
            1.0, 1.0, 0.0, 0.0, //
            1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 1.0,
        ]);
        let v = validate_model(&m);
        assert!(v.iter().any(|x| x.message.contains("positive definite")));
    }

    #[test]
    fn column_stochastic_tables_are_transposed() {
        let c = ChainParams::from_column_stochastic([1.0, 0.0], [[0.9887, 0.0830], [0.0113, 0.9170]]);
        assert_eq!(c.a[0], [0.9887, 0.0113]);
        assert_eq!(c.a[1], [0.0830, 0.9170]);
    }
}
