//! Scaled forward-backward over the factorized joint state space.
//!
//! Messages live on the `K×K` grid of chain states (flattened as
//! `2·haze + dust`). Each time step applies the haze transition along the
//! first axis and the dust transition along the second, so the `K⁴` joint
//! transition table is never formed.

use crate::emissions::{log_emission_matrix, EmissionMode};
use crate::error::{FhmmError, Result};
use crate::model::{FhmmModel, K, NUM_STATES};

pub type Tensor = [f64; NUM_STATES];

/// `v·(A¹⊗A²)` via two per-chain contractions: first along the haze axis,
/// then along the dust axis. Joint index is `2·haze + dust`.
#[inline]
pub(crate) fn propagate(model: &FhmmModel, v: &Tensor) -> Tensor {
    let a = &model.chains[0].a;
    let b = &model.chains[1].a;
    let t = [
        v[0] * a[0][0] + v[2] * a[1][0],
        v[1] * a[0][0] + v[3] * a[1][0],
        v[0] * a[0][1] + v[2] * a[1][1],
        v[1] * a[0][1] + v[3] * a[1][1],
    ];
    [
        t[0] * b[0][0] + t[1] * b[1][0],
        t[0] * b[0][1] + t[1] * b[1][1],
        t[2] * b[0][0] + t[3] * b[1][0],
        t[2] * b[0][1] + t[3] * b[1][1],
    ]
}

/// `(A¹⊗A²)·v` via two transposed contractions.
#[inline]
pub(crate) fn propagate_back(model: &FhmmModel, v: &Tensor) -> Tensor {
    let a = &model.chains[0].a;
    let b = &model.chains[1].a;
    let t = [
        b[0][0] * v[0] + b[0][1] * v[1],
        b[1][0] * v[0] + b[1][1] * v[1],
        b[0][0] * v[2] + b[0][1] * v[3],
        b[1][0] * v[2] + b[1][1] * v[3],
    ];
    [
        a[0][0] * t[0] + a[0][1] * t[2],
        a[0][0] * t[1] + a[0][1] * t[3],
        a[1][0] * t[0] + a[1][1] * t[2],
        a[1][0] * t[1] + a[1][1] * t[3],
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Normalized forward messages; rows sum to one.
    pub alpha: Vec<Tensor>,
    /// `ln c_t`, the log of each step's pre-normalization mass.
    pub log_c: Vec<f64>,
    pub loglik: f64,
}

/// Everything the E-step produces for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBundle {
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub log_c: Vec<f64>,
    pub gamma: Vec<Tensor>,
    /// Pairwise posteriors `ξ_t[from][to]`, length `T−1`; only kept on request.
    pub xi: Option<Vec<[[f64; NUM_STATES]; NUM_STATES]>>,
    /// `Σ_t ξ_t`, always accumulated.
    pub xi_sum: [[f64; NUM_STATES]; NUM_STATES],
    pub loglik: f64,
}

/// Row maximum and shifted linear emissions `exp(ln b − max)`.
#[inline]
fn shifted(logb: &Tensor) -> (f64, Tensor) {
    let m = logb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut b = [0.0; NUM_STATES];
    for (o, &l) in b.iter_mut().zip(logb) {
        *o = (l - m).exp();
    }
    (m, b)
}

fn check_rows(logb: &[Tensor]) -> Result<()> {
    if logb.is_empty() {
        return Err(FhmmError::InvalidInput("empty observation sequence".into()));
    }
    Ok(())
}

fn underflow(t: usize) -> FhmmError {
    FhmmError::Numerical(format!("all emission densities vanish at t={t}"))
}

/// Forward pass on precomputed log-emissions.
pub fn forward_from_log_emissions(model: &FhmmModel, logb: &[Tensor]) -> Result<ForwardPass> {
    check_rows(logb)?;
    let n = logb.len();
    let mut alpha = Vec::with_capacity(n);
    let mut log_c = Vec::with_capacity(n);
    let mut prev = model.joint_initial();
    for (t, lb) in logb.iter().enumerate() {
        let prior = if t > 0 { propagate(model, &prev) } else { prev };
        let m = lb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut a = [0.0; NUM_STATES];
        let mut c = 0.0;
        for s in 0..NUM_STATES {
            a[s] = prior[s] * (lb[s] - m).exp();
            c += a[s];
        }
        if !(c > 0.0 && c.is_finite() && m.is_finite()) {
            return Err(underflow(t));
        }
        for v in &mut a {
            *v /= c;
        }
        alpha.push(a);
        log_c.push(c.ln() + m);
        prev = a;
    }
    let loglik = log_c.iter().sum();
    Ok(ForwardPass { alpha, log_c, loglik })
}

/// Backward pass on precomputed log-emissions, reusing the forward scaling.
pub fn backward_from_log_emissions(model: &FhmmModel, logb: &[Tensor], log_c: &[f64]) -> Result<Vec<Tensor>> {
    check_rows(logb)?;
    if log_c.len() != logb.len() {
        return Err(FhmmError::InvalidInput("scaling constants do not match sequence length".into()));
    }
    let n = logb.len();
    let mut beta = vec![[1.0; NUM_STATES]; n];
    for t in (0..n - 1).rev() {
        let (m, b) = shifted(&logb[t + 1]);
        let scale = (log_c[t + 1] - m).exp();
        let mut v = [0.0; NUM_STATES];
        for s in 0..NUM_STATES {
            v[s] = b[s] * beta[t + 1][s];
        }
        let mut out = propagate_back(model, &v);
        for o in &mut out {
            *o /= scale;
        }
        if out.iter().any(|x| !x.is_finite()) {
            return Err(underflow(t + 1));
        }
        beta[t] = out;
    }
    Ok(beta)
}

pub fn forward(model: &FhmmModel, obs: &[Vec<f64>], mode: EmissionMode) -> Result<ForwardPass> {
    let logb = log_emission_matrix(&model.emissions, obs, mode)?;
    forward_from_log_emissions(model, &logb)
}

pub fn backward(model: &FhmmModel, obs: &[Vec<f64>], log_c: &[f64], mode: EmissionMode) -> Result<Vec<Tensor>> {
    let logb = log_emission_matrix(&model.emissions, obs, mode)?;
    backward_from_log_emissions(model, &logb, log_c)
}

pub fn posteriors(model: &FhmmModel, obs: &[Vec<f64>], mode: EmissionMode, keep_xi: bool) -> Result<PosteriorBundle> {
    let logb = log_emission_matrix(&model.emissions, obs, mode)?;
    posteriors_from_log_emissions(model, &logb, keep_xi)
}

pub fn posteriors_from_log_emissions(model: &FhmmModel, logb: &[Tensor], keep_xi: bool) -> Result<PosteriorBundle> {
    let fw = forward_from_log_emissions(model, logb)?;
    let beta = backward_from_log_emissions(model, logb, &fw.log_c)?;
    let n = logb.len();

    let gamma: Vec<Tensor> = fw
        .alpha
        .iter()
        .zip(&beta)
        .map(|(a, b)| {
            let mut g = [0.0; NUM_STATES];
            let mut s = 0.0;
            for i in 0..NUM_STATES {
                g[i] = a[i] * b[i];
                s += g[i];
            }
            for v in &mut g {
                *v /= s;
            }
            g
        })
        .collect();

    let a1 = &model.chains[0].a;
    let a2 = &model.chains[1].a;
    let mut xi_sum = [[0.0; NUM_STATES]; NUM_STATES];
    let mut xi = keep_xi.then(|| Vec::with_capacity(n.saturating_sub(1)));
    for t in 0..n.saturating_sub(1) {
        let (m, b) = shifted(&logb[t + 1]);
        let scale = (fw.log_c[t + 1] - m).exp();
        let mut x = [[0.0; NUM_STATES]; NUM_STATES];
        let mut total = 0.0;
        for i in 0..NUM_STATES {
            for j in 0..NUM_STATES {
                let tr = a1[i / K][j / K] * a2[i % K][j % K];
                let v = fw.alpha[t][i] * tr * b[j] * beta[t + 1][j] / scale;
                x[i][j] = v;
                total += v;
            }
        }
        for row in &mut x {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        for i in 0..NUM_STATES {
            for j in 0..NUM_STATES {
                xi_sum[i][j] += x[i][j];
            }
        }
        if let Some(store) = xi.as_mut() {
            store.push(x);
        }
    }

    Ok(PosteriorBundle {
        alpha: fw.alpha,
        beta,
        log_c: fw.log_c,
        gamma,
        xi,
        xi_sum,
        loglik: fw.loglik,
    })
}
