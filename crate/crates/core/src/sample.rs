//! Generative sampling from a fitted or fixture model.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{FhmmError, Result};
use crate::model::{ChainParams, EmissionFamily, FhmmModel, HiddenState, NUM_STATES};

/// A sampled state path with its observation matrix (`T×E`).
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSequence {
    pub states: Vec<HiddenState>,
    pub obs: Vec<Vec<f64>>,
}

pub fn sample_sequence(model: &FhmmModel, len: usize, seed: u64) -> Result<SampledSequence> {
    if len == 0 {
        return Err(FhmmError::InvalidInput("sequence length must be at least 1".into()));
    }
    model.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let haze = sample_chain(&model.chains[0], len, &mut rng);
    let dust = sample_chain(&model.chains[1], len, &mut rng);
    let states: Vec<HiddenState> = haze.iter().zip(&dust).map(|(&h, &d)| HiddenState::new(h, d)).collect();

    let em = &model.emissions;
    let factors: Vec<DMatrix<f64>> = match em.family {
        EmissionFamily::LogNormalCopula => vec![sqrt_factor(&em.r_global)],
        EmissionFamily::JointGaussian => {
            let covs = em.covariances.as_ref().expect("validated JG model has covariances");
            covs.iter().map(sqrt_factor).collect()
        }
    };
    let e = em.dim();
    let mut obs = Vec::with_capacity(len);
    for &s in &states {
        let white: Vec<f64> = (0..e).map(|_| rng.sample(StandardNormal)).collect();
        let f = match em.family {
            EmissionFamily::LogNormalCopula => &factors[0],
            EmissionFamily::JointGaussian => &factors[s.index()],
        };
        let corr: Vec<f64> = (0..e).map(|i| (0..=i).map(|j| f[(i, j)] * white[j]).sum()).collect();
        let mut x: Vec<f64> = match em.family {
            EmissionFamily::LogNormalCopula => (0..e)
                .map(|i| {
                    let (mu, sd) = em.marginal(s, i);
                    (mu + sd * corr[i]).exp()
                })
                .collect(),
            EmissionFamily::JointGaussian => (0..e).map(|i| (em.mu[s.index()][i] + corr[i]).exp()).collect(),
        };
        let atom_draw: f64 = rng.random();
        if let Some(inf) = &em.inflated {
            if s == HiddenState::CLEAR {
                let p = &inf.params;
                x[inf.dim] = if atom_draw < p.pi0 {
                    p.c
                } else if em.family == EmissionFamily::JointGaussian {
                    // visibility is independent of the other features here
                    let z: f64 = rng.sample(StandardNormal);
                    (p.theta + p.eta() * z).exp()
                } else {
                    x[inf.dim]
                };
            }
        }
        obs.push(x);
    }
    Ok(SampledSequence { states, obs })
}

fn sample_chain(chain: &ChainParams, len: usize, rng: &mut ChaCha20Rng) -> Vec<bool> {
    let mut out = Vec::with_capacity(len);
    let u: f64 = rng.random();
    let mut cur = u >= chain.phi[0];
    out.push(cur);
    for _ in 1..len {
        let u: f64 = rng.random();
        cur = u >= chain.a[usize::from(cur)][0];
        out.push(cur);
    }
    out
}

/// Lower-triangular `L` with `L·Lᵀ = S`; positive semidefinite inputs fall
/// back to a symmetric square root.
fn sqrt_factor(s: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = s.clone().cholesky() {
        return c.l();
    }
    let eig = SymmetricEigen::new(s.clone());
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let root = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    // rootᵀ = QR gives root·rootᵀ = RᵀR, so Rᵀ is a triangular factor
    let qr = root.transpose().qr();
    let r = qr.r();
    let mut l = r.transpose();
    for i in 0..l.nrows() {
        if l[(i, i)] < 0.0 {
            for k in 0..l.nrows() {
                l[(k, i)] = -l[(k, i)];
            }
        }
    }
    l
}

/// Empirical state frequencies, indexed by joint state.
pub fn state_counts(states: &[HiddenState]) -> [usize; NUM_STATES] {
    let mut n = [0; NUM_STATES];
    for s in states {
        n[s.index()] += 1;
    }
    n
}
