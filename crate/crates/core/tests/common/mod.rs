//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's inference or decoding code.
#![allow(dead_code)]

use fhmm_core::decode::{DecodeConfig, Reclassify, Weighting};
use fhmm_core::fixtures;
use fhmm_core::mi::StateMi;
use fhmm_core::model::{ChainParams, EmissionFamily, EmissionParams, FhmmModel, HiddenState, NUM_STATES};
use fhmm_core::sample::{sample_sequence, SampledSequence};
use fhmm_core::{kron_transition, InflatedMixtureParams, Inflation};
use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_chain(r: &mut ChaCha20Rng) -> ChainParams {
    let p: f64 = r.random_range(0.05..0.95);
    let a00: f64 = r.random_range(0.05..0.95);
    let a11: f64 = r.random_range(0.05..0.95);
    ChainParams::new([p, 1.0 - p], [[a00, 1.0 - a00], [1.0 - a11, a11]])
}

/// Random correlation matrix from a normalized Gram matrix.
pub fn random_correlation(r: &mut ChaCha20Rng, e: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(e, e + 2, |_, _| r.sample::<f64, _>(StandardNormal));
    let s = &g * g.transpose();
    DMatrix::from_fn(e, e, |i, j| s[(i, j)] / (s[(i, i)] * s[(j, j)]).sqrt())
}

/// Random copula model on `e` features; `inflated` adds a clear-state atom
/// on the last feature.
pub fn random_model(r: &mut ChaCha20Rng, e: usize, inflated: bool) -> FhmmModel {
    let mu: Vec<Vec<f64>> = (0..NUM_STATES)
        .map(|_| (0..e).map(|_| r.random_range(-1.0..3.0)).collect())
        .collect();
    let sigma: Vec<Vec<f64>> = (0..NUM_STATES)
        .map(|_| (0..e).map(|_| r.random_range(0.3..1.2)).collect())
        .collect();
    let inflated = inflated.then(|| {
        let c = mu[0][e - 1].exp() * 1.5;
        Inflation {
            dim: e - 1,
            params: InflatedMixtureParams {
                pi0: r.random_range(0.3..0.9),
                theta: mu[0][e - 1],
                eta2: sigma[0][e - 1].powi(2),
                c,
            },
        }
    });
    FhmmModel {
        chains: [random_chain(r), random_chain(r)],
        emissions: EmissionParams {
            family: EmissionFamily::LogNormalCopula,
            mu,
            sigma,
            covariances: None,
            r_global: random_correlation(r, e),
            inflated,
        },
        feature_names: (0..e).map(|i| format!("x{i}")).collect(),
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn flat_transition(m: &FhmmModel) -> [[f64; NUM_STATES]; NUM_STATES] {
    kron_transition(&m.chains[0].a, &m.chains[1].a).unwrap()
}

pub fn flat_initial(m: &FhmmModel) -> [f64; NUM_STATES] {
    let mut p = [0.0; NUM_STATES];
    for s in HiddenState::ALL {
        p[s.index()] = m.chains[0].phi[usize::from(s.haze)] * m.chains[1].phi[usize::from(s.dust)];
    }
    p
}

pub struct FlatPosteriors {
    pub loglik: f64,
    pub gamma: Vec<[f64; NUM_STATES]>,
    pub xi: Vec<[[f64; NUM_STATES]; NUM_STATES]>,
}

/// Textbook log-domain forward-backward on the flattened 4-state chain.
pub fn flat_posteriors(m: &FhmmModel, logb: &[[f64; NUM_STATES]]) -> FlatPosteriors {
    let a = flat_transition(m);
    let la = a.map(|r| r.map(f64::ln));
    let pi = flat_initial(m);
    let n = logb.len();
    let mut lf = vec![[0.0; NUM_STATES]; n];
    for j in 0..NUM_STATES {
        lf[0][j] = pi[j].ln() + logb[0][j];
    }
    for t in 1..n {
        for j in 0..NUM_STATES {
            let terms: Vec<f64> = (0..NUM_STATES).map(|i| lf[t - 1][i] + la[i][j]).collect();
            lf[t][j] = log_sum_exp(&terms) + logb[t][j];
        }
    }
    let mut lb = vec![[0.0; NUM_STATES]; n];
    for t in (0..n - 1).rev() {
        for i in 0..NUM_STATES {
            let terms: Vec<f64> = (0..NUM_STATES).map(|j| la[i][j] + logb[t + 1][j] + lb[t + 1][j]).collect();
            lb[t][i] = log_sum_exp(&terms);
        }
    }
    let loglik = log_sum_exp(&lf[n - 1]);
    let gamma = (0..n)
        .map(|t| {
            let mut g = [0.0; NUM_STATES];
            for s in 0..NUM_STATES {
                g[s] = (lf[t][s] + lb[t][s] - loglik).exp();
            }
            g
        })
        .collect();
    let xi = (0..n.saturating_sub(1))
        .map(|t| {
            let mut x = [[0.0; NUM_STATES]; NUM_STATES];
            for i in 0..NUM_STATES {
                for j in 0..NUM_STATES {
                    x[i][j] = (lf[t][i] + la[i][j] + logb[t + 1][j] + lb[t + 1][j] - loglik).exp();
                }
            }
            x
        })
        .collect();
    FlatPosteriors { loglik, gamma, xi }
}

/// Forward pass with the materialized 4×4 joint transition, linear domain
/// with per-step scaling. Used as the flattened baseline in timing checks,
/// so it keeps the same outputs as the library pass.
pub fn flat_forward(
    a: &[[f64; NUM_STATES]; NUM_STATES],
    pi: &[f64; NUM_STATES],
    logb: &[[f64; NUM_STATES]],
) -> (Vec<[f64; NUM_STATES]>, Vec<f64>, f64) {
    let mut alpha = *pi;
    let mut alphas = Vec::with_capacity(logb.len());
    let mut log_c = Vec::with_capacity(logb.len());
    for (t, lb) in logb.iter().enumerate() {
        let mut prior = [0.0; NUM_STATES];
        if t == 0 {
            prior = alpha;
        } else {
            for (i, &ai) in alpha.iter().enumerate() {
                for j in 0..NUM_STATES {
                    prior[j] += ai * a[i][j];
                }
            }
        }
        let m = lb.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut c = 0.0;
        for j in 0..NUM_STATES {
            alpha[j] = prior[j] * (lb[j] - m).exp();
            c += alpha[j];
        }
        alpha.iter_mut().for_each(|v| *v /= c);
        alphas.push(alpha);
        log_c.push(c.ln() + m);
    }
    let ll = log_c.iter().sum();
    (alphas, log_c, ll)
}

/// Best path by enumerating all `4^T` sequences. Among equal scores the
/// lexicographically smallest path wins.
pub fn brute_force_viterbi(m: &FhmmModel, scores: &[[f64; NUM_STATES]]) -> (Vec<usize>, f64) {
    let la = flat_transition(m).map(|r| r.map(f64::ln));
    let pi = flat_initial(m);
    let n = scores.len();
    let mut best = (vec![0; n], f64::NEG_INFINITY);
    let mut path = vec![0usize; n];
    for code in 0..NUM_STATES.pow(n as u32) {
        let mut c = code;
        for t in (0..n).rev() {
            path[t] = c % NUM_STATES;
            c /= NUM_STATES;
        }
        let mut s = pi[path[0]].ln() + scores[0][path[0]];
        for t in 1..n {
            s += la[path[t - 1]][path[t]] + scores[t][path[t]];
        }
        if s > best.1 {
            best = (path.clone(), s);
        }
    }
    best
}

/// Composite Simpson rule on `[a, b]` with `n` (even) panels.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

/// `∫₀^∞ [(1−π0)·f_LN(x)]^w dx + π0^w`: the atom contributes its mass to
/// the power, the continuous part is integrated numerically in log space.
pub fn hybrid_oracle(w: f64, pi0: f64, mu: f64, sigma: f64) -> f64 {
    let q = 1.0 - pi0;
    let g = |y: f64| {
        let z = (y - mu) / sigma;
        let ln_f = -0.5 * z * z - y - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        (w * (q.ln() + ln_f) + y).exp()
    };
    // the integrand in y is Gaussian-shaped with scale sigma/√w
    let half = 40.0 * sigma / w.sqrt();
    let centre = mu + (1.0 - w) * sigma * sigma / w;
    pi0.powf(w) + simpson(g, centre - half, centre + half, 20_000)
}

/// Multivariate log-normal log-density via Cholesky.
pub fn mvln_oracle(x: &[f64], mu: &[f64], cov: &DMatrix<f64>) -> f64 {
    let e = x.len();
    let y = DVector::from_iterator(e, x.iter().zip(mu).map(|(v, m)| v.ln() - m));
    let l = cov.clone().cholesky().expect("SPD covariance").l();
    let z = l.solve_lower_triangular(&y).unwrap();
    let log_det: f64 = 2.0 * (0..e).map(|i| l[(i, i)].ln()).sum::<f64>();
    let log_jac: f64 = x.iter().map(|v| v.ln()).sum();
    -0.5 * e as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * z.norm_squared() - log_jac
}

/// Stationary distribution of the joint chain from the null space of
/// `Pᵀ − I`, with one equation replaced by the normalization.
pub fn stationary_oracle(m: &FhmmModel) -> [f64; NUM_STATES] {
    let p = flat_transition(m);
    let mut a = DMatrix::from_fn(NUM_STATES, NUM_STATES, |i, j| p[j][i] - if i == j { 1.0 } else { 0.0 });
    let mut b = DVector::zeros(NUM_STATES);
    for j in 0..NUM_STATES {
        a[(NUM_STATES - 1, j)] = 1.0;
    }
    b[NUM_STATES - 1] = 1.0;
    let x = a.lu().solve(&b).unwrap();
    [x[0], x[1], x[2], x[3]]
}

/// F1 from integer counts with exact rational arithmetic. A class absent
/// from both labelings scores zero and stays in the macro average.
pub fn rational_f1(counts: &[[u64; 3]; 3]) -> ([Ratio<i128>; 3], Ratio<i128>, Ratio<i128>) {
    let c = |i: usize, j: usize| counts[i][j] as i128;
    let f1 = |tp: i128, fp: i128, fn_: i128| {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            Ratio::from_integer(0)
        } else {
            Ratio::new(2 * tp, den)
        }
    };
    let mut per = [Ratio::from_integer(0); 3];
    let (mut tp_all, mut fp_all, mut fn_all) = (0i128, 0i128, 0i128);
    for k in 0..3 {
        let tp = c(k, k);
        let fp: i128 = (0..3).filter(|&i| i != k).map(|i| c(i, k)).sum();
        let fn_: i128 = (0..3).filter(|&j| j != k).map(|j| c(k, j)).sum();
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        per[k] = f1(tp, fp, fn_);
    }
    let macro_ = (per[0] + per[1] + per[2]) / Ratio::from_integer(3);
    (per, f1(tp_all, fp_all, fn_all), macro_)
}

pub fn ratio_f64(r: Ratio<i128>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Random MI table; no state falls back.
pub fn random_profile(r: &mut ChaCha20Rng, e: usize) -> StateMi {
    StateMi {
        values: (0..NUM_STATES)
            .map(|_| (0..e).map(|_| r.random_range(0.01..0.5)).collect())
            .collect(),
        fallback: [false; NUM_STATES],
        k: 3,
    }
}

pub fn weighted_config(weighting: Weighting, omega: f64, v: f64) -> DecodeConfig {
    DecodeConfig {
        weighting,
        omega,
        v,
        reclassify: Reclassify::HumidityWindRule,
    }
}

/// Transition structure with realistic rarity: haze under 10% of hours,
/// dust under 1%.
pub fn rare_event_model() -> FhmmModel {
    let mut m = fixtures::final_lnc_model();
    m.chains[0] = ChainParams::new([0.91, 0.09], [[0.992, 0.008], [0.08, 0.92]]);
    m.chains[1] = ChainParams::new([0.993, 0.007], [[0.9994, 0.0006], [0.08, 0.92]]);
    m
}

/// Draws from `m`, then replaces each row's log-scale standard scores with
/// multivariate Student-t scores (`nu` degrees of freedom, unit variance).
/// Correlation and per-state location and scale are kept; tails are
/// heavier than the log-normal model assumes. Atom values stay at the atom
/// and continuous visibility stays below it.
pub fn heavy_tailed_sample(m: &FhmmModel, len: usize, seed: u64, nu: f64) -> SampledSequence {
    let mut out = sample_sequence(m, len, seed).unwrap();
    let mut r = ChaCha20Rng::seed_from_u64(seed ^ 0x7a11);
    let chi = ChiSquared::new(nu).unwrap();
    let inf = m.emissions.inflated.as_ref().map(|i| (i.dim, i.params.c));
    for (x, s) in out.obs.iter_mut().zip(&out.states) {
        let g = ((nu - 2.0) / chi.sample(&mut r)).sqrt();
        for (i, v) in x.iter_mut().enumerate() {
            let capped = inf.filter(|&(d, _)| d == i);
            if let Some((_, c)) = capped {
                if *v == c {
                    continue;
                }
            }
            let (mu, sd) = m.emissions.marginal(*s, i);
            let z = (v.ln() - mu) / sd;
            *v = (mu + sd * z * g).exp();
            if let Some((_, c)) = capped {
                *v = v.min(c * 0.999);
            }
        }
    }
    out
}
