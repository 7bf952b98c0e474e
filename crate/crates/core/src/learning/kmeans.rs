use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{chains_from_path, fit_marginals, one_hot, EmissionFitSpec, InflatedFit, InflationSpec};
use crate::emissions::check_observations;
use crate::error::{FhmmError, Result};
use crate::model::{EmissionFamily, FhmmModel, HiddenState, NUM_STATES, PD_EPS};

/// Historical per-class mean log-observation vectors, rows in joint-state
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriors {
    pub prior_means: Vec<Vec<f64>>,
}

impl ClassPriors {
    pub fn validate(&self, e: usize) -> Result<()> {
        if self.prior_means.len() != NUM_STATES || self.prior_means.iter().any(|r| r.len() != e) {
            return Err(FhmmError::InvalidInput(format!("class priors must be {NUM_STATES}x{e}")));
        }
        if self.prior_means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FhmmError::InvalidInput("class priors must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig {
    pub family: EmissionFamily,
    pub inflation: Option<InflationSpec>,
    pub seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
    pub feature_names: Vec<String>,
}

impl KmeansConfig {
    pub fn new(family: EmissionFamily, feature_names: Vec<String>, seed: u64) -> Self {
        KmeansConfig {
            family,
            inflation: None,
            seed,
            restarts: 10,
            max_iters: 100,
            feature_names,
        }
    }
}

/// Initial parameters from K-means on log-observations, with clusters
/// mapped to hidden states through the class priors.
pub fn kmeans_init(obs: &[Vec<f64>], priors: &ClassPriors, cfg: &KmeansConfig) -> Result<FhmmModel> {
    if obs.is_empty() {
        return Err(FhmmError::InvalidInput("no observations".into()));
    }
    let e = obs[0].len();
    check_observations(obs, e)?;
    priors.validate(e)?;
    let at_atom = |x: &Vec<f64>| cfg.inflation.is_some_and(|inf| x[inf.dim] == inf.c);
    let rows: Vec<usize> = (0..obs.len()).filter(|&t| !at_atom(&obs[t])).collect();
    if rows.len() < NUM_STATES {
        return Err(FhmmError::Estimation(format!(
            "{} rows off the inflation point, need at least {NUM_STATES}",
            rows.len()
        )));
    }
    let data: Vec<Vec<f64>> = rows.iter().map(|&t| obs[t].iter().map(|v| v.ln()).collect()).collect();

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut result = None;
    for _ in 0..cfg.restarts.max(1) {
        if let Some(r) = lloyd(&data, NUM_STATES, cfg.max_iters, &mut rng) {
            result = Some(r);
            break;
        }
    }
    let (assign, centers) = result.ok_or_else(|| {
        FhmmError::Estimation(format!("K-means left a cluster empty after {} restarts", cfg.restarts))
    })?;
    let mapping = match_clusters(&centers, &priors.prior_means);

    let mut labels = vec![HiddenState::CLEAR; obs.len()];
    for (k, &t) in rows.iter().enumerate() {
        labels[t] = HiddenState::from_index(mapping[assign[k]]).expect("state index in range");
    }

    let resp = one_hot(&labels);
    let spec = EmissionFitSpec {
        family: cfg.family,
        inflation: cfg.inflation,
        inflated_fit: InflatedFit::ClosedForm,
        previous: None,
        min_mass: [0.0; NUM_STATES],
        eps_pd: PD_EPS,
    };
    let mut emissions = fit_marginals(obs, &resp, &spec);
    if cfg.family == EmissionFamily::JointGaussian {
        emissions.covariances = Some(
            emissions
                .sigma
                .iter()
                .map(|row| DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(e, row.iter().map(|s| s * s))))
                .collect(),
        );
    }
    let model = FhmmModel {
        chains: chains_from_path(&labels),
        emissions,
        feature_names: cfg.feature_names.clone(),
    };
    model.validate()?;
    Ok(model)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd iterations from a k-means++ seeding. `None` when a cluster ends up
/// empty.
fn lloyd(data: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut ChaCha20Rng) -> Option<(Vec<usize>, Vec<Vec<f64>>)> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, centers.last().unwrap()));
        }
    }

    let dim = data[0].len();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in data.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    Some((assign, centers))
}

/// Maps each cluster to a hidden state: all (cluster, state) pairs are
/// taken in increasing distance order and accepted while both sides are
/// still free. Returns the state index for every cluster.
pub fn match_clusters(centers: &[Vec<f64>], priors: &[Vec<f64>]) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(centers.len() * priors.len());
    for (c, ctr) in centers.iter().enumerate() {
        for (s, p) in priors.iter().enumerate() {
            pairs.push((sq_dist(ctr, p), c, s));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
    let mut out = vec![usize::MAX; centers.len()];
    let mut taken = vec![false; priors.len()];
    for (_, c, s) in pairs {
        if out[c] == usize::MAX && !taken[s] {
            out[c] = s;
            taken[s] = true;
        }
    }
    out
}
