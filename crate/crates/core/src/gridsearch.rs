//! Exhaustive search over the weight scale `Ω` and the global weight `v`.

use std::str::FromStr;

use rayon::prelude::*;

use crate::decode::{decode_weights, emission_scores, reclassify, viterbi_from_scores, DecodeConfig, ReclassifyContext};
use crate::error::{FhmmError, Result};
use crate::evaluation::{f1_scores, to_three_class, Class, ConfusionMatrix};
use crate::mi::StateMi;
use crate::model::FhmmModel;

/// Evenly spaced values `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(FhmmError::InvalidInput("grid axis needs at least one step".into()));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(FhmmError::InvalidInput(format!("grid range {lo}:{hi} must satisfy 0 < lo <= hi")));
        }
        if steps == 1 && lo != hi {
            return Err(FhmmError::InvalidInput("a single-step axis needs lo == hi".into()));
        }
        Ok(GridAxis { lo, hi, steps })
    }

    pub fn single(value: f64) -> Result<Self> {
        GridAxis::new(value, value, 1)
    }

    pub fn values(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        let n = (self.steps - 1) as f64;
        let span = self.hi - self.lo;
        // pin the last point so the endpoint is exact, clamp to keep rounding monotone
        (0..self.steps)
            .map(|i| if i + 1 == self.steps { self.hi } else { (self.lo + span * i as f64 / n).min(self.hi) })
            .collect()
    }
}

impl FromStr for GridAxis {
    type Err = FhmmError;

    /// `LO:HI:STEPS`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || FhmmError::InvalidInput(format!("grid range '{s}' is not LO:HI:STEPS"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let steps: usize = parts[2].trim().parse().map_err(|_| bad())?;
        GridAxis::new(lo, hi, steps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub omega: f64,
    pub v: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub dust_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    /// Omega-major order.
    pub points: Vec<GridPoint>,
    /// Index of the point with the highest macro-F1 (micro-F1 breaks ties,
    /// then the earlier point).
    pub best: usize,
}

impl GridResult {
    pub fn best_point(&self) -> &GridPoint {
        &self.points[self.best]
    }
}

/// Scores one decoding configuration against reference classes.
pub fn evaluate_config(
    model: &FhmmModel,
    obs: &[Vec<f64>],
    truth: &[Class],
    cfg: &DecodeConfig,
    profile: Option<&StateMi>,
    ctx: Option<&ReclassifyContext>,
) -> Result<GridPoint> {
    let weights = decode_weights(cfg, profile)?;
    let scores = emission_scores(model, obs, cfg, weights.as_ref())?;
    let path = viterbi_from_scores(model, &scores)?;
    let path = reclassify(&path, obs, cfg.reclassify, ctx)?.path;
    let pred = to_three_class(&path.states)?;
    let f = f1_scores(&ConfusionMatrix::from_labels(truth, &pred)?)?;
    Ok(GridPoint {
        omega: cfg.omega,
        v: cfg.v,
        micro_f1: f.micro,
        macro_f1: f.macro_,
        dust_f1: f.class(Class::Dust),
    })
}

#[allow(clippy::too_many_arguments)]
/// Evaluates every `(Ω, v)` pair; points are independent and run in
/// parallel, results come back in grid order.
pub fn grid_search(
    model: &FhmmModel,
    obs: &[Vec<f64>],
    truth: &[Class],
    base: &DecodeConfig,
    profile: Option<&StateMi>,
    ctx: Option<&ReclassifyContext>,
    omegas: &GridAxis,
    vs: &GridAxis,
) -> Result<GridResult> {
    model.validate()?;
    if obs.len() != truth.len() {
        return Err(FhmmError::InvalidInput(format!(
            "{} observations but {} reference labels",
            obs.len(),
            truth.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = omegas
        .values()
        .into_iter()
        .flat_map(|o| vs.values().into_iter().map(move |v| (o, v)))
        .collect();
    let points: Vec<GridPoint> = pairs
        .par_iter()
        .map(|&(omega, v)| {
            let cfg = DecodeConfig { omega, v, ..*base };
            evaluate_config(model, obs, truth, &cfg, profile, ctx)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        let b = &points[best];
        if p.macro_f1 > b.macro_f1 || (p.macro_f1 == b.macro_f1 && p.micro_f1 > b.micro_f1) {
            best = i;
        }
    }
    Ok(GridResult { points, best })
}
