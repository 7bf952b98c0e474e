//! MAP decoding, post-hoc resolution of the joint haze-and-dust state, and
//! state forecasting.

use std::str::FromStr;

use crate::emissions::{log_emission_matrix, log_softmax, weighted_log_emission_matrix, EmissionMode, WeightMatrix};
use crate::error::{FhmmError, Result};
use crate::inference::{propagate, Tensor};
use crate::mi::{weights_from_profile, StateMi, WeightMode};
use crate::model::{EmissionFamily, FhmmModel, HiddenState, K, NUM_STATES};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    None,
    RawMi,
    NormalizedMi,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::None => "none",
            Weighting::RawMi => "raw_mi",
            Weighting::NormalizedMi => "normalized_mi",
        }
    }
}

impl FromStr for Weighting {
    type Err = FhmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Weighting::None),
            "raw_mi" | "raw" => Ok(Weighting::RawMi),
            "normalized_mi" | "normalized" => Ok(Weighting::NormalizedMi),
            _ => Err(FhmmError::InvalidInput(format!("unknown weighting '{s}'"))),
        }
    }
}

/// How a decoded `(1,1)` step is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reclassify {
    MergeToClear,
    HumidityWindRule,
    None,
}

impl Reclassify {
    pub fn as_str(self) -> &'static str {
        match self {
            Reclassify::MergeToClear => "merge_to_clear",
            Reclassify::HumidityWindRule => "humidity_wind_rule",
            Reclassify::None => "none",
        }
    }
}

impl FromStr for Reclassify {
    type Err = FhmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge_to_clear" => Ok(Reclassify::MergeToClear),
            "humidity_wind_rule" => Ok(Reclassify::HumidityWindRule),
            "none" => Ok(Reclassify::None),
            _ => Err(FhmmError::InvalidInput(format!("unknown reclassification rule '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub weighting: Weighting,
    /// Column sum of the normalized weight matrix.
    pub omega: f64,
    /// Global weight; emissions enter as `log_softmax(score / v)` when
    /// `v ≠ 1`.
    pub v: f64,
    pub reclassify: Reclassify,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            weighting: Weighting::None,
            omega: 1.0,
            v: 1.0,
            reclassify: Reclassify::None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(FhmmError::InvalidInput(format!("v must be positive, got {}", self.v)));
        }
        if !(self.omega > 0.0 && self.omega.is_finite()) {
            return Err(FhmmError::InvalidInput(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub states: Vec<HiddenState>,
    /// Terminal log-Viterbi value.
    pub score: f64,
}

/// Weight matrix for `cfg`, or `None` when decoding is unweighted.
pub fn decode_weights(cfg: &DecodeConfig, profile: Option<&StateMi>) -> Result<Option<WeightMatrix>> {
    let mode = match cfg.weighting {
        Weighting::None => return Ok(None),
        Weighting::RawMi => WeightMode::Raw,
        Weighting::NormalizedMi => WeightMode::Normalized,
    };
    let profile = profile.ok_or_else(|| {
        FhmmError::InvalidInput(format!("{} decoding needs an MI profile", cfg.weighting.as_str()))
    })?;
    weights_from_profile(profile, cfg.omega, mode).map(Some)
}

/// Per-step state scores that stand in for the log-emission in the
/// Viterbi recursion.
pub fn emission_scores(
    model: &FhmmModel,
    obs: &[Vec<f64>],
    cfg: &DecodeConfig,
    weights: Option<&WeightMatrix>,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let base = match (cfg.weighting, weights) {
        (Weighting::None, _) => {
            // the joint Gaussian family decodes on its marginals alone
            let mode = match model.emissions.family {
                EmissionFamily::JointGaussian => EmissionMode::MarginalProduct,
                EmissionFamily::LogNormalCopula => EmissionMode::Native,
            };
            log_emission_matrix(&model.emissions, obs, mode)?
        }
        (_, Some(w)) => weighted_log_emission_matrix(&model.emissions, obs, w)?,
        (_, None) => {
            return Err(FhmmError::InvalidInput(format!(
                "{} decoding needs a weight matrix",
                cfg.weighting.as_str()
            )))
        }
    };
    if cfg.v == 1.0 {
        return Ok(base);
    }
    Ok(base.into_iter().map(|row| log_softmax(row.map(|s| s / cfg.v))).collect())
}

/// Decodes `obs` under `cfg`.
pub fn viterbi(model: &FhmmModel, obs: &[Vec<f64>], cfg: &DecodeConfig, profile: Option<&StateMi>) -> Result<StatePath> {
    model.validate()?;
    let weights = decode_weights(cfg, profile)?;
    let scores = emission_scores(model, obs, cfg, weights.as_ref())?;
    viterbi_from_scores(model, &scores)
}

fn ln_table(a: &[[f64; K]; K]) -> [[f64; K]; K] {
    a.map(|row| row.map(f64::ln))
}

/// Max-product recursion over precomputed state scores. The joint
/// transition is applied as a maximization over the previous dust state
/// followed by one over the previous haze state; together with strict
/// comparisons this resolves ties toward the lower joint index.
pub fn viterbi_from_scores(model: &FhmmModel, scores: &[Tensor]) -> Result<StatePath> {
    if scores.is_empty() {
        return Err(FhmmError::InvalidInput("empty observation sequence".into()));
    }
    let la1 = ln_table(&model.chains[0].a);
    let la2 = ln_table(&model.chains[1].a);
    let init = model.joint_initial();
    let n = scores.len();
    let mut delta = [0.0; NUM_STATES];
    for s in 0..NUM_STATES {
        delta[s] = init[s].ln() + scores[0][s];
    }
    check_step(&delta, 0)?;
    // back[t][j] = previous joint index
    let mut back: Vec<[u8; NUM_STATES]> = Vec::with_capacity(n - 1);
    for (t, sc) in scores.iter().enumerate().skip(1) {
        // m[i1][j2] = max over i2 of δ(i1,i2) + ln A²[i2][j2]
        let mut m = [[f64::NEG_INFINITY; K]; K];
        let mut arg2 = [[0u8; K]; K];
        for i1 in 0..K {
            for j2 in 0..K {
                for i2 in 0..K {
                    let v = delta[K * i1 + i2] + la2[i2][j2];
                    if v > m[i1][j2] {
                        m[i1][j2] = v;
                        arg2[i1][j2] = i2 as u8;
                    }
                }
            }
        }
        let mut next = [f64::NEG_INFINITY; NUM_STATES];
        let mut bp = [0u8; NUM_STATES];
        for j1 in 0..K {
            for j2 in 0..K {
                let j = K * j1 + j2;
                let mut best = f64::NEG_INFINITY;
                let mut from = 0usize;
                for i1 in 0..K {
                    let v = m[i1][j2] + la1[i1][j1];
                    if v > best {
                        best = v;
                        from = K * i1 + arg2[i1][j2] as usize;
                    }
                }
                next[j] = best + sc[j];
                bp[j] = from as u8;
            }
        }
        check_step(&next, t)?;
        delta = next;
        back.push(bp);
    }
    let mut last = 0;
    for s in 1..NUM_STATES {
        if delta[s] > delta[last] {
            last = s;
        }
    }
    let score = delta[last];
    let mut idx = vec![0usize; n];
    idx[n - 1] = last;
    for t in (1..n).rev() {
        idx[t - 1] = back[t - 1][idx[t]] as usize;
    }
    Ok(StatePath {
        states: idx.into_iter().map(|i| HiddenState::from_index(i).unwrap()).collect(),
        score,
    })
}

fn check_step(delta: &Tensor, t: usize) -> Result<()> {
    if delta.iter().any(|v| v.is_nan()) || !delta.iter().any(|v| v.is_finite()) {
        return Err(FhmmError::Numerical(format!("Viterbi score is not finite at t={t}")));
    }
    Ok(())
}

/// Feature positions and fallback thresholds for the humidity/wind rule.
#[derive(Debug, Clone, PartialEq)]
pub struct ReclassifyContext {
    pub wind: usize,
    pub humidity: usize,
    /// `(wind, humidity)` medians used when nothing was decoded as Dust.
    /// `None` takes them from the whole sequence.
    pub fallback_medians: Option<(f64, f64)>,
}

impl ReclassifyContext {
    pub fn from_model(model: &FhmmModel) -> Result<Self> {
        let find = |name: &str| {
            model
                .feature_index(name)
                .ok_or_else(|| FhmmError::InvalidInput(format!("model has no '{name}' feature")))
        };
        Ok(ReclassifyContext {
            wind: find("wind")?,
            humidity: find("humidity")?,
            fallback_medians: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reclassified {
    pub path: StatePath,
    /// The humidity/wind thresholds came from the fallback medians.
    pub used_fallback: bool,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Resolves every `(1,1)` step; other steps are untouched.
pub fn reclassify(path: &StatePath, obs: &[Vec<f64>], rule: Reclassify, ctx: Option<&ReclassifyContext>) -> Result<Reclassified> {
    let mut out = path.clone();
    let mut used_fallback = false;
    match rule {
        Reclassify::None => {}
        Reclassify::MergeToClear => {
            for s in &mut out.states {
                if *s == HiddenState::BOTH {
                    *s = HiddenState::CLEAR;
                }
            }
        }
        Reclassify::HumidityWindRule => {
            if !out.states.contains(&HiddenState::BOTH) {
                return Ok(Reclassified { path: out, used_fallback });
            }
            let ctx = ctx.ok_or_else(|| FhmmError::InvalidInput("humidity/wind rule needs feature positions".into()))?;
            if obs.len() != path.states.len() {
                return Err(FhmmError::InvalidInput(format!(
                    "path has {} steps but {} observations",
                    path.states.len(),
                    obs.len()
                )));
            }
            let dust: Vec<&Vec<f64>> = path
                .states
                .iter()
                .zip(obs)
                .filter(|(s, _)| **s == HiddenState::DUST)
                .map(|(_, x)| x)
                .collect();
            let (wind_med, hum_med) = if dust.is_empty() {
                used_fallback = true;
                ctx.fallback_medians.unwrap_or_else(|| {
                    (
                        median(obs.iter().map(|x| x[ctx.wind]).collect()),
                        median(obs.iter().map(|x| x[ctx.humidity]).collect()),
                    )
                })
            } else {
                (
                    median(dust.iter().map(|x| x[ctx.wind]).collect()),
                    median(dust.iter().map(|x| x[ctx.humidity]).collect()),
                )
            };
            for (s, x) in out.states.iter_mut().zip(obs) {
                if *s == HiddenState::BOTH {
                    *s = if x[ctx.wind] >= wind_med && x[ctx.humidity] <= hum_med {
                        HiddenState::DUST
                    } else {
                        HiddenState::HAZE
                    };
                }
            }
        }
    }
    Ok(Reclassified { path: out, used_fallback })
}

fn check_distribution(p: &Tensor) -> Result<()> {
    let s: f64 = p.iter().sum();
    if p.iter().any(|&v| !(v >= 0.0)) || !((s - 1.0).abs() <= 1e-9) {
        return Err(FhmmError::InvalidInput(format!("state distribution {p:?} is not normalized")));
    }
    Ok(())
}

/// State distribution `h` steps after the filtered distribution `alpha_t`.
pub fn forecast(model: &FhmmModel, alpha_t: &Tensor, h: usize) -> Result<Tensor> {
    Ok(*forecast_horizons(model, alpha_t, h)?.last().unwrap())
}

/// Distributions for every horizon `1..=h`.
pub fn forecast_horizons(model: &FhmmModel, alpha_t: &Tensor, h: usize) -> Result<Vec<Tensor>> {
    if h == 0 {
        return Err(FhmmError::InvalidInput("forecast horizon must be at least 1".into()));
    }
    check_distribution(alpha_t)?;
    let mut out = Vec::with_capacity(h);
    let mut p = *alpha_t;
    for _ in 0..h {
        p = propagate(model, &p);
        out.push(p);
    }
    Ok(out)
}
