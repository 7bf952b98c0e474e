//! Three-class scoring: confusion matrices, F1, one-vs-rest ROC curves and
//! AIC comparison of candidate marginal distributions.

use std::fmt;

use argmin::core::{CostFunction, Error as ArgminError, Executor, State};
use argmin::solver::brent::BrentRoot;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{FhmmError, Result};
use crate::inference::Tensor;
use crate::model::HiddenState;
use crate::special::LN_2PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Class {
    Clear,
    Haze,
    Dust,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Clear, Class::Haze, Class::Dust];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Clear => "Clear",
            Class::Haze => "Haze",
            Class::Dust => "Dust",
        }
    }

    /// Class of a reference label. A joint haze-and-dust label counts as
    /// Dust, the rarer event.
    pub fn from_truth(state: HiddenState) -> Class {
        match state.bits() {
            (0, 0) => Class::Clear,
            (1, 0) => Class::Haze,
            _ => Class::Dust,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps a reclassified path onto the three classes.
pub fn to_three_class(states: &[HiddenState]) -> Result<Vec<Class>> {
    states
        .iter()
        .enumerate()
        .map(|(t, s)| match s.bits() {
            (0, 0) => Ok(Class::Clear),
            (1, 0) => Ok(Class::Haze),
            (0, 1) => Ok(Class::Dust),
            _ => Err(FhmmError::InvalidInput(format!(
                "state (1,1) at t={t}; reclassify the path before scoring"
            ))),
        })
        .collect()
}

/// Rows are truth, columns prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[Class], pred: &[Class]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(FhmmError::InvalidInput(format!(
                "{} reference labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut counts = [[0u64; 3]; 3];
        for (t, p) in truth.iter().zip(pred) {
            counts[t.index()][p.index()] += 1;
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..3).filter(|&r| r != c).map(|r| self.counts[r][c]).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..3).filter(|&p| p != c).map(|p| self.counts[c][p]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct F1Scores {
    pub per_class: [f64; 3],
    pub micro: f64,
    pub macro_: f64,
}

impl F1Scores {
    pub fn class(&self, c: Class) -> f64 {
        self.per_class[c.index()]
    }
}

/// Per-class, micro and macro F1. A class with no true or predicted members
/// scores zero and still counts toward the macro average.
pub fn f1_scores(cm: &ConfusionMatrix) -> Result<F1Scores> {
    if cm.total() == 0 {
        return Err(FhmmError::InvalidInput("empty confusion matrix".into()));
    }
    let f1 = |tp: u64, fp: u64, fnn: u64| {
        let den = 2 * tp + fp + fnn;
        if den == 0 {
            0.0
        } else {
            (2 * tp) as f64 / den as f64
        }
    };
    let mut per_class = [0.0; 3];
    let (mut tp, mut fp, mut fnn) = (0, 0, 0);
    for c in 0..3 {
        per_class[c] = f1(cm.tp(c), cm.fp(c), cm.fn_(c));
        tp += cm.tp(c);
        fp += cm.fp(c);
        fnn += cm.fn_(c);
    }
    Ok(F1Scores {
        per_class,
        micro: f1(tp, fp, fnn),
        macro_: per_class.iter().sum::<f64>() / 3.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from the strictest threshold down, starting at (0,0)
    /// and ending at (1,1).
    pub points: Vec<(f64, f64)>,
    /// `None` when the class has no positive or no negative examples.
    pub auc: Option<f64>,
}

/// Threshold sweep for binary labels. Tied scores move in one block, which
/// is the trapezoid rule over the tie.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if scores.len() != positive.len() {
        return Err(FhmmError::InvalidInput("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FhmmError::InvalidInput("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(RocCurve {
            points: Vec::new(),
            auc: None,
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(RocCurve {
        points,
        auc: Some(area / (n_pos as f64 * n_neg as f64)),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocReport {
    pub per_class: [RocCurve; 3],
    /// All (score, label) pairs pooled over classes.
    pub micro: RocCurve,
    /// Mean of the defined per-class AUCs.
    pub macro_auc: Option<f64>,
}

/// One-vs-rest ROC analysis of a `T×3` posterior score matrix.
pub fn roc_auc(scores: &[[f64; 3]], truth: &[Class]) -> Result<RocReport> {
    if scores.len() != truth.len() {
        return Err(FhmmError::InvalidInput(format!(
            "{} score rows but {} labels",
            scores.len(),
            truth.len()
        )));
    }
    for (t, row) in scores.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if !((s - 1.0).abs() <= 1e-6) {
            return Err(FhmmError::InvalidInput(format!("score row {t} sums to {s}, expected 1")));
        }
    }
    let curve = |c: Class| {
        let s: Vec<f64> = scores.iter().map(|r| r[c.index()]).collect();
        let p: Vec<bool> = truth.iter().map(|&x| x == c).collect();
        roc_curve(&s, &p)
    };
    let per_class = [curve(Class::Clear)?, curve(Class::Haze)?, curve(Class::Dust)?];
    let mut pooled_s = Vec::with_capacity(3 * scores.len());
    let mut pooled_p = Vec::with_capacity(3 * scores.len());
    for c in Class::ALL {
        pooled_s.extend(scores.iter().map(|r| r[c.index()]));
        pooled_p.extend(truth.iter().map(|&x| x == c));
    }
    let micro = roc_curve(&pooled_s, &pooled_p)?;
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(RocReport {
        per_class,
        micro,
        macro_auc,
    })
}

/// Three-class scores from joint-state posteriors. The haze-and-dust
/// column is dropped and the rest renormalized, matching what the
/// reclassified path can express.
pub fn class_scores(gamma: &[Tensor]) -> Vec<[f64; 3]> {
    gamma
        .iter()
        .map(|g| {
            let raw = [
                g[HiddenState::CLEAR.index()],
                g[HiddenState::HAZE.index()],
                g[HiddenState::DUST.index()],
            ];
            let s: f64 = raw.iter().sum();
            if s > 0.0 {
                raw.map(|v| v / s)
            } else {
                [1.0 / 3.0; 3]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Distribution {
    LogNormal,
    Gamma,
    Weibull,
    Normal,
}

impl Distribution {
    pub const ALL: [Distribution; 4] = [
        Distribution::LogNormal,
        Distribution::Gamma,
        Distribution::Weibull,
        Distribution::Normal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distribution::LogNormal => "lognormal",
            Distribution::Gamma => "gamma",
            Distribution::Weibull => "weibull",
            Distribution::Normal => "normal",
        }
    }

    fn positive_support(self) -> bool {
        self != Distribution::Normal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicEntry {
    pub family: Distribution,
    /// Maximum-likelihood parameters in the family's usual order.
    pub params: Vec<f64>,
    pub log_lik: f64,
    pub aic: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AicReport {
    /// Fitted families, best first.
    pub ranked: Vec<AicEntry>,
    /// Families that could not be fitted (non-positive data for a
    /// positive-support family, or a failed search).
    pub skipped: Vec<(Distribution, String)>,
}

/// Fits each candidate by maximum likelihood and ranks them by AIC.
pub fn delta_aic(samples: &[f64], candidates: &[Distribution]) -> Result<AicReport> {
    if samples.len() < 30 {
        return Err(FhmmError::InvalidInput(format!("need at least 30 samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(FhmmError::InvalidInput("non-finite sample".into()));
    }
    let positive = samples.iter().all(|&v| v > 0.0);
    let mut ranked = Vec::new();
    let mut skipped = Vec::new();
    for &family in candidates {
        if family.positive_support() && !positive {
            skipped.push((family, "sample contains non-positive values".to_string()));
            continue;
        }
        match fit_family(samples, family) {
            Ok((params, log_lik)) => ranked.push(AicEntry {
                family,
                aic: 2.0 * params.len() as f64 - 2.0 * log_lik,
                params,
                log_lik,
                delta: 0.0,
            }),
            Err(e) => skipped.push((family, e.to_string())),
        }
    }
    ranked.sort_by(|a, b| a.aic.total_cmp(&b.aic));
    if let Some(best) = ranked.first().map(|e| e.aic) {
        for e in &mut ranked {
            e.delta = e.aic - best;
        }
    }
    Ok(AicReport { ranked, skipped })
}

fn fit_family(x: &[f64], family: Distribution) -> Result<(Vec<f64>, f64)> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    match family {
        Distribution::Normal => {
            let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            if !(sd > 0.0) {
                return Err(FhmmError::Estimation("zero variance".into()));
            }
            Ok((vec![mean, sd], -0.5 * n * (LN_2PI + 2.0 * sd.ln() + 1.0)))
        }
        Distribution::LogNormal => {
            let ly: Vec<f64> = x.iter().map(|v| v.ln()).collect();
            let (params, ll) = fit_family(&ly, Distribution::Normal)?;
            Ok((params, ll - ly.iter().sum::<f64>()))
        }
        Distribution::Gamma => {
            let mean_ln = x.iter().map(|v| v.ln()).sum::<f64>() / n;
            let s = mean.ln() - mean_ln;
            if !(s > 0.0) {
                return Err(FhmmError::Estimation("gamma shape undefined for constant data".into()));
            }
            let ln_k = root(GammaShape { s }, -12.0, 12.0)?;
            let k = ln_k.exp();
            let theta = mean / k;
            let ll = n * ((k - 1.0) * mean_ln - k - k * theta.ln() - ln_gamma(k));
            Ok((vec![k, theta], ll))
        }
        Distribution::Weibull => {
            let scale = x.iter().copied().fold(0.0, f64::max);
            let u: Vec<f64> = x.iter().map(|v| v / scale).collect();
            let mean_ln_u = u.iter().map(|v| v.ln()).sum::<f64>() / n;
            let ln_k = root(
                WeibullShape {
                    u: &u,
                    mean_ln: mean_ln_u,
                },
                -7.0,
                7.0,
            )?;
            let k = ln_k.exp();
            let m = u.iter().map(|v| v.powf(k)).sum::<f64>() / n;
            let lambda = scale * m.powf(1.0 / k);
            let mean_ln = mean_ln_u + scale.ln();
            let ll = n * (k.ln() - k * lambda.ln() + (k - 1.0) * mean_ln - 1.0);
            Ok((vec![k, lambda], ll))
        }
    }
}

fn root<C: CostFunction<Param = f64, Output = f64>>(f: C, lo: f64, hi: f64) -> Result<f64> {
    let res = Executor::new(f, BrentRoot::new(lo, hi, 1e-13))
        .configure(|s| s.max_iters(200))
        .run()
        .map_err(|e| FhmmError::Estimation(format!("shape search failed: {e}")))?;
    res.state()
        .get_best_param()
        .copied()
        .ok_or_else(|| FhmmError::Estimation("shape search returned nothing".into()))
}

/// `ln k − ψ(k) − s` over `ln k`, decreasing.
struct GammaShape {
    s: f64,
}

impl CostFunction for GammaShape {
    type Param = f64;
    type Output = f64;

    fn cost(&self, ln_k: &f64) -> std::result::Result<f64, ArgminError> {
        let k = ln_k.exp();
        Ok(ln_k - digamma(k) - self.s)
    }
}

/// Weibull shape score on data scaled into (0, 1], increasing in `k`.
struct WeibullShape<'a> {
    u: &'a [f64],
    mean_ln: f64,
}

impl CostFunction for WeibullShape<'_> {
    type Param = f64;
    type Output = f64;

    fn cost(&self, ln_k: &f64) -> std::result::Result<f64, ArgminError> {
        let k = ln_k.exp();
        let (mut num, mut den) = (0.0, 0.0);
        for &v in self.u {
            let p = v.powf(k);
            num += p * v.ln();
            den += p;
        }
        Ok(num / den - 1.0 / k - self.mean_ln)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution as _, Gamma, LogNormal, Weibull};

    #[test]
    fn hand_expanded_matrix() {
        let cm = ConfusionMatrix {
            counts: [[90, 5, 5], [10, 80, 10], [2, 3, 15]],
        };
        let f = f1_scores(&cm).unwrap();
        assert_eq!(f.per_class[0], 180.0 / 202.0);
        assert_eq!(f.per_class[1], 160.0 / 188.0);
        assert_eq!(f.per_class[2], 30.0 / 50.0);
        assert_eq!(f.micro, 370.0 / 440.0);
        assert!((f.macro_ - (180.0 / 202.0 + 160.0 / 188.0 + 0.6) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_macro_is_a_third() {
        let cm = ConfusionMatrix {
            counts: [[50, 0, 0], [0, 0, 0], [0, 0, 0]],
        };
        let f = f1_scores(&cm).unwrap();
        assert_eq!(f.micro, 1.0);
        assert!((f.macro_ - 1.0 / 3.0).abs() < 1e-15);
        assert!(f1_scores(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn residual_both_state_rejected() {
        let err = to_three_class(&[HiddenState::CLEAR, HiddenState::BOTH]).unwrap_err();
        assert!(err.to_string().contains("t=1"));
        assert_eq!(
            to_three_class(&[HiddenState::HAZE, HiddenState::DUST]).unwrap(),
            vec![Class::Haze, Class::Dust]
        );
    }

    #[test]
    fn roc_separated_and_reversed() {
        let s = [0.9, 0.8, 0.7, 0.3, 0.2];
        let p = [true, true, false, false, false];
        assert_eq!(roc_curve(&s, &p).unwrap().auc, Some(1.0));
        let rev: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_eq!(roc_curve(&rev, &p).unwrap().auc, Some(0.0));
        let tied = roc_curve(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(tied.auc, Some(0.5));
        assert_eq!(tied.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(roc_curve(&s, &[false; 5]).unwrap().auc, None);
    }

    #[test]
    fn roc_report_excludes_absent_class() {
        let scores = vec![[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]];
        let truth = vec![Class::Clear, Class::Haze, Class::Clear];
        let r = roc_auc(&scores, &truth).unwrap();
        assert_eq!(r.per_class[2].auc, None);
        assert_eq!(r.macro_auc, Some(1.0));
        assert!(roc_auc(&[[0.5, 0.2, 0.2]], &[Class::Clear]).is_err());
    }

    #[test]
    fn lognormal_data_prefers_lognormal() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let d = LogNormal::new(1.0, 0.6).unwrap();
        let x: Vec<f64> = (0..3000).map(|_| d.sample(&mut rng)).collect();
        let r = delta_aic(&x, &Distribution::ALL).unwrap();
        assert_eq!(r.ranked[0].family, Distribution::LogNormal);
        assert_eq!(r.ranked[0].delta, 0.0);
        assert!(r.ranked.iter().all(|e| e.delta >= 0.0));
    }

    #[test]
    fn gamma_and_weibull_mle_recover_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let g = Gamma::new(2.5, 1.5).unwrap();
        let x: Vec<f64> = (0..20000).map(|_| g.sample(&mut rng)).collect();
        let (p, _) = fit_family(&x, Distribution::Gamma).unwrap();
        assert!((p[0] - 2.5).abs() < 0.1 && (p[1] - 1.5).abs() < 0.07, "{p:?}");
        let w = Weibull::new(3.0, 1.7).unwrap();
        let x: Vec<f64> = (0..20000).map(|_| w.sample(&mut rng)).collect();
        let (p, _) = fit_family(&x, Distribution::Weibull).unwrap();
        assert!((p[0] - 1.7).abs() < 0.05 && (p[1] - 3.0).abs() < 0.05, "{p:?}");
    }

    #[test]
    fn nonpositive_samples_skip_positive_families() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 - 5.0).collect();
        let r = delta_aic(&x, &Distribution::ALL).unwrap();
        assert_eq!(r.ranked.len(), 1);
        assert_eq!(r.skipped.len(), 3);
        assert!(delta_aic(&x[..10], &Distribution::ALL).is_err());
    }
}
