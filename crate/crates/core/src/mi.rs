//! Mutual information between single features and hidden-state labels.
//!
//! The continuous-discrete kNN estimator works on one feature at a time
//! with absolute difference as the distance. For each point, `ρ` is the
//! distance to its k-th nearest neighbour within its own class, and `M` is
//! the number of points of any class at least as close under the same
//! (distance, index) ordering. Equal distances are ordered by index, so a
//! single class gives `M = k` exactly.

use rayon::prelude::*;
use statrs::function::gamma::digamma;

use crate::emissions::WeightMatrix;
use crate::error::{FhmmError, Result};
use crate::model::{HiddenState, NUM_STATES};

/// Default neighbour count.
pub const DEFAULT_K: usize = 3;
/// States with fewer members than `RARE_FACTOR·(k+1)` fall back to uniform
/// weights.
pub const RARE_FACTOR: usize = 5;
/// A state row whose largest MI is below this fraction of the indicator's
/// entropy (the most any feature could carry) is treated as noise.
pub const MI_SIGNAL_FRACTION: f64 = 0.1;
/// Lower bound on individual MI entries before they become weights.
pub const MI_WEIGHT_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnnMi {
    /// Estimate clipped at zero.
    pub value: f64,
    /// Estimate before clipping.
    pub raw: f64,
    /// Every `x` identical; the estimate is zero by convention.
    pub degenerate: bool,
}

/// kNN estimate of `I(x; z)` in nats.
pub fn knn_mi(x: &[f64], z: &[usize], k: usize) -> Result<KnnMi> {
    let n_all = x.len();
    if z.len() != n_all {
        return Err(FhmmError::InvalidInput(format!("{} values but {} labels", n_all, z.len())));
    }
    if k == 0 {
        return Err(FhmmError::InvalidInput("k must be at least 1".into()));
    }
    if n_all <= k + 1 {
        return Err(FhmmError::InvalidInput(format!("need more than k+1={} points, got {n_all}", k + 1)));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FhmmError::InvalidInput("non-finite value in MI input".into()));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Ok(KnnMi {
            value: 0.0,
            raw: 0.0,
            degenerate: true,
        });
    }
    let n_classes = z.iter().copied().max().unwrap_or(0) + 1;
    let mut class_n = vec![0usize; n_classes];
    for &c in z {
        class_n[c] += 1;
    }
    if class_n.iter().all(|&c| c <= k) {
        return Err(FhmmError::InvalidInput(format!("no class has more than k={k} members")));
    }

    // singleton classes have no within-class neighbour and are left out
    let keep: Vec<usize> = (0..n_all).filter(|&t| class_n[z[t]] >= 2).collect();
    let n = keep.len();
    let mut order = keep.clone();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let xs: Vec<f64> = order.iter().map(|&t| x[t]).collect();
    let ids: Vec<usize> = order.clone();

    let mut class_x: Vec<Vec<f64>> = vec![Vec::new(); n_classes];
    let mut class_id: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    let mut pos_all = vec![0usize; n_all];
    let mut pos_class = vec![0usize; n_all];
    for (p, &t) in order.iter().enumerate() {
        pos_all[t] = p;
        pos_class[t] = class_x[z[t]].len();
        class_x[z[t]].push(x[t]);
        class_id[z[t]].push(t);
    }

    let mut k_hist: Vec<usize> = vec![0; k + 1];
    let mut m_hist: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &t in &keep {
        let c = z[t];
        let kt = k.min(class_n[c] - 1);
        k_hist[kt] += 1;
        let m = neighbour_count(x[t], t, kt, &class_x[c], &class_id[c], pos_class[t], &xs, &ids, pos_all[t]);
        *m_hist.entry(m.max(1)).or_insert(0) += 1;
    }

    let nf = n as f64;
    let class_term: f64 = class_n
        .iter()
        .filter(|&&c| c >= 2)
        .map(|&c| (c as f64 / nf) * digamma(c as f64))
        .sum();
    let k_term: f64 = k_hist
        .iter()
        .enumerate()
        .filter(|(_, &cnt)| cnt > 0)
        .map(|(kt, &cnt)| (cnt as f64 / nf) * digamma(kt as f64))
        .sum();
    let m_term: f64 = m_hist.iter().map(|(&m, &cnt)| (cnt as f64 / nf) * digamma(m as f64)).sum();
    let raw = (digamma(nf) - class_term) + (k_term - m_term);
    Ok(KnnMi {
        value: raw.max(0.0),
        raw,
        degenerate: false,
    })
}

/// Number of points (any class, excluding `t`) ordered at or before the
/// k-th same-class neighbour of `t` under (distance, index).
#[allow(clippy::too_many_arguments)]
fn neighbour_count(
    xt: f64,
    t: usize,
    k: usize,
    cx: &[f64],
    cid: &[usize],
    p: usize,
    xs: &[f64],
    ids: &[usize],
    pa: usize,
) -> usize {
    // k-th smallest same-class distance by merging both directions
    let (mut l, mut r) = (p, p + 1);
    let mut rho = 0.0;
    for _ in 0..k {
        let dl = if l > 0 { Some(xt - cx[l - 1]) } else { None };
        let dr = if r < cx.len() { Some(cx[r] - xt) } else { None };
        match (dl, dr) {
            (Some(a), Some(b)) if a <= b => {
                rho = a;
                l -= 1;
            }
            (Some(a), None) => {
                rho = a;
                l -= 1;
            }
            (_, Some(b)) => {
                rho = b;
                r += 1;
            }
            (None, None) => unreachable!("class has more than k members"),
        }
    }

    let (c_lt_lo, c_le_lo) = left_bounds(cx, p, xt, rho);
    let (c_lt_hi, c_le_hi) = right_bounds(cx, p, xt, rho);
    let closer_same = (p - c_lt_lo) + (c_lt_hi - p - 1);
    let rank = k - closer_same;
    let kth_id = if rho == 0.0 {
        // the equal-value run is sorted by index and t sits inside it
        let left = &cid[c_le_lo..c_lt_lo];
        let right = &cid[c_lt_hi..c_le_hi];
        if rank <= left.len() {
            left[rank - 1]
        } else {
            right[rank - 1 - left.len()]
        }
    } else {
        let mut tied: Vec<usize> = cid[c_le_lo..c_lt_lo].iter().chain(&cid[c_lt_hi..c_le_hi]).copied().collect();
        let (_, nth, _) = tied.select_nth_unstable(rank - 1);
        *nth
    };

    let (a_lt_lo, a_le_lo) = left_bounds(xs, pa, xt, rho);
    let (a_lt_hi, a_le_hi) = right_bounds(xs, pa, xt, rho);
    let closer = (pa - a_lt_lo) + (a_lt_hi - pa - 1);
    let tied = count_ids_upto(xs, ids, a_le_lo, a_lt_lo, kth_id) + count_ids_upto(xs, ids, a_lt_hi, a_le_hi, kth_id);
    debug_assert!(!ids[a_le_lo..a_le_hi].is_empty() || t == ids[pa]);
    closer + tied
}

/// Starts of the left runs with distance `< ρ` and `≤ ρ` (positions before
/// `p`).
fn left_bounds(v: &[f64], p: usize, xt: f64, rho: f64) -> (usize, usize) {
    let head = &v[..p];
    (head.partition_point(|&u| xt - u >= rho), head.partition_point(|&u| xt - u > rho))
}

/// Ends (exclusive) of the right runs with distance `< ρ` and `≤ ρ`
/// (positions after `p`).
fn right_bounds(v: &[f64], p: usize, xt: f64, rho: f64) -> (usize, usize) {
    let tail = &v[p + 1..];
    (
        p + 1 + tail.partition_point(|&u| u - xt < rho),
        p + 1 + tail.partition_point(|&u| u - xt <= rho),
    )
}

fn count_ids_upto(xs: &[f64], ids: &[usize], lo: usize, hi: usize, bound: usize) -> usize {
    if lo >= hi {
        return 0;
    }
    if xs[lo] == xs[hi - 1] {
        ids[lo..hi].partition_point(|&i| i <= bound)
    } else {
        ids[lo..hi].iter().filter(|&&i| i <= bound).count()
    }
}

/// Per-state, per-feature MI with one-vs-rest state indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMi {
    /// Indexed `[state][feature]`, nats.
    pub values: Vec<Vec<f64>>,
    /// States too rare (or too common) to estimate, or without usable
    /// signal; their weights fall back to uniform.
    pub fallback: [bool; NUM_STATES],
    pub k: usize,
}

pub fn mi_state_conditional(obs: &[Vec<f64>], labels: &[HiddenState], k: usize) -> Result<StateMi> {
    if obs.len() != labels.len() {
        return Err(FhmmError::InvalidInput(format!(
            "{} observations but {} labels",
            obs.len(),
            labels.len()
        )));
    }
    if obs.is_empty() {
        return Err(FhmmError::InvalidInput("no observations".into()));
    }
    let e = obs[0].len();
    let n = obs.len();
    let min_members = RARE_FACTOR * (k + 1);
    let mut values = vec![vec![0.0; e]; NUM_STATES];
    let mut fallback = [false; NUM_STATES];
    for s in HiddenState::ALL {
        let z: Vec<usize> = labels.iter().map(|&l| usize::from(l == s)).collect();
        let members: usize = z.iter().sum();
        if members.min(n - members) < min_members {
            fallback[s.index()] = true;
            continue;
        }
        let row: Result<Vec<f64>> = (0..e)
            .into_par_iter()
            .map(|i| {
                let x: Vec<f64> = obs.iter().map(|r| r[i]).collect();
                knn_mi(&x, &z, k).map(|m| m.value)
            })
            .collect();
        values[s.index()] = row?;
        let p = members as f64 / n as f64;
        let entropy = -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        if values[s.index()].iter().all(|&v| v < MI_SIGNAL_FRACTION * entropy) {
            fallback[s.index()] = true;
        }
    }
    Ok(StateMi { values, fallback, k })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// `w = I`, unscaled.
    Raw,
    /// `w = Ω·I/Σ I` per state.
    Normalized,
}

/// Weight matrix from a `4×E` MI table.
pub fn weight_matrix(mi: &[Vec<f64>], omega: f64, mode: WeightMode) -> Result<WeightMatrix> {
    if mi.len() != NUM_STATES {
        return Err(FhmmError::InvalidInput(format!("MI table needs {NUM_STATES} rows")));
    }
    if !(omega > 0.0) {
        return Err(FhmmError::InvalidInput(format!("omega must be positive, got {omega}")));
    }
    let e = mi[0].len();
    let mut w = vec![[0.0; NUM_STATES]; e];
    for (s, row) in mi.iter().enumerate() {
        if row.len() != e || row.iter().any(|&v| !(v >= 0.0)) {
            return Err(FhmmError::InvalidInput(format!("MI row {s} must hold {e} nonnegative values")));
        }
        match mode {
            WeightMode::Raw => {
                for i in 0..e {
                    w[i][s] = row[i];
                }
            }
            WeightMode::Normalized => {
                let total: f64 = row.iter().sum();
                if total <= 0.0 {
                    let st = HiddenState::from_index(s).unwrap();
                    return Err(FhmmError::InvalidInput(format!("all-zero MI for state {st}")));
                }
                for i in 0..e {
                    w[i][s] = omega * row[i] / total;
                }
            }
        }
    }
    let omega = if mode == WeightMode::Raw { 1.0 } else { omega };
    Ok(WeightMatrix { w, omega })
}

/// Decoding weights from an MI profile: flagged states get uniform weights
/// (`Ω/E` normalized, `1/E` raw) and the remaining entries are floored at
/// [`MI_WEIGHT_FLOOR`] so every weight stays positive.
pub fn weights_from_profile(profile: &StateMi, omega: f64, mode: WeightMode) -> Result<WeightMatrix> {
    let e = profile.values[0].len();
    let uniform = match mode {
        WeightMode::Raw => 1.0 / e as f64,
        WeightMode::Normalized => 1.0,
    };
    let table: Vec<Vec<f64>> = profile
        .values
        .iter()
        .zip(profile.fallback)
        .map(|(row, fb)| {
            if fb {
                vec![uniform; e]
            } else {
                row.iter().map(|v| v.max(MI_WEIGHT_FLOOR)).collect()
            }
        })
        .collect();
    weight_matrix(&table, omega, mode)
}

/// One histogram cell's contribution to the binned MI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalMi {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub class: bool,
    pub delta_i: f64,
}

/// Equal-width histogram decomposition `ΔI = p(x,z)·ln[p(x,z)/(p(x)p(z))]`.
pub fn local_mi_decomposition(x: &[f64], z: &[bool], bins: usize) -> Result<Vec<LocalMi>> {
    if bins < 2 {
        return Err(FhmmError::InvalidInput("need at least 2 bins".into()));
    }
    if x.len() != z.len() || x.is_empty() {
        return Err(FhmmError::InvalidInput("values and labels must be nonempty and equal length".into()));
    }
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut joint = vec![[0usize; 2]; bins];
    for (&v, &c) in x.iter().zip(z) {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        joint[b][usize::from(c)] += 1;
    }
    let n = x.len() as f64;
    let pz = [
        z.iter().filter(|&&c| !c).count() as f64 / n,
        z.iter().filter(|&&c| c).count() as f64 / n,
    ];
    let mut out = Vec::with_capacity(2 * bins);
    for (b, cells) in joint.iter().enumerate() {
        let px = (cells[0] + cells[1]) as f64 / n;
        for class in [false, true] {
            let pxz = cells[usize::from(class)] as f64 / n;
            let delta_i = if pxz > 0.0 {
                pxz * (pxz / (px * pz[usize::from(class)])).ln()
            } else {
                0.0
            };
            out.push(LocalMi {
                bin_lo: lo + b as f64 * width,
                bin_hi: lo + (b + 1) as f64 * width,
                class,
                delta_i,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn single_class_is_exactly_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        let m = knn_mi(&x, &vec![0; 500], 3).unwrap();
        assert_eq!(m.raw, 0.0);
        assert!(!m.degenerate);
    }

    #[test]
    fn identical_values_flagged() {
        let m = knn_mi(&[2.0; 20], &[0, 1].repeat(10), 3).unwrap();
        assert!(m.degenerate);
        assert_eq!(m.value, 0.0);
    }

    #[test]
    fn ties_with_single_class_still_zero() {
        let x: Vec<f64> = (0..300).map(|i| (i % 7) as f64).collect();
        let m = knn_mi(&x, &vec![0; 300], 3).unwrap();
        assert_eq!(m.raw, 0.0);
    }

    #[test]
    fn brute_force_neighbour_counts() {
        // compare the sorted-array search with a direct O(n²) count
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..30 {
            let n = 40;
            let x: Vec<f64> = if rng.random::<bool>() {
                (0..n).map(|_| (rng.random_range(0..12)) as f64 * 0.5).collect()
            } else {
                (0..n).map(|_| rng.random::<f64>()).collect()
            };
            let z: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let k = 3;
            let fast = knn_mi(&x, &z, k).unwrap().raw;
            let slow = brute_mi(&x, &z, k);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    fn brute_mi(x: &[f64], z: &[usize], k: usize) -> f64 {
        let n_all = x.len();
        let classes = z.iter().max().unwrap() + 1;
        let mut cn = vec![0; classes];
        for &c in z {
            cn[c] += 1;
        }
        let keep: Vec<usize> = (0..n_all).filter(|&t| cn[z[t]] >= 2).collect();
        let n = keep.len() as f64;
        let (mut sk, mut sm) = (0.0, 0.0);
        for &t in &keep {
            let kt = k.min(cn[z[t]] - 1);
            let mut same: Vec<(f64, usize)> = keep
                .iter()
                .filter(|&&u| u != t && z[u] == z[t])
                .map(|&u| ((x[u] - x[t]).abs(), u))
                .collect();
            same.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let kth = same[kt - 1];
            let m = keep
                .iter()
                .filter(|&&u| u != t)
                .filter(|&&u| {
                    let d = (x[u] - x[t]).abs();
                    d < kth.0 || (d == kth.0 && u <= kth.1)
                })
                .count();
            sk += digamma(kt as f64);
            sm += digamma(m.max(1) as f64);
        }
        let ct: f64 = cn.iter().filter(|&&c| c >= 2).map(|&c| c as f64 * digamma(c as f64)).sum::<f64>() / n;
        digamma(n) - ct + sk / n - sm / n
    }

    #[test]
    fn equal_mi_gives_quarter_weights() {
        let mi = vec![vec![0.2; 4]; 4];
        let w = weight_matrix(&mi, 1.0, WeightMode::Normalized).unwrap();
        for row in &w.w {
            for &v in row {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn published_clear_profile_and_scaling() {
        let clear = fixtures::PUBLISHED_WEIGHTS[0].to_vec();
        let mi = vec![clear.clone(), clear.clone(), clear.clone(), clear.clone()];
        let w = weight_matrix(&mi, 1.0, WeightMode::Normalized).unwrap();
        assert!((w.column_sum(HiddenState::CLEAR) - 1.0).abs() < 1e-10);
        let total: f64 = clear.iter().sum();
        let w = weight_matrix(&mi, fixtures::OPTIMAL_OMEGA, WeightMode::Normalized).unwrap();
        assert!((w.column_sum(HiddenState::CLEAR) - 1.10).abs() < 1e-10);
        for i in 0..4 {
            assert!((w.w[i][0] - 1.10 * clear[i] / total).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_row_names_state() {
        let mut mi = vec![vec![0.2; 4]; 4];
        mi[1] = vec![0.0; 4];
        let err = weight_matrix(&mi, 1.0, WeightMode::Normalized).unwrap_err();
        assert!(err.to_string().contains("(0,1)"));
        assert!(weight_matrix(&mi, 1.0, WeightMode::Raw).is_ok());
    }

    #[test]
    fn rare_state_falls_back_to_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let n = 4000;
        let obs: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.random::<f64>() + 0.1).collect()).collect();
        let mut labels = vec![HiddenState::CLEAR; n];
        for t in 0..1200 {
            labels[t] = HiddenState::HAZE;
        }
        for t in 1200..2000 {
            labels[t] = HiddenState::DUST;
        }
        labels[2000] = HiddenState::BOTH;
        let p = mi_state_conditional(&obs, &labels, 3).unwrap();
        assert!(p.fallback[HiddenState::BOTH.index()]);
        // independent labels: no usable signal anywhere
        assert!(p.fallback.iter().all(|&f| f), "{:?}", p.values);
        let w = weights_from_profile(&p, 1.0, WeightMode::Normalized).unwrap();
        for row in &w.w {
            assert!((row[3] - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn separating_feature_dominates() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 2000;
        let mut labels = Vec::with_capacity(n);
        let mut obs = Vec::with_capacity(n);
        for t in 0..n {
            let s = if t % 4 == 0 { HiddenState::HAZE } else { HiddenState::CLEAR };
            let shift = if s == HiddenState::HAZE { 3.0 } else { 0.0 };
            obs.push(vec![
                rng.random::<f64>() + 0.1,
                rng.random::<f64>() + shift + 0.1,
                rng.random::<f64>() + 0.1,
                rng.random::<f64>() + 0.1,
            ]);
            labels.push(s);
        }
        let p = mi_state_conditional(&obs, &labels, 3).unwrap();
        let w = weights_from_profile(&p, 1.0, WeightMode::Normalized).unwrap();
        assert!(w.w[1][HiddenState::HAZE.index()] > 0.5);
    }

    #[test]
    fn local_decomposition_sums_to_plugin() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let z: Vec<bool> = (0..100).map(|i| i >= 50).collect();
        let cells = local_mi_decomposition(&x, &z, 2).unwrap();
        let total: f64 = cells.iter().map(|c| c.delta_i).sum();
        assert!((total - 2f64.ln()).abs() < 1e-12);
        for c in &cells {
            let over = (c.bin_lo >= 49.5) == c.class;
            if over {
                assert!(c.delta_i > 0.0);
            } else {
                assert_eq!(c.delta_i, 0.0);
            }
        }
        assert!(local_mi_decomposition(&x, &z, 1).is_err());
    }
}
