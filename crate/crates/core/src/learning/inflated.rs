use argmin::core::{CostFunction, Error as ArgminError, Executor, State};
use argmin::solver::neldermead::NelderMead;

use super::{weighted_moments, PI0_CLAMP, SIGMA_FLOOR};
use crate::model::InflatedMixtureParams;

/// How the continuous part `(θ, η²)` of the inflated mixture is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InflatedFit {
    /// Weighted log-moments of the off-atom sample.
    ClosedForm,
    /// Bounded Nelder-Mead search on the weighted mixture log-likelihood,
    /// started from the previous estimate.
    Search,
}

/// Weighted maximum-likelihood fit of the clear-state visibility mixture.
///
/// `π0` is the weighted share of rows exactly at `c`; it separates from
/// `(θ, η²)`, which only see the off-atom rows.
pub fn fit_inflated(
    vis: &[f64],
    weights: &[f64],
    c: f64,
    mode: InflatedFit,
    previous: Option<InflatedMixtureParams>,
) -> InflatedMixtureParams {
    let total: f64 = weights.iter().sum();
    let at_atom: f64 = vis.iter().zip(weights).filter(|(&x, _)| x == c).map(|(_, &w)| w).sum();
    let pi0 = if total > 0.0 {
        (at_atom / total).clamp(PI0_CLAMP, 1.0 - PI0_CLAMP)
    } else {
        previous.map_or(0.5, |p| p.pi0)
    };
    let cont: Vec<(f64, f64)> = vis
        .iter()
        .zip(weights)
        .filter(|(&x, &w)| x != c && w > 0.0)
        .map(|(&x, &w)| (w, x.ln()))
        .collect();
    let closed = weighted_moments(cont.iter().copied());
    let sq = |(t, e): (f64, f64)| (t, e * e);
    let (theta, eta2) = match (closed, mode, previous) {
        (None, _, Some(p)) => (p.theta, p.eta2),
        (None, _, None) => (c.ln(), 1.0),
        (Some(cf), InflatedFit::ClosedForm, _) => sq(cf),
        (Some(cf), InflatedFit::Search, prev) => {
            let start = prev.map_or(cf, |p| (p.theta, p.eta()));
            sq(search(&cont, start).unwrap_or(cf))
        }
    };
    InflatedMixtureParams { pi0, theta, eta2, c }
}

/// Negative weighted log-likelihood of the continuous component over
/// `(θ, ln η)`, with a quadratic wall outside the box.
struct ContinuousNll<'a> {
    data: &'a [(f64, f64)],
    weight: f64,
    theta_bounds: (f64, f64),
    log_eta_bounds: (f64, f64),
}

impl CostFunction for ContinuousNll<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> Result<f64, ArgminError> {
        let theta = p[0].clamp(self.theta_bounds.0, self.theta_bounds.1);
        let le = p[1].clamp(self.log_eta_bounds.0, self.log_eta_bounds.1);
        let wall = (p[0] - theta).powi(2) + (p[1] - le).powi(2);
        let eta = le.exp();
        let mut nll = 0.0;
        for &(w, y) in self.data {
            let s = (y - theta) / eta;
            nll += w * (le + 0.5 * s * s);
        }
        Ok(nll / self.weight + 1e3 * wall)
    }
}

fn search(data: &[(f64, f64)], start: (f64, f64)) -> Option<(f64, f64)> {
    let weight: f64 = data.iter().map(|d| d.0).sum();
    let lo = data.iter().map(|d| d.1).fold(f64::INFINITY, f64::min);
    let hi = data.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
    let problem = ContinuousNll {
        data,
        weight,
        theta_bounds: (lo - 1.0, hi + 1.0),
        log_eta_bounds: (SIGMA_FLOOR.ln(), 10f64.ln()),
    };
    let x0 = vec![start.0, start.1.max(SIGMA_FLOOR).ln()];
    let simplex = vec![x0.clone(), vec![x0[0] + 0.1, x0[1]], vec![x0[0], x0[1] + 0.1]];
    let solver = NelderMead::new(simplex).with_sd_tolerance(1e-12).ok()?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.max_iters(2000))
        .run()
        .ok()?;
    let best = res.state().get_best_param()?.clone();
    let theta = best[0].clamp(lo - 1.0, hi + 1.0);
    let eta = best[1].exp().clamp(SIGMA_FLOOR, 10.0);
    Some((theta, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_agrees_with_closed_form() {
        let vis = [10.0, 10.0, 3.0, 5.5, 10.0, 7.2, 2.1, 10.0, 4.4];
        let w = [1.0, 0.5, 0.9, 0.3, 1.0, 0.8, 0.2, 0.7, 1.0];
        let start = InflatedMixtureParams { pi0: 0.5, theta: 0.5, eta2: 1.0, c: 10.0 };
        let a = fit_inflated(&vis, &w, 10.0, InflatedFit::ClosedForm, None);
        let b = fit_inflated(&vis, &w, 10.0, InflatedFit::Search, Some(start));
        assert_eq!(a.pi0, b.pi0);
        assert!((a.pi0 - 3.2 / 6.4).abs() < 1e-15);
        assert!((a.theta - b.theta).abs() < 1e-5, "{a:?} {b:?}");
        assert!((a.eta2 - b.eta2).abs() < 1e-5, "{a:?} {b:?}");
    }

    #[test]
    fn all_at_atom_keeps_previous_shape() {
        let prev = InflatedMixtureParams { pi0: 0.9, theta: 2.0, eta2: 0.04, c: 10.0 };
        let p = fit_inflated(&[10.0; 5], &[1.0; 5], 10.0, InflatedFit::Search, Some(prev));
        assert_eq!(p.pi0, 1.0 - PI0_CLAMP);
        assert_eq!((p.theta, p.eta2), (2.0, 0.04));
    }
}
