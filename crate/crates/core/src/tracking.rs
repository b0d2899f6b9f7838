//! Exact eigenvalue tracking along the discrete family `t ↦ (K, M_t)` and
//! finite-difference estimates of the eigenvalue derivatives.
//!
//! Inside a degeneracy group the exact eigenvalues at `t` are matched to the
//! perturbative branches `λ⁽⁰⁾ + tλ⁽¹⁾ + t²λ⁽²⁾` by rank: both are sorted and
//! paired in order. For small `t` the groups do not cross, so this pairs each
//! analytic branch with its own prediction.

use crate::assembly::{exact_perturbed_pair, OperatorPair};
use crate::eigen::solve_eigenvalues;
use crate::error::{Error, Result};
use crate::perturb::CorrectionReport;
use crate::surface::ConformalPerturbation;

/// `λ⁽⁰⁾ + tλ⁽¹⁾ + t²λ⁽²⁾` for mode `n`.
pub fn predicted(report: &CorrectionReport, n: usize, t: f64) -> f64 {
    report.eigenvalues[n] + t * report.lambda1[n] + t * t * report.lambda2[n]
}

/// Number of leading modes needed so that no degeneracy group of the first
/// `n_modes` is cut.
fn covering_modes(report: &CorrectionReport, n_modes: usize) -> usize {
    let last = report.group_ids[n_modes - 1];
    report
        .group_ids
        .iter()
        .rposition(|&g| g == last)
        .map_or(n_modes, |p| p + 1)
}

/// Exact eigenvalues of the family at `t`, assigned to the first `n_modes`
/// unperturbed modes.
pub fn track(
    pair: &OperatorPair,
    pert: &ConformalPerturbation,
    report: &CorrectionReport,
    t: f64,
    n_modes: usize,
) -> Result<Vec<f64>> {
    if n_modes == 0 || n_modes > report.lambda1.len() {
        return Err(Error::ModeCountMismatch {
            expected: report.lambda1.len(),
            got: n_modes,
        });
    }
    let m = covering_modes(report, n_modes);
    let exact = solve_eigenvalues(&exact_perturbed_pair(pair, pert, t)?, m)?;
    let mut out = vec![0.0; m];
    let mut start = 0;
    while start < m {
        let g = report.group_ids[start];
        let end = (start..m).find(|&k| report.group_ids[k] != g).unwrap_or(m);
        let mut branches: Vec<usize> = (start..end).collect();
        branches.sort_by(|&a, &b| {
            predicted(report, a, t)
                .total_cmp(&predicted(report, b, t))
                .then(a.cmp(&b))
        });
        for (rank, &mode) in branches.iter().enumerate() {
            out[mode] = exact[start + rank];
        }
        start = end;
    }
    out.truncate(n_modes);
    Ok(out)
}

/// Central finite-difference estimates of `λ⁽¹⁾` and `λ⁽²⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifferences {
    pub h: f64,
    /// `(λ(h) − λ(−h))/2h`
    pub first: Vec<f64>,
    /// `(λ(h) − 2λ(0) + λ(−h))/2h²`: half the second derivative, which is
    /// what `λ⁽²⁾` estimates.
    pub second: Vec<f64>,
    /// Tracked exact eigenvalues at `+h` and `−h`.
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

pub fn finite_differences(
    pair: &OperatorPair,
    pert: &ConformalPerturbation,
    report: &CorrectionReport,
    n_modes: usize,
    h: f64,
) -> Result<FiniteDifferences> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let plus = track(pair, pert, report, h, n_modes)?;
    let minus = track(pair, pert, report, -h, n_modes)?;
    let first = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * h))
        .collect();
    let second = (0..n_modes)
        .map(|n| (plus[n] - 2.0 * report.eigenvalues[n] + minus[n]) / (2.0 * h * h))
        .collect();
    Ok(FiniteDifferences {
        h,
        first,
        second,
        plus,
        minus,
    })
}

/// Largest `|prediction − exact|` over `modes` at each `t`.
pub fn prediction_errors(
    pair: &OperatorPair,
    pert: &ConformalPerturbation,
    report: &CorrectionReport,
    modes: std::ops::Range<usize>,
    ts: &[f64],
) -> Result<Vec<f64>> {
    ts.iter()
        .map(|&t| {
            let exact = track(pair, pert, report, t, modes.end)?;
            Ok(modes
                .clone()
                .map(|n| (predicted(report, n, t) - exact[n]).abs())
                .fold(0.0, f64::max))
        })
        .collect()
}

/// Largest `t` of the grid up to which every prediction on `modes` stays
/// within `rel_tol` of the exact eigenvalue, relative to
/// `max(|λ_exact|, λ₁⁽⁰⁾)`. Checked at `±t` in increasing `|t|`; `None` if the
/// smallest step already fails.
pub fn largest_valid_t(
    pair: &OperatorPair,
    pert: &ConformalPerturbation,
    report: &CorrectionReport,
    modes: std::ops::Range<usize>,
    t_grid: &[f64],
    rel_tol: f64,
) -> Result<Option<f64>> {
    let mut ts: Vec<f64> = t_grid
        .iter()
        .map(|t| t.abs())
        .filter(|t| *t > 0.0)
        .collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let floor = report.eigenvalues.get(1).copied().unwrap_or(0.0).abs();
    let mut valid = None;
    for t in ts {
        for s in [t, -t] {
            let exact = track(pair, pert, report, s, modes.end)?;
            let worst = modes
                .clone()
                .map(|n| (predicted(report, n, s) - exact[n]).abs() / exact[n].abs().max(floor))
                .fold(0.0, f64::max);
            if worst > rel_tol {
                return Ok(valid);
            }
        }
        valid = Some(t);
    }
    Ok(valid)
}

/// Least-squares slope of `log err` against `log t`.
pub fn log_log_slope(ts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = ts.iter().map(|t| t.abs().ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::assemble_base;
    use crate::eigen::{solve, DEFAULT_TOL_DEG};
    use crate::perturb::{corrections, PerturbSettings};
    use crate::surface::{field_from_expression, make_torus};

    #[test]
    fn slope_of_exact_power_law() {
        let ts = [1e-2, 5e-3, 2.5e-3];
        let errs: Vec<f64> = ts.iter().map(|t: &f64| 7.0 * t.powi(3)).collect();
        assert!((log_log_slope(&ts, &errs) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_factor_is_tracked_exactly() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, 64, DEFAULT_TOL_DEG).unwrap();
        let pert = ConformalPerturbation::inverse_metric(field_from_expression(&s, "0.5").unwrap());
        let ops = crate::assembly::conformal_operators(&pair, &pert).unwrap();
        let report = corrections(&spec, &ops, &PerturbSettings::default()).unwrap();
        let exact = track(&pair, &pert, &report, 0.1, 10).unwrap();
        for n in 0..10 {
            let want = 1.05 * spec.eigenvalues()[n];
            assert!((exact[n] - want).abs() <= 1e-10 * (1.0 + want));
            assert!((predicted(&report, n, 0.1) - want).abs() <= 1e-10 * (1.0 + want));
        }
    }

    #[test]
    fn valid_range_stops_at_first_failure() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, 64, DEFAULT_TOL_DEG).unwrap();
        let pert = ConformalPerturbation::inverse_metric(
            field_from_expression(&s, "cos(2*pi*x)").unwrap(),
        );
        let ops = crate::assembly::conformal_operators(&pair, &pert).unwrap();
        let report = corrections(&spec, &ops, &PerturbSettings::default()).unwrap();
        let grid = [1e-3, 1e-2, 0.1, 0.5];
        let t = largest_valid_t(&pair, &pert, &report, 0..10, &grid, 1e-4).unwrap();
        assert_eq!(t, Some(1e-2));
        let none = largest_valid_t(&pair, &pert, &report, 0..10, &[0.5], 1e-4).unwrap();
        assert_eq!(none, None);
    }

    #[test]
    fn groups_are_never_cut() {
        let s = make_torus(8, 8, 1.0, 1.0).unwrap();
        let pair = assemble_base(&s).unwrap();
        let spec = solve(&pair, 64, DEFAULT_TOL_DEG).unwrap();
        let pert = ConformalPerturbation::inverse_metric(
            field_from_expression(&s, "cos(2*pi*x)").unwrap(),
        );
        let ops = crate::assembly::conformal_operators(&pair, &pert).unwrap();
        let report = corrections(&spec, &ops, &PerturbSettings::default()).unwrap();
        assert_eq!(covering_modes(&report, 2), 5);
        assert_eq!(covering_modes(&report, 5), 5);
        assert_eq!(track(&pair, &pert, &report, 1e-3, 2).unwrap().len(), 2);
    }
}
