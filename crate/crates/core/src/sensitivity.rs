//! Sensitivity to an unmeasured binary risk factor `Q`.
//!
//! `Q` is independent of the covariates, the instrument and the compliance
//! class, with `P(Q = 1) = π`. It shifts the outcome log-odds by `ξ` and each
//! response log-odds by `κ`. For fixed `(π, ξ, κ)` the remaining parameters
//! are fitted by the same EM with `Q` added to the latent space.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{tabulate_observed, EmModel, FitConfig, FitResult, Start};
use crate::error::{Error, Result};
use crate::estimands::{bootstrap_from_fit, with_pool, BootstrapConfig, CaceReport, Target};
use crate::model::{dot, logistic, ComplianceClass, CovariateSpec, ParamSet, Record};

/// Outcome log-odds shift by class and arm; always- and never-takers carry one
/// value each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutcomeShift {
    pub never: f64,
    pub always: f64,
    pub complier0: f64,
    pub complier1: f64,
}

impl OutcomeShift {
    pub fn uniform(xi: f64) -> Self {
        Self { never: xi, always: xi, complier0: xi, complier1: xi }
    }

    pub fn get(&self, u: ComplianceClass, z: u8) -> f64 {
        match (u, z) {
            (ComplianceClass::NeverTaker, _) => self.never,
            (ComplianceClass::AlwaysTaker, _) => self.always,
            (ComplianceClass::Complier, 0) => self.complier0,
            (ComplianceClass::Complier, _) => self.complier1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub pi: f64,
    pub xi: OutcomeShift,
    /// Response log-odds shift per partially observed covariate, indexed by
    /// `ComplianceClass::index`.
    pub kappa: Vec<[f64; 3]>,
}

impl SensitivityParams {
    /// Scalar shifts shared by every class, arm and covariate.
    pub fn uniform(pi: f64, xi: f64, kappa: f64, n_partial: usize) -> Self {
        Self { pi, xi: OutcomeShift::uniform(xi), kappa: vec![[kappa; 3]; n_partial] }
    }

    pub fn validate(&self, spec: &CovariateSpec) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Invalid(format!("pi = {} outside [0, 1]", self.pi)));
        }
        if self.kappa.len() != spec.n_partial() {
            return Err(Error::Invalid(format!(
                "{} kappa rows for {} partially observed covariates",
                self.kappa.len(),
                spec.n_partial()
            )));
        }
        Ok(())
    }
}

/// EM fit with the confounder shifts held fixed.
pub fn fit_with_q(
    dataset: &[Record],
    spec: &CovariateSpec,
    sens: &SensitivityParams,
    config: &FitConfig,
) -> Result<FitResult> {
    sens.validate(spec)?;
    let counts = tabulate_observed(dataset, spec)?;
    EmModel::new(spec, config.missingness).with_confounder(sens).fit_counts(&counts, config, Start::Random)
}

/// Mixture CACE: `π·Δ(ξ) + (1 − π)·Δ(0)`, treated minus control.
pub fn cace_with_q(params: &ParamSet, sens: &SensitivityParams, x: &[f64]) -> Result<f64> {
    if params.beta.complier0.len() != x.len() {
        return Err(Error::Dimension { expected: params.beta.complier0.len(), got: x.len() });
    }
    let l1 = dot(&params.beta.complier1, x);
    let l0 = dot(&params.beta.complier0, x);
    let shifted = logistic(l1 + sens.xi.complier1) - logistic(l0 + sens.xi.complier0);
    let plain = logistic(l1) - logistic(l0);
    Ok(sens.pi * shifted + (1.0 - sens.pi) * plain)
}

/// Recenters the interval `[b, c]` around `a` onto `d`: `[d − (a − b), d + (c − a)]`.
pub fn shifted_ci(a: f64, ci: (f64, f64), d: f64) -> Result<(f64, f64)> {
    let (b, c) = ci;
    if !(b <= a && a <= c) {
        return Err(Error::Invalid(format!("need b <= a <= c, got b={b}, a={a}, c={c}")));
    }
    Ok((d - (a - b), d + (c - a)))
}

/// True when `[lo, hi]` contains zero.
pub fn covers_zero(lo: f64, hi: f64) -> bool {
    lo <= 0.0 && 0.0 <= hi
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridPairing {
    /// Pair outcome and response odds ratios of the same magnitude
    /// (`m` or `1/m` on each axis).
    #[default]
    SameMagnitude,
    FullCross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityGrid {
    pub pi_values: Vec<f64>,
    /// Values of `exp(ξ)`.
    pub outcome_odds_ratios: Vec<f64>,
    /// Values of `exp(κ)`.
    pub response_odds_ratios: Vec<f64>,
    pub pairing: GridPairing,
    /// Cells (level indices) at which the CACE is reported.
    #[serde(skip)]
    pub cells: Vec<Vec<u16>>,
}

impl Default for SensitivityGrid {
    fn default() -> Self {
        Self {
            pi_values: vec![0.1, 0.5, 0.9],
            outcome_odds_ratios: vec![2.0, 0.5, 3.0, 1.0 / 3.0],
            response_odds_ratios: vec![2.0, 0.5, 3.0, 1.0 / 3.0],
            pairing: GridPairing::SameMagnitude,
            cells: Vec::new(),
        }
    }
}

fn magnitude(or: f64) -> f64 {
    if or >= 1.0 {
        or
    } else {
        1.0 / or
    }
}

impl SensitivityGrid {
    pub fn validate(&self) -> Result<()> {
        if self.pi_values.is_empty() || self.outcome_odds_ratios.is_empty() || self.response_odds_ratios.is_empty() {
            return Err(Error::Invalid("sensitivity grid axes must be nonempty".into()));
        }
        if self.pi_values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Invalid("pi values must lie in [0, 1]".into()));
        }
        if self.outcome_odds_ratios.iter().chain(&self.response_odds_ratios).any(|o| !(*o > 0.0 && o.is_finite())) {
            return Err(Error::Invalid("odds ratios must be positive and finite".into()));
        }
        Ok(())
    }

    /// `(π, exp ξ, exp κ)` in output order: odds-ratio pairs outer, π inner.
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::new();
        for &xi in &self.outcome_odds_ratios {
            for &ka in &self.response_odds_ratios {
                if self.pairing == GridPairing::SameMagnitude && (magnitude(xi) - magnitude(ka)).abs() > 1e-9 {
                    continue;
                }
                for &pi in &self.pi_values {
                    out.push((pi, xi, ka));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub cell: Vec<u16>,
    pub label: String,
    pub pi: f64,
    pub exp_xi: f64,
    pub exp_kappa: f64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Shifted interval covers zero while the base interval did not.
    pub flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFailure {
    pub pi: f64,
    pub exp_xi: f64,
    pub exp_kappa: f64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    pub failures: Vec<GridFailure>,
}

/// Refits the model at every grid point and reports the mixture CACE with a
/// shifted interval for each target cell.
///
/// Each point is warm-started from `base` (the no-confounder fit) and falls
/// back to random restarts if the warm run fails. Intervals come from
/// `base_report` via [`shifted_ci`], or from a bootstrap at every point when
/// `point_bootstrap` is given.
#[allow(clippy::too_many_arguments)]
pub fn sensitivity_grid(
    dataset: &[Record],
    spec: &CovariateSpec,
    grid: &SensitivityGrid,
    config: &FitConfig,
    base: &ParamSet,
    base_report: &CaceReport,
    point_bootstrap: Option<&BootstrapConfig>,
    workers: usize,
) -> Result<GridReport> {
    grid.validate()?;
    let counts = tabulate_observed(dataset, spec)?;
    let mut bases = Vec::with_capacity(grid.cells.len());
    for cell in &grid.cells {
        spec.cell_index(cell)?;
        let row = base_report
            .find(&Target::Cace(cell.clone()))
            .ok_or_else(|| Error::Invalid(format!("base report has no CACE row for cell {cell:?}")))?;
        bases.push(row.clone());
    }
    let points = grid.points();
    let run_point = |&(pi, exp_xi, exp_kappa): &(f64, f64, f64)| -> std::result::Result<Vec<GridRow>, GridFailure> {
        let fail = |message: String| GridFailure { pi, exp_xi, exp_kappa, message };
        let sens = SensitivityParams::uniform(pi, exp_xi.ln(), exp_kappa.ln(), spec.n_partial());
        let model = EmModel::new(spec, config.missingness).with_confounder(&sens);
        let fit = model
            .fit_counts(&counts, config, Start::Warm(base))
            .or_else(|_| model.fit_counts(&counts, config, Start::Random))
            .map_err(|e| fail(e.to_string()))?;
        let boot_report = match point_bootstrap {
            Some(bc) => {
                let bc = BootstrapConfig { workers: 0, ..bc.clone() };
                let targets: Vec<Target> = grid.cells.iter().map(|c| Target::Cace(c.clone())).collect();
                Some(
                    bootstrap_from_fit(dataset, spec, config, &bc, &targets, &fit.params, Some(&sens))
                        .map_err(|e| fail(e.to_string()))?,
                )
            }
            None => None,
        };
        grid.cells
            .iter()
            .zip(&bases)
            .enumerate()
            .map(|(k, (cell, b))| {
                let x = spec.features(cell);
                let d = cace_with_q(&fit.params, &sens, &x).map_err(|e| fail(e.to_string()))?;
                let (lo, hi) = match &boot_report {
                    Some(r) => (r.rows[k].lower, r.rows[k].upper),
                    None => shifted_ci(b.estimate, (b.lower, b.upper), d).map_err(|e| fail(e.to_string()))?,
                };
                Ok(GridRow {
                    cell: cell.clone(),
                    label: spec.cell_label(spec.cell_index(cell).expect("checked")),
                    pi,
                    exp_xi,
                    exp_kappa,
                    estimate: d,
                    ci_low: lo,
                    ci_high: hi,
                    flip: covers_zero(lo, hi) && !covers_zero(b.lower, b.upper),
                })
            })
            .collect()
    };
    let results: Vec<_> = with_pool(workers, || points.par_iter().map(run_point).collect());
    let mut report = GridReport::default();
    for r in results {
        match r {
            Ok(rows) => report.rows.extend(rows),
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{cace, Covariate};
    use approx::assert_relative_eq;

    #[test]
    fn shifted_ci_worked_example() {
        let (lo, hi) = shifted_ci(-0.296, (-0.429, -0.137), -0.289).unwrap();
        assert!((lo - -0.422).abs() < 1e-12, "{lo}");
        assert!((hi - -0.130).abs() < 1e-12, "{hi}");
    }

    #[test]
    fn shifted_ci_identity_and_symmetry() {
        assert_eq!(shifted_ci(0.1, (0.0, 0.3), 0.1).unwrap(), (0.0, 0.3));
        let (lo, hi) = shifted_ci(0.5, (0.4, 0.6), 0.2).unwrap();
        assert_relative_eq!(lo, 0.1, epsilon = 1e-15);
        assert_relative_eq!(hi, 0.3, epsilon = 1e-15);
        assert!(shifted_ci(0.5, (0.6, 0.7), 0.0).is_err());
    }

    #[test]
    fn no_flip_when_shifted_interval_stays_negative() {
        let (a, b, c) = (-0.296, -0.429, -0.137);
        let d = -0.2;
        let (lo, hi) = shifted_ci(a, (b, c), d).unwrap();
        assert!(hi < 0.0);
        assert!(!(covers_zero(lo, hi) && !covers_zero(b, c)));
    }

    #[test]
    fn mixture_cace_closed_forms() {
        let spec = CovariateSpec::new(vec![Covariate::new("x", 2, true)]).unwrap();
        let mut p = ParamSet::zeros(&spec);
        let x = [1.0, 0.0];
        let s = SensitivityParams {
            pi: 0.5,
            xi: OutcomeShift { complier1: 3f64.ln(), ..Default::default() },
            kappa: vec![],
        };
        assert_relative_eq!(cace_with_q(&p, &s, &x).unwrap(), 0.125, epsilon = 1e-15);

        p.beta.complier1 = vec![0.4, -0.3];
        p.beta.complier0 = vec![-0.2, 0.5];
        let x = [1.0, 2.0];
        let s0 = SensitivityParams::uniform(0.0, 1.7, 0.4, 0);
        assert_relative_eq!(cace_with_q(&p, &s0, &x).unwrap(), cace(&p, &x).unwrap(), epsilon = 1e-15);
        let s1 = SensitivityParams::uniform(1.0, 0.9, 0.0, 0);
        let want = logistic(0.4 - 0.6 + 0.9) - logistic(-0.2 + 1.0 + 0.9);
        assert_relative_eq!(cace_with_q(&p, &s1, &x).unwrap(), want, epsilon = 1e-15);
    }

    #[test]
    fn grid_points_follow_magnitude_pairing() {
        let g = SensitivityGrid::default();
        let pts = g.points();
        assert_eq!(pts.len(), 8 * 3);
        assert!(pts.iter().all(|(_, x, k)| (magnitude(*x) - magnitude(*k)).abs() < 1e-9));
        let full = SensitivityGrid { pairing: GridPairing::FullCross, ..SensitivityGrid::default() };
        assert_eq!(full.points().len(), 16 * 3);
    }
}
