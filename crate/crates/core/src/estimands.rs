//! Quantities reported from a fit: per-cell CACE, compliance shares,
//! population-weighted CACE and percentile bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{tabulate_observed, EmModel, FitConfig, FitResult, Start};
use crate::error::{Error, Result};
use crate::model::{cace, compliance_probs, ComplianceClass, CovariateSpec, ParamSet, Record};
use crate::sensitivity::{cace_with_q, SensitivityParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Weights are the cell probabilities `w`.
    CellProbability,
    /// Weights are the expected complier mass `w · P(c | x)`.
    ComplierCount,
}

impl Weighting {
    pub fn label(self) -> &'static str {
        match self {
            Weighting::CellProbability => "weighted_cell_probability",
            Weighting::ComplierCount => "weighted_complier_count",
        }
    }
}

/// A scalar summary of a fitted parameter set.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    /// CACE in one covariate cell (level indices).
    Cace(Vec<u16>),
    WeightedCace(Weighting),
    /// Share of one compliance class in one covariate cell.
    Compliance(Vec<u16>, ComplianceClass),
    /// Complier outcome coefficient `index` under instrument arm `arm`.
    ComplierCoef {
        arm: u8,
        index: usize,
    },
}

impl Target {
    pub fn label(&self, spec: &CovariateSpec) -> String {
        let cell = |levels: &[u16]| {
            spec.cell_index(levels).map(|c| spec.cell_label(c)).unwrap_or_else(|_| format!("{levels:?}"))
        };
        match self {
            Target::Cace(l) => format!("cace[{}]", cell(l)),
            Target::WeightedCace(w) => w.label().to_string(),
            Target::Compliance(l, u) => format!("share_{}[{}]", u.short_name(), cell(l)),
            Target::ComplierCoef { arm, index } => format!("beta_c{arm}[{index}]"),
        }
    }

    pub fn evaluate(&self, spec: &CovariateSpec, params: &ParamSet, sens: Option<&SensitivityParams>) -> Result<f64> {
        match self {
            Target::Cace(levels) => {
                let x = spec.features(&check_cell(spec, levels)?);
                match sens {
                    Some(s) => cace_with_q(params, s, &x),
                    None => cace(params, &x),
                }
            }
            Target::WeightedCace(w) => weighted_cace_with(spec, params, *w, sens),
            Target::Compliance(levels, u) => {
                let x = spec.features(&check_cell(spec, levels)?);
                Ok(compliance_probs(params, &x)[u.index()])
            }
            Target::ComplierCoef { arm, index } => {
                let b = if *arm == 0 { &params.beta.complier0 } else { &params.beta.complier1 };
                b.get(*index).copied().ok_or_else(|| Error::Index(format!("coefficient {index} out of range")))
            }
        }
    }
}

fn check_cell(spec: &CovariateSpec, levels: &[u16]) -> Result<Vec<u16>> {
    spec.cell_index(levels)?;
    Ok(levels.to_vec())
}

/// CACE for each requested cell.
pub fn cace_table(spec: &CovariateSpec, fit: &FitResult, cells: &[Vec<u16>]) -> Result<Vec<(Vec<u16>, f64)>> {
    cells
        .iter()
        .map(|c| {
            let x = spec.features(&check_cell(spec, c)?);
            Ok((c.clone(), cace(&fit.params, &x)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplianceRow {
    pub cell: Vec<u16>,
    pub always: f64,
    pub complier: f64,
    pub never: f64,
}

/// Compliance-class shares for each requested cell.
pub fn compliance_proportions(spec: &CovariateSpec, fit: &FitResult, cells: &[Vec<u16>]) -> Result<Vec<ComplianceRow>> {
    cells
        .iter()
        .map(|c| {
            let x = spec.features(&check_cell(spec, c)?);
            let [n, cc, a] = compliance_probs(&fit.params, &x);
            Ok(ComplianceRow { cell: c.clone(), always: a, complier: cc, never: n })
        })
        .collect()
}

/// Population-weighted CACE over the full covariate lattice.
pub fn weighted_cace(spec: &CovariateSpec, params: &ParamSet, weighting: Weighting) -> Result<f64> {
    weighted_cace_with(spec, params, weighting, None)
}

fn weighted_cace_with(
    spec: &CovariateSpec,
    params: &ParamSet,
    weighting: Weighting,
    sens: Option<&SensitivityParams>,
) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for cell in 0..spec.n_cells() {
        let x = spec.design(cell);
        let effect = match sens {
            Some(s) => cace_with_q(params, s, x)?,
            None => cace(params, x)?,
        };
        let weight = match weighting {
            Weighting::CellProbability => params.w[cell],
            Weighting::ComplierCount => params.w[cell] * compliance_probs(params, x)[1],
        };
        num += weight * effect;
        den += weight;
    }
    if !(den > 0.0) {
        return Err(Error::Invalid("zero total weight".into()));
    }
    Ok(num / den)
}

/// Weighted average of per-cell effects with explicit weights.
pub fn weighted_average(effects: &[f64], weights: &[f64]) -> Result<f64> {
    let den: f64 = weights.iter().sum();
    if effects.len() != weights.len() || !(den > 0.0) {
        return Err(Error::Invalid("weights must match effects and have positive total".into()));
    }
    Ok(effects.iter().zip(weights).map(|(e, w)| e * w).sum::<f64>() / den)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    pub ci_level: f64,
    /// Worker threads; 0 uses the rayon default.
    pub workers: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { n_resamples: 1000, seed: 0, ci_level: 0.95, workers: 0 }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples == 0 {
            return Err(Error::Invalid("n_resamples must be at least 1".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Invalid("ci_level must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRow {
    pub target: Target,
    pub label: String,
    pub estimate: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Point estimates with bootstrap SDs and percentile intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct CaceReport {
    pub rows: Vec<IntervalRow>,
    pub n_resamples: usize,
    pub n_failed: usize,
    pub ci_level: f64,
}

impl CaceReport {
    pub fn find(&self, target: &Target) -> Option<&IntervalRow> {
        self.rows.iter().find(|r| &r.target == target)
    }
}

/// Order-statistic endpoints of a percentile interval. `sorted` must be ascending.
pub fn percentile_interval(sorted: &[f64], ci_level: f64) -> (f64, f64) {
    let b = sorted.len();
    let alpha = 1.0 - ci_level;
    let lo = ((alpha / 2.0 * b as f64).floor() as usize).min(b - 1);
    let hi = (((1.0 - alpha / 2.0) * b as f64).ceil() as usize).clamp(1, b) - 1;
    (sorted[lo], sorted[hi])
}

pub(crate) fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub(crate) fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Nonparametric bootstrap over records.
///
/// The point fit uses `config` as given; each replicate is a single EM run
/// warm-started at the point estimate. Replicate `b` draws from an RNG
/// stream keyed by `(seed, b)`, so results do not depend on the worker count.
pub fn bootstrap_ci(
    dataset: &[Record],
    spec: &CovariateSpec,
    config: &FitConfig,
    boot: &BootstrapConfig,
    targets: &[Target],
) -> Result<CaceReport> {
    let counts = tabulate_observed(dataset, spec)?;
    let model = EmModel::new(spec, config.missingness);
    let base = model.fit_counts(&counts, config, Start::Random)?;
    bootstrap_from_fit(dataset, spec, config, boot, targets, &base.params, None)
}

/// Bootstrap around an existing point fit, optionally under a fixed latent confounder.
pub fn bootstrap_from_fit(
    dataset: &[Record],
    spec: &CovariateSpec,
    config: &FitConfig,
    boot: &BootstrapConfig,
    targets: &[Target],
    point: &ParamSet,
    sens: Option<&SensitivityParams>,
) -> Result<CaceReport> {
    boot.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    for (index, r) in dataset.iter().enumerate() {
        r.validate(spec).map_err(|message| Error::Record { index, message })?;
    }
    let estimates: Vec<f64> = targets.iter().map(|t| t.evaluate(spec, point, sens)).collect::<Result<_>>()?;
    let mut model = EmModel::new(spec, config.missingness);
    if let Some(s) = sens {
        model = model.with_confounder(s);
    }
    let n = dataset.len();
    let replicate = |b: usize| -> Option<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
        rng.set_stream(b as u64);
        let mut counts = crate::em::ObservedCounts::new(spec);
        for _ in 0..n {
            counts.add(&dataset[rng.random_range(0..n)], 1.0);
        }
        let fit = model.fit_counts(&counts, config, Start::Warm(point)).ok()?;
        targets.iter().map(|t| t.evaluate(spec, &fit.params, sens).ok()).collect()
    };
    let results: Vec<Option<Vec<f64>>> =
        with_pool(boot.workers, || (0..boot.n_resamples).into_par_iter().map(replicate).collect());
    let ok: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let n_failed = boot.n_resamples - ok.len();
    if ok.is_empty() || n_failed as f64 > 0.05 * boot.n_resamples as f64 {
        return Err(Error::TooManyFailures { what: "bootstrap replicates", failed: n_failed, total: boot.n_resamples });
    }
    let rows = targets
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let mut v: Vec<f64> = ok.iter().map(|r| r[k]).collect();
            v.sort_by(f64::total_cmp);
            let (lower, upper) = percentile_interval(&v, boot.ci_level);
            IntervalRow {
                target: t.clone(),
                label: t.label(spec),
                estimate: estimates[k],
                sd: sample_sd(&v),
                lower,
                upper,
            }
        })
        .collect();
    Ok(CaceReport { rows, n_resamples: boot.n_resamples, n_failed, ci_level: boot.ci_level })
}
