//! Comparison estimators: complete-case EM, chained-equation imputation,
//! the unadjusted difference, regression standardization and propensity
//! subclassification.

use std::collections::BTreeMap;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_em, FitConfig, FitResult, MissingnessModel};
use crate::error::{Error, Result};
use crate::glm::{fit_binomial, fit_multinomial, BinomialRows, MultinomialRows, NewtonOptions};
use crate::model::{cace, dot, logistic, CovariateSpec, Record};

/// Two-sided 95% standard normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputationConfig {
    pub n_imputations: usize,
    /// Passes over the incomplete covariates per imputation.
    pub n_cycles: usize,
    pub seed: u64,
    /// Use the full factorial of `(z, d, y)` in the imputation models rather
    /// than main effects only.
    pub zdy_interactions: bool,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self { n_imputations: 5, n_cycles: 10, seed: 0, zdy_interactions: true }
    }
}

impl ImputationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_imputations == 0 || self.n_cycles == 0 {
            return Err(Error::Invalid("n_imputations and n_cycles must be at least 1".into()));
        }
        Ok(())
    }
}

/// A point estimate with a Wald-type 95% interval. The interval is NaN when
/// no within-dataset variance is available.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub estimate: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Estimate {
    pub fn wald(estimate: f64, variance: f64) -> Self {
        let h = Z_975 * variance.sqrt();
        Self { estimate, variance, lower: estimate - h, upper: estimate + h }
    }
}

/// Multiple-imputation summary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pooled {
    pub estimate: f64,
    /// Mean within-imputation variance (NaN if unavailable).
    pub within: f64,
    pub between: f64,
    pub n_imputations: usize,
}

impl Pooled {
    pub fn total_variance(&self) -> f64 {
        let m = self.n_imputations as f64;
        self.within + (1.0 + 1.0 / m) * self.between
    }

    pub fn to_estimate(&self) -> Estimate {
        Estimate::wald(self.estimate, self.total_variance())
    }
}

/// Rubin's rules. `variances` may be empty when only point estimates exist.
pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<Pooled> {
    let m = estimates.len();
    if m == 0 {
        return Err(Error::Invalid("nothing to pool".into()));
    }
    if !variances.is_empty() && variances.len() != m {
        return Err(Error::Invalid("one variance per estimate required".into()));
    }
    let estimate = if m == 1 { estimates[0] } else { estimates.iter().sum::<f64>() / m as f64 };
    let between =
        if m == 1 { 0.0 } else { estimates.iter().map(|e| (e - estimate).powi(2)).sum::<f64>() / (m - 1) as f64 };
    let within = if variances.is_empty() { f64::NAN } else { variances.iter().sum::<f64>() / m as f64 };
    Ok(Pooled { estimate, within, between, n_imputations: m })
}

/// EM on the records with every covariate present, with the response model
/// left out of the likelihood.
pub fn complete_case_fit(dataset: &[Record], spec: &CovariateSpec, config: &FitConfig) -> Result<FitResult> {
    let complete: Vec<Record> = dataset.iter().filter(|r| r.is_complete()).cloned().collect();
    if complete.is_empty() {
        return Err(Error::Invalid("no complete records".into()));
    }
    let cfg = FitConfig { missingness: MissingnessModel::Ignored, ..config.clone() };
    fit_em(&complete, spec, &cfg)
}

/// Indicator coding of every covariate except `skip`, then z, d, y and,
/// optionally, their interactions.
fn imputation_features(spec: &CovariateSpec, levels: &[u16], skip: usize, r: &Record, zdy: bool) -> Vec<f64> {
    let mut f = vec![1.0];
    for (k, c) in spec.covariates().iter().enumerate() {
        if k == skip {
            continue;
        }
        for l in 1..c.levels {
            f.push((levels[k] == l) as u8 as f64);
        }
    }
    let (z, d, y) = (r.z as f64, r.d as f64, r.y as f64);
    f.extend([z, d, y]);
    if zdy {
        f.extend([z * d, z * y, d * y, z * d * y]);
    }
    f
}

/// Draws coefficients from the normal approximation to their posterior.
fn perturb<R: Rng + ?Sized>(rows: &MultinomialRows, coef: &[f64], rng: &mut R) -> Option<Vec<f64>> {
    let cov = rows.covariance(coef)?;
    let chol = cov.cholesky()?;
    let e = DVector::from_iterator(coef.len(), (0..coef.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let shift = chol.l() * e;
    let out: Vec<f64> = coef.iter().zip(shift.iter()).map(|(c, s)| c + s).collect();
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Empirical distribution of covariate `k` among records observing it,
/// within each cell of the fully observed covariates (0.5 pseudo-count per
/// level; the overall marginal when a stratum has no observed values).
fn stratum_frequencies(dataset: &[Record], spec: &CovariateSpec, k: usize) -> BTreeMap<Vec<u16>, Vec<f64>> {
    let levels = spec.covariates()[k].levels as usize;
    let nf = spec.n_full();
    let mut out: BTreeMap<Vec<u16>, Vec<f64>> = BTreeMap::new();
    let mut overall = vec![0.5; levels];
    for r in dataset {
        if let Some(v) = r.x[k] {
            let key: Vec<u16> = r.x[..nf].iter().map(|v| v.expect("fully observed")).collect();
            out.entry(key).or_insert_with(|| vec![0.5; levels])[v as usize] += 1.0;
            overall[v as usize] += 1.0;
        }
    }
    out.insert(vec![u16::MAX], overall);
    out
}

/// One completed dataset: each incomplete covariate is filled in turn from a
/// multinomial-logistic model on the other covariates, z, d and y, fitted to
/// the records that observe it and evaluated at a posterior draw of its
/// coefficients.
fn impute_once(dataset: &[Record], spec: &CovariateSpec, cfg: &ImputationConfig, m: u64) -> Result<Vec<Vec<u16>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(m);
    let nf = spec.n_full();
    let targets: Vec<usize> = (nf..spec.n_covariates()).filter(|&k| dataset.iter().any(|r| r.x[k].is_none())).collect();
    let freqs: Vec<_> = targets.iter().map(|&k| stratum_frequencies(dataset, spec, k)).collect();
    let draw_fallback = |rng: &mut ChaCha8Rng, t: usize, r: &Record| -> u16 {
        let key: Vec<u16> = r.x[..nf].iter().map(|v| v.expect("fully observed")).collect();
        let f = freqs[t].get(&key).unwrap_or(&freqs[t][&vec![u16::MAX]]);
        WeightedIndex::new(f).expect("positive weights").sample(rng) as u16
    };
    let mut filled: Vec<Vec<u16>> = dataset.iter().map(|r| r.x.iter().map(|v| v.unwrap_or(0)).collect()).collect();
    for (i, r) in dataset.iter().enumerate() {
        for (t, &k) in targets.iter().enumerate() {
            if r.x[k].is_none() {
                filled[i][k] = draw_fallback(&mut rng, t, r);
            }
        }
    }
    for _ in 0..cfg.n_cycles {
        for (t, &k) in targets.iter().enumerate() {
            let cats = spec.covariates()[k].levels as usize;
            let mut agg: BTreeMap<Vec<u64>, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for (i, r) in dataset.iter().enumerate() {
                if let Some(v) = r.x[k] {
                    let f = imputation_features(spec, &filled[i], k, r, cfg.zdy_interactions);
                    let key: Vec<u64> = f.iter().map(|v| v.to_bits()).collect();
                    agg.entry(key).or_insert_with(|| (f, vec![0.0; cats])).1[v as usize] += 1.0;
                }
            }
            let dim = 1
                + spec
                    .covariates()
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .map(|(_, c)| c.levels as usize - 1)
                    .sum::<usize>()
                + if cfg.zdy_interactions { 7 } else { 3 };
            let mut rows = MultinomialRows::new(dim, cats);
            for (f, n) in agg.values() {
                rows.push(f, n);
            }
            let fit = fit_multinomial(&rows, &vec![0.0; dim * (cats - 1)], NewtonOptions::default());
            let coef = if fit.converged && fit.coef.iter().all(|v| v.is_finite()) {
                perturb(&rows, &fit.coef, &mut rng)
            } else {
                None
            };
            for (i, r) in dataset.iter().enumerate() {
                if r.x[k].is_some() {
                    continue;
                }
                filled[i][k] = match &coef {
                    Some(c) => {
                        let f = imputation_features(spec, &filled[i], k, r, cfg.zdy_interactions);
                        let p = rows.probabilities(c, &f);
                        WeightedIndex::new(&p)
                            .map(|w| w.sample(&mut rng) as u16)
                            .unwrap_or_else(|_| draw_fallback(&mut rng, t, r))
                    }
                    None => draw_fallback(&mut rng, t, r),
                };
            }
        }
    }
    Ok(filled)
}

/// Completed copies of `dataset`. A dataset with no missing values is
/// returned once, unchanged.
pub fn impute_datasets(dataset: &[Record], spec: &CovariateSpec, cfg: &ImputationConfig) -> Result<Vec<Vec<Record>>> {
    cfg.validate()?;
    for (index, r) in dataset.iter().enumerate() {
        r.validate(spec).map_err(|message| Error::Record { index, message })?;
    }
    if dataset.iter().all(Record::is_complete) {
        return Ok(vec![dataset.to_vec()]);
    }
    (0..cfg.n_imputations as u64)
        .into_par_iter()
        .map(|m| {
            let filled = impute_once(dataset, spec, cfg, m)?;
            Ok(dataset
                .iter()
                .zip(filled)
                .map(|(r, x)| Record::new(x.into_iter().map(Some).collect(), r.z, r.d, r.y))
                .collect())
        })
        .collect()
}

/// CACE per requested cell from EM fits to each completed dataset, pooled by
/// Rubin's rules. EM gives no within-imputation variance, so intervals are NaN.
pub fn mar_impute_fit(
    dataset: &[Record],
    spec: &CovariateSpec,
    config: &FitConfig,
    impute: &ImputationConfig,
    cells: &[Vec<u16>],
) -> Result<Vec<Pooled>> {
    let xs: Vec<Vec<f64>> =
        cells.iter().map(|c| spec.cell_index(c).map(|i| spec.design(i).to_vec())).collect::<Result<_>>()?;
    let cfg = FitConfig { missingness: MissingnessModel::Ignored, ..config.clone() };
    let mut per_cell = vec![Vec::new(); cells.len()];
    for data in impute_datasets(dataset, spec, impute)? {
        let fit = fit_em(&data, spec, &cfg)?;
        for (k, x) in xs.iter().enumerate() {
            per_cell[k].push(cace(&fit.params, x)?);
        }
    }
    per_cell.iter().map(|e| rubin_pool(e, &[])).collect()
}

/// Difference in outcome rates between treated and untreated records.
pub fn unadjusted_difference(dataset: &[Record]) -> Result<Estimate> {
    let (mut n, mut s) = ([0.0f64; 2], [0.0f64; 2]);
    for r in dataset {
        n[r.d as usize] += 1.0;
        s[r.d as usize] += r.y as f64;
    }
    arm_difference(n, s).map(|(e, v)| Estimate::wald(e, v))
}

/// Mean difference and its binomial variance from per-arm counts and sums.
fn arm_difference(n: [f64; 2], s: [f64; 2]) -> Result<(f64, f64)> {
    if n[0] == 0.0 || n[1] == 0.0 {
        return Err(Error::Invalid("both treatment arms must be nonempty".into()));
    }
    let p1 = s[1] / n[1];
    let p0 = s[0] / n[0];
    Ok((p1 - p0, p1 * (1.0 - p1) / n[1] + p0 * (1.0 - p0) / n[0]))
}

fn complete_levels(r: &Record) -> Vec<u16> {
    r.x.iter().map(|v| v.expect("completed record")).collect()
}

/// Logistic outcome regression on treatment and covariates, standardized over
/// the empirical covariate distribution. Returns estimate and delta-method variance.
pub fn standardized_effect(data: &[Record], spec: &CovariateSpec) -> Result<(f64, f64)> {
    let p = spec.dim() + 1;
    let mut agg: BTreeMap<(usize, u8), [f64; 2]> = BTreeMap::new();
    for r in data {
        let cell = spec.cell_index(&complete_levels(r))?;
        agg.entry((cell, r.d)).or_default()[r.y as usize] += 1.0;
    }
    let feat = |cell: usize, d: u8| {
        let mut f = vec![1.0, d as f64];
        f.extend_from_slice(&spec.design(cell)[1..]);
        f
    };
    let mut rows = BinomialRows::new(p);
    for (&(cell, d), n) in &agg {
        rows.push(&feat(cell, d), 0.0, n[1], n[0]);
    }
    let fit = fit_binomial(&rows, &vec![0.0; p], NewtonOptions::default());
    if !fit.converged || fit.coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("outcome regression did not converge".into()));
    }
    let mut cell_n: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(cell, _), n) in &agg {
        *cell_n.entry(cell).or_default() += n[0] + n[1];
    }
    let total = data.len() as f64;
    let mut est = 0.0;
    let mut grad = vec![0.0; p];
    for (&cell, &n) in &cell_n {
        let (f1, f0) = (feat(cell, 1), feat(cell, 0));
        let (m1, m0) = (logistic(dot(&fit.coef, &f1)), logistic(dot(&fit.coef, &f0)));
        est += n * (m1 - m0);
        for a in 0..p {
            grad[a] += n * (m1 * (1.0 - m1) * f1[a] - m0 * (1.0 - m0) * f0[a]);
        }
    }
    est /= total;
    grad.iter_mut().for_each(|g| *g /= total);
    let var = match rows.covariance(&fit.coef) {
        Some(cov) => {
            let g = DVector::from_vec(grad);
            (g.transpose() * cov * &g)[(0, 0)]
        }
        None => f64::NAN,
    };
    Ok((est, var))
}

/// Regression standardization on each imputed dataset, pooled by Rubin's rules.
pub fn regression_adjusted(dataset: &[Record], spec: &CovariateSpec, impute: &ImputationConfig) -> Result<Estimate> {
    let (est, var): (Vec<f64>, Vec<f64>) = impute_datasets(dataset, spec, impute)?
        .iter()
        .map(|d| standardized_effect(d, spec))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(rubin_pool(&est, &var)?.to_estimate())
}

/// Fitted `P(D = 1 | x)` per record from a logistic model on the covariates.
pub fn propensity_scores(data: &[Record], spec: &CovariateSpec) -> Result<Vec<f64>> {
    let cells: Vec<usize> = data.iter().map(|r| spec.cell_index(&complete_levels(r))).collect::<Result<_>>()?;
    let mut agg: BTreeMap<usize, [f64; 2]> = BTreeMap::new();
    for (r, &c) in data.iter().zip(&cells) {
        agg.entry(c).or_default()[r.d as usize] += 1.0;
    }
    let mut rows = BinomialRows::new(spec.dim());
    for (&c, n) in &agg {
        rows.push(spec.design(c), 0.0, n[1], n[0]);
    }
    let fit = fit_binomial(&rows, &vec![0.0; spec.dim()], NewtonOptions::default());
    if fit.coef.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("propensity model did not converge".into()));
    }
    Ok(cells.iter().map(|&c| logistic(dot(&fit.coef, spec.design(c)))).collect())
}

/// Subclass of each score: cut points are the `k/K` empirical quantiles and a
/// score equal to a cut point goes to the lower subclass.
pub fn subclass_of(scores: &[f64], n_subclasses: usize) -> Vec<usize> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let cuts: Vec<f64> = (1..n_subclasses).map(|k| sorted[((k * n).div_ceil(n_subclasses)).max(1) - 1]).collect();
    scores.iter().map(|s| cuts.iter().filter(|&&c| *s > c).count()).collect()
}

/// Effect and variance from subclass-size-weighted within-subclass differences.
pub fn subclassified_effect(data: &[Record], subclass: &[usize], n_subclasses: usize) -> Result<(f64, f64)> {
    let mut n = vec![[0.0f64; 2]; n_subclasses];
    let mut s = vec![[0.0f64; 2]; n_subclasses];
    for (r, &k) in data.iter().zip(subclass) {
        n[k][r.d as usize] += 1.0;
        s[k][r.d as usize] += r.y as f64;
    }
    let total = data.len() as f64;
    let (mut est, mut var) = (0.0, 0.0);
    for k in 0..n_subclasses {
        let size = n[k][0] + n[k][1];
        if size == 0.0 {
            continue;
        }
        let (e, v) = arm_difference(n[k], s[k])
            .map_err(|_| Error::Invalid(format!("propensity subclass {} lacks a treatment arm", k + 1)))?;
        if size == total {
            return Ok((e, v));
        }
        let w = size / total;
        est += w * e;
        var += w * w * v;
    }
    Ok((est, var))
}

/// Propensity-score subclassification on each imputed dataset, pooled by Rubin's rules.
pub fn propensity_subclassification(
    dataset: &[Record],
    spec: &CovariateSpec,
    impute: &ImputationConfig,
    n_subclasses: usize,
) -> Result<Estimate> {
    if n_subclasses == 0 {
        return Err(Error::Invalid("n_subclasses must be at least 1".into()));
    }
    let mut est = Vec::new();
    let mut var = Vec::new();
    for data in impute_datasets(dataset, spec, impute)? {
        let scores = propensity_scores(&data, spec)?;
        let sub = subclass_of(&scores, n_subclasses);
        let (e, v) = subclassified_effect(&data, &sub, n_subclasses)?;
        est.push(e);
        var.push(v);
    }
    Ok(rubin_pool(&est, &var)?.to_estimate())
}
