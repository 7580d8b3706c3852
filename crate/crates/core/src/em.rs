//! EM estimation of the IV mixture model with nonignorably missing covariates.
//!
//! The observed data are tabulated by response pattern into strata
//! `(pattern, observed covariate values, d, z, y)`. The E-step spreads each
//! stratum count over its latent support (compliance classes consistent with
//! `(d, z)`, levels of the missing covariates and, for the sensitivity model,
//! the binary confounder) in proportion to the joint cell probabilities. The
//! M-step refits every factor of the joint law by weighted maximum likelihood
//! on the expected complete-data counts.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_binomial, fit_multinomial, BinomialRows, MultinomialRows, NewtonOptions};
use crate::model::{dot, logistic};
use crate::model::{ComplianceClass, CovariateSpec, ParamSet, Record};
use crate::sensitivity::SensitivityParams;

use ComplianceClass::{AlwaysTaker, Complier, NeverTaker};

/// Which response model enters the likelihood.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingnessModel {
    /// Response indicators are left out of the likelihood (complete-case and
    /// imputed-data fits; missing covariates are integrated out under MAR).
    Ignored,
    /// Logistic in the fully observed covariates, the outcome, and the
    /// instrument for compliers.
    #[default]
    Additive,
    /// As `Additive` plus an outcome-by-instrument term for compliers, which
    /// saturates the single-binary-covariate response model.
    ComplierInteraction,
}

/// EM and Newton settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_em_iters: usize,
    pub loglik_tol: f64,
    pub param_tol: f64,
    pub newton_max_iters: usize,
    pub ridge: f64,
    pub init_seed: u64,
    pub n_restarts: usize,
    pub missingness: MissingnessModel,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_em_iters: 2000,
            loglik_tol: 1e-8,
            param_tol: 1e-6,
            newton_max_iters: 50,
            ridge: 1e-8,
            init_seed: 0,
            n_restarts: 5,
            missingness: MissingnessModel::Additive,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_em_iters == 0 || self.newton_max_iters == 0 || self.n_restarts == 0 {
            return Err(Error::Invalid("iteration caps and restart count must be at least 1".into()));
        }
        if !(self.loglik_tol > 0.0 && self.param_tol > 0.0 && self.ridge > 0.0) {
            return Err(Error::Invalid("tolerances and ridge must be positive".into()));
        }
        Ok(())
    }

    fn newton(&self) -> NewtonOptions {
        NewtonOptions { max_iters: self.newton_max_iters, ridge: self.ridge, tol: 1e-12 }
    }
}

/// Compliance classes consistent with observed treatment `d` under instrument `z`.
pub fn latent_support(d: u8, z: u8) -> &'static [ComplianceClass] {
    match (d, z) {
        (1, 0) => &[AlwaysTaker],
        (0, 1) => &[NeverTaker],
        (1, _) => &[AlwaysTaker, Complier],
        _ => &[NeverTaker, Complier],
    }
}

/// Observed counts split by response pattern.
///
/// Pattern bit `j` is set when partially observed covariate `j` is present;
/// with two partially observed covariates the four tables are the
/// both-present, first-missing, second-missing and both-missing counts.
/// Each table is indexed by the levels of the covariates present in that
/// pattern and by `(d, z, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedCounts {
    spec: CovariateSpec,
    tables: Vec<Vec<f64>>,
    total: f64,
}

impl ObservedCounts {
    pub fn new(spec: &CovariateSpec) -> Self {
        let tables = (0..spec.n_patterns() as u32).map(|pat| vec![0.0; present_cells(spec, pat) * 8]).collect();
        Self { spec: spec.clone(), tables, total: 0.0 }
    }

    pub fn spec(&self) -> &CovariateSpec {
        &self.spec
    }

    fn offset(&self, x: &[Option<u16>], d: u8, z: u8, y: u8) -> usize {
        let mut idx = 0;
        for (k, c) in self.spec.covariates().iter().enumerate() {
            if let Some(l) = x[k] {
                idx = idx * c.levels as usize + l as usize;
            }
        }
        idx * 8 + (d as usize) * 4 + (z as usize) * 2 + y as usize
    }

    /// Adds `weight` copies of a record that has already been validated.
    pub fn add(&mut self, record: &Record, weight: f64) {
        let pat = record.pattern(&self.spec);
        let off = self.offset(&record.x, record.d, record.z, record.y);
        self.tables[pat as usize][off] += weight;
        self.total += weight;
    }

    /// Count for observed values `x` (`None` where missing).
    pub fn count(&self, x: &[Option<u16>], d: u8, z: u8, y: u8) -> f64 {
        let rec = Record::new(x.to_vec(), z, d, y);
        if rec.validate(&self.spec).is_err() {
            return 0.0;
        }
        let pat = rec.pattern(&self.spec);
        self.tables[pat as usize][self.offset(x, d, z, y)]
    }

    pub fn pattern_total(&self, pattern: u32) -> f64 {
        self.tables.get(pattern as usize).map_or(0.0, |t| t.iter().sum())
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    /// Nonzero strata in deterministic order.
    pub fn strata(&self) -> Vec<Stratum> {
        let spec = &self.spec;
        let mut out = Vec::new();
        for (pat, table) in self.tables.iter().enumerate() {
            let pat = pat as u32;
            let present: Vec<usize> = (0..spec.n_covariates())
                .filter(|&k| k < spec.n_full() || pat & (1 << (k - spec.n_full())) != 0)
                .collect();
            for (off, &count) in table.iter().enumerate() {
                if count <= 0.0 {
                    continue;
                }
                let (mut rest, dzy) = (off / 8, off % 8);
                let mut x = vec![None; spec.n_covariates()];
                for &k in present.iter().rev() {
                    let q = spec.covariates()[k].levels as usize;
                    x[k] = Some((rest % q) as u16);
                    rest /= q;
                }
                out.push(Stratum {
                    pattern: pat,
                    x,
                    d: (dzy / 4) as u8,
                    z: ((dzy / 2) % 2) as u8,
                    y: (dzy % 2) as u8,
                    count,
                });
            }
        }
        out
    }
}

fn present_cells(spec: &CovariateSpec, pattern: u32) -> usize {
    spec.covariates()
        .iter()
        .enumerate()
        .filter(|(k, _)| *k < spec.n_full() || pattern & (1 << (k - spec.n_full())) != 0)
        .map(|(_, c)| c.levels as usize)
        .product()
}

/// One observed stratum.
#[derive(Clone, Debug, PartialEq)]
pub struct Stratum {
    pub pattern: u32,
    pub x: Vec<Option<u16>>,
    pub d: u8,
    pub z: u8,
    pub y: u8,
    pub count: f64,
}

impl Stratum {
    fn describe(&self) -> String {
        format!("pattern={:#b} x={:?} d={} z={} y={}", self.pattern, self.x, self.d, self.z, self.y)
    }

    /// Full cells consistent with the observed covariate values.
    pub fn candidate_cells(&self, spec: &CovariateSpec) -> Vec<usize> {
        let mut cells = vec![0usize];
        for (k, c) in spec.covariates().iter().enumerate() {
            let s = spec.stride(k);
            cells = match self.x[k] {
                Some(l) => cells.into_iter().map(|b| b + l as usize * s).collect(),
                None => cells.into_iter().flat_map(|b| (0..c.levels as usize).map(move |l| b + l * s)).collect(),
            };
        }
        cells
    }
}

/// Tabulates records by response pattern.
pub fn tabulate_observed(dataset: &[Record], spec: &CovariateSpec) -> Result<ObservedCounts> {
    let mut counts = ObservedCounts::new(spec);
    for (index, rec) in dataset.iter().enumerate() {
        rec.validate(spec).map_err(|message| Error::Record { index, message })?;
        counts.add(rec, 1.0);
    }
    Ok(counts)
}

/// Expected complete-data counts indexed by `(pattern, cell, q, u, z, y)`.
///
/// `q` is the binary confounder of the sensitivity model and has a single
/// level otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct CellExpectations {
    n_patterns: usize,
    n_cells: usize,
    n_q: usize,
    data: Vec<f64>,
}

impl CellExpectations {
    pub fn new(n_patterns: usize, n_cells: usize, n_q: usize) -> Self {
        Self { n_patterns, n_cells, n_q, data: vec![0.0; n_patterns * n_cells * n_q * 12] }
    }

    #[inline]
    fn idx(&self, pattern: usize, cell: usize, q: usize, u: usize, z: usize, y: usize) -> usize {
        ((((pattern * self.n_cells + cell) * self.n_q + q) * 3 + u) * 2 + z) * 2 + y
    }

    pub fn n_patterns(&self) -> usize {
        self.n_patterns
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    /// Expected count summed over the confounder levels.
    pub fn get(&self, pattern: u32, cell: usize, u: ComplianceClass, z: u8, y: u8) -> f64 {
        (0..self.n_q).map(|q| self.get_q(pattern, cell, q, u, z, y)).sum()
    }

    pub fn get_q(&self, pattern: u32, cell: usize, q: usize, u: ComplianceClass, z: u8, y: u8) -> f64 {
        self.data[self.idx(pattern as usize, cell, q, u.index(), z as usize, y as usize)]
    }

    /// Sets one entry; intended for constructing expectations by hand.
    pub fn set(&mut self, pattern: u32, cell: usize, u: ComplianceClass, z: u8, y: u8, value: f64) {
        let i = self.idx(pattern as usize, cell, 0, u.index(), z as usize, y as usize);
        self.data[i] = value;
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mass per covariate cell.
    pub fn cell_marginal(&self) -> Vec<f64> {
        let block = self.n_q * 12;
        let mut out = vec![0.0; self.n_cells];
        for p in 0..self.n_patterns {
            for (cell, o) in out.iter_mut().enumerate() {
                let start = (p * self.n_cells + cell) * block;
                *o += self.data[start..start + block].iter().sum::<f64>();
            }
        }
        out
    }
}

/// Output of a full EM run.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ParamSet,
    /// Observed-data log-likelihood at each iterate.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub final_expectations: CellExpectations,
    /// Sub-model fits that hit the Newton cap on the final M-step.
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// How to start an EM run.
#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// `n_restarts` random starts; the best final log-likelihood wins.
    Random,
    /// A single run from the given parameters.
    Warm(&'a ParamSet),
}

/// Strata with their candidate cells, built once per fit.
struct StrataIndex {
    strata: Vec<Stratum>,
    candidates: Vec<Vec<usize>>,
}

impl StrataIndex {
    fn new(counts: &ObservedCounts) -> Self {
        let strata = counts.strata();
        let candidates = strata.iter().map(|s| s.candidate_cells(&counts.spec)).collect();
        Self { strata, candidates }
    }
}

/// Per-iteration factor tables.
struct Factors {
    n_q: usize,
    /// `w · P(z|x) · P(u|x)` by `[cell][u][z]`.
    base: Vec<[[f64; 2]; 3]>,
    /// `P(y | u, z, x, q)` by `[(cell * n_q + q) * 12 + u*4 + z*2 + y]`.
    outcome: Vec<f64>,
    /// `P(R_j = r | u, z, y, x_obs, q)` by `[((((obs * n_j + j) * n_q + q) * 12 + u*4 + z*2 + y) * 2 + r]`.
    response: Vec<f64>,
    n_j: usize,
    prior_q: [f64; 2],
}

/// The model being fitted: covariate lattice, response-model form and an
/// optional fixed latent confounder.
#[derive(Clone, Copy, Debug)]
pub struct EmModel<'a> {
    spec: &'a CovariateSpec,
    missingness: MissingnessModel,
    confounder: Option<&'a SensitivityParams>,
}

impl<'a> EmModel<'a> {
    pub fn new(spec: &'a CovariateSpec, missingness: MissingnessModel) -> Self {
        Self { spec, missingness, confounder: None }
    }

    pub fn with_confounder(mut self, sens: &'a SensitivityParams) -> Self {
        self.confounder = Some(sens);
        self
    }

    pub fn spec(&self) -> &CovariateSpec {
        self.spec
    }

    fn n_q(&self) -> usize {
        if self.confounder.is_some() {
            2
        } else {
            1
        }
    }

    fn outcome_shift(&self, u: ComplianceClass, z: u8, q: usize) -> f64 {
        match self.confounder {
            Some(s) if q == 1 => s.xi.get(u, z),
            _ => 0.0,
        }
    }

    fn response_shift(&self, j: usize, u: ComplianceClass, q: usize) -> f64 {
        match self.confounder {
            Some(s) if q == 1 => s.kappa[j][u.index()],
            _ => 0.0,
        }
    }

    fn models_response(&self) -> bool {
        self.missingness != MissingnessModel::Ignored
    }

    fn factors(&self, params: &ParamSet) -> Factors {
        let spec = self.spec;
        let n_q = self.n_q();
        let n_j = if self.models_response() { spec.n_partial() } else { 0 };
        let mut base = Vec::with_capacity(spec.n_cells());
        let mut outcome = vec![0.0; spec.n_cells() * n_q * 12];
        for cell in 0..spec.n_cells() {
            let x = spec.design(cell);
            let eta_z = dot(&params.alpha, x);
            let pz = [logistic(-eta_z), logistic(eta_z)];
            let pu = crate::model::compliance_probs(params, x);
            let mut b = [[0.0; 2]; 3];
            for u in 0..3 {
                for z in 0..2 {
                    b[u][z] = params.w[cell] * pz[z] * pu[u];
                }
            }
            base.push(b);
            for q in 0..n_q {
                for u in ComplianceClass::ALL {
                    for z in 0..2u8 {
                        let eta = dot(params.beta.get(u, z), x) + self.outcome_shift(u, z, q);
                        let i = (cell * n_q + q) * 12 + u.index() * 4 + z as usize * 2;
                        outcome[i] = logistic(-eta);
                        outcome[i + 1] = logistic(eta);
                    }
                }
            }
        }
        let n_obs = spec.n_obs_cells();
        let mut response = vec![0.0; n_obs * n_j * n_q * 24];
        for obs in 0..n_obs {
            let xo = spec.obs_design(obs);
            for j in 0..n_j {
                let r = &params.response[j];
                for q in 0..n_q {
                    for u in ComplianceClass::ALL {
                        let shift = self.response_shift(j, u, q);
                        for z in 0..2u8 {
                            for y in 0..2u8 {
                                let eta = r.linear(u, z, y, xo) + shift;
                                let i =
                                    ((((obs * n_j + j) * n_q + q) * 12) + u.index() * 4 + z as usize * 2 + y as usize)
                                        * 2;
                                response[i] = logistic(-eta);
                                response[i + 1] = logistic(eta);
                            }
                        }
                    }
                }
            }
        }
        let prior_q = match self.confounder {
            Some(s) => [1.0 - s.pi, s.pi],
            None => [1.0, 0.0],
        };
        Factors { n_q, base, outcome, response, n_j, prior_q }
    }

    #[inline]
    fn joint(&self, f: &Factors, pattern: u32, cell: usize, q: usize, u: usize, z: usize, y: usize) -> f64 {
        let mut p = f.base[cell][u][z] * f.prior_q[q] * f.outcome[(cell * f.n_q + q) * 12 + u * 4 + z * 2 + y];
        if f.n_j > 0 {
            let obs = self.spec.obs_cell_of(cell);
            for j in 0..f.n_j {
                let r = ((pattern >> j) & 1) as usize;
                let i = ((((obs * f.n_j + j) * f.n_q + q) * 12) + u * 4 + z * 2 + y) * 2 + r;
                p *= f.response[i];
            }
        }
        p
    }

    /// Joint probability of a complete cell under this model, including the
    /// confounder level `q` when one is attached.
    pub fn joint_prob(
        &self,
        params: &ParamSet,
        pattern: u32,
        cell: usize,
        q: usize,
        u: ComplianceClass,
        z: u8,
        y: u8,
    ) -> f64 {
        let f = self.factors(params);
        self.joint(&f, pattern, cell, q, u.index(), z as usize, y as usize)
    }

    fn e_step_indexed(
        &self,
        index: &StrataIndex,
        params: &ParamSet,
        want_expectations: bool,
    ) -> Result<(Option<CellExpectations>, f64)> {
        let f = self.factors(params);
        let n_q = f.n_q;
        let mut exp =
            want_expectations.then(|| CellExpectations::new(self.spec.n_patterns(), self.spec.n_cells(), n_q));
        let mut loglik = 0.0;
        let mut scratch = Vec::new();
        for (s, cands) in index.strata.iter().zip(&index.candidates) {
            let support = latent_support(s.d, s.z);
            let (z, y) = (s.z as usize, s.y as usize);
            scratch.clear();
            let mut norm = 0.0;
            for q in 0..n_q {
                for &cell in cands {
                    for u in support {
                        let p = self.joint(&f, s.pattern, cell, q, u.index(), z, y);
                        scratch.push(p);
                        norm += p;
                    }
                }
            }
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::ZeroProbabilityStratum { stratum: s.describe() });
            }
            loglik += s.count * norm.ln();
            if let Some(exp) = exp.as_mut() {
                let scale = s.count / norm;
                let mut k = 0;
                for q in 0..n_q {
                    for &cell in cands {
                        for u in support {
                            let i = exp.idx(s.pattern as usize, cell, q, u.index(), z, y);
                            exp.data[i] += scratch[k] * scale;
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok((exp, loglik))
    }

    /// Expected complete-data counts given the observed counts.
    pub fn e_step(&self, params: &ParamSet, counts: &ObservedCounts) -> Result<CellExpectations> {
        let index = StrataIndex::new(counts);
        Ok(self.e_step_indexed(&index, params, true)?.0.expect("requested"))
    }

    /// Observed-data log-likelihood.
    pub fn observed_loglik(&self, params: &ParamSet, counts: &ObservedCounts) -> Result<f64> {
        let index = StrataIndex::new(counts);
        Ok(self.e_step_indexed(&index, params, false)?.1)
    }

    /// Weighted maximum-likelihood update of every factor, warm-started from `prev`.
    pub fn m_step_from(
        &self,
        expect: &CellExpectations,
        prev: &ParamSet,
        config: &FitConfig,
    ) -> Result<(ParamSet, Vec<String>)> {
        let spec = self.spec;
        let total = expect.total();
        if !(total > 0.0) {
            return Err(Error::Invalid("expectations have no mass".into()));
        }
        let n_q = expect.n_q;
        let opts = config.newton();
        let mut out = prev.clone();
        let mut warnings = Vec::new();

        // aggregate over response patterns: [cell][q][u][z][y]
        let mut agg = vec![0.0; spec.n_cells() * n_q * 12];
        for p in 0..expect.n_patterns {
            let start = p * spec.n_cells() * n_q * 12;
            for (a, v) in agg.iter_mut().zip(&expect.data[start..start + spec.n_cells() * n_q * 12]) {
                *a += v;
            }
        }
        let at =
            |cell: usize, q: usize, u: usize, z: usize, y: usize| agg[(((cell * n_q + q) * 3 + u) * 2 + z) * 2 + y];

        // covariate cells
        let marg = expect.cell_marginal();
        out.w = marg.iter().map(|m| m / total).collect();

        // instrument
        let mut rows = BinomialRows::new(spec.dim());
        for cell in 0..spec.n_cells() {
            let mut w = [0.0; 2];
            for q in 0..n_q {
                for u in 0..3 {
                    for z in 0..2 {
                        w[z] += at(cell, q, u, z, 0) + at(cell, q, u, z, 1);
                    }
                }
            }
            rows.push(spec.design(cell), 0.0, w[1], w[0]);
        }
        let fit = fit_binomial(&rows, &prev.alpha, opts);
        if !fit.converged {
            warnings.push("instrument model".into());
        }
        out.alpha = fit.coef;

        // compliance (reference never-takers; blocks ordered complier, always-taker)
        let mut rows = MultinomialRows::new(spec.dim(), 3);
        for cell in 0..spec.n_cells() {
            let mut n = [0.0; 3];
            for q in 0..n_q {
                for (u, nu) in n.iter_mut().enumerate() {
                    for z in 0..2 {
                        *nu += at(cell, q, u, z, 0) + at(cell, q, u, z, 1);
                    }
                }
            }
            rows.push(spec.design(cell), &n);
        }
        let mut start = prev.delta_c.clone();
        start.extend(&prev.delta_a);
        let fit = fit_multinomial(&rows, &start, opts);
        if !fit.converged {
            warnings.push("compliance model".into());
        }
        let p = spec.dim();
        out.delta_c = fit.coef[..p].to_vec();
        out.delta_a = fit.coef[p..].to_vec();

        // outcome: never/always pooled over z, compliers per arm
        let slices: [(ComplianceClass, &[usize]); 4] =
            [(NeverTaker, &[0, 1]), (AlwaysTaker, &[0, 1]), (Complier, &[0]), (Complier, &[1])];
        for (k, (u, zs)) in slices.iter().enumerate() {
            let mut rows = BinomialRows::new(p);
            for cell in 0..spec.n_cells() {
                for q in 0..n_q {
                    for &z in *zs {
                        let off = self.outcome_shift(*u, z as u8, q);
                        rows.push(spec.design(cell), off, at(cell, q, u.index(), z, 1), at(cell, q, u.index(), z, 0));
                    }
                }
            }
            let start = match k {
                0 => &prev.beta.never,
                1 => &prev.beta.always,
                2 => &prev.beta.complier0,
                _ => &prev.beta.complier1,
            };
            let fit = fit_binomial(&rows, start, opts);
            if !fit.converged {
                warnings.push(format!("outcome model ({}, z={:?})", u.short_name(), zs));
            }
            match k {
                0 => out.beta.never = fit.coef,
                1 => out.beta.always = fit.coef,
                2 => out.beta.complier0 = fit.coef,
                _ => out.beta.complier1 = fit.coef,
            }
        }

        if self.models_response() {
            self.m_step_response(expect, prev, &mut out, opts, &mut warnings);
        }
        Ok((out, warnings))
    }

    fn m_step_response(
        &self,
        expect: &CellExpectations,
        prev: &ParamSet,
        out: &mut ParamSet,
        opts: NewtonOptions,
        warnings: &mut Vec<String>,
    ) {
        let spec = self.spec;
        let n_q = expect.n_q;
        let n_obs = spec.n_obs_cells();
        let po = spec.obs_dim();
        let interaction = self.missingness == MissingnessModel::ComplierInteraction;
        for j in 0..spec.n_partial() {
            // [obs][q][u][z][y][r]
            let mut agg = vec![0.0; n_obs * n_q * 24];
            for pat in 0..expect.n_patterns {
                let r = (pat >> j) & 1;
                for cell in 0..spec.n_cells() {
                    let obs = spec.obs_cell_of(cell);
                    for q in 0..n_q {
                        for u in 0..3 {
                            for z in 0..2 {
                                for y in 0..2 {
                                    let v = expect.data[expect.idx(pat, cell, q, u, z, y)];
                                    agg[((((obs * n_q + q) * 3 + u) * 2 + z) * 2 + y) * 2 + r] += v;
                                }
                            }
                        }
                    }
                }
            }
            let prev_r = &prev.response[j];
            for u in ComplianceClass::ALL {
                let is_c = u == Complier;
                let dim = po + 1 + if is_c { 1 + interaction as usize } else { 0 };
                let mut rows = BinomialRows::new(dim);
                let mut feat = vec![0.0; dim];
                for obs in 0..n_obs {
                    feat[..po].copy_from_slice(spec.obs_design(obs));
                    for q in 0..n_q {
                        let off = self.response_shift(j, u, q);
                        for z in 0..2 {
                            for y in 0..2 {
                                feat[po] = y as f64;
                                if is_c {
                                    feat[po + 1] = z as f64;
                                    if interaction {
                                        feat[po + 2] = (y * z) as f64;
                                    }
                                }
                                let base = ((((obs * n_q + q) * 3 + u.index()) * 2 + z) * 2 + y) * 2;
                                rows.push(&feat, off, agg[base + 1], agg[base]);
                            }
                        }
                    }
                }
                let mut start = prev_r.theta[u.index()].clone();
                start.push(prev_r.gamma[u.index()]);
                if is_c {
                    start.push(prev_r.eta);
                    if interaction {
                        start.push(prev_r.eta_y);
                    }
                }
                let fit = fit_binomial(&rows, &start, opts);
                if !fit.converged {
                    warnings.push(format!("response model (covariate {j}, {})", u.short_name()));
                }
                let r = &mut out.response[j];
                r.theta[u.index()] = fit.coef[..po].to_vec();
                r.gamma[u.index()] = fit.coef[po];
                if is_c {
                    r.eta = fit.coef[po + 1];
                    r.eta_y = if interaction { fit.coef[po + 2] } else { 0.0 };
                }
            }
        }
    }

    /// Initial parameters: random coefficients on (-0.5, 0.5), `w` from the
    /// complete-case cell frequencies with half a pseudo-count per cell.
    pub fn initial_params(&self, counts: &ObservedCounts, seed: u64, restart: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let mut p =
            ParamSet::random(self.spec, &mut rng, 0.5, self.missingness == MissingnessModel::ComplierInteraction);
        let full = self.spec.complete_pattern();
        let mut w = vec![0.5; self.spec.n_cells()];
        for s in counts.strata().iter().filter(|s| s.pattern == full) {
            let levels: Vec<u16> = s.x.iter().map(|v| v.expect("complete")).collect();
            w[self.spec.cell_index(&levels).expect("valid levels")] += s.count;
        }
        let tot: f64 = w.iter().sum();
        p.w = w.into_iter().map(|v| v / tot).collect();
        p
    }

    fn run(&self, index: &StrataIndex, start: ParamSet, config: &FitConfig) -> Result<FitResult> {
        let mut params = start;
        let mut trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        let mut warnings = Vec::new();
        let final_exp;
        loop {
            let (exp, ll) = self.e_step_indexed(index, &params, true)?;
            let exp = exp.expect("requested");
            trace.push(ll);
            if trace.len() >= 2 && (ll - trace[trace.len() - 2]).abs() < config.loglik_tol {
                converged = true;
                final_exp = exp;
                break;
            }
            if iterations >= config.max_em_iters {
                final_exp = exp;
                break;
            }
            let (next, w) = self.m_step_from(&exp, &params, config)?;
            warnings = w;
            iterations += 1;
            let change = next.max_abs_diff(&params);
            params = next;
            if change < config.param_tol {
                let (exp, ll) = self.e_step_indexed(index, &params, true)?;
                trace.push(ll);
                final_exp = exp.expect("requested");
                converged = true;
                break;
            }
        }
        Ok(FitResult { params, loglik_trace: trace, converged, iterations, final_expectations: final_exp, warnings })
    }

    /// Runs EM on tabulated counts.
    pub fn fit_counts(&self, counts: &ObservedCounts, config: &FitConfig, start: Start<'_>) -> Result<FitResult> {
        config.validate()?;
        check_arms(counts)?;
        let index = StrataIndex::new(counts);
        match start {
            Start::Warm(init) => {
                init.validate(self.spec)?;
                self.run(&index, init.clone(), config)
            }
            Start::Random => {
                let mut best: Option<FitResult> = None;
                let mut first_err = None;
                for r in 0..config.n_restarts {
                    let init = self.initial_params(counts, config.init_seed, r as u64);
                    match self.run(&index, init, config) {
                        Ok(fit) => {
                            if best.as_ref().is_none_or(|b| fit.loglik() > b.loglik()) {
                                best = Some(fit);
                            }
                        }
                        Err(e) => {
                            first_err.get_or_insert(e);
                        }
                    }
                }
                best.ok_or_else(|| first_err.expect("at least one restart"))
            }
        }
    }
}

fn check_arms(counts: &ObservedCounts) -> Result<()> {
    let mut z = [0.0; 2];
    let mut d = [0.0; 2];
    for s in counts.strata() {
        z[s.z as usize] += s.count;
        d[s.d as usize] += s.count;
    }
    if z.iter().chain(&d).any(|&v| v <= 0.0) {
        return Err(Error::Invalid("need at least one record in each instrument arm and each treatment arm".into()));
    }
    Ok(())
}

/// E-step under the default response model.
pub fn e_step(spec: &CovariateSpec, params: &ParamSet, counts: &ObservedCounts) -> Result<CellExpectations> {
    EmModel::new(spec, MissingnessModel::Additive).e_step(params, counts)
}

/// M-step from zero coefficients.
pub fn m_step(expect: &CellExpectations, spec: &CovariateSpec, config: &FitConfig) -> Result<ParamSet> {
    let start = ParamSet::zeros(spec);
    Ok(EmModel::new(spec, config.missingness).m_step_from(expect, &start, config)?.0)
}

/// Observed-data log-likelihood under the default response model.
pub fn observed_loglik(spec: &CovariateSpec, params: &ParamSet, counts: &ObservedCounts) -> Result<f64> {
    EmModel::new(spec, MissingnessModel::Additive).observed_loglik(params, counts)
}

/// Tabulates `dataset` and fits the model by EM with random restarts.
pub fn fit_em(dataset: &[Record], spec: &CovariateSpec, config: &FitConfig) -> Result<FitResult> {
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let counts = tabulate_observed(dataset, spec)?;
    EmModel::new(spec, config.missingness).fit_counts(&counts, config, Start::Random)
}

#[cfg(test)]
mod tests;
