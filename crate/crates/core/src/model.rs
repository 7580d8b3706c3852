//! Parameter structures and model probabilities.
//!
//! The joint law of one subject factors as
//!
//! ```text
//! W[x] · P(Z=z | x) · P(U=u | x) · P(Y=y | u, z, x) · Π_j P(R_j = r_j | u, z, y, x_obs)
//! ```
//!
//! where `x` is a cell of the full cross-classification of the categorical
//! covariates, `x_obs` its projection on the fully observed covariates, and the
//! product runs over the partially observed covariates. The IV and outcome
//! factors are binary logistic, the compliance factor is multinomial logistic
//! with never-takers as reference, and each response factor is logistic in
//! `x_obs`, the outcome and (for compliers only) the instrument.
//!
//! Exclusion restrictions are carried by the storage layout: always-takers and
//! never-takers own a single outcome coefficient vector each, and their
//! response models have no instrument coefficient at all.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear predictors are clamped to this magnitude, roughly the logit of 1 − 1e-16.
pub const LOGIT_CLAMP: f64 = 36.7;

#[inline]
pub fn clamp_eta(eta: f64) -> f64 {
    eta.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// Inverse logit with the linear predictor clamped to `±LOGIT_CLAMP`.
#[inline]
pub fn logistic(eta: f64) -> f64 {
    let eta = clamp_eta(eta);
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `log(logistic(eta))`, computed without cancellation.
#[inline]
pub fn log_logistic(eta: f64) -> f64 {
    let eta = clamp_eta(eta);
    if eta >= 0.0 {
        -(-eta).exp().ln_1p()
    } else {
        eta - eta.exp().ln_1p()
    }
}

/// Log-odds of `p`, saturating at `±LOGIT_CLAMP` for probabilities of 0 or 1.
pub fn logit(p: f64) -> f64 {
    if p <= 0.0 {
        -LOGIT_CLAMP
    } else if p >= 1.0 {
        LOGIT_CLAMP
    } else {
        clamp_eta((p / (1.0 - p)).ln())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(coef: &[f64], x: &[f64]) -> Result<()> {
    if coef.len() != x.len() {
        return Err(Error::Dimension { expected: coef.len(), got: x.len() });
    }
    Ok(())
}

/// Latent compliance class. Defiers do not exist under monotonicity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComplianceClass {
    NeverTaker,
    Complier,
    AlwaysTaker,
}

impl ComplianceClass {
    pub const ALL: [ComplianceClass; 3] =
        [ComplianceClass::NeverTaker, ComplianceClass::Complier, ComplianceClass::AlwaysTaker];

    pub fn index(self) -> usize {
        match self {
            ComplianceClass::NeverTaker => 0,
            ComplianceClass::Complier => 1,
            ComplianceClass::AlwaysTaker => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Treatment received under instrument value `z`.
    pub fn treatment(self, z: u8) -> u8 {
        match self {
            ComplianceClass::NeverTaker => 0,
            ComplianceClass::AlwaysTaker => 1,
            ComplianceClass::Complier => z,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            ComplianceClass::NeverTaker => "n",
            ComplianceClass::Complier => "c",
            ComplianceClass::AlwaysTaker => "a",
        }
    }
}

/// How a covariate enters the linear predictors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// One coefficient on the integer level code.
    #[default]
    Ordinal,
    /// Indicator per non-baseline level.
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub levels: u16,
    pub fully_observed: bool,
    /// Code written in data files for the first level.
    pub first_code: i32,
    pub encoding: Encoding,
}

impl Covariate {
    pub fn new(name: impl Into<String>, levels: u16, fully_observed: bool) -> Self {
        Self { name: name.into(), levels, fully_observed, first_code: 1, encoding: Encoding::Ordinal }
    }

    pub fn with_first_code(mut self, code: i32) -> Self {
        self.first_code = code;
        self
    }

    pub fn with_encoding(mut self, encoding: Encoding) -> Self {
        self.encoding = encoding;
        self
    }

    fn width(&self) -> usize {
        match self.encoding {
            Encoding::Ordinal => 1,
            Encoding::Nominal => self.levels as usize - 1,
        }
    }

    fn push_features(&self, level: u16, out: &mut Vec<f64>) {
        match self.encoding {
            Encoding::Ordinal => out.push((self.first_code + level as i32) as f64),
            Encoding::Nominal => {
                for l in 1..self.levels {
                    out.push(if l == level { 1.0 } else { 0.0 });
                }
            }
        }
    }

    /// Level index of a data-file code.
    pub fn level_of_code(&self, code: i64) -> Option<u16> {
        let idx = code - self.first_code as i64;
        (0..self.levels as i64).contains(&idx).then_some(idx as u16)
    }

    pub fn code_of_level(&self, level: u16) -> i64 {
        self.first_code as i64 + level as i64
    }
}

/// Categorical covariates (the intercept is implicit) and the cell lattice
/// they span.
///
/// Cells are numbered in mixed radix with the first covariate most
/// significant. Fully observed covariates come first, so the projection of a
/// cell on the fully observed covariates is `cell / n_partial_cells`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariateSpec {
    covariates: Vec<Covariate>,
    n_full: usize,
    strides: Vec<usize>,
    n_cells: usize,
    n_partial_cells: usize,
    dim: usize,
    obs_dim: usize,
    cell_design: Vec<f64>,
    obs_design: Vec<f64>,
}

impl CovariateSpec {
    pub fn new(covariates: Vec<Covariate>) -> Result<Self> {
        let mut seen_partial = false;
        for (i, c) in covariates.iter().enumerate() {
            if c.levels < 2 {
                return Err(Error::Spec(format!(
                    "covariate '{}' has {} levels; at least 2 required",
                    c.name, c.levels
                )));
            }
            if covariates[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Spec(format!("duplicate covariate name '{}'", c.name)));
            }
            if c.fully_observed && seen_partial {
                return Err(Error::Spec(format!(
                    "fully observed covariate '{}' listed after a partially observed one",
                    c.name
                )));
            }
            seen_partial |= !c.fully_observed;
        }
        let n_full = covariates.iter().take_while(|c| c.fully_observed).count();
        if covariates.len() - n_full > 16 {
            return Err(Error::Spec("at most 16 partially observed covariates".into()));
        }
        let mut strides = vec![0; covariates.len()];
        let mut acc = 1usize;
        for (k, c) in covariates.iter().enumerate().rev() {
            strides[k] = acc;
            acc = acc
                .checked_mul(c.levels as usize)
                .filter(|&n| n <= 1 << 22)
                .ok_or_else(|| Error::Spec("covariate lattice too large".into()))?;
        }
        let n_cells = acc;
        let n_partial_cells: usize = covariates[n_full..].iter().map(|c| c.levels as usize).product();
        let dim = 1 + covariates.iter().map(Covariate::width).sum::<usize>();
        let obs_dim = 1 + covariates[..n_full].iter().map(Covariate::width).sum::<usize>();

        let mut spec = Self {
            covariates,
            n_full,
            strides,
            n_cells,
            n_partial_cells,
            dim,
            obs_dim,
            cell_design: Vec::new(),
            obs_design: Vec::new(),
        };
        let mut cell_design = Vec::with_capacity(n_cells * dim);
        for cell in 0..n_cells {
            let levels = spec.cell_levels(cell);
            cell_design.extend(spec.features(&levels));
        }
        let mut obs_design = Vec::with_capacity(spec.n_obs_cells() * obs_dim);
        for obs in 0..spec.n_obs_cells() {
            let levels = spec.cell_levels(obs * n_partial_cells);
            obs_design.push(1.0);
            for (c, &l) in spec.covariates[..n_full].iter().zip(&levels) {
                c.push_features(l, &mut obs_design);
            }
        }
        spec.cell_design = cell_design;
        spec.obs_design = obs_design;
        Ok(spec)
    }

    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    /// Number of fully observed covariates (excluding the intercept).
    pub fn n_full(&self) -> usize {
        self.n_full
    }

    /// Number of partially observed covariates.
    pub fn n_partial(&self) -> usize {
        self.covariates.len() - self.n_full
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_partial_cells(&self) -> usize {
        self.n_partial_cells
    }

    pub fn n_obs_cells(&self) -> usize {
        self.n_cells / self.n_partial_cells
    }

    /// Number of response patterns over the partially observed covariates.
    pub fn n_patterns(&self) -> usize {
        1 << self.n_partial()
    }

    /// Pattern with every partially observed covariate present.
    pub fn complete_pattern(&self) -> u32 {
        (1u32 << self.n_partial()) - 1
    }

    /// Length of the full covariate vector, intercept included.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Length of the fully observed sub-vector, intercept included.
    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn stride(&self, k: usize) -> usize {
        self.strides[k]
    }

    pub fn cell_index(&self, levels: &[u16]) -> Result<usize> {
        if levels.len() != self.covariates.len() {
            return Err(Error::Index(format!(
                "cell has {} levels, spec has {} covariates",
                levels.len(),
                self.covariates.len()
            )));
        }
        let mut cell = 0;
        for (k, (&l, c)) in levels.iter().zip(&self.covariates).enumerate() {
            if l >= c.levels {
                return Err(Error::Index(format!(
                    "level {l} out of range for covariate '{}' ({} levels)",
                    c.name, c.levels
                )));
            }
            cell += l as usize * self.strides[k];
        }
        Ok(cell)
    }

    pub fn cell_levels(&self, cell: usize) -> Vec<u16> {
        self.covariates.iter().zip(&self.strides).map(|(c, &s)| ((cell / s) % c.levels as usize) as u16).collect()
    }

    #[inline]
    pub fn obs_cell_of(&self, cell: usize) -> usize {
        cell / self.n_partial_cells
    }

    /// Full covariate vector (intercept first) for a cell.
    #[inline]
    pub fn design(&self, cell: usize) -> &[f64] {
        &self.cell_design[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Fully observed covariate vector (intercept first) for a projected cell.
    #[inline]
    pub fn obs_design(&self, obs_cell: usize) -> &[f64] {
        &self.obs_design[obs_cell * self.obs_dim..(obs_cell + 1) * self.obs_dim]
    }

    /// Full covariate vector for explicit levels.
    pub fn features(&self, levels: &[u16]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        out.push(1.0);
        for (c, &l) in self.covariates.iter().zip(levels) {
            c.push_features(l, &mut out);
        }
        out
    }

    /// Names of the design columns, intercept first.
    pub fn term_names(&self) -> Vec<String> {
        let mut out = vec!["intercept".to_string()];
        for c in &self.covariates {
            match c.encoding {
                Encoding::Ordinal => out.push(c.name.clone()),
                Encoding::Nominal => out.extend((1..c.levels).map(|l| format!("{}={}", c.name, c.code_of_level(l)))),
            }
        }
        out
    }

    /// Human-readable label of a cell using data-file codes.
    pub fn cell_label(&self, cell: usize) -> String {
        self.cell_levels(cell)
            .iter()
            .zip(&self.covariates)
            .map(|(&l, c)| format!("{}={}", c.name, c.code_of_level(l)))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// One subject. Covariate values are level indices (0-based), `None` when missing.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub x: Vec<Option<u16>>,
    pub z: u8,
    pub d: u8,
    pub y: u8,
}

impl Record {
    pub fn new(x: Vec<Option<u16>>, z: u8, d: u8, y: u8) -> Self {
        Self { x, z, d, y }
    }

    pub fn is_complete(&self) -> bool {
        self.x.iter().all(Option::is_some)
    }

    pub fn validate(&self, spec: &CovariateSpec) -> std::result::Result<(), String> {
        if self.z > 1 || self.d > 1 || self.y > 1 {
            return Err("z, d and y must be 0 or 1".into());
        }
        if self.x.len() != spec.n_covariates() {
            return Err(format!("record has {} covariates, spec declares {}", self.x.len(), spec.n_covariates()));
        }
        for (v, c) in self.x.iter().zip(spec.covariates()) {
            match v {
                None if c.fully_observed => return Err(format!("fully observed covariate '{}' is missing", c.name)),
                Some(l) if *l >= c.levels => return Err(format!("level {l} out of range for covariate '{}'", c.name)),
                _ => {}
            }
        }
        Ok(())
    }

    /// Response pattern bitmask: bit `j` set when partially observed covariate `j` is present.
    pub fn pattern(&self, spec: &CovariateSpec) -> u32 {
        self.x[spec.n_full()..].iter().enumerate().filter(|(_, v)| v.is_some()).fold(0, |acc, (j, _)| acc | (1 << j))
    }
}

/// Outcome coefficients. Always- and never-takers share one vector across
/// instrument arms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCoefs {
    pub never: Vec<f64>,
    pub always: Vec<f64>,
    pub complier0: Vec<f64>,
    pub complier1: Vec<f64>,
}

impl OutcomeCoefs {
    pub fn get(&self, u: ComplianceClass, z: u8) -> &[f64] {
        match (u, z) {
            (ComplianceClass::NeverTaker, _) => &self.never,
            (ComplianceClass::AlwaysTaker, _) => &self.always,
            (ComplianceClass::Complier, 0) => &self.complier0,
            (ComplianceClass::Complier, _) => &self.complier1,
        }
    }

    pub(crate) fn slices(&self) -> [&Vec<f64>; 4] {
        [&self.never, &self.always, &self.complier0, &self.complier1]
    }
}

/// Response-model coefficients for one partially observed covariate.
///
/// `theta` and `gamma` are indexed by `ComplianceClass::index`. The instrument
/// shift `eta` and the optional outcome-by-instrument term `eta_y` exist only
/// for compliers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseCoefs {
    pub theta: [Vec<f64>; 3],
    pub gamma: [f64; 3],
    pub eta: f64,
    pub eta_y: f64,
}

impl ResponseCoefs {
    #[inline]
    pub fn linear(&self, u: ComplianceClass, z: u8, y: u8, x_obs: &[f64]) -> f64 {
        let k = u.index();
        let mut eta = dot(&self.theta[k], x_obs);
        if y == 1 {
            eta += self.gamma[k];
        }
        if u == ComplianceClass::Complier && z == 1 {
            eta += self.eta;
            if y == 1 {
                eta += self.eta_y;
            }
        }
        eta
    }
}

/// Every model parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    /// Cell probabilities over the full covariate lattice.
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
    pub delta_a: Vec<f64>,
    pub delta_c: Vec<f64>,
    pub beta: OutcomeCoefs,
    /// One entry per partially observed covariate.
    pub response: Vec<ResponseCoefs>,
}

impl ParamSet {
    /// All coefficients zero, uniform cell probabilities.
    pub fn zeros(spec: &CovariateSpec) -> Self {
        let p = spec.dim();
        let po = spec.obs_dim();
        let zero = || vec![0.0; p];
        Self {
            w: vec![1.0 / spec.n_cells() as f64; spec.n_cells()],
            alpha: zero(),
            delta_a: zero(),
            delta_c: zero(),
            beta: OutcomeCoefs { never: zero(), always: zero(), complier0: zero(), complier1: zero() },
            response: (0..spec.n_partial())
                .map(|_| ResponseCoefs {
                    theta: [vec![0.0; po], vec![0.0; po], vec![0.0; po]],
                    gamma: [0.0; 3],
                    eta: 0.0,
                    eta_y: 0.0,
                })
                .collect(),
        }
    }

    /// Coefficients uniform on `(-scale, scale)`; `w` left uniform.
    /// `eta_y` is randomized only when `with_interaction` is set.
    pub fn random<R: Rng + ?Sized>(spec: &CovariateSpec, rng: &mut R, scale: f64, with_interaction: bool) -> Self {
        let mut p = Self::zeros(spec);
        let mut draw = |v: &mut f64| *v = rng.random_range(-scale..scale);
        p.alpha.iter_mut().for_each(&mut draw);
        p.delta_a.iter_mut().for_each(&mut draw);
        p.delta_c.iter_mut().for_each(&mut draw);
        p.beta.never.iter_mut().for_each(&mut draw);
        p.beta.always.iter_mut().for_each(&mut draw);
        p.beta.complier0.iter_mut().for_each(&mut draw);
        p.beta.complier1.iter_mut().for_each(&mut draw);
        for r in &mut p.response {
            for t in &mut r.theta {
                t.iter_mut().for_each(&mut draw);
            }
            r.gamma.iter_mut().for_each(&mut draw);
            draw(&mut r.eta);
            if with_interaction {
                draw(&mut r.eta_y);
            }
        }
        p
    }

    /// Flat view of every free quantity, used for convergence checks.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.extend(&self.alpha);
        v.extend(&self.delta_a);
        v.extend(&self.delta_c);
        for b in self.beta.slices() {
            v.extend(b);
        }
        for r in &self.response {
            for t in &r.theta {
                v.extend(t);
            }
            v.extend(r.gamma);
            v.push(r.eta);
            v.push(r.eta_y);
        }
        v
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.flatten().iter().zip(other.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn validate(&self, spec: &CovariateSpec) -> Result<()> {
        let p = spec.dim();
        if self.w.len() != spec.n_cells() {
            return Err(Error::Invalid(format!(
                "w has {} entries, lattice has {} cells",
                self.w.len(),
                spec.n_cells()
            )));
        }
        if self.w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invalid("w entries must lie in [0, 1]".into()));
        }
        let total: f64 = self.w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("w sums to {total}, not 1")));
        }
        let vecs = [&self.alpha, &self.delta_a, &self.delta_c].into_iter().chain(self.beta.slices());
        for v in vecs {
            if v.len() != p {
                return Err(Error::Dimension { expected: p, got: v.len() });
            }
        }
        if self.response.len() != spec.n_partial() {
            return Err(Error::Invalid(format!(
                "{} response models for {} partially observed covariates",
                self.response.len(),
                spec.n_partial()
            )));
        }
        for r in &self.response {
            for t in &r.theta {
                if t.len() != spec.obs_dim() {
                    return Err(Error::Dimension { expected: spec.obs_dim(), got: t.len() });
                }
            }
        }
        Ok(())
    }
}

/// `P(Z = 1 | x)`.
pub fn prob_iv(params: &ParamSet, x: &[f64]) -> Result<f64> {
    check_dim(&params.alpha, x)?;
    Ok(logistic(dot(&params.alpha, x)))
}

/// `(P(U=n | x), P(U=c | x), P(U=a | x))`.
pub fn prob_compliance(params: &ParamSet, x: &[f64]) -> Result<[f64; 3]> {
    check_dim(&params.delta_a, x)?;
    Ok(compliance_probs(params, x))
}

#[inline]
pub(crate) fn compliance_probs(params: &ParamSet, x: &[f64]) -> [f64; 3] {
    softmax3(0.0, dot(&params.delta_c, x), dot(&params.delta_a, x))
}

#[inline]
pub(crate) fn softmax3(a: f64, b: f64, c: f64) -> [f64; 3] {
    let m = a.max(b).max(c);
    let (ea, eb, ec) = ((a - m).exp(), (b - m).exp(), (c - m).exp());
    let s = ea + eb + ec;
    [ea / s, eb / s, ec / s]
}

/// `P(Y(z) = 1 | U=u, x)`.
pub fn prob_outcome(params: &ParamSet, u: ComplianceClass, z: u8, x: &[f64]) -> Result<f64> {
    let b = params.beta.get(u, z);
    check_dim(b, x)?;
    Ok(logistic(dot(b, x)))
}

/// `P(R_j = 1 | U=u, Z=z, Y=y, x_obs)`.
pub fn prob_response(params: &ParamSet, j: usize, u: ComplianceClass, z: u8, y: u8, x_obs: &[f64]) -> Result<f64> {
    let r = params.response.get(j).ok_or_else(|| Error::Index(format!("missing-covariate index {j} out of range")))?;
    check_dim(&r.theta[u.index()], x_obs)?;
    Ok(logistic(r.linear(u, z, y, x_obs)))
}

/// Joint probability of response pattern, cell, class, instrument and outcome.
///
/// Bit `j` of `pattern` is the response indicator of partially observed
/// covariate `j`.
pub fn cell_joint_prob(
    spec: &CovariateSpec,
    params: &ParamSet,
    pattern: u32,
    cell: usize,
    u: ComplianceClass,
    z: u8,
    y: u8,
) -> Result<f64> {
    if cell >= spec.n_cells() {
        return Err(Error::Index(format!("cell {cell} out of range")));
    }
    if pattern as usize >= spec.n_patterns() {
        return Err(Error::Index(format!("pattern {pattern:#b} out of range")));
    }
    if z > 1 || y > 1 {
        return Err(Error::Index("z and y must be 0 or 1".into()));
    }
    let x = spec.design(cell);
    let x_obs = spec.obs_design(spec.obs_cell_of(cell));
    let pz = logistic(dot(&params.alpha, x));
    let pz = if z == 1 { pz } else { 1.0 - pz };
    let pu = compliance_probs(params, x)[u.index()];
    let eta_y = dot(params.beta.get(u, z), x);
    let py = if y == 1 { logistic(eta_y) } else { logistic(-eta_y) };
    let mut p = params.w[cell] * pz * pu * py;
    for (j, r) in params.response.iter().enumerate() {
        let eta = r.linear(u, z, y, x_obs);
        p *= if pattern & (1 << j) != 0 { logistic(eta) } else { logistic(-eta) };
    }
    Ok(p)
}

/// Complier average causal effect at `x`: `P(Y(1)=1 | c, x) − P(Y(0)=1 | c, x)`.
pub fn cace(params: &ParamSet, x: &[f64]) -> Result<f64> {
    check_dim(&params.beta.complier0, x)?;
    Ok(logistic(dot(&params.beta.complier1, x)) - logistic(dot(&params.beta.complier0, x)))
}
