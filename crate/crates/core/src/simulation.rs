//! Data generators and the replication study.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{complete_case_fit, mar_impute_fit, ImputationConfig};
use crate::em::{fit_em, FitConfig, MissingnessModel};
use crate::error::{Error, Result};
use crate::estimands::with_pool;
use crate::model::{
    cace, compliance_probs, dot, logistic, logit, ComplianceClass, Covariate, CovariateSpec, OutcomeCoefs, ParamSet,
    Record, ResponseCoefs,
};
use crate::sensitivity::SensitivityParams;

use ComplianceClass::{AlwaysTaker, Complier, NeverTaker};

/// Missingness regime of the single-covariate study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Mcar,
    Mar,
    Nonignorable,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Mcar, Scenario::Mar, Scenario::Nonignorable];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Mcar => "mcar",
            Scenario::Mar => "mar",
            Scenario::Nonignorable => "nonignorable",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mcar" => Ok(Scenario::Mcar),
            "mar" => Ok(Scenario::Mar),
            "nonignorable" | "ni" => Ok(Scenario::Nonignorable),
            other => Err(Error::Invalid(format!("unknown scenario '{other}' (expected mcar, mar or nonignorable)"))),
        }
    }
}

/// Probabilities of the one-binary-covariate design.
///
/// Arrays over classes are indexed by `ComplianceClass::index` (n, c, a).
/// Outcome and response probabilities for always- and never-takers are stored
/// once, so their instrument invariance holds by construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleCovScenario {
    /// `P(U = u)`.
    pub w_u: [f64; 3],
    /// `P(X = 1 | U = u)`.
    pub m_u: [f64; 3],
    /// `P(Z = 1 | X = x)` for `x = 0, 1`.
    pub xi_x: [f64; 2],
    /// `P(Y = 1 | U = n, X = x)`.
    pub theta_never: [f64; 2],
    /// `P(Y = 1 | U = a, X = x)`.
    pub theta_always: [f64; 2],
    /// `P(Y(z) = 1 | U = c, X = x)`, indexed `[z][x]`.
    pub theta_complier: [[f64; 2]; 2],
    /// `P(R = 1 | Y = y, U = n)`.
    pub rho_never: [f64; 2],
    /// `P(R = 1 | Y = y, U = a)`.
    pub rho_always: [f64; 2],
    /// `P(R = 1 | Y = y, Z = z, U = c)`, indexed `[y][z]`.
    pub rho_complier: [[f64; 2]; 2],
}

pub fn scenario_params(scenario: Scenario) -> SingleCovScenario {
    let mut s = SingleCovScenario {
        w_u: [0.2, 0.425, 0.375],
        m_u: [0.5, 0.8, 0.25],
        xi_x: [0.6, 0.4],
        theta_never: [0.3, 0.5],
        theta_always: [0.7, 0.8],
        theta_complier: [[0.3, 0.45], [0.45, 0.7]],
        rho_never: [0.88; 2],
        rho_always: [0.88; 2],
        rho_complier: [[0.88; 2]; 2],
    };
    match scenario {
        Scenario::Mcar => {}
        Scenario::Mar => {
            s.rho_never = [0.94, 0.88];
            s.rho_always = [0.97, 0.78];
            s.rho_complier = [[0.94, 0.97], [0.88, 0.78]];
        }
        Scenario::Nonignorable => {
            s.rho_never = [0.8, 0.75];
            s.rho_always = [0.95, 1.0];
            s.rho_complier = [[0.83, 0.9], [0.97, 0.8]];
        }
    }
    s
}

/// One covariate `x` coded 0/1, subject to missingness.
pub fn single_covariate_spec() -> CovariateSpec {
    CovariateSpec::new(vec![Covariate::new("x", 2, false).with_first_code(0)]).expect("valid spec")
}

/// Ground truth kept alongside a generated record.
#[derive(Clone, Debug, PartialEq)]
pub struct SimRecord {
    pub record: Record,
    pub u: ComplianceClass,
    /// Covariate levels before masking.
    pub x_true: Vec<u16>,
    pub q: u8,
}

impl SimRecord {
    /// Response indicators, one per partially observed covariate.
    pub fn observed_flags(&self, spec: &CovariateSpec) -> Vec<bool> {
        self.record.x[spec.n_full()..].iter().map(Option::is_some).collect()
    }
}

fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{name} = {p} outside [0, 1]")))
    }
}

impl SingleCovScenario {
    pub fn theta(&self, z: u8, u: ComplianceClass, x: u8) -> f64 {
        let x = x as usize;
        match u {
            NeverTaker => self.theta_never[x],
            AlwaysTaker => self.theta_always[x],
            Complier => self.theta_complier[z as usize][x],
        }
    }

    pub fn rho(&self, y: u8, z: u8, u: ComplianceClass) -> f64 {
        let y = y as usize;
        match u {
            NeverTaker => self.rho_never[y],
            AlwaysTaker => self.rho_always[y],
            Complier => self.rho_complier[y][z as usize],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .w_u
            .iter()
            .chain(&self.m_u)
            .chain(&self.xi_x)
            .chain(&self.theta_never)
            .chain(&self.theta_always)
            .chain(self.theta_complier.iter().flatten())
            .chain(&self.rho_never)
            .chain(&self.rho_always)
            .chain(self.rho_complier.iter().flatten());
        for &p in all {
            check_prob("scenario probability", p)?;
        }
        let total: f64 = self.w_u.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("class probabilities sum to {total}")));
        }
        Ok(())
    }

    /// True CACE at `x`.
    pub fn truth(&self, x: u8) -> f64 {
        self.theta(1, Complier, x) - self.theta(0, Complier, x)
    }

    /// `P(X = 1)`.
    pub fn p_x1(&self) -> f64 {
        dot(&self.w_u, &self.m_u)
    }

    /// `P(U = u | X = x)` by Bayes' rule.
    pub fn class_given_x(&self, x: u8) -> [f64; 3] {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = self.w_u[k] * if x == 1 { self.m_u[k] } else { 1.0 - self.m_u[k] };
        }
        let s: f64 = p.iter().sum();
        p.map(|v| if s > 0.0 { v / s } else { 0.0 })
    }

    /// Marginal probability that `x` is missing.
    pub fn missing_rate(&self) -> f64 {
        let mut total = 0.0;
        for u in ComplianceClass::ALL {
            let k = u.index();
            for x in 0..2u8 {
                let px = if x == 1 { self.m_u[k] } else { 1.0 - self.m_u[k] };
                for z in 0..2u8 {
                    let pz = if z == 1 { self.xi_x[x as usize] } else { 1.0 - self.xi_x[x as usize] };
                    let py1 = self.theta(z, u, x);
                    for y in 0..2u8 {
                        let py = if y == 1 { py1 } else { 1.0 - py1 };
                        total += self.w_u[k] * px * pz * py * (1.0 - self.rho(y, z, u));
                    }
                }
            }
        }
        total
    }

    /// The same law in the general parameterization over
    /// [`single_covariate_spec`]; requires the complier-interaction response model.
    ///
    /// Probabilities of exactly 0 or 1 map to log-odds of `±LOGIT_CLAMP`.
    pub fn to_params(&self) -> ParamSet {
        let pu0 = self.class_given_x(0);
        let pu1 = self.class_given_x(1);
        let p1 = self.p_x1();
        let two = |f: &dyn Fn(u8) -> f64| vec![f(0), f(1) - f(0)];
        let rel = |pu: &[f64; 3], k: usize| logit_ratio(pu[k], pu[0]);
        let n = NeverTaker.index();
        let c = Complier.index();
        let a = AlwaysTaker.index();
        let resp = |rho: [f64; 2]| (logit(rho[0]), logit(rho[1]) - logit(rho[0]));
        let (tn, gn) = resp(self.rho_never);
        let (ta, ga) = resp(self.rho_always);
        let r = &self.rho_complier;
        let tc = logit(r[0][0]);
        let gc = logit(r[1][0]) - tc;
        let ec = logit(r[0][1]) - tc;
        let eyc = logit(r[1][1]) - tc - gc - ec;
        let mut theta = [vec![0.0], vec![0.0], vec![0.0]];
        theta[n][0] = tn;
        theta[a][0] = ta;
        theta[c][0] = tc;
        let mut gamma = [0.0; 3];
        gamma[n] = gn;
        gamma[a] = ga;
        gamma[c] = gc;
        ParamSet {
            w: vec![1.0 - p1, p1],
            alpha: two(&|x| logit(self.xi_x[x as usize])),
            delta_a: two(&|x| rel(if x == 1 { &pu1 } else { &pu0 }, a)),
            delta_c: two(&|x| rel(if x == 1 { &pu1 } else { &pu0 }, c)),
            beta: OutcomeCoefs {
                never: two(&|x| logit(self.theta(0, NeverTaker, x))),
                always: two(&|x| logit(self.theta(0, AlwaysTaker, x))),
                complier0: two(&|x| logit(self.theta(0, Complier, x))),
                complier1: two(&|x| logit(self.theta(1, Complier, x))),
            },
            response: vec![ResponseCoefs { theta, gamma, eta: ec, eta_y: eyc }],
        }
    }
}

fn logit_ratio(p: f64, reference: f64) -> f64 {
    let v = (p / reference).ln();
    if v.is_finite() {
        v.clamp(-crate::model::LOGIT_CLAMP, crate::model::LOGIT_CLAMP)
    } else if p == 0.0 {
        -crate::model::LOGIT_CLAMP
    } else {
        crate::model::LOGIT_CLAMP
    }
}

/// Draws `n` records in the order class, covariate, instrument, treatment,
/// outcome, response.
pub fn generate_debug(sc: &SingleCovScenario, n: usize, seed: u64) -> Result<Vec<SimRecord>> {
    sc.validate()?;
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let classes = WeightedIndex::new(sc.w_u).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let u = ComplianceClass::from_index(classes.sample(&mut rng)).expect("three classes");
        let x = bernoulli(&mut rng, sc.m_u[u.index()]) as u8;
        let z = bernoulli(&mut rng, sc.xi_x[x as usize]) as u8;
        let d = u.treatment(z);
        let y = bernoulli(&mut rng, sc.theta(z, u, x)) as u8;
        let r = bernoulli(&mut rng, sc.rho(y, z, u));
        out.push(SimRecord {
            record: Record::new(vec![r.then_some(x as u16)], z, d, y),
            u,
            x_true: vec![x as u16],
            q: 0,
        });
    }
    Ok(out)
}

pub fn generate(sc: &SingleCovScenario, n: usize, seed: u64) -> Result<Vec<Record>> {
    Ok(generate_debug(sc, n, seed)?.into_iter().map(|s| s.record).collect())
}

/// Samples from the general model, optionally with the latent confounder.
///
/// Response models are always applied; use large positive response
/// intercepts for no missingness.
pub fn sample_model(
    spec: &CovariateSpec,
    params: &ParamSet,
    sens: Option<&SensitivityParams>,
    n: usize,
    seed: u64,
) -> Result<Vec<SimRecord>> {
    params.validate(spec)?;
    if let Some(s) = sens {
        s.validate(spec)?;
    }
    if n == 0 {
        return Err(Error::Invalid("n must be at least 1".into()));
    }
    let cells = WeightedIndex::new(&params.w).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = spec.n_full();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = cells.sample(&mut rng);
        let x = spec.design(cell);
        let xo = spec.obs_design(spec.obs_cell_of(cell));
        let z = bernoulli(&mut rng, logistic(dot(&params.alpha, x))) as u8;
        let pu = compliance_probs(params, x);
        let v: f64 = rng.random();
        let u = if v < pu[0] {
            NeverTaker
        } else if v < pu[0] + pu[1] {
            Complier
        } else {
            AlwaysTaker
        };
        let d = u.treatment(z);
        let q = sens.is_some_and(|s| bernoulli(&mut rng, s.pi)) as u8;
        let xi = sens.map_or(0.0, |s| s.xi.get(u, z)) * q as f64;
        let y = bernoulli(&mut rng, logistic(dot(params.beta.get(u, z), x) + xi)) as u8;
        let levels = spec.cell_levels(cell);
        let mut rec_x: Vec<Option<u16>> = levels.iter().map(|&l| Some(l)).collect();
        for (j, r) in params.response.iter().enumerate() {
            let kappa = sens.map_or(0.0, |s| s.kappa[j][u.index()]) * q as f64;
            if !bernoulli(&mut rng, logistic(r.linear(u, z, y, xo) + kappa)) {
                rec_x[nf + j] = None;
            }
        }
        out.push(SimRecord { record: Record::new(rec_x, z, d, y), u, x_true: levels, q });
    }
    Ok(out)
}

/// A synthetic design shaped like a neonatal-care study: a four-level
/// gestational-age covariate (fully observed) and two partially observed
/// covariates, prenatal care (3 levels) and maternal education (2 levels).
pub fn nicu_like_spec() -> CovariateSpec {
    CovariateSpec::new(vec![
        Covariate::new("ga", 4, true),
        Covariate::new("precare", 3, false),
        Covariate::new("educ", 2, false),
    ])
    .expect("valid spec")
}

/// Parameters for [`nicu_like_spec`]: treatment lowers mortality most in the
/// youngest gestational-age group and barely at all in the oldest.
/// Missingness depends on the outcome and on compliance class.
pub fn nicu_like_params() -> ParamSet {
    let spec = nicu_like_spec();
    let mut p = ParamSet::zeros(&spec);
    // Cell weights: older gestational age is more common.
    let ga_w = [0.1, 0.2, 0.3, 0.4];
    let pc_w = [0.2, 0.5, 0.3];
    let ed_w = [0.45, 0.55];
    for cell in 0..spec.n_cells() {
        let l = spec.cell_levels(cell);
        p.w[cell] = ga_w[l[0] as usize] * pc_w[l[1] as usize] * ed_w[l[2] as usize];
    }
    // Columns: intercept, ga (1..4), precare (1..3), educ (1..2).
    p.alpha = vec![0.3, -0.1, 0.05, 0.1];
    p.delta_c = vec![0.6, 0.1, -0.1, 0.1];
    p.delta_a = vec![-0.2, 0.05, 0.1, 0.0];
    p.beta = OutcomeCoefs {
        never: vec![1.0, -1.2, 0.1, -0.1],
        always: vec![0.2, -1.1, 0.1, -0.1],
        complier0: vec![1.5, -1.2, 0.1, -0.1],
        complier1: vec![-0.3, -1.0, 0.1, -0.1],
    };
    for (j, r) in p.response.iter_mut().enumerate() {
        let base = if j == 0 { 1.6 } else { 2.0 };
        r.theta = [vec![base, 0.1], vec![base + 0.3, 0.1], vec![base + 0.2, 0.1]];
        r.gamma = [-0.5, -0.3, -0.4];
        r.eta = 0.2;
    }
    p
}

/// Estimators compared in the replication study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    EmNi,
    CompleteCase,
    MarImpute,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::EmNi, Method::CompleteCase, Method::MarImpute];

    pub fn name(self) -> &'static str {
        match self {
            Method::EmNi => "em_ni",
            Method::CompleteCase => "complete_case",
            Method::MarImpute => "mar_impute",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Invalid(format!("unknown method '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_replications: usize,
    pub n_per_dataset: usize,
    pub scenario: Scenario,
    pub methods: Vec<Method>,
    pub seed: u64,
    /// Fit settings for the EM-based methods. The response model is forced
    /// to `ComplierInteraction` for `em_ni`.
    pub fit: FitConfig,
    pub imputation: ImputationConfig,
    pub workers: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            n_replications: 500,
            n_per_dataset: 5000,
            scenario: Scenario::Mcar,
            methods: Method::ALL.to_vec(),
            seed: 1,
            fit: FitConfig { n_restarts: 2, ..FitConfig::default() },
            imputation: ImputationConfig::default(),
            workers: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replications == 0 || self.n_per_dataset == 0 {
            return Err(Error::Invalid("replication count and dataset size must be positive".into()));
        }
        self.fit.validate()?;
        self.imputation.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub method: Method,
    pub x: u8,
    pub truth: f64,
    pub mean: f64,
    pub sd: f64,
    /// `100·|mean − truth| / truth`.
    pub pct_bias: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct StudySummary {
    pub rows: Vec<StudyRow>,
}

impl StudySummary {
    pub fn get(&self, method: Method, x: u8) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.method == method && r.x == x)
    }
}

/// Seed of replication `rep`, drawn from its own stream.
pub fn replication_seed(seed: u64, rep: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng.next_u64()
}

/// CACE at `x = 0` and `x = 1` for one dataset.
pub fn estimate_pair(
    method: Method,
    data: &[Record],
    spec: &CovariateSpec,
    fit: &FitConfig,
    imputation: &ImputationConfig,
) -> Result<[f64; 2]> {
    let x0 = spec.features(&[0]);
    let x1 = spec.features(&[1]);
    match method {
        Method::EmNi => {
            let cfg = FitConfig { missingness: MissingnessModel::ComplierInteraction, ..fit.clone() };
            let f = fit_em(data, spec, &cfg)?;
            Ok([cace(&f.params, &x0)?, cace(&f.params, &x1)?])
        }
        Method::CompleteCase => {
            let f = complete_case_fit(data, spec, fit)?;
            Ok([cace(&f.params, &x0)?, cace(&f.params, &x1)?])
        }
        Method::MarImpute => {
            let cells = vec![vec![0], vec![1]];
            let pooled = mar_impute_fit(data, spec, fit, imputation, &cells)?;
            Ok([pooled[0].estimate, pooled[1].estimate])
        }
    }
}

/// Runs the replication study for one scenario.
pub fn run_study(config: &StudyConfig) -> Result<StudySummary> {
    run_study_with(config, &scenario_params(config.scenario))
}

/// As [`run_study`] with explicit generating probabilities; `config.scenario`
/// is ignored.
pub fn run_study_with(config: &StudyConfig, sc: &SingleCovScenario) -> Result<StudySummary> {
    config.validate()?;
    sc.validate()?;
    if config.methods.is_empty() {
        return Ok(StudySummary::default());
    }
    let spec = single_covariate_spec();
    let reps: Vec<Vec<Option<[f64; 2]>>> = with_pool(config.workers, || {
        (0..config.n_replications as u64)
            .into_par_iter()
            .map(|rep| {
                let data =
                    generate(sc, config.n_per_dataset, replication_seed(config.seed, rep)).expect("validated scenario");
                config
                    .methods
                    .iter()
                    .map(|&m| estimate_pair(m, &data, &spec, &config.fit, &config.imputation).ok())
                    .collect()
            })
            .collect()
    });
    let mut summary = StudySummary::default();
    for (mi, &method) in config.methods.iter().enumerate() {
        let ok: Vec<[f64; 2]> = reps.iter().filter_map(|r| r[mi]).collect();
        let failed = reps.len() - ok.len();
        if failed as f64 > 0.02 * reps.len() as f64 {
            return Err(Error::TooManyFailures { what: method.name(), failed, total: reps.len() });
        }
        for x in [1u8, 0] {
            let vals: Vec<f64> = ok.iter().map(|v| v[x as usize]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let truth = sc.truth(x);
            summary.rows.push(StudyRow {
                method,
                x,
                truth,
                mean,
                sd: crate::estimands::sample_sd(&vals),
                pct_bias: 100.0 * (mean - truth).abs() / truth.abs(),
                n_ok: ok.len(),
                n_failed: failed,
            });
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::cell_joint_prob;
    use approx::assert_relative_eq;

    #[test]
    fn scenario_tables() {
        let m = scenario_params(Scenario::Mcar);
        for u in ComplianceClass::ALL {
            for y in 0..2 {
                for z in 0..2 {
                    assert_eq!(m.rho(y, z, u), 0.88);
                }
            }
        }
        let ni = scenario_params(Scenario::Nonignorable);
        assert_eq!(ni.rho(1, 0, AlwaysTaker), 1.0);
        assert_eq!(ni.rho(1, 1, AlwaysTaker), 1.0);
        assert_eq!(ni.rho(0, 1, AlwaysTaker), 0.95);
        assert_eq!(ni.rho(1, 1, Complier), 0.8);
        assert_eq!(ni.rho(1, 0, Complier), 0.97);
        assert_eq!(ni.rho(0, 1, Complier), 0.9);
        assert_relative_eq!(m.truth(1), 0.25, epsilon = 1e-15);
        assert_relative_eq!(m.truth(0), 0.15, epsilon = 1e-15);
    }

    #[test]
    fn missing_rates() {
        // The published tables give 12%, 12.8% and 10.6% exactly.
        let want = [0.12, 0.12816475, 0.10585125];
        for (s, w) in Scenario::ALL.into_iter().zip(want) {
            assert_relative_eq!(scenario_params(s).missing_rate(), w, epsilon = 1e-12);
        }
    }

    #[test]
    fn general_encoding_reproduces_scenario_law() {
        let spec = single_covariate_spec();
        for s in Scenario::ALL {
            let sc = scenario_params(s);
            let p = sc.to_params();
            p.validate(&spec).unwrap();
            for x in 0..2u8 {
                let px = if x == 1 { sc.p_x1() } else { 1.0 - sc.p_x1() };
                for u in ComplianceClass::ALL {
                    let k = u.index();
                    let pxu = sc.w_u[k] * if x == 1 { sc.m_u[k] } else { 1.0 - sc.m_u[k] };
                    for z in 0..2u8 {
                        let pz = if z == 1 { sc.xi_x[x as usize] } else { 1.0 - sc.xi_x[x as usize] };
                        for y in 0..2u8 {
                            let py1 = sc.theta(z, u, x);
                            let py = if y == 1 { py1 } else { 1.0 - py1 };
                            let want = pxu * pz * py * sc.rho(y, z, u);
                            let got = cell_joint_prob(&spec, &p, 1, x as usize, u, z, y).unwrap();
                            assert!((got - want).abs() < 1e-12, "{s} x{x} {u:?} z{z} y{y}: {got} vs {want}");
                        }
                    }
                }
                assert!(px > 0.0);
            }
        }
    }

    #[test]
    fn generated_records_obey_structure() {
        let sc = scenario_params(Scenario::Nonignorable);
        let data = generate_debug(&sc, 20_000, 3).unwrap();
        for s in &data {
            assert_eq!(s.record.d, s.u.treatment(s.record.z));
            if let Some(x) = s.record.x[0] {
                assert_eq!(x, s.x_true[0]);
            }
        }
        let comp = data.iter().filter(|s| s.u == Complier).count() as f64 / data.len() as f64;
        let se = (0.425f64 * 0.575 / data.len() as f64).sqrt();
        assert!((comp - 0.425).abs() < 4.0 * se, "{comp}");
        let miss = data.iter().filter(|s| s.record.x[0].is_none()).count() as f64 / data.len() as f64;
        assert!((miss - sc.missing_rate()).abs() < 0.01, "{miss}");
        // Always-takers with a positive outcome are never missing here.
        assert!(data.iter().filter(|s| s.u == AlwaysTaker && s.record.y == 1).all(|s| s.record.x[0].is_some()));
    }

    #[test]
    fn degenerate_scenario_is_constant() {
        let sc = SingleCovScenario {
            w_u: [0.0, 1.0, 0.0],
            m_u: [0.0, 1.0, 0.0],
            xi_x: [0.0, 1.0],
            theta_never: [0.0; 2],
            theta_always: [0.0; 2],
            theta_complier: [[0.0; 2], [0.0, 1.0]],
            rho_never: [1.0; 2],
            rho_always: [1.0; 2],
            rho_complier: [[1.0; 2]; 2],
        };
        let data = generate(&sc, 50, 9).unwrap();
        assert!(data.iter().all(|r| *r == Record::new(vec![Some(1)], 1, 1, 1)));
    }

    #[test]
    fn generation_is_deterministic() {
        let sc = scenario_params(Scenario::Mar);
        assert_eq!(generate(&sc, 500, 11).unwrap(), generate(&sc, 500, 11).unwrap());
        assert_ne!(generate(&sc, 500, 11).unwrap(), generate(&sc, 500, 12).unwrap());
        let spec = nicu_like_spec();
        let p = nicu_like_params();
        assert_eq!(sample_model(&spec, &p, None, 300, 5).unwrap(), sample_model(&spec, &p, None, 300, 5).unwrap());
    }

    #[test]
    fn zero_n_rejected() {
        assert!(generate(&scenario_params(Scenario::Mcar), 0, 1).is_err());
    }

    #[test]
    fn nicu_like_truth_attenuates() {
        let spec = nicu_like_spec();
        let p = nicu_like_params();
        let effects: Vec<f64> = (0..4u16).map(|g| cace(&p, &spec.features(&[g, 1, 0])).unwrap()).collect();
        assert!(effects.iter().all(|&e| e < 0.0));
        assert!(effects.windows(2).all(|w| w[0] < w[1]), "{effects:?}");
        assert!(effects[0] < -0.25 && effects[3] > -0.05, "{effects:?}");
    }

    #[test]
    fn empty_method_list_gives_empty_summary() {
        let cfg = StudyConfig { methods: vec![], n_replications: 3, n_per_dataset: 100, ..StudyConfig::default() };
        assert!(run_study(&cfg).unwrap().rows.is_empty());
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("bogus".parse::<Scenario>().is_err());
    }
}
