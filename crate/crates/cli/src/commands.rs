use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ivcace::baselines::{
    complete_case_fit, mar_impute_fit, propensity_subclassification, regression_adjusted, unadjusted_difference,
    Estimate,
};
use ivcace::em::{fit_em, tabulate_observed, FitConfig, FitResult, MissingnessModel};
use ivcace::estimands::{
    bootstrap_ci, bootstrap_from_fit, compliance_proportions, weighted_cace, BootstrapConfig, CaceReport, Target,
    Weighting,
};
use ivcace::io::{
    parse_cells, parse_report, read_dataset, report_table, target_key, write_dataset, write_debug, RunConfig,
    BASELINE_METHODS,
};
use ivcace::report::{num, Table};
use ivcace::sensitivity::sensitivity_grid;
use ivcace::simulation::{
    generate_debug, nicu_like_params, nicu_like_spec, run_study_with, sample_model, scenario_params,
    single_covariate_spec, Method, Scenario, StudyConfig,
};
use ivcace::{cace, CovariateSpec, Error, Record};

use crate::{Cli, Command, GlobalArgs, ScenarioArg};

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    NotConverged(String),
    Partial(String),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::NotConverged(_) => 3,
            Failure::Partial(_) => 4,
            Failure::Other(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::NotConverged(m) | Failure::Partial(m) | Failure::Other(m) => {
                f.write_str(m)
            }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) => Failure::Other(msg),
            Error::TooManyFailures { .. } => Failure::Partial(msg),
            Error::Fit(_) | Error::ZeroProbabilityStratum { .. } => Failure::NotConverged(msg),
            _ => Failure::Validation(msg),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
}

impl Ctx {
    fn load(g: &GlobalArgs) -> Outcome<Self> {
        let mut cfg = match &g.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
                RunConfig::parse(&text).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.seed = s;
            cfg.fit.init_seed = s;
            cfg.bootstrap.seed = s;
            cfg.imputation.seed = s;
        }
        let workers = g.workers.unwrap_or(cfg.bootstrap.workers);
        cfg.bootstrap.workers = workers;
        let out = g.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
        Ok(Self { cfg, out, workers })
    }

    /// Declared covariates, or the single binary covariate of the simulation design.
    fn spec(&self) -> Outcome<CovariateSpec> {
        if self.cfg.covariates.is_empty() {
            Ok(single_covariate_spec())
        } else {
            Ok(self.cfg.spec()?)
        }
    }

    fn cells(&self, g: &GlobalArgs, spec: &CovariateSpec) -> Outcome<Vec<Vec<u16>>> {
        let cells = match &g.cells {
            Some(t) => parse_cells(spec, t)?,
            None => self.cfg.target_cells(spec)?,
        };
        if cells.is_empty() {
            return Err(Failure::Validation("no target cells".into()));
        }
        Ok(cells)
    }

    fn data(&self, g: &GlobalArgs, spec: &CovariateSpec) -> Outcome<Vec<Record>> {
        let path = g.data.as_ref().ok_or_else(|| Failure::Validation("--data is required".into()))?;
        let file = fs::File::open(path).map_err(|e| io_failure(path, e))?;
        read_dataset(file, spec, &self.cfg.missing_token).map_err(|e| match e {
            Error::Io(e) => io_failure(path, e),
            e => Failure::Validation(format!("{}: {e}", path.display())),
        })
    }

    fn bootstrap(&self, resamples: Option<usize>) -> Outcome<BootstrapConfig> {
        let mut b = self.cfg.bootstrap.clone();
        if let Some(r) = resamples {
            b.n_resamples = r;
        }
        b.validate()?;
        Ok(b)
    }

    fn writer(&self) -> Outcome<Output<'_>> {
        fs::create_dir_all(&self.out).map_err(|e| io_failure(&self.out, e))?;
        Ok(Output { dir: &self.out, text: self.cfg.output.text })
    }
}

struct Output<'a> {
    dir: &'a Path,
    text: bool,
}

impl Output<'_> {
    fn file(&self, name: &str, contents: &str) -> Outcome {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_failure(&path, e))
    }

    fn table(&self, stem: &str, t: &Table) -> Outcome {
        self.file(&format!("{stem}.csv"), &t.to_csv())?;
        if self.text {
            self.file(&format!("{stem}.txt"), &t.to_text())?;
        }
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let g = &cli.global;
    let ctx = Ctx::load(g)?;
    match &cli.command {
        Command::Simulate { scenario, n, study, reps, methods, debug } => {
            simulate(&ctx, *scenario, *n, *study, *reps, methods.as_deref(), *debug)
        }
        Command::Fit => fit(&ctx, g),
        Command::Baselines { methods, resamples } => baselines(&ctx, g, methods.as_deref(), *resamples),
        Command::Sensitivity { base, resamples, bootstrap_each_point } => {
            sensitivity(&ctx, g, base.as_deref(), *resamples, *bootstrap_each_point)
        }
        Command::Bootstrap { resamples } => bootstrap(&ctx, g, *resamples),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|m| !m.is_empty()).map(str::to_string).collect()
}

fn simulate(
    ctx: &Ctx,
    scenario: Option<ScenarioArg>,
    n: Option<usize>,
    study: bool,
    reps: Option<usize>,
    methods: Option<&str>,
    debug: bool,
) -> Outcome {
    let cfg = &ctx.cfg;
    let n = n.unwrap_or(cfg.simulate.n);
    if n == 0 {
        return Err(Failure::Validation("--n must be at least 1".into()));
    }
    let (name, sc) = match scenario {
        Some(ScenarioArg::NicuLike) => ("nicu-like".to_string(), None),
        Some(s) => {
            let s = match s {
                ScenarioArg::Mcar => Scenario::Mcar,
                ScenarioArg::Mar => Scenario::Mar,
                _ => Scenario::Nonignorable,
            };
            (s.to_string(), Some(scenario_params(s)))
        }
        None => match &cfg.simulate.custom {
            Some(c) => ("custom".to_string(), Some(c.clone())),
            None => (cfg.simulate.scenario.to_string(), Some(scenario_params(cfg.simulate.scenario))),
        },
    };

    if study {
        let sc = sc.ok_or_else(|| Failure::Validation("--study needs a single-covariate scenario".into()))?;
        let methods: Vec<Method> = match methods {
            Some(m) => split_list(m).iter().map(|s| s.parse()).collect::<Result<_, Error>>()?,
            None => cfg.simulate.methods.clone(),
        };
        let config = StudyConfig {
            n_replications: reps.unwrap_or(cfg.simulate.n_replications),
            n_per_dataset: n,
            scenario: cfg.simulate.scenario,
            methods,
            seed: cfg.seed,
            fit: cfg.fit.clone(),
            imputation: cfg.imputation.clone(),
            workers: ctx.workers,
        };
        config.validate()?;
        let summary = run_study_with(&config, &sc)?;
        let mut t = Table::new(["scenario", "method", "x", "truth", "mean", "sd", "pct_bias", "n_ok", "n_failed"]);
        for r in &summary.rows {
            t.push([
                name.clone(),
                r.method.name().to_string(),
                r.x.to_string(),
                num(r.truth),
                num(r.mean),
                num(r.sd),
                num(r.pct_bias),
                r.n_ok.to_string(),
                r.n_failed.to_string(),
            ]);
        }
        ctx.writer()?.table("study", &t)?;
        eprintln!("{name}: {} replications of {n} records", config.n_replications);
        return Ok(());
    }

    let (spec, records) = match sc {
        Some(sc) => (single_covariate_spec(), generate_debug(&sc, n, cfg.seed)?),
        None => {
            let spec = nicu_like_spec();
            let records = sample_model(&spec, &nicu_like_params(), None, n, cfg.seed)?;
            (spec, records)
        }
    };
    let out = ctx.writer()?;
    let plain: Vec<Record> = records.iter().map(|s| s.record.clone()).collect();
    let mut buf = Vec::new();
    write_dataset(&mut buf, &spec, &plain, &cfg.missing_token)?;
    out.file("data.csv", &String::from_utf8_lossy(&buf))?;
    if debug {
        let mut buf = Vec::new();
        write_debug(&mut buf, &spec, &records, &cfg.missing_token)?;
        out.file("debug.csv", &String::from_utf8_lossy(&buf))?;
    }
    let incomplete = plain.iter().filter(|r| !r.is_complete()).count();
    eprintln!("{name}: wrote {n} records, {incomplete} with a missing covariate");
    Ok(())
}

fn pattern_label(spec: &CovariateSpec, pattern: u32) -> String {
    let missing: Vec<&str> = spec.covariates()[spec.n_full()..]
        .iter()
        .enumerate()
        .filter(|(j, _)| pattern & (1 << j) == 0)
        .map(|(_, c)| c.name.as_str())
        .collect();
    if missing.is_empty() {
        "none".into()
    } else {
        missing.join("+")
    }
}

fn cell_label(spec: &CovariateSpec, cell: &[u16]) -> Outcome<String> {
    Ok(spec.cell_label(spec.cell_index(cell)?))
}

fn fit(ctx: &Ctx, g: &GlobalArgs) -> Outcome {
    let spec = ctx.spec()?;
    let cells = ctx.cells(g, &spec)?;
    let data = ctx.data(g, &spec)?;
    let counts = tabulate_observed(&data, &spec)?;
    let result = fit_em(&data, &spec, &ctx.cfg.fit)?;
    let out = ctx.writer()?;

    let json = serde_json::to_string_pretty(&result.params).map_err(|e| Failure::Other(e.to_string()))?;
    out.file("params.json", &(json + "\n"))?;

    let mut trace = Table::new(["iteration", "loglik"]);
    for (i, ll) in result.loglik_trace.iter().enumerate() {
        trace.push([i.to_string(), num(*ll)]);
    }
    out.file("loglik_trace.csv", &trace.to_csv())?;

    let mut t = Table::new(["cell", "cace"]);
    for c in &cells {
        t.push([cell_label(&spec, c)?, num(cace(&result.params, &spec.features(c))?)]);
    }
    out.table("cace", &t)?;

    let mut t = Table::new(["cell", "never", "complier", "always"]);
    for r in compliance_proportions(&spec, &result, &cells)? {
        t.push([cell_label(&spec, &r.cell)?, num(r.never), num(r.complier), num(r.always)]);
    }
    out.table("compliance", &t)?;

    let b = &result.params.beta;
    let mut t = Table::new(["term", "never", "always", "complier_z0", "complier_z1"]);
    for (k, term) in spec.term_names().into_iter().enumerate() {
        t.push([term, num(b.never[k]), num(b.always[k]), num(b.complier0[k]), num(b.complier1[k])]);
    }
    out.table("outcome_coefs", &t)?;

    let mut t = Table::new(["weighting", "cace"]);
    for w in [Weighting::CellProbability, Weighting::ComplierCount] {
        t.push([w.label().to_string(), num(weighted_cace(&spec, &result.params, w)?)]);
    }
    out.table("weighted", &t)?;

    let mut t = Table::new(["pattern", "missing", "records"]);
    for p in 0..spec.n_patterns() as u32 {
        t.push([p.to_string(), pattern_label(&spec, p), num(counts.pattern_total(p))]);
    }
    out.table("patterns", &t)?;

    out.table("summary", &fit_summary(&result, data.len(), ctx.cfg.fit.missingness))?;

    if !result.converged {
        return Err(Failure::NotConverged(format!(
            "EM stopped after {} iterations without converging",
            result.iterations
        )));
    }
    eprintln!("converged in {} iterations, loglik {}", result.iterations, num(result.loglik()));
    Ok(())
}

fn fit_summary(result: &FitResult, n: usize, missingness: MissingnessModel) -> Table {
    let mut t = Table::new(["key", "value"]);
    let model = match missingness {
        MissingnessModel::Ignored => "ignored",
        MissingnessModel::Additive => "additive",
        MissingnessModel::ComplierInteraction => "complier_interaction",
    };
    t.push(["records".to_string(), n.to_string()]);
    t.push(["missingness_model".to_string(), model.to_string()]);
    t.push(["converged".to_string(), result.converged.to_string()]);
    t.push(["iterations".to_string(), result.iterations.to_string()]);
    t.push(["loglik".to_string(), num(result.loglik())]);
    t.push(["warnings".to_string(), result.warnings.join("; ")]);
    t
}

fn cace_targets(cells: &[Vec<u16>]) -> Vec<Target> {
    cells.iter().map(|c| Target::Cace(c.clone())).collect()
}

fn baselines(ctx: &Ctx, g: &GlobalArgs, methods: Option<&str>, resamples: Option<usize>) -> Outcome {
    let cfg = &ctx.cfg;
    let methods = match methods {
        Some(m) => split_list(m),
        None => cfg.baselines.methods.clone(),
    };
    for m in &methods {
        if !BASELINE_METHODS.contains(&m.as_str()) {
            return Err(Failure::Validation(format!("unknown baseline method '{m}'")));
        }
    }
    let spec = ctx.spec()?;
    let cells = ctx.cells(g, &spec)?;
    let boot = ctx.bootstrap(resamples)?;
    let data = ctx.data(g, &spec)?;

    let mut t = Table::new(["method", "target", "label", "estimate", "lower", "upper", "status"]);
    let mut failed = Vec::new();
    for m in &methods {
        let rows = baseline_rows(m, &data, &spec, cfg, &boot, &cells);
        match rows {
            Ok(rows) => {
                for (target, label, e) in rows {
                    t.push([m.clone(), target, label, num(e.estimate), num(e.lower), num(e.upper), "ok".into()]);
                }
            }
            Err(e) => {
                eprintln!("{m}: {e}");
                let na = num(f64::NAN);
                t.push([m.clone(), "NA".into(), "NA".into(), na.clone(), na.clone(), na, format!("failed: {e}")]);
                failed.push(m.clone());
            }
        }
    }
    ctx.writer()?.table("baselines", &t)?;
    if !failed.is_empty() {
        return Err(Failure::Partial(format!("methods failed: {}", failed.join(", "))));
    }
    Ok(())
}

type BaselineRow = (String, String, Estimate);

fn interval_rows(spec: &CovariateSpec, report: &CaceReport) -> Vec<BaselineRow> {
    let keys = report_table(spec, report);
    report
        .rows
        .iter()
        .zip(&keys.rows)
        .map(|(r, k)| {
            (
                k[0].clone(),
                r.label.clone(),
                Estimate { estimate: r.estimate, variance: r.sd * r.sd, lower: r.lower, upper: r.upper },
            )
        })
        .collect()
}

fn baseline_rows(
    method: &str,
    data: &[Record],
    spec: &CovariateSpec,
    cfg: &RunConfig,
    boot: &BootstrapConfig,
    cells: &[Vec<u16>],
) -> Result<Vec<BaselineRow>, Error> {
    let mut targets = cace_targets(cells);
    targets.push(Target::WeightedCace(Weighting::ComplierCount));
    let overall = |e: Estimate, label: &str| vec![("overall".to_string(), label.to_string(), e)];
    Ok(match method {
        "em_ni" => interval_rows(spec, &bootstrap_ci(data, spec, &cfg.fit, boot, &targets)?),
        "complete_case" => {
            let complete: Vec<Record> = data.iter().filter(|r| r.is_complete()).cloned().collect();
            let fit_cfg = FitConfig { missingness: MissingnessModel::Ignored, ..cfg.fit.clone() };
            let point = complete_case_fit(data, spec, &cfg.fit)?;
            interval_rows(spec, &bootstrap_from_fit(&complete, spec, &fit_cfg, boot, &targets, &point.params, None)?)
        }
        "mar_impute" => {
            let pooled = mar_impute_fit(data, spec, &cfg.fit, &cfg.imputation, cells)?;
            cells
                .iter()
                .zip(pooled)
                .map(|(c, p)| {
                    let t = Target::Cace(c.clone());
                    (target_key(spec, &t), t.label(spec), p.to_estimate())
                })
                .collect()
        }
        "unadjusted" => overall(unadjusted_difference(data)?, "treated_minus_untreated"),
        "regression" => overall(regression_adjusted(data, spec, &cfg.imputation)?, "standardized"),
        "propensity" => overall(
            propensity_subclassification(data, spec, &cfg.imputation, cfg.baselines.n_subclasses)?,
            "subclassified",
        ),
        _ => return Err(Error::Invalid(format!("unknown baseline method '{method}'"))),
    })
}

fn sensitivity(ctx: &Ctx, g: &GlobalArgs, base: Option<&Path>, resamples: Option<usize>, each_point: bool) -> Outcome {
    let cfg = &ctx.cfg;
    let spec = ctx.spec()?;
    let cells = ctx.cells(g, &spec)?;
    let boot = ctx.bootstrap(resamples)?;
    let data = ctx.data(g, &spec)?;
    let mut grid = cfg.sensitivity.grid.clone();
    grid.cells = cells.clone();
    grid.validate()?;

    let base_fit = fit_em(&data, &spec, &cfg.fit)?;
    let stored = base.map(Path::to_path_buf).or_else(|| cfg.sensitivity.base_report.as_ref().map(PathBuf::from));
    let base_report = match stored {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| io_failure(&p, e))?;
            parse_report(&text, &spec).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?
        }
        None => bootstrap_from_fit(&data, &spec, &cfg.fit, &boot, &cace_targets(&cells), &base_fit.params, None)?,
    };
    for c in &cells {
        if base_report.find(&Target::Cace(c.clone())).is_none() {
            return Err(Failure::Validation(format!("base report has no CACE row for cell {}", cell_label(&spec, c)?)));
        }
    }
    let point_boot = (each_point || cfg.sensitivity.bootstrap_each_point).then_some(&boot);
    let report =
        sensitivity_grid(&data, &spec, &grid, &cfg.fit, &base_fit.params, &base_report, point_boot, ctx.workers)?;

    let out = ctx.writer()?;
    out.table("base_report", &report_table(&spec, &base_report))?;
    let mut t = Table::new(["cell", "pi", "exp_xi", "exp_kappa", "estimate", "ci_low", "ci_high", "flip_flag"]);
    for r in &report.rows {
        t.push([
            r.label.clone(),
            num(r.pi),
            num(r.exp_xi),
            num(r.exp_kappa),
            num(r.estimate),
            num(r.ci_low),
            num(r.ci_high),
            (r.flip as u8).to_string(),
        ]);
    }
    out.table("sensitivity", &t)?;
    if !report.failures.is_empty() {
        let mut f = Table::new(["pi", "exp_xi", "exp_kappa", "message"]);
        for x in &report.failures {
            f.push([num(x.pi), num(x.exp_xi), num(x.exp_kappa), x.message.clone()]);
        }
        out.table("sensitivity_failures", &f)?;
        return Err(Failure::Partial(format!(
            "{} of {} grid points failed",
            report.failures.len(),
            grid.points().len()
        )));
    }
    Ok(())
}

fn bootstrap(ctx: &Ctx, g: &GlobalArgs, resamples: Option<usize>) -> Outcome {
    let spec = ctx.spec()?;
    let cells = ctx.cells(g, &spec)?;
    let boot = ctx.bootstrap(resamples)?;
    let data = ctx.data(g, &spec)?;
    let mut targets = cace_targets(&cells);
    targets.push(Target::WeightedCace(Weighting::CellProbability));
    targets.push(Target::WeightedCace(Weighting::ComplierCount));
    let report = bootstrap_ci(&data, &spec, &ctx.cfg.fit, &boot, &targets)?;
    ctx.writer()?.table("bootstrap", &report_table(&spec, &report))?;
    if report.n_failed > 0 {
        return Err(Failure::Partial(format!(
            "{} of {} bootstrap replicates failed",
            report.n_failed, report.n_resamples
        )));
    }
    Ok(())
}
