//! Dataset files, run configuration and stored bootstrap reports.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::baselines::ImputationConfig;
use crate::em::FitConfig;
use crate::error::{Error, Result};
use crate::estimands::{BootstrapConfig, CaceReport, IntervalRow, Target, Weighting};
use crate::model::{ComplianceClass, Covariate, CovariateSpec, Encoding, Record};
use crate::report::{num, Table};
use crate::sensitivity::SensitivityGrid;
use crate::simulation::{Method, Scenario, SimRecord, SingleCovScenario};

pub const DEFAULT_MISSING_TOKEN: &str = "NA";

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_binary(v: &str, col: &str, line: u64) -> Result<u8> {
    match v {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(parse_err(line, format!("column '{col}': expected 0 or 1, found '{v}'"))),
    }
}

/// Reads a dataset. Columns are matched by header name; `z`, `d`, `y` and
/// every declared covariate must be present, other columns are ignored.
/// Covariate values are integer codes counted from each covariate's first code.
pub fn read_dataset<R: Read>(reader: R, spec: &CovariateSpec, missing_token: &str) -> Result<Vec<Record>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> =
        rd.headers().map_err(|e| parse_err(1, e.to_string()))?.iter().map(str::to_string).collect();
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            return Err(parse_err(1, format!("duplicate column '{h}'")));
        }
    }
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| parse_err(1, format!("missing column '{name}'")))
    };
    let (zc, dc, yc) = (find("z")?, find("d")?, find("y")?);
    let xc: Vec<usize> = spec.covariates().iter().map(|c| find(&c.name)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let z = parse_binary(field(zc), "z", line)?;
        let d = parse_binary(field(dc), "d", line)?;
        let y = parse_binary(field(yc), "y", line)?;
        let mut x = Vec::with_capacity(xc.len());
        for (c, &i) in spec.covariates().iter().zip(&xc) {
            let v = field(i);
            if v == missing_token {
                if c.fully_observed {
                    return Err(parse_err(line, format!("fully observed covariate '{}' is missing", c.name)));
                }
                x.push(None);
                continue;
            }
            let code: i64 =
                v.parse().map_err(|_| parse_err(line, format!("column '{}': '{v}' is not an integer code", c.name)))?;
            let level = c.level_of_code(code).ok_or_else(|| {
                parse_err(
                    line,
                    format!(
                        "column '{}': code {code} outside {}..={}",
                        c.name,
                        c.code_of_level(0),
                        c.code_of_level(c.levels - 1)
                    ),
                )
            })?;
            x.push(Some(level));
        }
        out.push(Record::new(x, z, d, y));
    }
    Ok(out)
}

pub fn parse_dataset(text: &str, spec: &CovariateSpec, missing_token: &str) -> Result<Vec<Record>> {
    read_dataset(text.as_bytes(), spec, missing_token)
}

fn dataset_header(spec: &CovariateSpec) -> Vec<String> {
    ["z", "d", "y"].into_iter().map(str::to_string).chain(spec.covariates().iter().map(|c| c.name.clone())).collect()
}

fn record_fields(spec: &CovariateSpec, r: &Record, missing_token: &str) -> Vec<String> {
    let mut row = vec![r.z.to_string(), r.d.to_string(), r.y.to_string()];
    for (v, c) in r.x.iter().zip(spec.covariates()) {
        row.push(match v {
            Some(l) => c.code_of_level(*l).to_string(),
            None => missing_token.to_string(),
        });
    }
    row
}

pub fn write_dataset<W: Write>(writer: W, spec: &CovariateSpec, data: &[Record], missing_token: &str) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(dataset_header(spec)).map_err(io)?;
    for r in data {
        w.write_record(record_fields(spec, r, missing_token)).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Generated records with ground-truth columns: class, confounder and the
/// covariate codes before masking.
pub fn write_debug<W: Write>(writer: W, spec: &CovariateSpec, data: &[SimRecord], missing_token: &str) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let io = |e: csv::Error| Error::Io(e.into());
    let mut header = dataset_header(spec);
    header.push("u".into());
    header.push("q".into());
    header.extend(spec.covariates().iter().map(|c| format!("{}_true", c.name)));
    w.write_record(&header).map_err(io)?;
    for s in data {
        let mut row = record_fields(spec, &s.record, missing_token);
        row.push(s.u.short_name().into());
        row.push(s.q.to_string());
        row.extend(s.x_true.iter().zip(spec.covariates()).map(|(l, c)| c.code_of_level(*l).to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateConfig {
    pub name: String,
    pub levels: u16,
    #[serde(default)]
    pub fully_observed: bool,
    #[serde(default = "one")]
    pub first_code: i32,
    #[serde(default)]
    pub encoding: Encoding,
}

fn one() -> i32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub methods: Vec<String>,
    pub n_subclasses: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { methods: BASELINE_METHODS.iter().map(|s| s.to_string()).collect(), n_subclasses: 5 }
    }
}

pub const BASELINE_METHODS: [&str; 6] =
    ["em_ni", "complete_case", "mar_impute", "unadjusted", "regression", "propensity"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: Scenario,
    /// Explicit probabilities; overrides `scenario` when present.
    pub custom: Option<SingleCovScenario>,
    pub n: usize,
    pub n_replications: usize,
    pub methods: Vec<Method>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { scenario: Scenario::Mcar, custom: None, n: 5000, n_replications: 500, methods: Method::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub grid: SensitivityGrid,
    /// Bootstrap every grid point instead of shifting the base interval.
    pub bootstrap_each_point: bool,
    /// Stored bootstrap report of the base fit.
    pub base_report: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    /// Also write column-aligned `.txt` renderings.
    pub text: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), text: true }
    }
}

/// Everything a run can be configured with. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub missing_token: String,
    pub covariates: Vec<CovariateConfig>,
    /// Target cells as data-file codes, one entry per covariate.
    pub cells: Vec<Vec<i64>>,
    pub fit: FitConfig,
    pub bootstrap: BootstrapConfig,
    pub imputation: ImputationConfig,
    pub baselines: BaselineConfig,
    pub simulate: SimulateConfig,
    pub sensitivity: SensitivityConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            missing_token: DEFAULT_MISSING_TOKEN.into(),
            covariates: Vec::new(),
            cells: Vec::new(),
            fit: FitConfig::default(),
            bootstrap: BootstrapConfig::default(),
            imputation: ImputationConfig::default(),
            baselines: BaselineConfig::default(),
            simulate: SimulateConfig::default(),
            sensitivity: SensitivityConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
            parse_err(line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.missing_token.is_empty() || self.missing_token.contains(',') {
            return Err(Error::Invalid("missing_token must be nonempty and contain no comma".into()));
        }
        self.fit.validate()?;
        self.bootstrap.validate()?;
        self.imputation.validate()?;
        if !self.covariates.is_empty() {
            let spec = self.spec()?;
            self.target_cells(&spec)?;
        }
        for m in &self.baselines.methods {
            if !BASELINE_METHODS.contains(&m.as_str()) {
                return Err(Error::Invalid(format!("unknown baseline method '{m}'")));
            }
        }
        if self.baselines.n_subclasses == 0 {
            return Err(Error::Invalid("n_subclasses must be at least 1".into()));
        }
        if let Some(s) = &self.simulate.custom {
            s.validate()?;
        }
        self.sensitivity.grid.validate()
    }

    pub fn spec(&self) -> Result<CovariateSpec> {
        CovariateSpec::new(
            self.covariates
                .iter()
                .map(|c| {
                    Covariate::new(c.name.clone(), c.levels, c.fully_observed)
                        .with_first_code(c.first_code)
                        .with_encoding(c.encoding)
                })
                .collect(),
        )
    }

    /// Configured cells as level indices; every lattice cell when none are listed.
    pub fn target_cells(&self, spec: &CovariateSpec) -> Result<Vec<Vec<u16>>> {
        if self.cells.is_empty() {
            return Ok((0..spec.n_cells()).map(|c| spec.cell_levels(c)).collect());
        }
        self.cells.iter().map(|c| cell_from_codes(spec, c)).collect()
    }
}

pub fn cell_from_codes(spec: &CovariateSpec, codes: &[i64]) -> Result<Vec<u16>> {
    if codes.len() != spec.n_covariates() {
        return Err(Error::Invalid(format!(
            "cell {codes:?} has {} codes, expected {}",
            codes.len(),
            spec.n_covariates()
        )));
    }
    codes
        .iter()
        .zip(spec.covariates())
        .map(|(&v, c)| {
            c.level_of_code(v).ok_or_else(|| Error::Invalid(format!("code {v} out of range for '{}'", c.name)))
        })
        .collect()
}

/// Parses `"1,2;2,1"` (cells separated by `;`, codes by `,`).
pub fn parse_cells(spec: &CovariateSpec, text: &str) -> Result<Vec<Vec<u16>>> {
    text.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|cell| {
            let codes: Vec<i64> = cell
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::Invalid(format!("bad cell code '{v}'"))))
                .collect::<Result<_>>()?;
            cell_from_codes(spec, &codes)
        })
        .collect()
}

fn codes_of(spec: &CovariateSpec, levels: &[u16]) -> String {
    levels.iter().zip(spec.covariates()).map(|(l, c)| c.code_of_level(*l).to_string()).collect::<Vec<_>>().join(" ")
}

fn levels_of(spec: &CovariateSpec, s: &str) -> Result<Vec<u16>> {
    let codes: Vec<i64> = s
        .split_whitespace()
        .map(|v| v.parse().map_err(|_| Error::Invalid(format!("bad code '{v}'"))))
        .collect::<Result<_>>()?;
    cell_from_codes(spec, &codes)
}

/// Stable text key of a target, e.g. `cace:1 2`, `share_c:1 2`,
/// `weighted:cell_probability`, `beta_c1:0`.
pub fn target_key(spec: &CovariateSpec, t: &Target) -> String {
    match t {
        Target::Cace(l) => format!("cace:{}", codes_of(spec, l)),
        Target::WeightedCace(Weighting::CellProbability) => "weighted:cell_probability".into(),
        Target::WeightedCace(Weighting::ComplierCount) => "weighted:complier_count".into(),
        Target::Compliance(l, u) => format!("share_{}:{}", u.short_name(), codes_of(spec, l)),
        Target::ComplierCoef { arm, index } => format!("beta_c{arm}:{index}"),
    }
}

pub fn parse_target_key(spec: &CovariateSpec, key: &str) -> Result<Target> {
    let (kind, rest) = key.split_once(':').ok_or_else(|| Error::Invalid(format!("malformed target '{key}'")))?;
    Ok(match kind {
        "cace" => Target::Cace(levels_of(spec, rest)?),
        "weighted" => Target::WeightedCace(match rest {
            "cell_probability" => Weighting::CellProbability,
            "complier_count" => Weighting::ComplierCount,
            _ => return Err(Error::Invalid(format!("unknown weighting '{rest}'"))),
        }),
        "share_n" | "share_c" | "share_a" => {
            let u = match &kind[6..] {
                "n" => ComplianceClass::NeverTaker,
                "c" => ComplianceClass::Complier,
                _ => ComplianceClass::AlwaysTaker,
            };
            Target::Compliance(levels_of(spec, rest)?, u)
        }
        "beta_c0" | "beta_c1" => Target::ComplierCoef {
            arm: (kind == "beta_c1") as u8,
            index: rest.parse().map_err(|_| Error::Invalid(format!("bad coefficient index '{rest}'")))?,
        },
        _ => return Err(Error::Invalid(format!("unknown target kind '{kind}'"))),
    })
}

const REPORT_HEADER: [&str; 7] = ["target", "label", "estimate", "sd", "lower", "upper", "ci_level"];

pub fn report_table(spec: &CovariateSpec, report: &CaceReport) -> Table {
    let mut t = Table::new(REPORT_HEADER);
    for r in &report.rows {
        t.push([
            target_key(spec, &r.target),
            r.label.clone(),
            num(r.estimate),
            num(r.sd),
            num(r.lower),
            num(r.upper),
            num(report.ci_level),
        ]);
    }
    t
}

fn parse_num(v: &str, line: u64) -> Result<f64> {
    if v == "NA" {
        return Ok(f64::NAN);
    }
    v.parse().map_err(|_| parse_err(line, format!("'{v}' is not a number")))
}

/// Reads a report written by [`report_table`]. Resample counts are not stored
/// and come back as zero.
pub fn parse_report(text: &str, spec: &CovariateSpec) -> Result<CaceReport> {
    let t = Table::from_csv(text)?;
    let col = |name: &str| t.column(name).ok_or_else(|| parse_err(1, format!("missing column '{name}'")));
    let cols: Vec<usize> = REPORT_HEADER.iter().map(|h| col(h)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut ci_level = 0.95;
    for (i, r) in t.rows.iter().enumerate() {
        let line = i as u64 + 2;
        let target = parse_target_key(spec, &r[cols[0]]).map_err(|e| parse_err(line, e.to_string()))?;
        let v = |k: usize| parse_num(&r[cols[k]], line);
        let (estimate, sd, lower, upper) = (v(2)?, v(3)?, v(4)?, v(5)?);
        ci_level = v(6)?;
        if !(lower <= upper) {
            return Err(parse_err(line, "lower bound exceeds upper bound"));
        }
        rows.push(IntervalRow { target, label: r[cols[1]].clone(), estimate, sd, lower, upper });
    }
    Ok(CaceReport { rows, n_resamples: 0, n_failed: 0, ci_level })
}
