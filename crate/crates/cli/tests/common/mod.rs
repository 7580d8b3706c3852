#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ivcace::io::write_dataset;
use ivcace::report::Table;
use ivcace::simulation::SimRecord;
use ivcace::CovariateSpec;

pub fn ivcace(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivcace"))
        .current_dir(dir)
        .env_remove("IVCACE_WORKERS")
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs and asserts the exit status, printing stderr on mismatch.
pub fn ivcace_ok(dir: &Path, args: &[&str], code: i32) -> Output {
    let out = ivcace(dir, args);
    assert_eq!(out.status.code(), Some(code), "ivcace {args:?}\nstderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

pub fn table(path: impl AsRef<Path>) -> Table {
    let text = fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()));
    Table::from_csv(&text).expect("valid csv")
}

pub fn col(t: &Table, row: usize, name: &str) -> String {
    t.rows[row][t.column(name).unwrap_or_else(|| panic!("no column {name}"))].clone()
}

pub fn num_col(t: &Table, row: usize, name: &str) -> f64 {
    col(t, row, name).parse().expect("numeric")
}

/// Row whose `key` column equals `value`.
pub fn find_row(t: &Table, key: &str, value: &str) -> usize {
    let k = t.column(key).expect("key column");
    t.rows.iter().position(|r| r[k] == value).unwrap_or_else(|| panic!("no row with {key}={value}"))
}

pub fn write_records(path: &Path, spec: &CovariateSpec, data: &[SimRecord]) {
    let plain: Vec<_> = data.iter().map(|s| s.record.clone()).collect();
    let f = fs::File::create(path).expect("create");
    write_dataset(f, spec, &plain, "NA").expect("write");
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).expect("write config");
    p
}

pub const NICU_COVARIATES: &str = r#"
[[covariates]]
name = "ga"
levels = 4
fully_observed = true

[[covariates]]
name = "precare"
levels = 3

[[covariates]]
name = "educ"
levels = 2
"#;

pub const SINGLE_COVARIATE: &str = r#"
[[covariates]]
name = "x"
levels = 2
first_code = 0
"#;
