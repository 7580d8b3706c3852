#![no_main]

use ivcace::io::{parse_report, report_table};
use ivcace::simulation::single_covariate_spec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let spec = single_covariate_spec();
    if let Ok(report) = parse_report(text, &spec) {
        let again = parse_report(&report_table(&spec, &report).to_csv(), &spec).unwrap();
        assert_eq!(again.rows.len(), report.rows.len());
    }
});
