#![no_main]

use ivcace::io::read_dataset;
use ivcace::{Covariate, CovariateSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let spec = CovariateSpec::new(vec![Covariate::new("ga", 4, true), Covariate::new("educ", 2, false)]).unwrap();
    if let Ok(records) = read_dataset(data, &spec, "NA") {
        for r in &records {
            assert!(r.z <= 1 && r.d <= 1 && r.y <= 1);
        }
    }
});
