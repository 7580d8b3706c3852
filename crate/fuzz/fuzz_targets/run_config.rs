#![no_main]

use ivcace::io::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text) {
        if let Ok(spec) = cfg.spec() {
            let _ = cfg.target_cells(&spec);
        }
    }
});
