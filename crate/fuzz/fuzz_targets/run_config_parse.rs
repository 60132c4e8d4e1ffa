#![no_main]

use std::path::Path;

use acenet_cli::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text, Path::new("")) {
            // Whatever parses must survive its own echo.
            let again = RunConfig::parse(&cfg.to_toml(), Path::new("")).expect("echoed config parses");
            assert_eq!(again, cfg);
        }
    }
});
