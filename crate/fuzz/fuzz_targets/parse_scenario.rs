#![no_main]

use cbf_stl::scenario::{parse_scenario, validate_scenario};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The scenario-config decoder must never panic on arbitrary input.
    // Anything that parses must also survive validation (Ok or a clean
    // error, never a panic).
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_scenario(text) {
            let _ = validate_scenario(&cfg);
        }
    }
});
