#![no_main]

use cbf_stl::formula::{parse_formula, BandPredicate, PredicateMap};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The formula grammar must never panic on arbitrary input; malformed
    // text returns an error. Successfully parsed formulas must round-trip
    // through normalization and report a finite horizon.
    if let Ok(text) = std::str::from_utf8(data) {
        let pm: PredicateMap = ["p1", "p2", "p3", "mu1", "mu2", "mu3"]
            .iter()
            .map(|l| {
                (
                    l.to_string(),
                    BandPredicate::new(*l, 10.0, 0.25, 1.0).unwrap(),
                )
            })
            .collect();
        if let Ok(f) = parse_formula(text, &pm) {
            let nf = cbf_stl::formula::normalize_until(&f);
            assert!(f.horizon().is_finite());
            assert!(nf.horizon().is_finite());
        }
    }
});
