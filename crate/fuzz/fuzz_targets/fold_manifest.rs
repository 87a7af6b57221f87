#![no_main]

use higine::pipeline::parse_fold_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_fold_manifest(data) {
        assert!(m.normalization.std.iter().all(|&s| s > 0.0 && s.is_finite()));
    }
});
