#![no_main]

use higine::pipeline::parse_predictions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_predictions(data) {
        for r in &rows {
            assert!((0.0..=1.0).contains(&r.prob_short));
        }
    }
});
