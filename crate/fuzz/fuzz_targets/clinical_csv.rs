#![no_main]

use higine::cell_table::{parse_clinical, CohortConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let config = CohortConfig::new(1730.0);
    if let Ok(records) = parse_clinical(data, &config) {
        for r in &records {
            assert!(r.follow_up.is_finite() && r.follow_up >= 0.0);
        }
    }
});
