#![no_main]

use higine::cell_table::CohortConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = CohortConfig::from_toml_str(text, None) {
        // A parsed config serializes back to one that parses to itself.
        let again = CohortConfig::from_toml_str(&config.to_toml_string(), None).expect("round trip");
        assert_eq!(again, config);
    }
});
