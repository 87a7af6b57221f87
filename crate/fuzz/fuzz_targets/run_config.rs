#![no_main]

use higine::pipeline::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = RunConfig::from_toml_str(text, None) {
        let again = RunConfig::from_toml_str(&config.to_toml_string(), None).expect("round trip");
        assert_eq!(again.hash(), config.hash());
    }
});
