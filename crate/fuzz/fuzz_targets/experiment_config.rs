#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = frostbit_core::train::ExperimentConfig::from_json_str(text) {
            // A config that validates must round-trip through its own JSON.
            let json = cfg.to_json_string();
            let back = frostbit_core::train::ExperimentConfig::from_json_str(&json).unwrap();
            assert_eq!(cfg, back);
        }
    }
});
