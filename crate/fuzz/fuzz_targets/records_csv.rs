#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = frostbit_core::report::parse_records_csv(text) {
            // Whatever parses must render without panicking.
            let _ = frostbit_core::report::records_to_markdown(&rows);
        }
    }
});
