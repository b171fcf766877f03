#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(points) = frostbit_core::report::parse_curves_csv(text) {
            if !points.is_empty() {
                // Parsed curves must either plot or fail cleanly.
                let _ = frostbit_core::report::curves_to_svg(&points);
            }
        }
    }
});
