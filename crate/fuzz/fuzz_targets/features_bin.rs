#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensor) = frostbit_core::data::parse_features_bin(data) {
        // Anything that parses must re-encode to the same bytes. NaNs are
        // excluded: float casts may canonicalize their payload bits.
        let encoded = frostbit_core::data::encode_features_bin(&tensor);
        assert_eq!(encoded.len(), data.len());
        if tensor.data().iter().all(|v| !v.is_nan()) {
            assert_eq!(encoded, data);
        }
    }
});
