#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdream::classifier::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_weights(data) {
        let bytes = encode_weights(&model);
        let again = decode_weights(bytes.as_bytes()).expect("re-encoded weights decode");
        assert_eq!(encode_weights(&again), bytes);
    }
});
