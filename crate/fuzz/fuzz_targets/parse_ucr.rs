#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdream::dataset::{parse_ucr, Delimiter};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for delim in [Delimiter::Tab, Delimiter::Comma] {
        if let Ok(ds) = parse_ucr(text, delim, None) {
            assert!(ds.labels().all(|y| y < ds.num_classes()));
            assert!(ds.series().iter().all(|s| s.values.len() == ds.length()));
            // serialized output parses back to the same shape
            let again = parse_ucr(&ds.to_ucr_string(delim), delim, Some(&ds.label_map())).unwrap();
            assert_eq!((again.len(), again.length()), (ds.len(), ds.length()));
        }
    }
});
