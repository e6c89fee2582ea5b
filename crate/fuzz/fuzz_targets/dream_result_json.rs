#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdream::dreamer::DreamResult;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(result) = DreamResult::from_json_str(text) {
        let json = result.to_json().unwrap();
        assert_eq!(DreamResult::from_json_str(&json).unwrap(), result);
    }
});
