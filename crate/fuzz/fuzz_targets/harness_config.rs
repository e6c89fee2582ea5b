#![no_main]

use libfuzzer_sys::fuzz_target;
use seqdream::harness::HarnessConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = HarnessConfig::from_toml_str(text) {
        cfg.validate().unwrap();
    }
});
