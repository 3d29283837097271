#![no_main]
use erase_core::tta::TtaConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = TtaConfig::parse(text) {
            cfg.validate().unwrap();
        }
    }
});
