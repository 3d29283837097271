#![no_main]
use erase_core::lora::LoraState;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = LoraState::from_archive(data);
});
