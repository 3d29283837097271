#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = erase_core::io::decode_label_mask(data) {
        let png = erase_core::io::encode_label_mask(&labels);
        assert_eq!(erase_core::io::decode_label_mask(&png).unwrap(), labels);
    }
    let _ = erase_core::io::decode_binary_mask(data);
    let _ = erase_core::io::decode_soft_mask(data);
});
