#![no_main]
use erase_core::backbone::shim::Frame;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = Frame::decode(data) {
        let again = Frame::decode(&frame.encode()).unwrap();
        assert_eq!(again.control, frame.control);
        assert_eq!(again.tensors.len(), frame.tensors.len());
    }
});
