#![no_main]

use cmivtp::checkpoint::{decode, encode, model_from_tensors};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        assert_eq!(encode(&tensors), data);
        let _ = model_from_tensors(tensors, None);
    }
});
