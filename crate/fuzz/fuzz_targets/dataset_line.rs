#![no_main]

use cmivtp::dataset::{sample_from_line, sample_to_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sample) = sample_from_line(text, 1) {
        let line = sample_to_line(&sample);
        let again = sample_from_line(&line, 1).expect("re-encoded sample must parse");
        assert_eq!(sample_to_line(&again), line);
    }
});
