#![no_main]

use cmivtp::vgtb::TrajectoryBank;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(bank) = TrajectoryBank::from_json(text) {
        let json = bank.to_json();
        let again = TrajectoryBank::from_json(&json).expect("re-encoded bank must parse");
        assert_eq!(again.to_json(), json);
        if let Some(e) = bank.entries.first() {
            let _ = bank.search_feature(&e.feat);
        }
    }
});
