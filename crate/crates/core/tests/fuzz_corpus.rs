//! Replays the checked-in fuzz corpus through the same entry points as the
//! fuzz targets so that stable builds exercise them too.

use std::fs;
use std::path::PathBuf;

use cmivtp::checkpoint::{decode, encode, model_from_tensors};
use cmivtp::config::parse_config;
use cmivtp::dataset::{sample_from_line, sample_to_line};
use cmivtp::vgtb::TrajectoryBank;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn dataset_line_seeds() {
    for (name, bytes) in corpus("dataset_line") {
        let text = String::from_utf8(bytes).unwrap();
        let parsed = sample_from_line(text.trim_end(), 1);
        assert_eq!(parsed.is_ok(), name != "missing_field", "{name}: {parsed:?}");
        if let Ok(s) = parsed {
            let line = sample_to_line(&s);
            assert_eq!(sample_to_line(&sample_from_line(&line, 1).unwrap()), line);
        }
    }
}

#[test]
fn bank_json_seeds() {
    for (name, bytes) in corpus("bank_json") {
        let bank = TrajectoryBank::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(TrajectoryBank::from_json(&bank.to_json()).unwrap(), bank);
    }
}

#[test]
fn checkpoint_seeds() {
    for (name, bytes) in corpus("checkpoint_decode") {
        match decode(&bytes) {
            Ok(t) => {
                assert_eq!(encode(&t), bytes, "{name}");
                model_from_tensors(t, None).unwrap_or_else(|e| panic!("{name}: {e}"));
            }
            Err(e) => assert_eq!(name, "truncated", "{e}"),
        }
    }
}

#[test]
fn config_seeds() {
    for (name, bytes) in corpus("config_parse") {
        let r = parse_config(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(r.is_ok(), name != "duplicate", "{name}: {r:?}");
    }
}
