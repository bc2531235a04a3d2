mod common;

use cmivtp::checkpoint::{load_checkpoint, read_tensors, save_checkpoint, write_tensors};
use cmivtp::config::parse_config;
use cmivtp::dataset::{dataset_to_string, parse_dataset, read_dataset, sample_from_line, sample_to_line, write_dataset};
use cmivtp::error::Error;
use cmivtp::model::CmivtpModel;
use cmivtp::vgtb::{bank_tracks, build_bank, TrajectoryBank};

#[test]
fn dataset_write_read_write_is_bit_identical() {
    let mut data = common::dataset(5, 2, 3);
    data[0].obs_ais.available[2] = false;
    data[1].is_dark = true;
    data[1].obs_ais.available.iter_mut().for_each(|a| *a = false);
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.jsonl");
    let p2 = dir.path().join("b.jsonl");
    write_dataset(&p1, &data).unwrap();
    let back = read_dataset(&p1).unwrap();
    assert_eq!(back, data);
    write_dataset(&p2, &back).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn dataset_missing_field_names_line_and_field() {
    let data = common::dataset(3, 1, 1);
    let text = dataset_to_string(&data);
    let lines: Vec<&str> = text.lines().collect();
    let broken = lines[1].replacen("\"fut_cctv\"", "\"fut_cctvx\"", 1);
    let doc = format!("{}\n{}\n{}\n", lines[0], broken, lines[2]);
    match parse_dataset(&doc) {
        Err(Error::Parse { line, field, .. }) => assert_eq!((line, field.as_str()), (2, "fut_cctv")),
        other => panic!("{other:?}"),
    }
    let no_fut = lines[2].replacen("\"fut_ais\"", "\"future\"", 1);
    match sample_from_line(&no_fut, 3) {
        Err(Error::Parse { line, field, .. }) => assert_eq!((line, field.as_str()), (3, "fut_ais")),
        other => panic!("{other:?}"),
    }
    let no_bbox = lines[0].replacen("\"bbox\"", "\"box\"", 1);
    let err = sample_from_line(&no_bbox, 1).unwrap_err().to_string();
    assert!(err.contains("scenes[0].bbox"), "{err}");
}

#[test]
fn dataset_rejects_inconsistent_lengths() {
    let data = common::dataset(1, 1, 1);
    let mut s = data[0].clone();
    s.obs_ais.available.pop();
    assert!(sample_from_line(&sample_to_line(&s), 4).is_err());
    assert!(sample_from_line("[1,2]", 1).is_err());
    assert!(sample_from_line("{", 1).is_err());
}

#[test]
fn bank_json_write_read_write_is_bit_identical() {
    let data = common::dataset(12, 1, 5);
    let bank = build_bank(&bank_tracks(&data), 4, 4, 3, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.json");
    let p2 = dir.path().join("b.json");
    bank.write(&p1).unwrap();
    let back = TrajectoryBank::read(&p1).unwrap();
    assert_eq!(back, bank);
    back.write(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(TrajectoryBank::from_json("{\"header\": 3}").is_err());
}

#[test]
fn checkpoint_write_read_write_is_bit_identical() {
    let data = common::dataset(8, 1, 2);
    let bank = build_bank(&bank_tracks(&data), 3, 4, 3, 1).unwrap();
    let model = CmivtpModel::new(common::model_cfg(8)).unwrap().with_bank(bank).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    save_checkpoint(&p1, &model).unwrap();
    let back = load_checkpoint(&p1, Some(&model.cfg)).unwrap();
    save_checkpoint(&p2, &back).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    for (a, b) in model.store.iter().zip(back.store.iter()) {
        assert_eq!(a.0, b.0);
        let bits = |t: &cmivtp_numerics::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.1), bits(b.1));
    }
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = CmivtpModel::new(common::model_cfg(32)).unwrap();
    let p = dir.path().join("d32.bin");
    save_checkpoint(&p, &model).unwrap();

    // a d = 32 checkpoint loaded into a d = 16 config
    let err = load_checkpoint(&p, Some(&common::model_cfg(16))).unwrap_err();
    assert!(matches!(err, Error::Schema { .. }), "{err}");

    // a config mismatch hidden by a stale meta tensor: swap in a d = 16 meta
    let mut tensors = read_tensors(&p).unwrap();
    let small = cmivtp::checkpoint::model_tensors(&CmivtpModel::new(common::model_cfg(16)).unwrap());
    for (name, t) in tensors.iter_mut() {
        if name.starts_with("meta.") {
            *t = small.iter().find(|(n, _)| n == name).unwrap().1.clone();
        }
    }
    let forged = dir.path().join("forged.bin");
    write_tensors(&forged, &tensors).unwrap();
    match load_checkpoint(&forged, None) {
        Err(Error::Schema { name, msg }) => assert!(!name.starts_with("meta.") && msg.contains("shape"), "{name}: {msg}"),
        other => panic!("{other:?}"),
    }

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[1] = b'?';
    let corrupt = dir.path().join("corrupt.bin");
    std::fs::write(&corrupt, &bytes).unwrap();
    let msg = load_checkpoint(&corrupt, None).unwrap_err().to_string();
    assert!(msg.contains("corrupt.bin"), "{msg}");

    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&corrupt, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_checkpoint(&corrupt, None).is_err());
}

#[test]
fn config_round_trips_through_the_parser() {
    let c = parse_config("d = 16\nk_modes = 3\nlr = 0.002\nseed = 4\n").unwrap();
    assert_eq!((c.model.d, c.model.k_modes, c.train.lr, c.train.seed), (16, 3, 0.002, 4));
}

#[test]
fn checkpoint_claiming_a_huge_model_is_rejected_before_allocation() {
    let model = CmivtpModel::new(common::model_cfg(8)).unwrap();
    let mut tensors = cmivtp::checkpoint::model_tensors(&model);
    let huge = cmivtp::model::ModelConfig { d: 1 << 20, heads: 1, t_fut: 1 << 20, ..common::model_cfg(8) };
    for (name, t) in tensors.iter_mut() {
        match name.as_str() {
            "meta.model_config" => *t = cmivtp_numerics::Tensor::vector(huge.to_vec()),
            "meta.config_hash" => {
                let h = huge.hash();
                *t = cmivtp_numerics::Tensor::vector(vec![(h & 0xFFFF_FFFF) as f64, (h >> 32) as f64]);
            }
            _ => {}
        }
    }
    match cmivtp::checkpoint::model_from_tensors(tensors, None) {
        Err(Error::Schema { name, .. }) => assert_eq!(name, "meta.model_config"),
        other => panic!("{:?}", other.map(|m| m.cfg)),
    }
}
