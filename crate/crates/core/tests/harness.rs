mod common;

use cmivtp::dataset::dataset_to_string;
use cmivtp::eval::{evaluate, EvalGrid};
use cmivtp::model::{CmivtpModel, OraclePredictor, Predictor};
use cmivtp::pca::{covariance, pca_project};
use cmivtp::train::{train, TrainConfig};
use cmivtp::vgtb::{bank_tracks, build_bank};
use cmivtp_numerics::Rng;

fn small_model(data: &[cmivtp::data::VesselSample]) -> CmivtpModel {
    let bank = build_bank(&bank_tracks(data), 3, 4, 3, 0).unwrap();
    CmivtpModel::new(common::model_cfg(8)).unwrap().with_bank(bank).unwrap()
}

fn short_train(lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        lr,
        epochs: 3,
        batch_size: 4,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let data = common::dataset(8, 1, 1);
    let mut model = small_model(&data);
    let before: Vec<u64> = model.store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
    let batch: Vec<_> = data.iter().collect();
    let loss_before = model.evaluate_loss(&batch, &Rng::new(5), 0.01).unwrap();
    let out = train(&mut model, &data, &short_train(0.0, 2)).unwrap();
    assert_eq!(out.curve.len(), 3);
    let after: Vec<u64> = model.store.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect();
    assert_eq!(before, after);
    assert_eq!(model.evaluate_loss(&batch, &Rng::new(5), 0.01).unwrap(), loss_before);
}

#[test]
fn same_seed_gives_identical_curves() {
    let data = common::dataset(8, 1, 1);
    let run = |seed| {
        let mut m = small_model(&data);
        let out = train(&mut m, &data, &short_train(1e-3, seed)).unwrap();
        (cmivtp::train::curve_csv(&out.curve), m.store.iter().map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>())
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a.0, run(5).0);
}

#[test]
fn max_steps_stops_training() {
    let data = common::dataset(8, 1, 1);
    let mut m = small_model(&data);
    let cfg = TrainConfig { max_steps: Some(3), ..short_train(1e-3, 0) };
    let out = train(&mut m, &data, &cfg).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.curve.last().unwrap().steps, 3);
}

#[test]
fn oracle_model_scores_zero_everywhere() {
    let data = common::dataset(10, 3, 7);
    let oracle = OraclePredictor { k_modes: 3, t_fut: 3 };
    let grid = EvalGrid { rhos: vec![0.0, 0.3], horizons: vec![1, 3], seeds: vec![0, 1, 2] };
    let r = evaluate(&data, &[&oracle], &grid, 0).unwrap();
    for c in r.cells.values().flatten() {
        assert!(c.metrics.iter().all(|s| s.mean == 0.0 && s.std == 0.0));
    }
}

#[test]
fn evaluation_is_repeatable_and_leaves_inputs_alone() {
    let data = common::dataset(6, 2, 3);
    let model = small_model(&data);
    let text = dataset_to_string(&data);
    let params = cmivtp::checkpoint::model_tensors(&model);
    let grid = EvalGrid { rhos: vec![0.0, 0.0], horizons: vec![3], seeds: vec![1] };
    let a = evaluate(&data, &[&model as &dyn Predictor], &grid, model.cfg.hash()).unwrap();
    let b = evaluate(&data, &[&model as &dyn Predictor], &grid, model.cfg.hash()).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.runs, 1);
    assert!(a.cells.values().flatten().all(|c| c.metrics.iter().all(|s| s.std == 0.0)));
    assert_eq!(dataset_to_string(&data), text);
    assert_eq!(cmivtp::checkpoint::model_tensors(&model), params);
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let vals: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    let vecs: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
    (vals, vecs)
}

#[test]
fn pca_matches_dense_eigensolver() {
    let mut rng = Rng::new(42);
    for case in 0..20 {
        let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let p = pca_project(&rows).unwrap();
        let (vals, vecs) = jacobi(covariance(&rows).1);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
        for c in 0..2 {
            let want = &vecs[order[c]];
            let dot: f64 = want.iter().zip(&p.components[c]).map(|(a, b)| a * b).sum();
            let sign = dot.signum();
            for (a, b) in want.iter().zip(&p.components[c]) {
                assert!((sign * a - b).abs() < 1e-6, "case {case} component {c}: {want:?} vs {:?}", p.components[c]);
            }
            assert!((vals[order[c]] - p.eigenvalues[c]).abs() < 1e-9);
        }
    }
}
