mod common;

use cmivtp::data::{apply_dark_vessels, Point};
use cmivtp::dataset::{sample_from_line, sample_to_line};
use cmivtp::losses::{diversity, kl_value, min_ade_fde, rec_loss, rec_loss_value, GAMMA_KL};
use cmivtp::model::CmivtpModel;
use cmivtp::scenario::Homography;
use cmivtp::train::PlateauScheduler;
use cmivtp::vgtb::{cosine_similarity, medoid, BankEntry, BankHeader, TrajectoryBank};
use cmivtp_numerics::{Rng, Tape, Tensor};
use proptest::prelude::*;

fn coord() -> impl Strategy<Value = f64> {
    -5.0..5.0f64
}

fn track(len: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec([coord(), coord()], len)
}

fn modes(k: usize, len: usize) -> impl Strategy<Value = Vec<Vec<Point>>> {
    prop::collection::vec(track(len), k)
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

proptest! {
    #[test]
    fn kl_is_non_negative(mu in prop::collection::vec(-4.0..4.0f64, 1..20), seed in any::<u64>()) {
        let mut r = Rng::new(seed);
        let lv: Vec<f64> = mu.iter().map(|_| r.uniform_in(-6.0, 6.0)).collect();
        prop_assert!(kl_value(&mu, &lv) >= 0.0);
    }

    #[test]
    fn min_ade_never_grows_when_modes_are_appended(m in modes(4, 6), gt in track(6)) {
        let mut prev = f64::INFINITY;
        for k in 1..=m.len() {
            let (ade, fde) = min_ade_fde(&m[..k], &gt).unwrap();
            prop_assert!(ade <= prev);
            prop_assert!(fde >= 0.0);
            prev = ade;
        }
    }

    #[test]
    fn duplicating_the_winner_keeps_rec_loss(a in modes(3, 5), c in modes(3, 5), ga in track(5), gc in track(5)) {
        let pairs: Vec<(Vec<Point>, Vec<Point>)> = a.into_iter().zip(c).collect();
        let (loss, w) = rec_loss_value(&pairs, &ga, &gc).unwrap();
        let mut dup = pairs.clone();
        dup.push(pairs[w].clone());
        let (loss2, w2) = rec_loss_value(&dup, &ga, &gc).unwrap();
        prop_assert_eq!(loss.to_bits(), loss2.to_bits());
        prop_assert_eq!(w, w2);
    }

    #[test]
    fn tape_rec_loss_agrees_with_plain_values(a in modes(3, 4), c in modes(3, 4), ga in track(4), gc in track(4)) {
        let flat = |p: &[Point]| Tensor::new(&[p.len(), 2], p.iter().flatten().copied().collect()).unwrap();
        let mut tape = Tape::new();
        let vars: Vec<_> = a.iter().zip(&c).map(|(x, y)| (tape.constant(flat(x)), tape.constant(flat(y)))).collect();
        let (gav, gcv) = (tape.constant(flat(&ga)), tape.constant(flat(&gc)));
        let (v, w) = rec_loss(&mut tape, &vars, gav, gcv).unwrap();
        let pairs: Vec<_> = a.into_iter().zip(c).collect();
        let (want, ww) = rec_loss_value(&pairs, &ga, &gc).unwrap();
        prop_assert_eq!(w, ww);
        prop_assert!((tape.data(v)[0] - want).abs() < 1e-12);
    }

    #[test]
    fn diversity_of_identical_modes_is_zero(t in track(5), k in 1usize..5) {
        prop_assert_eq!(diversity(&vec![t; k]).unwrap(), 0.0);
    }

    #[test]
    fn retrieval_matches_exhaustive_scan(
        feats in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 1..64),
        query in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let bank = TrajectoryBank {
            header: BankHeader { t_obs: 1, t_fut: 1, k: feats.len(), seed: 0 },
            entries: feats.iter().map(|f| BankEntry { obs: vec![[0.0, 0.0]], fut: vec![[0.0, 0.0]], feat: f.clone() }).collect(),
        };
        let sims: Vec<f64> = feats.iter().map(|f| cosine_similarity(&query, f)).collect();
        let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let want = sims.iter().position(|&s| s == best).unwrap();
        prop_assert_eq!(bank.search_feature(&query).unwrap().index, want);
    }

    #[test]
    fn medoid_matches_brute_force(feats in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 3), 1..13)) {
        let members: Vec<usize> = (0..feats.len()).rev().collect();
        let n = feats.len() as f64;
        let mean: Vec<f64> = (0..3).map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let d: Vec<f64> = feats.iter().map(|f| sq(f, &mean)).collect();
        let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let want = d.iter().position(|&x| x == best).unwrap();
        prop_assert_eq!(medoid(&feats, &members), Some(want));
    }

    #[test]
    fn homography_round_trips(p in [0.0..1.0f64, 0.0..1.0f64], size in 8usize..128) {
        let h = Homography::default_camera(size);
        let back = h.apply_inverse(h.apply(p).unwrap()).unwrap();
        prop_assert!((back[0] - p[0]).abs() < 1e-9 && (back[1] - p[1]).abs() < 1e-9);
    }

    #[test]
    fn scheduler_is_monotone_and_bounded(losses in prop::collection::vec(0.0..2.0f64, 1..80), patience in 1usize..12) {
        let mut s = PlateauScheduler::new(1.0, 0.5, patience, 1e-4);
        let mut prev = s.lr;
        for &l in &losses {
            s.observe(l);
            prop_assert!(s.lr <= prev);
            prev = s.lr;
        }
        prop_assert!(s.reductions <= losses.len() / patience);
    }

    #[test]
    fn dark_vessels_hide_exactly_floor_rho_n(rho in 0.0..=1.0f64, seed in any::<u64>()) {
        let data = common::dataset(7, 1, 0);
        let out = apply_dark_vessels(&data, rho, seed).unwrap();
        let dark = out.iter().filter(|s| s.is_dark).count();
        prop_assert_eq!(dark, (rho * 7.0).floor() as usize);
        for (a, b) in data.iter().zip(&out) {
            prop_assert_eq!(&a.obs_ais.points, &b.obs_ais.points);
            prop_assert_eq!(&a.fut_ais, &b.fut_ais);
            prop_assert!(!b.is_dark || b.obs_ais.available.iter().all(|x| !x));
        }
    }

    #[test]
    fn dataset_lines_round_trip(pts in track(4), fut in track(3), dark in any::<bool>()) {
        let mut s = common::dataset(1, 1, 0).remove(0);
        s.obs_ais.points = pts.clone();
        s.obs_cctv.points = pts;
        s.fut_ais = fut.clone();
        s.fut_cctv = fut;
        s.is_dark = dark;
        s.obs_ais.available = vec![!dark; 4];
        let line = sample_to_line(&s);
        let back = sample_from_line(&line, 1).unwrap();
        prop_assert_eq!(sample_to_line(&back), line);
        prop_assert_eq!(back, s);
    }
}

#[test]
fn kl_reference_values() {
    assert_eq!(kl_value(&[0.0; 16], &[0.0; 16]), 0.0);
    assert_eq!(kl_value(&[1.0; 16], &[0.0; 16]), 8.0);
}

#[test]
fn total_loss_is_rec_plus_weighted_kl() {
    for seed in 0..5 {
        let data = common::dataset(5, 1, seed);
        let model = CmivtpModel::new(cmivtp::model::ModelConfig { use_bank: false, init_seed: seed, ..common::model_cfg(8) }).unwrap();
        let batch: Vec<_> = data.iter().collect();
        let b = model.evaluate_loss(&batch, &Rng::new(seed), GAMMA_KL).unwrap();
        assert!((b.total - (b.rec + GAMMA_KL * b.kl)).abs() < 1e-12, "{b:?}");
        assert!(b.kl >= 0.0);
    }
}
