//! Experiment grid over horizon × density × dark rate, averaged over seeded runs.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use cmivtp_numerics::Rng;

use crate::data::{apply_dark_vessels, Density, Point, VesselSample};
use crate::error::{Error, Result};
use crate::losses::{ade_fde, diversity, min_ade_fde};
use crate::model::{PredictionSet, Predictor};

pub const METRICS: [&str; 9] = [
    "ais_min_ade",
    "ais_min_fde",
    "ais_ade",
    "ais_fde",
    "cctv_min_ade",
    "cctv_min_fde",
    "cctv_ade",
    "cctv_fde",
    "diversity",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HorizonMode {
    /// One model, predictions cut to each horizon.
    Truncated,
    /// One model per horizon.
    PerHorizon,
}

impl HorizonMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HorizonMode::Truncated => "truncated",
            HorizonMode::PerHorizon => "per_horizon",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub rhos: Vec<f64>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl EvalGrid {
    pub fn validate(&self) -> Result<()> {
        if self.rhos.is_empty() || self.horizons.is_empty() || self.seeds.is_empty() {
            return Err(Error::Invalid("evaluation grid needs at least one rho, horizon and seed".into()));
        }
        if let Some(r) = self.rhos.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Invalid(format!("rho {r} outside [0, 1]")));
        }
        if self.horizons.contains(&0) {
            return Err(Error::Invalid("horizon 0".into()));
        }
        Ok(())
    }
}

/// `density == None` is the row pooling every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellKey {
    pub dt: usize,
    pub density: Option<Density>,
    pub rho: f64,
}

impl Eq for CellKey {}

impl Ord for CellKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dt
            .cmp(&other.dt)
            .then(self.density.cmp(&other.density))
            .then(self.rho.total_cmp(&other.rho))
    }
}

impl PartialOrd for CellKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl CellKey {
    pub fn density_label(&self) -> &'static str {
        self.density.map_or("all", Density::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Stat { mean, std: var.max(0.0).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    /// Samples per run in this cell.
    pub samples: usize,
    /// Indexed like [`METRICS`].
    pub metrics: Vec<Stat>,
}

impl CellStats {
    pub fn get(&self, metric: &str) -> Option<Stat> {
        METRICS.iter().position(|m| *m == metric).map(|i| self.metrics[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub runs: usize,
    pub config_hash: u64,
    pub horizon_mode: HorizonMode,
    /// `None` marks a cell with no samples.
    pub cells: BTreeMap<CellKey, Option<CellStats>>,
    pub runtime_secs: f64,
}

fn sample_metrics(preds: &PredictionSet, s: &VesselSample, dt: usize) -> Result<[f64; 9]> {
    let p = preds.truncated(dt);
    let gt_a = &s.fut_ais[..dt];
    let gt_c = &s.fut_cctv[..dt];
    let (ma, mf) = min_ade_fde(&p.ais, gt_a)?;
    let (a0, f0) = ade_fde(&p.ais[0], gt_a)?;
    let (cma, cmf) = min_ade_fde(&p.cctv, gt_c)?;
    let (c0, cf0) = ade_fde(&p.cctv[0], gt_c)?;
    Ok([ma, mf, a0, f0, cma, cmf, c0, cf0, diversity(&p.ais)?])
}

fn rho_stream(rho: f64) -> u64 {
    rho.to_bits()
}

fn predict_all(model: &dyn Predictor, data: &[VesselSample], seed: u64, rho: f64) -> Result<Vec<PredictionSet>> {
    let base = Rng::new(seed).fork(rho_stream(rho));
    data.iter()
        .enumerate()
        .map(|(i, s)| model.predict(s, &mut base.fork(i as u64)))
        .collect()
}

/// `models` holds one predictor (truncated mode) or one per grid horizon
/// (per-horizon mode, same order as `grid.horizons`).
pub fn evaluate(data: &[VesselSample], models: &[&dyn Predictor], grid: &EvalGrid, config_hash: u64) -> Result<ExperimentReport> {
    let start = std::time::Instant::now();
    grid.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("empty evaluation set".into()));
    }
    let horizon_mode = match models.len() {
        1 => HorizonMode::Truncated,
        n if n == grid.horizons.len() => HorizonMode::PerHorizon,
        n => {
            return Err(Error::Invalid(format!(
                "{n} models for {} horizons; pass one model or one per horizon",
                grid.horizons.len()
            )))
        }
    };
    for (j, &dt) in grid.horizons.iter().enumerate() {
        let m = models[if horizon_mode == HorizonMode::Truncated { 0 } else { j }];
        if m.t_fut() < dt {
            return Err(Error::Invalid(format!("horizon {dt} exceeds model T_fut {}", m.t_fut())));
        }
        if let Some(s) = data.iter().find(|s| s.t_fut() < dt) {
            return Err(Error::Invalid(format!("horizon {dt} exceeds future length of `{}`", s.vessel_id)));
        }
    }

    let mut densities: Vec<Option<Density>> = vec![None];
    densities.extend([Density::Low, Density::Medium, Density::High].map(Some));

    // per cell: one vector of per-run means per metric
    let mut acc: BTreeMap<CellKey, (usize, Vec<Vec<f64>>)> = BTreeMap::new();
    for &seed in &grid.seeds {
        for &rho in &grid.rhos {
            let dark = apply_dark_vessels(data, rho, seed)?;
            let shared = match horizon_mode {
                HorizonMode::Truncated => Some(predict_all(models[0], &dark, seed, rho)?),
                HorizonMode::PerHorizon => None,
            };
            for (j, &dt) in grid.horizons.iter().enumerate() {
                let own;
                let preds = match &shared {
                    Some(p) => p,
                    None => {
                        own = predict_all(models[j], &dark, seed, rho)?;
                        &own
                    }
                };
                let per_sample = dark
                    .iter()
                    .zip(preds)
                    .map(|(s, p)| sample_metrics(p, s, dt))
                    .collect::<Result<Vec<_>>>()?;
                for &density in &densities {
                    let rows: Vec<&[f64; 9]> = dark
                        .iter()
                        .zip(&per_sample)
                        .filter(|(s, _)| density.is_none_or(|d| s.density == d))
                        .map(|(_, m)| m)
                        .collect();
                    let key = CellKey { dt, density, rho };
                    let entry = acc.entry(key).or_insert_with(|| (rows.len(), vec![Vec::new(); METRICS.len()]));
                    if rows.is_empty() {
                        continue;
                    }
                    for (mi, col) in entry.1.iter_mut().enumerate() {
                        col.push(rows.iter().map(|r| r[mi]).sum::<f64>() / rows.len() as f64);
                    }
                }
            }
        }
    }

    let cells = acc
        .into_iter()
        .map(|(k, (samples, cols))| {
            let stats = (samples > 0).then(|| CellStats {
                samples,
                metrics: cols.iter().map(|c| Stat::of(c)).collect(),
            });
            (k, stats)
        })
        .collect();
    Ok(ExperimentReport {
        runs: grid.seeds.len(),
        config_hash,
        horizon_mode,
        cells,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

impl ExperimentReport {
    /// Rows sorted by cell key. Runtime is left out so that reruns compare
    /// byte for byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dt,density,rho,runs,samples");
        for m in METRICS {
            let _ = write!(out, ",{m}_mean,{m}_std");
        }
        out.push_str(",horizon_mode,config_hash\n");
        for (k, cell) in &self.cells {
            let _ = write!(out, "{},{},{},{}", k.dt, k.density_label(), k.rho, self.runs);
            match cell {
                Some(c) => {
                    let _ = write!(out, ",{}", c.samples);
                    for s in &c.metrics {
                        let _ = write!(out, ",{},{}", s.mean, s.std);
                    }
                }
                None => {
                    out.push_str(",0");
                    for _ in METRICS {
                        out.push_str(",absent,absent");
                    }
                }
            }
            let _ = writeln!(out, ",{},{:016x}", self.horizon_mode.as_str(), self.config_hash);
        }
        out
    }

    pub fn cell(&self, dt: usize, density: Option<Density>, rho: f64) -> Option<&CellStats> {
        self.cells.get(&CellKey { dt, density, rho }).and_then(Option::as_ref)
    }
}

/// Mean over samples of a per-sample metric at full horizon, used for
/// quick comparisons outside the grid.
pub fn mean_min_ade(model: &dyn Predictor, data: &[VesselSample], seed: u64, rho: f64) -> Result<(f64, f64)> {
    let dark = apply_dark_vessels(data, rho, seed)?;
    let preds = predict_all(model, &dark, seed, rho)?;
    let t = model.t_fut();
    let mut ais = 0.0;
    let mut cctv = 0.0;
    for (s, p) in dark.iter().zip(&preds) {
        ais += min_ade_fde(&p.ais, &s.fut_ais[..t])?.0;
        cctv += min_ade_fde(&p.cctv, &s.fut_cctv[..t])?.0;
    }
    let n = dark.len() as f64;
    Ok((ais / n, cctv / n))
}

/// Mean constant-velocity ADE of the AIS head over `data`, extrapolating
/// from the full observed track.
pub fn constant_velocity_ade(data: &[VesselSample], t_fut: usize) -> Result<f64> {
    let mut sum = 0.0;
    for s in data {
        let obs: &[Point] = &s.obs_ais.points;
        let pred = crate::losses::constant_velocity_baseline(obs, t_fut)?;
        sum += ade_fde(&pred, &s.fut_ais[..t_fut])?.0;
    }
    Ok(sum / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::toy_sample;
    use crate::model::OraclePredictor;

    fn toy_set() -> Vec<VesselSample> {
        (0..6)
            .map(|i| {
                let mut s = toy_sample(&format!("v{i}"), 4, 6);
                s.density = if i < 4 { Density::Low } else { Density::Medium };
                s
            })
            .collect()
    }

    #[test]
    fn oracle_scores_zero_and_missing_density_is_absent() {
        let data = toy_set();
        let oracle = OraclePredictor { k_modes: 3, t_fut: 6 };
        let grid = EvalGrid { rhos: vec![0.0, 0.5], horizons: vec![3, 6], seeds: vec![1, 2] };
        let r = evaluate(&data, &[&oracle], &grid, 7).unwrap();
        assert_eq!(r.cells.len(), 2 * 2 * 4);
        for (k, c) in &r.cells {
            match (k.density, c) {
                (Some(Density::High), c) => assert!(c.is_none()),
                (_, Some(c)) => assert!(c.metrics.iter().all(|s| s.mean == 0.0 && s.std == 0.0)),
                (_, None) => panic!("cell {k:?} missing"),
            }
        }
        assert_eq!(r.cell(6, None, 0.5).unwrap().samples, 6);
        assert!(r.to_csv().contains(",high,0,2,0,absent"));
    }

    #[test]
    fn single_run_has_zero_std_and_reruns_match() {
        let data = toy_set();
        let oracle = OraclePredictor { k_modes: 1, t_fut: 6 };
        let grid = EvalGrid { rhos: vec![0.0], horizons: vec![6], seeds: vec![3] };
        let a = evaluate(&data, &[&oracle], &grid, 1).unwrap();
        let b = evaluate(&data, &[&oracle], &grid, 1).unwrap();
        assert_eq!(a.runs, 1);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.cells.values().flatten().all(|c| c.metrics.iter().all(|s| s.std == 0.0)));
    }

    #[test]
    fn horizon_checks() {
        let data = toy_set();
        let oracle = OraclePredictor { k_modes: 1, t_fut: 6 };
        let grid = EvalGrid { rhos: vec![0.0], horizons: vec![7], seeds: vec![0] };
        assert!(evaluate(&data, &[&oracle], &grid, 0).is_err());
        let grid = EvalGrid { rhos: vec![0.0], horizons: vec![3, 6, 2], seeds: vec![0] };
        assert!(evaluate(&data, &[&oracle, &oracle], &grid, 0).is_err());
        let r = evaluate(&data, &[&oracle, &oracle, &oracle], &grid, 0).unwrap();
        assert_eq!(r.horizon_mode, HorizonMode::PerHorizon);
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std), (2.0, 1.0));
    }
}
