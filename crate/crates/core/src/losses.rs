//! Training objective and evaluation metrics.

use cmivtp_numerics::{Tape, Var};

use crate::data::Point;
use crate::error::{Error, Result};

pub const GAMMA_KL: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    /// Winning mode per sample.
    pub winners: Vec<usize>,
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `mean_t ‖â−a‖ + mean_t ‖ĉ−c‖` on the tape.
pub fn mode_error(tape: &mut Tape, ais: Var, cctv: Var, gt_ais: Var, gt_cctv: Var) -> Result<Var> {
    let mut terms = [ais, cctv];
    for (term, gt) in terms.iter_mut().zip([gt_ais, gt_cctv]) {
        let diff = tape.sub(*term, gt)?;
        let norms = tape.row_norm(diff)?;
        *term = tape.mean(norms);
    }
    Ok(tape.add(terms[0], terms[1])?)
}

/// Joint min over modes; the winner is the lowest index among equal errors.
/// Only the winner's tensors carry gradient.
pub fn rec_loss(tape: &mut Tape, modes: &[(Var, Var)], gt_ais: Var, gt_cctv: Var) -> Result<(Var, usize)> {
    if modes.is_empty() {
        return Err(Error::Invalid("reconstruction loss needs at least one mode".into()));
    }
    let mut best: Option<(Var, usize, f64)> = None;
    for (k, &(a, c)) in modes.iter().enumerate() {
        let e = mode_error(tape, a, c, gt_ais, gt_cctv)?;
        let v = tape.data(e)[0];
        if best.is_none_or(|(_, _, b)| v < b) {
            best = Some((e, k, v));
        }
    }
    let (e, k, _) = best.expect("at least one mode");
    Ok((e, k))
}

/// `−½ Σ_j (1 + logvar − μ² − exp(logvar))` on the tape.
pub fn kl_loss(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let mu2 = tape.mul(mu, mu)?;
    let ev = tape.exp(logvar);
    let a = tape.add_scalar(logvar, 1.0);
    let b = tape.sub(a, mu2)?;
    let c = tape.sub(b, ev)?;
    let s = tape.sum(c);
    Ok(tape.scale(s, -0.5))
}

pub fn kl_value(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| m * m + l.exp() - 1.0 - l)
        .sum::<f64>()
}

fn check_len(pred: &[Point], gt: &[Point]) -> Result<()> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Invalid(format!(
            "trajectory lengths differ or are empty: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn ade_fde(pred: &[Point], gt: &[Point]) -> Result<(f64, f64)> {
    check_len(pred, gt)?;
    let d: Vec<f64> = pred.iter().zip(gt).map(|(&a, &b)| dist(a, b)).collect();
    Ok((d.iter().sum::<f64>() / d.len() as f64, d[d.len() - 1]))
}

/// Plain-value reconstruction error of each `(ais, cctv)` mode and the winner.
pub fn rec_loss_value(modes: &[(Vec<Point>, Vec<Point>)], gt_ais: &[Point], gt_cctv: &[Point]) -> Result<(f64, usize)> {
    let mut best: Option<(f64, usize)> = None;
    for (k, (a, c)) in modes.iter().enumerate() {
        let e = ade_fde(a, gt_ais)?.0 + ade_fde(c, gt_cctv)?.0;
        if best.is_none_or(|(b, _)| e < b) {
            best = Some((e, k));
        }
    }
    best.ok_or_else(|| Error::Invalid("reconstruction loss needs at least one mode".into()))
}

/// `(minADE, minFDE)`, each minimized independently over modes.
pub fn min_ade_fde(modes: &[Vec<Point>], gt: &[Point]) -> Result<(f64, f64)> {
    if modes.is_empty() {
        return Err(Error::Invalid("minADE needs at least one mode".into()));
    }
    let mut out = (f64::INFINITY, f64::INFINITY);
    for m in modes {
        let (a, f) = ade_fde(m, gt)?;
        out = (out.0.min(a), out.1.min(f));
    }
    Ok(out)
}

/// Mean pairwise ADE over distinct mode pairs; 0 for a single mode.
pub fn diversity(modes: &[Vec<Point>]) -> Result<f64> {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..modes.len() {
        for j in i + 1..modes.len() {
            sum += ade_fde(&modes[i], &modes[j])?.0;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { sum / pairs as f64 })
}

/// Extrapolate with the mean velocity over the last `min(3, T_obs−1)` steps.
pub fn constant_velocity_baseline(observed: &[Point], t_fut: usize) -> Result<Vec<Point>> {
    let n = observed.len();
    if n < 2 {
        return Err(Error::Invalid(format!("constant velocity needs ≥ 2 observed points, got {n}")));
    }
    let span = 3.min(n - 1);
    let last = observed[n - 1];
    let from = observed[n - 1 - span];
    let v = [(last[0] - from[0]) / span as f64, (last[1] - from[1]) / span as f64];
    Ok((1..=t_fut)
        .map(|t| [last[0] + v[0] * t as f64, last[1] + v[1] * t as f64])
        .collect())
}
