//! Training loop with plateau learning-rate scheduling.

use cmivtp_numerics::{Adam, Rng, Tape};

use crate::data::{apply_dark_vessels, VesselSample};
use crate::error::{Error, Result};
use crate::losses::GAMMA_KL;
use crate::model::CmivtpModel;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_factor: f64,
    pub patience: usize,
    /// Relative improvement below which an epoch counts as a plateau epoch.
    pub plateau_threshold: f64,
    pub seed: u64,
    pub gamma_kl: f64,
    pub k_max: usize,
    /// Fraction of training vessels turned dark each epoch.
    pub train_dark_rate: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 100,
            batch_size: 16,
            lr_factor: 0.5,
            patience: 10,
            plateau_threshold: 1e-4,
            seed: 0,
            gamma_kl: GAMMA_KL,
            k_max: 16,
            train_dark_rate: 0.2,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("train config: {m}")));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be a finite non-negative number");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.k_max == 0 {
            return bad("epochs, batch_size, patience and k_max must be positive");
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad("lr_factor must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.train_dark_rate) {
            return bad("train_dark_rate must lie in [0, 1]");
        }
        if self.plateau_threshold < 0.0 || self.gamma_kl < 0.0 {
            return bad("plateau_threshold and gamma_kl must be non-negative");
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once more than `patience`
/// consecutive epochs fail to improve on the best loss by a relative
/// `threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            threshold,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    /// Record an epoch loss; returns `true` when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.threshold) || self.best == f64::INFINITY {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            self.reductions += 1;
            return true;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
}

pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,steps,lr,total,rec,kl\n");
    for r in curve {
        out.push_str(&format!("{},{},{:e},{:e},{:e},{:e}\n", r.epoch, r.steps, r.lr, r.total, r.rec, r.kl));
    }
    out
}

/// Train in place. Epoch `e` shuffles with `Rng(seed).fork(1).fork(e)` and darkens
/// `train_dark_rate` of the vessels with seed `seed + e`.
pub fn train(model: &mut CmivtpModel, data: &[VesselSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training needs a nonempty dataset".into()));
    }
    let mut adam = Adam::default();
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_factor, cfg.patience, cfg.plateau_threshold);
    let root = Rng::new(cfg.seed);
    let shuffle_root = root.fork(1);
    let noise_root = root.fork(2);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let epoch_data = if cfg.train_dark_rate > 0.0 {
            apply_dark_vessels(data, cfg.train_dark_rate, cfg.seed.wrapping_add(epoch as u64))?
        } else {
            data.to_vec()
        };
        let mut order: Vec<usize> = (0..epoch_data.len()).collect();
        shuffle_root.fork(epoch as u64).shuffle(&mut order);

        let lr = sched.lr;
        let (mut total, mut rec, mut kl, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&VesselSample> = chunk.iter().map(|&i| &epoch_data[i]).collect();
            let mut tape = Tape::new();
            let (loss, br) = model.batch_loss(&mut tape, &batch, &noise_root.fork(steps as u64), cfg.gamma_kl)?;
            if !br.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss: br.total,
                });
            }
            tape.backward(loss)?;
            model.store.zero_grads();
            tape.accumulate_param_grads(&mut model.store);
            adam.step(&mut model.store, lr)?;
            steps += 1;
            total += br.total;
            rec += br.rec;
            kl += br.kl;
            batches += 1;
        }
        if batches == 0 {
            break 'epochs;
        }
        let n = batches as f64;
        curve.push(EpochRecord {
            epoch,
            steps,
            lr,
            total: total / n,
            rec: rec / n,
            kl: kl / n,
        });
        sched.observe(total / n);
    }
    Ok(TrainOutcome { curve, steps })
}
