//! Finite-difference check of the end-to-end training loss against the tape.

use cmivtp_numerics::gradcheck::relative_error;
use cmivtp_numerics::{Rng, Tape};

use crate::data::VesselSample;
use crate::error::Result;
use crate::model::CmivtpModel;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub probes: usize,
    /// Probes whose ±h evaluations took different ReLU/clamp branches or
    /// picked different winning modes. Central differences are meaningless
    /// across a kink, so these are left out of `max_rel_error`.
    pub kink_crossings: usize,
    /// Parameter tensors that received at least one probe.
    pub tensors: usize,
}

fn eval(model: &CmivtpModel, batch: &[&VesselSample], noise: &Rng, gamma_kl: f64) -> Result<(f64, u64, Vec<usize>)> {
    let mut tape = Tape::new();
    let (_, br) = model.batch_loss(&mut tape, batch, noise, gamma_kl)?;
    Ok((br.total, tape.branch_signature(), br.winners))
}

/// Probe up to `per_tensor` random entries of every parameter tensor with
/// central differences of step `h`. The batch noise is fixed by
/// `noise_seed` so that every evaluation sees the same latent draws.
pub fn model_grad_check(
    model: &mut CmivtpModel,
    batch: &[&VesselSample],
    gamma_kl: f64,
    noise_seed: u64,
    per_tensor: usize,
    probe_seed: u64,
    h: f64,
) -> Result<ModelGradCheck> {
    let noise = Rng::new(noise_seed);
    let mut tape = Tape::new();
    let (loss, _) = model.batch_loss(&mut tape, batch, &noise, gamma_kl)?;
    tape.backward(loss)?;
    model.store.zero_grads();
    tape.accumulate_param_grads(&mut model.store);

    let mut pick = Rng::new(probe_seed);
    let mut report = ModelGradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        probes: 0,
        kink_crossings: 0,
        tensors: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).numel();
        let mut idx: Vec<usize> = (0..n).collect();
        pick.shuffle(&mut idx);
        idx.truncate(per_tensor.min(n));
        report.tensors += 1;
        for i in idx {
            let analytic = model.store.get(id).grad().map_or(0.0, |g| g[i]);
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + h;
            let plus = eval(model, batch, &noise, gamma_kl);
            model.store.get_mut(id).data_mut()[i] = orig - h;
            let minus = eval(model, batch, &noise, gamma_kl);
            model.store.get_mut(id).data_mut()[i] = orig;
            let ((fp, sp, wp), (fm, sm, wm)) = (plus?, minus?);
            report.probes += 1;
            if sp != sm || wp != wm {
                report.kink_crossings += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let e = relative_error(analytic, numeric);
            if e > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = e;
                report.worst_param = model.store.name(id).to_string();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
