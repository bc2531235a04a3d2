//! Variational multimodal decoder: per-mode latent sampling with the
//! reparameterization trick and one-shot MLP decoding into AIS and CCTV
//! trajectories.

use cmivtp_numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{uniform_init, Linear};

pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UavdConfig {
    pub d: usize,
    pub k_modes: usize,
    pub latent_dim: usize,
    pub t_fut: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UavdParams {
    pub cfg: UavdConfig,
    /// Mode embeddings `E: [K × d]`.
    pub modes: ParamId,
    pub mu: Linear,
    pub logvar: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
    pub ais_head: Linear,
    pub cctv_head: Linear,
}

pub struct Latent {
    pub z: Var,
    pub mu: Var,
    pub logvar: Var,
}

pub struct Decoded {
    /// `[T_fut × 2]` in model units.
    pub ais: Var,
    pub cctv: Var,
    /// Pre-head features `[T_fut × d]`.
    pub features: Var,
}

pub struct ModeOutput {
    pub latent: Latent,
    pub decoded: Decoded,
}

/// Source of the reparameterization noise ε.
pub enum Noise<'a> {
    Sample(&'a mut Rng),
    /// ε = 0, so z = μ.
    Zero,
}

impl Noise<'_> {
    fn draw(&mut self, n: usize) -> Vec<f64> {
        match self {
            Noise::Sample(rng) => (0..n).map(|_| rng.normal()).collect(),
            Noise::Zero => vec![0.0; n],
        }
    }
}

impl UavdParams {
    pub fn new(store: &mut ParamStore, cfg: UavdConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.k_modes == 0 || cfg.latent_dim == 0 || cfg.t_fut == 0 {
            return Err(Error::Invalid("decoder needs K ≥ 1, J ≥ 1 and T_fut ≥ 1".into()));
        }
        let UavdConfig {
            d,
            k_modes,
            latent_dim: j,
            t_fut,
        } = cfg;
        Ok(UavdParams {
            cfg,
            modes: store.insert("uavd.modes", uniform_init(&[k_modes, d], d, rng)),
            mu: Linear::new(store, "uavd.mu", 2 * d, j, rng),
            logvar: Linear::new(store, "uavd.logvar", 2 * d, j, rng),
            dec1: Linear::new(store, "uavd.dec1", d + j + d, 4 * d, rng),
            dec2: Linear::new(store, "uavd.dec2", 4 * d, t_fut * d, rng),
            ais_head: Linear::new(store, "uavd.ais_head", d, 2, rng),
            cctv_head: Linear::new(store, "uavd.cctv_head", d, 2, rng),
        })
    }

    pub fn mode_embedding(&self, tape: &mut Tape, store: &ParamStore, k: usize) -> Result<Var> {
        if k >= self.cfg.k_modes {
            return Err(Error::Invalid(format!("mode {k} out of range for K = {}", self.cfg.k_modes)));
        }
        let e = tape.param(store, self.modes);
        Ok(tape.slice(e, k, k + 1)?)
    }

    /// `z = μ + ε ⊙ exp(½·logvar)` with `ε` supplied explicitly (`[J]`).
    pub fn sample_latent_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_enc: Var,
        k: usize,
        eps: &[f64],
    ) -> Result<Latent> {
        let j = self.cfg.latent_dim;
        if eps.len() != j {
            return Err(Error::Invalid(format!("ε has {} entries, latent dim is {j}", eps.len())));
        }
        let e_k = self.mode_embedding(tape, store, k)?;
        let cond = tape.concat_cols(&[f_enc, e_k])?;
        let mu = self.mu.forward(tape, store, cond)?;
        let lv = self.logvar.forward(tape, store, cond)?;
        let logvar = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let eps = tape.constant(Tensor::new(&[1, j], eps.to_vec())?);
        let noise = tape.mul(sigma, eps)?;
        let z = tape.add(mu, noise)?;
        Ok(Latent { z, mu, logvar })
    }

    pub fn sample_latent(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_enc: Var,
        k: usize,
        noise: &mut Noise<'_>,
    ) -> Result<Latent> {
        let eps = noise.draw(self.cfg.latent_dim);
        self.sample_latent_with(tape, store, f_enc, k, &eps)
    }

    /// One-shot decode of the whole horizon: no recurrence.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, f_enc: Var, z: Var, e_k: Var) -> Result<Decoded> {
        let x = tape.concat_cols(&[f_enc, z, e_k])?;
        let h = self.dec1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let flat = self.dec2.forward(tape, store, h)?;
        let features = tape.reshape(flat, &[self.cfg.t_fut, self.cfg.d])?;
        let ais = self.ais_head.forward(tape, store, features)?;
        let cctv = self.cctv_head.forward(tape, store, features)?;
        Ok(Decoded { ais, cctv, features })
    }

    /// All K modes in order `k = 0..K`; each mode draws its J normals in turn.
    pub fn predict_modes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_enc: Var,
        noise: &mut Noise<'_>,
    ) -> Result<Vec<ModeOutput>> {
        (0..self.cfg.k_modes)
            .map(|k| {
                let latent = self.sample_latent(tape, store, f_enc, k, noise)?;
                let e_k = self.mode_embedding(tape, store, k)?;
                let decoded = self.decode(tape, store, f_enc, latent.z, e_k)?;
                Ok(ModeOutput { latent, decoded })
            })
            .collect()
    }
}
