//! End-to-end predictor: scene encoder → cross-modal fusion → variational
//! decoder → bank refinement of the AIS head.
//!
//! Coordinates enter the network relative to an anchor and multiplied by
//! `coord_scale`; the heads emit displacements in the same units. The AIS
//! anchor is the last available observed AIS point. A fully dark vessel
//! gets a learned affine map of its last normalized CCTV point instead.
//! CCTV works in frame-normalized units (pixels / raster size) anchored at
//! the last observed CCTV point.

use cmivtp_numerics::{ParamStore, Rng, Tape, Tensor, Var};

use crate::cmie::{CmieParams, TrajectoryInputs};
use crate::data::{Point, VesselSample};
use crate::error::{Error, Result};
use crate::losses::{kl_loss, mode_error, LossBreakdown};
use crate::nn::{row, Linear};
use crate::uavd::{Latent, Noise, UavdConfig, UavdParams};
use crate::vgtb::{FusionForm, RefinementParams, Retrieval, TrajectoryBank};
use crate::vstae::{VstaeConfig, VstaeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Modalities {
    #[default]
    Full,
    /// AIS only: no scene or CCTV inputs, loss on the AIS head alone.
    AisOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub k_modes: usize,
    pub latent_dim: usize,
    pub t_obs: usize,
    pub t_fut: usize,
    pub c_f: usize,
    pub phi: f64,
    pub coord_scale: f64,
    pub gamma_off: f64,
    pub fusion: FusionForm,
    pub modalities: Modalities,
    pub use_bank: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            heads: 2,
            k_modes: 5,
            latent_dim: 16,
            t_obs: 8,
            t_fut: 36,
            c_f: 16,
            phi: 0.1,
            coord_scale: 10.0,
            gamma_off: 0.5,
            fusion: FusionForm::GateOnPrior,
            modalities: Modalities::Full,
            use_bank: true,
            init_seed: 0,
        }
    }
}

const CONFIG_LAYOUT_VERSION: f64 = 1.0;

impl ModelConfig {
    /// Flat numeric encoding stored in checkpoints.
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            CONFIG_LAYOUT_VERSION,
            self.d as f64,
            self.heads as f64,
            self.k_modes as f64,
            self.latent_dim as f64,
            self.t_obs as f64,
            self.t_fut as f64,
            self.c_f as f64,
            self.phi,
            self.coord_scale,
            self.gamma_off,
            match self.fusion {
                FusionForm::GateOnPrior => 0.0,
                FusionForm::GateOnBase => 1.0,
            },
            match self.modalities {
                Modalities::Full => 0.0,
                Modalities::AisOnly => 1.0,
            },
            self.use_bank as u8 as f64,
            (self.init_seed & 0xFFFF_FFFF) as f64,
            (self.init_seed >> 32) as f64,
        ]
    }

    pub fn from_vec(v: &[f64]) -> Result<Self> {
        let bad = |msg: &str| Error::Schema {
            name: "meta.model_config".into(),
            msg: msg.into(),
        };
        if v.len() != 16 || v[0] != CONFIG_LAYOUT_VERSION {
            return Err(bad("unsupported layout"));
        }
        let count = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e9 {
                Ok(x as usize)
            } else {
                Err(bad("expected a non-negative integer"))
            }
        };
        let cfg = ModelConfig {
            d: count(v[1])?,
            heads: count(v[2])?,
            k_modes: count(v[3])?,
            latent_dim: count(v[4])?,
            t_obs: count(v[5])?,
            t_fut: count(v[6])?,
            c_f: count(v[7])?,
            phi: v[8],
            coord_scale: v[9],
            gamma_off: v[10],
            fusion: match v[11] {
                0.0 => FusionForm::GateOnPrior,
                1.0 => FusionForm::GateOnBase,
                _ => return Err(bad("unknown fusion form")),
            },
            modalities: match v[12] {
                0.0 => Modalities::Full,
                1.0 => Modalities::AisOnly,
                _ => return Err(bad("unknown modalities")),
            },
            use_bank: match v[13] {
                0.0 => false,
                1.0 => true,
                _ => return Err(bad("use_bank must be 0 or 1")),
            },
            init_seed: (count(v[14])? as u64) | ((count(v[15])? as u64) << 32),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Lower bound on the number of scalars in a model with this config.
    pub fn min_param_count(&self) -> usize {
        let d = self.d;
        [
            self.k_modes.saturating_mul(d),
            self.latent_dim.saturating_mul(d),
            self.t_fut.saturating_mul(d + 2).saturating_mul(2 * d),
            match self.modalities {
                Modalities::Full => self.c_f.saturating_mul(d),
                Modalities::AisOnly => 0,
            },
        ]
        .into_iter()
        .fold(0usize, usize::saturating_add)
    }

    /// FNV-1a 64 over the little-endian numeric encoding.
    pub fn hash(&self) -> u64 {
        let bytes: Vec<u8> = self.to_vec().iter().flat_map(|v| v.to_le_bytes()).collect();
        fnv1a(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("model config: {m}")));
        if self.d < 2 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be ≥ 2 and divisible by heads = {}", self.d, self.heads));
        }
        if self.k_modes == 0 || self.latent_dim == 0 || self.t_obs == 0 || self.t_fut == 0 || self.c_f == 0 {
            return bad("k_modes, latent_dim, t_obs, t_fut and c_f must be positive".into());
        }
        if !(self.phi > 0.0) || !(self.coord_scale > 0.0) || !(self.gamma_off >= 0.0) {
            return bad("phi and coord_scale must be positive, gamma_off non-negative".into());
        }
        Ok(())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// K candidate futures per modality with the latents that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// `K × T_fut` AIS points (normalized geographic units).
    pub ais: Vec<Vec<Point>>,
    /// `K × T_fut` CCTV points (pixels).
    pub cctv: Vec<Vec<Point>>,
    pub latents: Vec<Vec<f64>>,
    pub mus: Vec<Vec<f64>>,
    pub logvars: Vec<Vec<f64>>,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.ais.len()
    }

    /// Keep the first `t` future steps of every mode.
    pub fn truncated(&self, t: usize) -> PredictionSet {
        let cut = |m: &Vec<Vec<Point>>| m.iter().map(|x| x[..t.min(x.len())].to_vec()).collect();
        PredictionSet {
            ais: cut(&self.ais),
            cctv: cut(&self.cctv),
            latents: self.latents.clone(),
            mus: self.mus.clone(),
            logvars: self.logvars.clone(),
        }
    }
}

pub trait Predictor {
    fn k_modes(&self) -> usize;
    fn t_fut(&self) -> usize;
    fn predict(&self, sample: &VesselSample, rng: &mut Rng) -> Result<PredictionSet>;
}

/// Returns the ground truth for every mode. Test hook for the harness.
#[derive(Debug, Clone, Copy)]
pub struct OraclePredictor {
    pub k_modes: usize,
    pub t_fut: usize,
}

impl Predictor for OraclePredictor {
    fn k_modes(&self) -> usize {
        self.k_modes
    }

    fn t_fut(&self) -> usize {
        self.t_fut
    }

    fn predict(&self, sample: &VesselSample, _rng: &mut Rng) -> Result<PredictionSet> {
        let k = self.k_modes;
        Ok(PredictionSet {
            ais: vec![sample.fut_ais[..self.t_fut].to_vec(); k],
            cctv: vec![sample.fut_cctv[..self.t_fut].to_vec(); k],
            latents: vec![Vec::new(); k],
            mus: vec![Vec::new(); k],
            logvars: vec![Vec::new(); k],
        })
    }
}

/// Per-mode model outputs on a tape.
pub struct ModeVars {
    /// `[T_fut × 2]` absolute AIS coordinates.
    pub ais: Var,
    /// `[T_fut × 2]` frame-normalized CCTV coordinates.
    pub cctv: Var,
    pub latent: Latent,
    pub beta: Option<Var>,
}

pub struct SampleForward {
    pub modes: Vec<ModeVars>,
    pub retrieval: Option<Retrieval>,
    pub f_enc: Var,
}

#[derive(Debug, Clone)]
pub struct CmivtpModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vstae: Option<VstaeParams>,
    pub cmie: CmieParams,
    pub uavd: UavdParams,
    pub refine: RefinementParams,
    pub anchor_map: Linear,
    pub bank: Option<TrajectoryBank>,
}

struct Prepared {
    inputs: TrajectoryInputs,
    ais_anchor: Option<Point>,
    cctv_anchor: Point,
    query: Option<Vec<Point>>,
}

impl CmivtpModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(cfg.init_seed);
        let vstae = match cfg.modalities {
            Modalities::Full => Some(VstaeParams::new(
                &mut store,
                VstaeConfig {
                    d: cfg.d,
                    c_f: cfg.c_f,
                    phi: cfg.phi,
                },
                &mut rng,
            )?),
            Modalities::AisOnly => None,
        };
        let cmie = CmieParams::new(&mut store, cfg.d, cfg.heads, &mut rng)?;
        let uavd = UavdParams::new(
            &mut store,
            UavdConfig {
                d: cfg.d,
                k_modes: cfg.k_modes,
                latent_dim: cfg.latent_dim,
                t_fut: cfg.t_fut,
            },
            &mut rng,
        )?;
        let refine = RefinementParams::new(&mut store, cfg.d, cfg.t_fut, cfg.gamma_off, cfg.fusion, &mut rng);
        let anchor_map = Linear::new(&mut store, "model.dark_anchor", 2, 2, &mut rng);
        // start the dark-vessel anchor at the identity map
        store.get_mut(anchor_map.w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        Ok(CmivtpModel {
            cfg,
            store,
            vstae,
            cmie,
            uavd,
            refine,
            anchor_map,
            bank: None,
        })
    }

    pub fn with_bank(mut self, bank: TrajectoryBank) -> Result<Self> {
        self.set_bank(Some(bank))?;
        Ok(self)
    }

    pub fn set_bank(&mut self, bank: Option<TrajectoryBank>) -> Result<()> {
        if let Some(b) = &bank {
            b.validate()?;
            if b.header.t_obs != self.cfg.t_obs || b.header.t_fut != self.cfg.t_fut {
                return Err(Error::Invalid(format!(
                    "bank windows ({}, {}) do not match the model's ({}, {})",
                    b.header.t_obs, b.header.t_fut, self.cfg.t_obs, self.cfg.t_fut
                )));
            }
            if b.entries.is_empty() {
                return Err(Error::Invalid("trajectory bank has no entries".into()));
            }
        }
        self.bank = bank;
        Ok(())
    }

    fn prepare(&self, s: &VesselSample) -> Result<Prepared> {
        s.validate()
            .map_err(|(f, m)| Error::Invalid(format!("sample {}: {f}: {m}", s.vessel_id)))?;
        if s.t_obs() != self.cfg.t_obs {
            return Err(Error::Invalid(format!(
                "sample {} has {} observed steps, model expects {}",
                s.vessel_id,
                s.t_obs(),
                self.cfg.t_obs
            )));
        }
        let cs = self.cfg.coord_scale;
        let frame = [s.scenes[0].width as f64, s.scenes[0].height as f64];
        let ais_anchor = s.obs_ais.last_available();
        let anchor = ais_anchor.unwrap_or([0.0, 0.0]);
        let ais = s
            .obs_ais
            .points
            .iter()
            .zip(&s.obs_ais.available)
            .map(|(p, &a)| if a { [(p[0] - anchor[0]) * cs, (p[1] - anchor[1]) * cs] } else { [0.0, 0.0] })
            .collect();
        let last_c = s.obs_cctv.points[s.t_obs() - 1];
        let cctv_anchor = [last_c[0] / frame[0], last_c[1] / frame[1]];
        let cctv = s
            .obs_cctv
            .points
            .iter()
            .map(|p| [(p[0] / frame[0] - cctv_anchor[0]) * cs, (p[1] / frame[1] - cctv_anchor[1]) * cs])
            .collect();
        Ok(Prepared {
            inputs: TrajectoryInputs {
                ais,
                ais_available: s.obs_ais.available.clone(),
                cctv,
            },
            ais_anchor,
            cctv_anchor,
            query: s.obs_ais.filled(),
        })
    }

    /// Full forward pass for one sample. `gate_override` pins the refinement
    /// gate (test hook).
    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        sample: &VesselSample,
        noise: &mut Noise<'_>,
        gate_override: Option<f64>,
    ) -> Result<SampleForward> {
        let st = &self.store;
        let prep = self.prepare(sample)?;
        let scene = match &self.vstae {
            Some(v) => Some(v.forward(tape, st, &sample.scenes)?),
            None => None,
        };
        let fused = self.cmie.encode_and_fuse(tape, st, &prep.inputs, scene)?;
        let outs = self.uavd.predict_modes(tape, st, fused.f_enc, noise)?;

        let anchor = match (prep.ais_anchor, self.cfg.modalities) {
            (Some(a), _) => tape.constant(Tensor::vector(a.to_vec())),
            (None, Modalities::Full) => {
                let c = row(tape, prep.cctv_anchor.to_vec());
                let a = self.anchor_map.forward(tape, st, c)?;
                tape.reshape(a, &[2])?
            }
            (None, Modalities::AisOnly) => tape.param(st, self.anchor_map.b),
        };
        let cs = self.cfg.coord_scale;
        let mut retrieval = None;
        let mut prior = None;
        if let (true, Some(bank), Some(query), Some(a)) = (self.cfg.use_bank, &self.bank, &prep.query, prep.ais_anchor) {
            let hit = bank.search(query)?;
            let rel: Vec<f64> = bank
                .aligned_prior(hit.index, query)
                .iter()
                .flat_map(|p| [(p[0] - a[0]) * cs, (p[1] - a[1]) * cs])
                .collect();
            prior = Some(tape.constant(Tensor::new(&[self.cfg.t_fut, 2], rel)?));
            retrieval = Some(hit);
        }
        let cctv_anchor = tape.constant(Tensor::vector(prep.cctv_anchor.to_vec()));

        let mut modes = Vec::with_capacity(outs.len());
        for out in outs {
            let (ais_rel, beta) = match prior {
                Some(p) => {
                    let r = self.refine.refine_and_fuse(
                        tape,
                        st,
                        out.decoded.ais,
                        p,
                        out.decoded.features,
                        fused.f_enc,
                        gate_override,
                    )?;
                    (r.out, Some(r.beta))
                }
                None => (out.decoded.ais, None),
            };
            let ais = tape.scale(ais_rel, 1.0 / cs);
            let ais = tape.add_bias(ais, anchor)?;
            let cctv = tape.scale(out.decoded.cctv, 1.0 / cs);
            let cctv = tape.add_bias(cctv, cctv_anchor)?;
            modes.push(ModeVars {
                ais,
                cctv,
                latent: out.latent,
                beta,
            });
        }
        Ok(SampleForward {
            modes,
            retrieval,
            f_enc: fused.f_enc,
        })
    }

    /// Batch objective `mean rec + γ_kl · mean KL`. Sample `i` draws its
    /// latent noise from `rng.fork(i)`. Returns `(total, breakdown)`.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[&VesselSample], rng: &Rng, gamma_kl: f64) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let t_fut = self.cfg.t_fut;
        let mut recs = Vec::with_capacity(batch.len());
        let mut kls = Vec::new();
        let mut winners = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            if s.t_fut() < t_fut {
                return Err(Error::Invalid(format!(
                    "sample {} has {} future steps, model predicts {t_fut}",
                    s.vessel_id,
                    s.t_fut()
                )));
            }
            let mut r = rng.fork(i as u64);
            let fwd = self.forward_sample(tape, s, &mut Noise::Sample(&mut r), None)?;
            let frame = [s.scenes[0].width as f64, s.scenes[0].height as f64];
            let gt_a = tape.constant(Tensor::new(&[t_fut, 2], s.fut_ais[..t_fut].iter().flatten().copied().collect())?);
            let gt_c: Vec<f64> = s.fut_cctv[..t_fut]
                .iter()
                .flat_map(|p| [p[0] / frame[0], p[1] / frame[1]])
                .collect();
            let gt_c = tape.constant(Tensor::new(&[t_fut, 2], gt_c)?);
            let mut best: Option<(Var, usize, f64)> = None;
            for (k, m) in fwd.modes.iter().enumerate() {
                let e = match self.cfg.modalities {
                    Modalities::Full => mode_error(tape, m.ais, m.cctv, gt_a, gt_c)?,
                    Modalities::AisOnly => {
                        let diff = tape.sub(m.ais, gt_a)?;
                        let n = tape.row_norm(diff)?;
                        tape.mean(n)
                    }
                };
                let v = tape.data(e)[0];
                if best.is_none_or(|(_, _, b)| v < b) {
                    best = Some((e, k, v));
                }
                kls.push(kl_loss(tape, m.latent.mu, m.latent.logvar)?);
            }
            let (e, k, _) = best.expect("K ≥ 1");
            recs.push(e);
            winners.push(k);
        }
        let rec = mean_of(tape, &recs)?;
        let kl = mean_of(tape, &kls)?;
        let weighted = tape.scale(kl, gamma_kl);
        let total = tape.add(rec, weighted)?;
        let breakdown = LossBreakdown {
            total: tape.data(total)[0],
            rec: tape.data(rec)[0],
            kl: tape.data(kl)[0],
            winners,
        };
        Ok((total, breakdown))
    }

    /// Loss value only.
    pub fn evaluate_loss(&self, batch: &[&VesselSample], rng: &Rng, gamma_kl: f64) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        Ok(self.batch_loss(&mut tape, batch, rng, gamma_kl)?.1)
    }
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let cat = tape.concat(vars)?;
    Ok(tape.mean(cat))
}

impl Predictor for CmivtpModel {
    fn k_modes(&self) -> usize {
        self.cfg.k_modes
    }

    fn t_fut(&self) -> usize {
        self.cfg.t_fut
    }

    fn predict(&self, sample: &VesselSample, rng: &mut Rng) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let fwd = self.forward_sample(&mut tape, sample, &mut Noise::Sample(rng), None)?;
        let frame = [sample.scenes[0].width as f64, sample.scenes[0].height as f64];
        let points = |v: &[f64], sx: f64, sy: f64| -> Vec<Point> { v.chunks(2).map(|c| [c[0] * sx, c[1] * sy]).collect() };
        let mut set = PredictionSet {
            ais: Vec::new(),
            cctv: Vec::new(),
            latents: Vec::new(),
            mus: Vec::new(),
            logvars: Vec::new(),
        };
        for m in &fwd.modes {
            set.ais.push(points(tape.data(m.ais), 1.0, 1.0));
            set.cctv.push(points(tape.data(m.cctv), frame[0], frame[1]));
            set.latents.push(tape.data(m.latent.z).to_vec());
            set.mus.push(tape.data(m.latent.mu).to_vec());
            set.logvars.push(tape.data(m.latent.logvar).to_vec());
        }
        Ok(set)
    }
}
