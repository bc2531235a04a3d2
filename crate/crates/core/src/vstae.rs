//! Scene encoder: conv stem + RoI features per frame, a two-layer ConvLSTM
//! for temporal context with exponential recency weights, and a per-step
//! fusion MLP.

use cmivtp_numerics::{ParamStore, RoiBox, Rng, Tape, Tensor, Var};

use crate::data::SceneFrame;
use crate::error::{Error, Result};
use crate::nn::{row, Conv, Linear, Mlp};

pub const ROI_OUT: usize = 7;
pub const BBOX_DIM: usize = 64;
/// Total stride of the conv stem.
pub const STEM_STRIDE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VstaeConfig {
    pub d: usize,
    pub c_f: usize,
    pub phi: f64,
}

/// One ConvLSTM layer; gates `i, f, o, g` come from a single 3×3 conv over
/// `[x; h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLstmCell {
    pub conv: Conv,
    pub hidden: usize,
}

impl ConvLstmCell {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, hidden: usize, rng: &mut Rng) -> Self {
        let conv = Conv::new(store, name, c_in + hidden, 4 * hidden, 3, 1, 1, rng);
        // forget-gate bias starts at 1
        store.get_mut(conv.b).data_mut()[hidden..2 * hidden]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        ConvLstmCell { conv, hidden }
    }

    /// One step; returns `(h, c)`.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let xh = tape.concat(&[x, h])?;
        let gates = self.conv.forward(tape, store, xh)?;
        let n = self.hidden;
        let i = tape.slice(gates, 0, n)?;
        let f = tape.slice(gates, n, 2 * n)?;
        let o = tape.slice(gates, 2 * n, 3 * n)?;
        let g = tape.slice(gates, 3 * n, 4 * n)?;
        let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_next = tape.add(fc, ig)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VstaeParams {
    pub cfg: VstaeConfig,
    pub stem: [Conv; 3],
    pub f_tar: Linear,
    pub f_glo: Linear,
    pub bbox_enc: Linear,
    pub e_fus: Mlp,
    pub lstm: [ConvLstmCell; 2],
    pub e_temp: Linear,
    pub fuse: Mlp,
}

/// Recency weight `exp(φ·t)` for `t ∈ {−T_obs+1, …, 0}`; `step` counts from 0.
pub fn recency_weight(phi: f64, step: usize, t_obs: usize) -> f64 {
    (phi * (step as f64 - (t_obs as f64 - 1.0))).exp()
}

impl VstaeParams {
    pub fn new(store: &mut ParamStore, cfg: VstaeConfig, rng: &mut Rng) -> Result<Self> {
        if !(cfg.phi > 0.0) || cfg.d < 2 || cfg.c_f == 0 {
            return Err(Error::Invalid(format!(
                "scene encoder needs φ > 0, d ≥ 2 and c_f ≥ 1 (got φ={}, d={}, c_f={})",
                cfg.phi, cfg.d, cfg.c_f
            )));
        }
        let (d, c_f) = (cfg.d, cfg.c_f);
        let stem = [
            Conv::new(store, "vstae.stem0", 3, 8, 3, 2, 1, rng),
            Conv::new(store, "vstae.stem1", 8, 16, 3, 2, 1, rng),
            Conv::new(store, "vstae.stem2", 16, c_f, 3, 1, 1, rng),
        ];
        Ok(VstaeParams {
            cfg,
            stem,
            f_tar: Linear::new(store, "vstae.f_tar", c_f * ROI_OUT * ROI_OUT, d, rng),
            f_glo: Linear::new(store, "vstae.f_glo", c_f, d / 2, rng),
            bbox_enc: Linear::new(store, "vstae.bbox", 4, BBOX_DIM, rng),
            e_fus: Mlp::new(store, "vstae.e_fus", [d + d / 2 + BBOX_DIM, d, d], rng),
            lstm: [
                ConvLstmCell::new(store, "vstae.lstm0", c_f, c_f, rng),
                ConvLstmCell::new(store, "vstae.lstm1", c_f, c_f, rng),
            ],
            e_temp: Linear::new(store, "vstae.e_temp", c_f, d, rng),
            fuse: Mlp::new(store, "vstae.fuse", [2 * d, d, d], rng),
        })
    }

    /// Conv stem feature map `[C_f × H/4 × W/4]`.
    pub fn feature_map(&self, tape: &mut Tape, store: &ParamStore, scene: &SceneFrame) -> Result<Var> {
        let raster: Vec<f64> = scene.raster.iter().map(|&v| v as f64).collect();
        let mut x = tape.constant(Tensor::new(&[SceneFrame::CHANNELS, scene.height, scene.width], raster)?);
        for conv in &self.stem {
            let y = conv.forward(tape, store, x)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// `f_roi = E_fus([f_tar; f_glo; f_bbox])` as a `[1×d]` row, plus the feature map.
    pub fn spatial_features(&self, tape: &mut Tape, store: &ParamStore, scene: &SceneFrame) -> Result<(Var, Var)> {
        let fmap = self.feature_map(tape, store, scene)?;
        let f_roi = self.roi_features(tape, store, fmap, scene)?;
        Ok((fmap, f_roi))
    }

    fn roi_features(&self, tape: &mut Tape, store: &ParamStore, fmap: Var, scene: &SceneFrame) -> Result<Var> {
        let c_f = self.cfg.c_f;
        let [x0, y0, x1, y1] = scene.bbox;
        let roi = tape.roi_align(fmap, RoiBox::new(x0, y0, x1, y1), ROI_OUT, 1.0 / STEM_STRIDE as f64)?;
        let roi = tape.reshape(roi, &[1, c_f * ROI_OUT * ROI_OUT])?;
        let f_tar = self.f_tar.forward(tape, store, roi)?;

        let pooled = tape.global_avg_pool(fmap)?;
        let pooled = tape.reshape(pooled, &[1, c_f])?;
        let f_glo = self.f_glo.forward(tape, store, pooled)?;

        let (w, h) = (scene.width as f64, scene.height as f64);
        let b = row(tape, vec![x0 / w, y0 / h, x1 / w, y1 / h]);
        let f_bbox = self.bbox_enc.forward(tape, store, b)?;
        let f_bbox = tape.relu(f_bbox);

        let cat = tape.concat_cols(&[f_tar, f_glo, f_bbox])?;
        self.e_fus.forward(tape, store, cat)
    }

    /// Weighted temporal features, one `[1×d]` row per step.
    pub fn temporal_context(&self, tape: &mut Tape, store: &ParamStore, fmaps: &[Var]) -> Result<Vec<Var>> {
        let first = *fmaps
            .first()
            .ok_or_else(|| Error::Invalid("temporal context needs at least one frame".into()))?;
        let shape = tape.shape(first).to_vec();
        let zeros = || Tensor::zeros(&shape);
        let mut state = [
            (tape.constant(zeros()), tape.constant(zeros())),
            (tape.constant(zeros()), tape.constant(zeros())),
        ];
        let t_obs = fmaps.len();
        let mut out = Vec::with_capacity(t_obs);
        for (step, &x) in fmaps.iter().enumerate() {
            if tape.shape(x) != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "feature map {step} has shape {:?}, expected {shape:?}",
                    tape.shape(x)
                )));
            }
            let mut input = x;
            for (cell, (h, c)) in self.lstm.iter().zip(state.iter_mut()) {
                let (h2, c2) = cell.step(tape, store, input, *h, *c)?;
                *h = h2;
                *c = c2;
                input = h2;
            }
            let pooled = tape.global_avg_pool(input)?;
            let pooled = tape.reshape(pooled, &[1, self.cfg.c_f])?;
            let f = self.e_temp.forward(tape, store, pooled)?;
            out.push(tape.scale(f, recency_weight(self.cfg.phi, step, t_obs)));
        }
        Ok(out)
    }

    /// Scene encoding `[T_obs × d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, scenes: &[SceneFrame]) -> Result<Var> {
        let mut fmaps = Vec::with_capacity(scenes.len());
        let mut rois = Vec::with_capacity(scenes.len());
        for s in scenes {
            let (fmap, f_roi) = self.spatial_features(tape, store, s)?;
            fmaps.push(fmap);
            rois.push(f_roi);
        }
        let temps = self.temporal_context(tape, store, &fmaps)?;
        let mut rows = Vec::with_capacity(scenes.len());
        for (r, t) in rois.into_iter().zip(temps) {
            let cat = tape.concat_cols(&[r, t])?;
            rows.push(self.fuse.forward(tape, store, cat)?);
        }
        Ok(tape.concat(&rows)?)
    }
}
