//! Cross-modal interaction transformer: self-attention on the primary
//! stream, cross-attention into a memory stream, then a feed-forward layer,
//! each wrapped in a residual LayerNorm. Trajectory embedders and the
//! cascaded three-stream fusion live here too.

use cmivtp_numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{uniform_init, LayerNorm, Linear, Mlp};

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Attention output plus the per-head weight matrices `[T_q × T_k]`.
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Invalid(format!("d = {d} is not divisible by {heads} heads")));
        }
        Ok(Attention {
            wq: Linear::new(store, &format!("{name}.q"), d, d, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, query: Var, memory: Var) -> Result<AttentionOutput> {
        let (qs, ms) = (tape.shape(query).to_vec(), tape.shape(memory).to_vec());
        if qs.len() != 2 || ms.len() != 2 || qs[1] != ms[1] || qs[1] != self.wq.fan_in {
            return Err(Error::Invalid(format!(
                "attention expects [T×{}] inputs, got {qs:?} and {ms:?}",
                self.wq.fan_in
            )));
        }
        let q = self.wq.forward(tape, store, query)?;
        let k = self.wk.forward(tape, store, memory)?;
        let v = self.wv.forward(tape, store, memory)?;
        let dk = qs[1] / self.heads;
        let inv = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(q, a, b)?;
            let kh = tape.slice_cols(k, a, b)?;
            let vh = tape.slice_cols(v, a, b)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv);
            let w = tape.softmax(scores);
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let cat = tape.concat_cols(&heads)?;
        let out = self.wo.forward(tape, store, cat)?;
        Ok(AttentionOutput { out, weights })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmitBlock {
    pub sa: Attention,
    pub ca: Attention,
    pub ffn: Mlp,
    pub ln: [LayerNorm; 3],
}

impl CmitBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(CmitBlock {
            sa: Attention::new(store, &format!("{name}.sa"), d, heads, rng)?,
            ca: Attention::new(store, &format!("{name}.ca"), d, heads, rng)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), [d, 4 * d, d], rng),
            ln: [
                LayerNorm::new(store, &format!("{name}.ln0"), d),
                LayerNorm::new(store, &format!("{name}.ln1"), d),
                LayerNorm::new(store, &format!("{name}.ln2"), d),
            ],
        })
    }

    /// `Z1` is the primary stream (output length follows it), `Z2` the memory.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z1: Var, z2: Var) -> Result<Var> {
        let sa = self.sa.forward(tape, store, z1, z1)?.out;
        let r = tape.add(z1, sa)?;
        let zbar = self.ln[0].forward(tape, store, r)?;
        let ca = self.ca.forward(tape, store, zbar, z2)?.out;
        let r = tape.add(zbar, ca)?;
        let ztilde = self.ln[1].forward(tape, store, r)?;
        let ff = self.ffn.forward(tape, store, ztilde)?;
        let r = tape.add(ztilde, ff)?;
        self.ln[2].forward(tape, store, r)
    }
}

/// Sinusoidal positional encoding `[T × d]`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[t, d], data).expect("pe shape")
}

/// Per-vessel trajectory inputs already expressed in model units.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryInputs {
    /// AIS rows `(x, y)` relative to the AIS anchor, scaled.
    pub ais: Vec<[f64; 2]>,
    pub ais_available: Vec<bool>,
    /// CCTV rows relative to the last CCTV point, normalized by frame size, scaled.
    pub cctv: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmieParams {
    pub d: usize,
    pub g_ais: Linear,
    pub g_cctv: Linear,
    pub mask_token: ParamId,
    pub stage1: CmitBlock,
    pub stage2: CmitBlock,
}

/// Fused sequence `[T × d]` and its temporal mean `[1 × d]`.
pub struct Fused {
    pub f_fus: Var,
    pub f_enc: Var,
}

impl CmieParams {
    pub fn new(store: &mut ParamStore, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(CmieParams {
            d,
            g_ais: Linear::new(store, "cmie.g_ais", 3, d, rng),
            g_cctv: Linear::new(store, "cmie.g_cctv", 2, d, rng),
            mask_token: store.insert("cmie.mask_token", uniform_init(&[1, d], d, rng)),
            stage1: CmitBlock::new(store, "cmie.cmit1", d, heads, rng)?,
            stage2: CmitBlock::new(store, "cmie.cmit2", d, heads, rng)?,
        })
    }

    /// AIS embedding with masked rows replaced by the learned token, plus
    /// positions.
    pub fn embed_ais(&self, tape: &mut Tape, store: &ParamStore, ais: &[[f64; 2]], available: &[bool]) -> Result<Var> {
        let t = ais.len();
        if t == 0 || available.len() != t {
            return Err(Error::Invalid(format!(
                "AIS embedding needs matching nonempty points/flags, got {t} and {}",
                available.len()
            )));
        }
        let token = tape.param(store, self.mask_token);
        let mut rows = Vec::with_capacity(t);
        let mut embedded = None;
        if available.iter().any(|&a| a) {
            let mut data = Vec::with_capacity(3 * t);
            for (p, &a) in ais.iter().zip(available) {
                if a {
                    data.extend_from_slice(&[p[0], p[1], 1.0]);
                } else {
                    data.extend_from_slice(&[0.0, 0.0, 0.0]);
                }
            }
            let x = tape.constant(Tensor::new(&[t, 3], data)?);
            embedded = Some(self.g_ais.forward(tape, store, x)?);
        }
        for (i, &a) in available.iter().enumerate() {
            rows.push(match (a, embedded) {
                (true, Some(e)) => tape.slice(e, i, i + 1)?,
                _ => token,
            });
        }
        let z = tape.concat(&rows)?;
        let pe = tape.constant(positional_encoding(t, self.d));
        Ok(tape.add(z, pe)?)
    }

    pub fn embed_cctv(&self, tape: &mut Tape, store: &ParamStore, cctv: &[[f64; 2]]) -> Result<Var> {
        let t = cctv.len();
        let x = tape.constant(Tensor::new(&[t, 2], cctv.iter().flatten().copied().collect())?);
        let z = self.g_cctv.forward(tape, store, x)?;
        let pe = tape.constant(positional_encoding(t, self.d));
        Ok(tape.add(z, pe)?)
    }

    /// `F_fus = CMIT₂(CMIT₁(F_A, F_C), F_scene)`; without a scene encoding the
    /// AIS stream attends to itself (AIS-only ablation).
    pub fn encode_and_fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &TrajectoryInputs,
        scene: Option<Var>,
    ) -> Result<Fused> {
        let f_a = self.embed_ais(tape, store, &inputs.ais, &inputs.ais_available)?;
        let f_fus = match scene {
            Some(f_v) => {
                let f_c = self.embed_cctv(tape, store, &inputs.cctv)?;
                let f1 = self.stage1.forward(tape, store, f_a, f_c)?;
                self.stage2.forward(tape, store, f1, f_v)?
            }
            None => self.stage1.forward(tape, store, f_a, f_a)?,
        };
        let mean = tape.mean_rows(f_fus)?;
        let f_enc = tape.reshape(mean, &[1, self.d])?;
        Ok(Fused { f_fus, f_enc })
    }
}
