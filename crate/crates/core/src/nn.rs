//! Parameter-holding layers shared by the encoders and the decoder.

use cmivtp_numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};

use crate::error::Result;

/// Uniform in `±1/√fan_in`.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `y = x·W + b` with `W: [in×out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let w = store.insert(format!("{name}.w"), uniform_init(&[fan_in, fan_out], fan_in, rng));
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.linear(x, w, b)?)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: [usize; 3], rng: &mut Rng) -> Self {
        Mlp {
            l1: Linear::new(store, &format!("{name}.l1"), dims[0], dims[1], rng),
            l2: Linear::new(store, &format!("{name}.l2"), dims[1], dims[2], rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.l1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.l2.forward(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.insert(format!("{name}.gain"), Tensor::filled(&[dim], 1.0)),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b)?)
    }
}

/// 2-D convolution layer with per-channel bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = store.insert(
            format!("{name}.w"),
            uniform_init(&[c_out, c_in, kernel, kernel], fan_in, rng),
        );
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[c_out]));
        Conv { w, b, stride, pad }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        Ok(tape.conv2d(x, w, Some(b), self.stride, self.pad)?)
    }
}

/// Set every parameter whose name starts with `prefix` to zero. Test and
/// ablation helper.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Row vector `[1×n]` constant.
pub(crate) fn row(tape: &mut Tape, data: Vec<f64>) -> Var {
    let n = data.len();
    tape.constant(Tensor::new(&[1, n], data).expect("row shape"))
}
