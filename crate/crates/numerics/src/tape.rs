//! Reverse-mode tape.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! node vector is already a topological order and `backward` simply walks it
//! in reverse. Leaf gradients accumulate across `backward` calls.

use std::collections::HashMap;

use crate::error::{NumericsError, Result};
use crate::kernels::{col2im_acc, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, im2col, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in input-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RoiBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        RoiBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowNorm(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    RoiAlign {
        fmap: Var,
        // per output cell: (flat spatial index, weight)
        taps: Vec<Vec<(usize, f64)>>,
    },
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    param_lookup: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    roi_degenerate: usize,
    branches: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("rank-0 tensor")
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(NumericsError::invalid(
            op,
            format!("expected a matrix, got shape {shape:?}"),
        )),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of RoI-Align calls that fell back to a single center sample.
    pub fn roi_degenerate_count(&self) -> usize {
        self.roi_degenerate
    }

    /// Hash of every branch taken by piecewise ops (ReLU sign, clamp
    /// region) so far. Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branches(&mut self, a: Var, region: impl Fn(f64) -> u8) {
        let mut h = if self.branches == 0 { FNV_OFFSET } else { self.branches };
        for &x in self.nodes[a.0].value.data() {
            h ^= u64::from(region(x));
            h = h.wrapping_mul(FNV_PRIME);
        }
        self.branches = h;
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient if `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter; repeated calls on one tape return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_lookup.get(&id) {
            return v;
        }
        let src = store.get(id);
        let t = Tensor::from_parts(src.shape().to_vec(), src.data().to_vec())
            .with_requires_grad(src.requires_grad());
        let v = self.leaf(t);
        self.params.push((id, v));
        self.param_lookup.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf after `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.clear();
    }

    /// Add every bound parameter's leaf gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.leaf_grads.get(&v.0) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(NumericsError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.shape(a))?;
        let src = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), &[a]))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::shape(name, self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b` (length = last dim of `a`) to every trailing row of `a`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(a));
        if self.shape(b) != [n] {
            return Err(NumericsError::shape("add_bias", self.shape(a), self.shape(b)));
        }
        let bias = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBias(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// `a · s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(NumericsError::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.data(s)[0];
        let out: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::MulScalarVar(a, s), &[a, s]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record_branches(a, |x| u8::from(x > 0.0));
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.record_branches(a, |x| if x < lo { 0 } else if x > hi { 2 } else { 1 });
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Column means of a matrix: `[m×n] → [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("mean_rows", self.shape(a))?;
        let mut out = vec![0.0; n];
        for row in self.data(a).chunks_exact(n) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::MeanRows(a), &[a]))
    }

    /// Euclidean norm of each row: `[m×n] → [m]`. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (m, n) = matrix_dims("row_norm", self.shape(a))?;
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(n)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(Tensor::from_parts(vec![m], out), Op::RowNorm(a), &[a]))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(NumericsError::invalid(
                "global_avg_pool",
                format!("expected C×H×W, got {shape:?}"),
            ));
        }
        let hw = shape[1] * shape[2];
        let out: Vec<f64> = self
            .data(a)
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        Ok(self.push(Tensor::from_parts(vec![shape[0]], out), Op::GlobalAvgPool(a), &[a]))
    }

    // ---- shape manipulation -------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.contains(&0) {
            return Err(NumericsError::shape("reshape", self.shape(a), shape));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), &[a]))
    }

    /// Concatenate along axis 0. Trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::invalid("concat", "no inputs"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(NumericsError::shape("concat", self.shape(first), s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), parts))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[0] {
            return Err(NumericsError::invalid(
                "slice",
                format!("range {start}..{end} out of bounds for {shape:?}"),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(a)[start * inner..end * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = end - start;
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice(a, start * inner),
            &[a],
        ))
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::invalid("concat_cols", "no inputs"))?;
        let (m, _) = matrix_dims("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = matrix_dims("concat_cols", self.shape(p))?;
            if pm != m {
                return Err(NumericsError::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = matrix_dims("slice_cols", self.shape(a))?;
        if start >= end || end > n {
            return Err(NumericsError::invalid(
                "slice_cols",
                format!("range {start}..{end} out of bounds for {n} columns"),
            ));
        }
        let w = end - start;
        let src = self.data(a);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, w], out), Op::SliceCols(a, start), &[a]))
    }

    // ---- normalization -------------------------------------------------

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = last_dim(self.shape(a));
        let mut out = self.data(a).to_vec();
        for row in out.chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis (ε = 1e-5 under the square root).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(NumericsError::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    // ---- spatial -------------------------------------------------------

    /// 2-D cross-correlation (no kernel flip) of `x[C_in×H×W]` with
    /// `w[C_out×C_in×kh×kw]`, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(NumericsError::shape("conv2d", &xs, &ws));
        }
        if stride == 0 {
            return Err(NumericsError::invalid("conv2d", "stride must be positive"));
        }
        let (c_out, c_in, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (h, wd) = (xs[1], xs[2]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw {
            return Err(NumericsError::KernelTooLarge {
                kernel: [kh, kw],
                padded: [ph, pw],
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(NumericsError::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            c_in,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            h_out: (ph - kh) / stride + 1,
            w_out: (pw - kw) / stride + 1,
        };
        let cols = im2col(self.data(x), &geom);
        let l = geom.cols();
        let mut out = vec![0.0; c_out * l];
        gemm_acc(self.data(w), &cols, &mut out, c_out, geom.rows(), l);
        if let Some(b) = b {
            for (row, &bv) in out.chunks_exact_mut(l).zip(self.data(b)) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            &inputs,
        ))
    }

    /// RoI-Align of `fmap[C×H×W]` over `roi` (input-image coordinates).
    ///
    /// The box is multiplied by `spatial_scale` and clamped to `[0,W]×[0,H]`.
    /// Each of the `out×out` bins averages 2×2 bilinear samples taken at the
    /// bin's quarter points. A continuous feature coordinate `x` maps to pixel
    /// index `x − 0.5` (pixel centers sit at half-integers), clamped to the
    /// valid index range. A box with zero area after clamping yields the
    /// bilinear sample at its center for every bin and increments
    /// [`Tape::roi_degenerate_count`].
    pub fn roi_align(
        &mut self,
        fmap: Var,
        roi: RoiBox,
        out: usize,
        spatial_scale: f64,
    ) -> Result<Var> {
        let fs = self.shape(fmap).to_vec();
        if fs.len() != 3 || out == 0 {
            return Err(NumericsError::invalid(
                "roi_align",
                format!("expected C×H×W feature map and positive output size, got {fs:?}"),
            ));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let x0 = (roi.x_min * spatial_scale).clamp(0.0, w as f64);
        let x1 = (roi.x_max * spatial_scale).clamp(0.0, w as f64);
        let y0 = (roi.y_min * spatial_scale).clamp(0.0, h as f64);
        let y1 = (roi.y_max * spatial_scale).clamp(0.0, h as f64);
        if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
            return Err(NumericsError::invalid("roi_align", "non-finite box"));
        }

        let bilinear = |x: f64, y: f64, taps: &mut Vec<(usize, f64)>, weight: f64| {
            let u = (x - 0.5).clamp(0.0, (w - 1) as f64);
            let v = (y - 0.5).clamp(0.0, (h - 1) as f64);
            let (u0, v0) = (u.floor() as usize, v.floor() as usize);
            let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
            let (fu, fv) = (u - u0 as f64, v - v0 as f64);
            taps.push((v0 * w + u0, weight * (1.0 - fu) * (1.0 - fv)));
            taps.push((v0 * w + u1, weight * fu * (1.0 - fv)));
            taps.push((v1 * w + u0, weight * (1.0 - fu) * fv));
            taps.push((v1 * w + u1, weight * fu * fv));
        };

        let mut taps = Vec::with_capacity(out * out);
        if x1 <= x0 || y1 <= y0 {
            self.roi_degenerate += 1;
            let mut center = Vec::with_capacity(4);
            bilinear(0.5 * (x0 + x1), 0.5 * (y0 + y1), &mut center, 1.0);
            taps.resize(out * out, center);
        } else {
            let bw = (x1 - x0) / out as f64;
            let bh = (y1 - y0) / out as f64;
            for py in 0..out {
                for px in 0..out {
                    let mut cell = Vec::with_capacity(16);
                    for sy in 0..2 {
                        for sx in 0..2 {
                            let y = y0 + (py as f64 + (sy as f64 + 0.5) / 2.0) * bh;
                            let x = x0 + (px as f64 + (sx as f64 + 0.5) / 2.0) * bw;
                            bilinear(x, y, &mut cell, 0.25);
                        }
                    }
                    taps.push(cell);
                }
            }
        }

        let src = self.data(fmap);
        let hw = h * w;
        let mut data = vec![0.0; c * out * out];
        for ch in 0..c {
            let plane = &src[ch * hw..(ch + 1) * hw];
            for (cell, t) in taps.iter().enumerate() {
                data[ch * out * out + cell] = t.iter().map(|&(i, wt)| plane[i] * wt).sum();
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, out, out], data),
            Op::RoiAlign { fmap, taps },
            &[fmap],
        ))
    }

    // ---- backward ------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(ls.to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |v: Var| nodes[v.0].value.data();
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(nodes, grads, $v)
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let nn = nodes[b.0].value.shape()[1];
                if let Some(ga) = slot!(*a) {
                    gemm_a_bt_acc(g, val(*b), ga, m, k, nn);
                }
                if let Some(gb) = slot!(*b) {
                    gemm_at_b_acc(val(*a), g, gb, m, k, nn);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *x += gy * av;
                    }
                }
            }
            Op::AddBias(a, b) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*b) {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MulScalarVar(a, s) => {
                let c = val(*s)[0];
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
                if let Some(gs) = slot!(*s) {
                    gs[0] += g.iter().zip(val(*a)).map(|(x, y)| x * y).sum::<f64>();
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *av > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv * (1.0 - yv);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * yv;
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if let Some(ga) = slot!(*a) {
                    for ((x, gy), av) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if *av >= *lo && *av <= *hi {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot!(*a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::MeanRows(a) => {
                if let Some(ga) = slot!(*a) {
                    let n = g.len();
                    let m = ga.len() / n;
                    for row in ga.chunks_exact_mut(n) {
                        row.iter_mut().zip(g).for_each(|(x, y)| *x += y / m as f64);
                    }
                }
            }
            Op::RowNorm(a) => {
                let norms = node.value.data();
                let av = val(*a);
                if let Some(ga) = slot!(*a) {
                    let n = ga.len() / norms.len();
                    for (r, (&nr, &gy)) in norms.iter().zip(g).enumerate() {
                        if nr > 0.0 {
                            for j in 0..n {
                                ga[r * n + j] += gy * av[r * n + j] / nr;
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                if let Some(ga) = slot!(*a) {
                    let hw = ga.len() / g.len();
                    for (plane, gy) in ga.chunks_exact_mut(hw).zip(g) {
                        plane.iter_mut().for_each(|x| *x += gy / hw as f64);
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = slot!(*p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::Slice(a, off) => {
                if let Some(ga) = slot!(*a) {
                    ga[*off..*off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if let Some(gp) = slot!(*p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols(a, start) => {
                let n = nodes[a.0].value.shape()[1];
                let (m, w) = (node.value.shape()[0], node.value.shape()[1]);
                if let Some(ga) = slot!(*a) {
                    for i in 0..m {
                        for j in 0..w {
                            ga[i * n + start + j] += g[i * w + j];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                if let Some(ga) = slot!(*a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = last_dim(node.value.shape());
                if let Some(ga) = slot!(*a) {
                    for ((gr, yr), xr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            xr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = last_dim(node.value.shape());
                let gv = val(*gain);
                if let Some(gx) = slot!(*x) {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] += is / d as f64 * (d as f64 * dh - s1 - hr[j] * s2);
                        }
                    }
                }
                if let Some(gg) = slot!(*gain) {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = slot!(*bias) {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let c_out = node.value.shape()[0];
                let (r, l) = (geom.rows(), geom.cols());
                if let Some(gw) = slot!(*w) {
                    gemm_a_bt_acc(g, cols, gw, c_out, r, l);
                }
                if let Some(b) = b {
                    if let Some(gb) = slot!(*b) {
                        for (gbv, row) in gb.iter_mut().zip(g.chunks_exact(l)) {
                            *gbv += row.iter().sum::<f64>();
                        }
                    }
                }
                if nodes[x.0].requires_grad {
                    let mut dcols = vec![0.0; r * l];
                    gemm_at_b_acc(val(*w), g, &mut dcols, c_out, r, l);
                    if let Some(gx) = slot!(*x) {
                        col2im_acc(&dcols, geom, gx);
                    }
                }
            }
            Op::RoiAlign { fmap, taps } => {
                let fs = nodes[fmap.0].value.shape();
                let hw = fs[1] * fs[2];
                let cells = taps.len();
                if let Some(gf) = slot!(*fmap) {
                    for ch in 0..fs[0] {
                        for (cell, t) in taps.iter().enumerate() {
                            let gy = g[ch * cells + cell];
                            for &(idx, wt) in t {
                                gf[ch * hw + idx] += gy * wt;
                            }
                        }
                    }
                }
            }
        }
    }
}

// Gradient buffer of `v`, allocated on first use, or `None` if `v` needs no gradient.
fn grad_slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let inp = &nodes[v.0];
    if !inp.requires_grad {
        return None;
    }
    let len = inp.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
