//! Reverse-mode differentiation over an append-only node graph.
//!
//! Nodes are pushed in evaluation order, so parents always have smaller
//! indices than their children and a reverse index sweep is a valid
//! topological order. Gradients accumulate across [`Graph::backward`] calls
//! until [`Graph::zero_grad`].

use super::kernels::{self, Conv1dGeom, TConv2dGeom};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddChannelBias(Var, Var),
    AddRowBias(Var, Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Narrow(Var, usize),
    Concat(Vec<Var>),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    MeanLastAxis(Var),
    Conv1d(Var, Var, Conv1dGeom),
    TransposedConv2d(Var, Var, TConv2dGeom),
    BceWithLogits(Var, f64),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::AddRowBias(..) => "add_row_bias",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Narrow(..) => "narrow",
            Op::Concat(..) => "concat",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanLastAxis(..) => "mean_last_axis",
            Op::Conv1d(..) => "conv1d",
            Op::TransposedConv2d(..) => "transposed_conv2d",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    value: Tensor,
    op: Op,
    grad: Option<Tensor>,
    param: Option<usize>,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    /// Parameter slot this leaf was registered under, if any.
    pub fn param_id(&self) -> Option<usize> {
        self.param
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite() || !matches!(op, Op::Leaf), "non-finite leaf");
        self.nodes.push(Node { value, op, grad: None, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf tagged with its slot in a parameter set.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v` (zeros if nothing reached it).
    pub fn grad(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.shape().to_vec()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{}: {:?} vs {:?}", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `x [C×...] + b [C]`, broadcasting `b` over the trailing axes.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(b) != [c] {
            return Err(shape_err!("channel bias {:?} for input {:?}", self.shape(b), self.shape(x)));
        }
        let inner = self.value(x).len() / c;
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (chunk, bv) in v.data_mut().chunks_mut(inner).zip(bd) {
            chunk.iter_mut().for_each(|e| *e += bv);
        }
        Ok(self.push(v, Op::AddChannelBias(x, b)))
    }

    /// `x [...×D] + b [D]`, broadcasting `b` over the leading axes.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(b) != [d] {
            return Err(shape_err!("row bias {:?} for input {:?}", self.shape(b), self.shape(x)));
        }
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for chunk in v.data_mut().chunks_mut(d) {
            chunk.iter_mut().zip(&bd).for_each(|(e, bv)| *e += bv);
        }
        Ok(self.push(v, Op::AddRowBias(x, b)))
    }

    /// `x · s` where `s` holds a single value.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("mul_scalar: factor has shape {:?}", self.shape(s)));
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|e| e * c);
        Ok(self.push(v, Op::MulScalar(x, s)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    // ---- structural --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).narrow(start, len)?;
        Ok(self.push(v, Op::Narrow(a, start)))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals)?;
        Ok(self.push(v, Op::Concat(parts.to_vec())))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = kernels::softmax_last(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    /// Mean over the last axis; `[.., L]` → `[..]` (rank-1 inputs give `[1]`).
    pub fn mean_last_axis(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let l = *x.shape().last().unwrap();
        let data: Vec<f64> = x.data().chunks(l).map(|c| c.iter().sum::<f64>() / l as f64).collect();
        let shape = if x.rank() == 1 { vec![1] } else { x.shape()[..x.rank() - 1].to_vec() };
        let v = Tensor::new(shape, data).unwrap();
        self.push(v, Op::MeanLastAxis(a))
    }

    /// Global average pooling over time: `[C×L]` → `[C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims2()?;
        Ok(self.mean_last_axis(a))
    }

    // ---- convolutions ------------------------------------------------

    /// General 1-D convolution with symmetric zero padding.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, dilation: usize, padding: usize) -> Result<Var> {
        if stride == 0 || dilation == 0 {
            return Err(invalid!("conv1d: stride and dilation must be positive"));
        }
        let geom = Conv1dGeom { stride, dilation, padding };
        let v = kernels::conv1d(self.value(x), self.value(w), geom)?;
        Ok(self.push(v, Op::Conv1d(x, w, geom)))
    }

    /// Non-causal dilated convolution that preserves length: `K` odd, padding
    /// `(K−1)·dilation/2` on each side.
    pub fn dilated_conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let k = *self.shape(w).last().unwrap();
        if k % 2 == 0 {
            return Err(invalid!("dilated_conv1d: kernel size {} must be odd", k));
        }
        self.conv1d(x, w, 1, dilation, (k - 1) * dilation / 2)
    }

    /// Transposed 2-D convolution whose output extents are the input extents
    /// times the strides. Kernel layout `[C_in×C_out×K_f×K_t]`.
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, stride_f: usize, stride_t: usize) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(shape_err!("transposed conv kernel must be rank 4, got {:?}", ws));
        }
        let geom = TConv2dGeom::exact(ws[2], ws[3], stride_f, stride_t)?;
        let v = kernels::transposed_conv2d(self.value(x), self.value(w), geom)?;
        Ok(self.push(v, Op::TransposedConv2d(x, w, geom)))
    }

    // ---- losses ------------------------------------------------------

    /// Binary cross-entropy of a single logit against `target ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, z: Var, target: f64) -> Result<Var> {
        if self.value(z).len() != 1 {
            return Err(shape_err!("bce_with_logits expects one logit, got {:?}", self.shape(z)));
        }
        let x = self.value(z).item();
        // max(x,0) − x·y + log(1 + e^{−|x|})
        let loss = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits(z, target)))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulate `∂root/∂node` into every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(invalid!("backward: root has shape {:?}, expected a scalar", self.shape(root)));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Tensor::ones(self.shape(root).to_vec()));

        fn acc(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut adj, *a, gy.clone());
                    acc(&mut adj, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, gy.clone());
                    acc(&mut adj, *b, gy.map(|g| -g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, gy.zip_map(vb, |g, x| g * x)?);
                    acc(&mut adj, *b, gy.zip_map(va, |g, x| g * x)?);
                }
                Op::Scale(a, c) => acc(&mut adj, *a, gy.map(|g| g * c)),
                Op::AddChannelBias(x, b) => {
                    let c = gy.shape()[0];
                    let inner = gy.len() / c;
                    let gb: Vec<f64> = gy.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                    acc(&mut adj, *b, Tensor::new(vec![c], gb)?);
                    acc(&mut adj, *x, gy.clone());
                }
                Op::AddRowBias(x, b) => {
                    let d = *gy.shape().last().unwrap();
                    let mut gb = vec![0.0; d];
                    for ch in gy.data().chunks(d) {
                        gb.iter_mut().zip(ch).for_each(|(s, g)| *s += g);
                    }
                    acc(&mut adj, *b, Tensor::new(vec![d], gb)?);
                    acc(&mut adj, *x, gy.clone());
                }
                Op::MulScalar(x, s) => {
                    let c = self.value(*s).item();
                    let gs = gy.dot(self.value(*x));
                    acc(&mut adj, *s, Tensor::new(self.shape(*s).to_vec(), vec![gs])?);
                    acc(&mut adj, *x, gy.map(|g| g * c));
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, kernels::matmul_nt(&gy, vb)?);
                    acc(&mut adj, *b, kernels::matmul_tn(va, &gy)?);
                }
                Op::Transpose(a) => acc(&mut adj, *a, gy.transpose()?),
                Op::Reshape(a) => {
                    let shape = self.shape(*a).to_vec();
                    acc(&mut adj, *a, gy.reshape(shape)?);
                }
                Op::Narrow(a, start) => {
                    let mut g = Tensor::zeros(self.shape(*a).to_vec());
                    let off = start * (gy.len() / gy.shape()[0]);
                    g.data_mut()[off..off + gy.len()].copy_from_slice(gy.data());
                    acc(&mut adj, *a, g);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let shape = self.shape(*p).to_vec();
                        let n = self.value(*p).len();
                        acc(&mut adj, *p, Tensor::new(shape, gy.data()[off..off + n].to_vec())?);
                        off += n;
                    }
                }
                Op::Tanh(a) => acc(&mut adj, *a, gy.zip_map(y, |g, t| g * (1.0 - t * t))?),
                Op::Sigmoid(a) => acc(&mut adj, *a, gy.zip_map(y, |g, s| g * s * (1.0 - s))?),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, gy.zip_map(x, |g, v| if v > 0.0 { g } else { 0.0 })?);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    acc(&mut adj, *a, gy.zip_map(x, |g, v| if v > 0.0 { g } else { g * slope })?);
                }
                Op::Softmax(a) => {
                    let cols = *y.shape().last().unwrap();
                    let mut g = gy.clone();
                    for (grow, yrow) in g.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, s)| g * s).sum();
                        grow.iter_mut().zip(yrow).for_each(|(g, s)| *g = s * (*g - dot));
                    }
                    acc(&mut adj, *a, g);
                }
                Op::Sum(a) => {
                    let g = gy.item();
                    acc(&mut adj, *a, Tensor::full(self.shape(*a).to_vec(), g));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let g = gy.item() / n;
                    acc(&mut adj, *a, Tensor::full(self.shape(*a).to_vec(), g));
                }
                Op::MeanLastAxis(a) => {
                    let shape = self.shape(*a).to_vec();
                    let l = *shape.last().unwrap();
                    let mut g = Vec::with_capacity(l * gy.len());
                    for &gv in gy.data() {
                        g.extend(std::iter::repeat_n(gv / l as f64, l));
                    }
                    acc(&mut adj, *a, Tensor::new(shape, g)?);
                }
                Op::Conv1d(x, w, geom) => {
                    let (gx, gw) = kernels::conv1d_backward(self.value(*x), self.value(*w), &gy, *geom);
                    acc(&mut adj, *x, gx);
                    acc(&mut adj, *w, gw);
                }
                Op::TransposedConv2d(x, w, geom) => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (_, f, t) = vx.dims3()?;
                    acc(&mut adj, *x, kernels::strided_conv2d(&gy, vw, *geom, f, t)?);
                    acc(&mut adj, *w, kernels::transposed_conv2d_weight_grad(vx, vw, &gy, *geom));
                }
                Op::BceWithLogits(z, target) => {
                    let p = kernels::sigmoid(self.value(*z).item());
                    let g = gy.item() * (p - target);
                    acc(&mut adj, *z, Tensor::new(self.shape(*z).to_vec(), vec![g])?);
                }
            }
            adj[i] = Some(gy);
        }

        for (node, g) in self.nodes.iter_mut().zip(adj) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(t) => t.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
