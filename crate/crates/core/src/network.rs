//! The ε-network: a residual stack of gated non-causal dilated convolutions
//! conditioned on the diffusion step and on an upsampled spectrogram.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::diffusion::{step_embedding, EMBEDDING_DIM};
use crate::error::{format_err, invalid, shape_err, Result};
use crate::numerics::{Graph, ParamSet, Tensor, Var};
use crate::signal::Spectrogram;

const UPSAMPLE_SLOPE: f64 = 0.4;
const FREQ_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsNetConfig {
    /// Residual channels C.
    pub channels: usize,
    /// Residual layers N.
    pub layers: usize,
    /// Dilation cycles m; each holds N/m layers.
    pub blocks: usize,
    pub kernel: usize,
    /// Time strides of the two conditioner upsampling layers.
    pub upsample_t: [usize; 2],
}

impl Default for EpsNetConfig {
    fn default() -> Self {
        Self { channels: 32, layers: 12, blocks: 3, kernel: 3, upsample_t: [16, 16] }
    }
}

impl EpsNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.layers == 0 || self.blocks == 0 {
            return Err(invalid!("net.channels, net.layers and net.blocks must be positive"));
        }
        if self.layers % self.blocks != 0 {
            return Err(invalid!("net.layers = {} is not divisible by net.blocks = {}", self.layers, self.blocks));
        }
        if self.kernel % 2 == 0 {
            return Err(invalid!("net.kernel = {} must be odd", self.kernel));
        }
        if self.upsample_t.contains(&0) {
            return Err(invalid!("net.upsample_t strides must be positive"));
        }
        Ok(())
    }

    /// Conditioner frames are spaced this many samples apart.
    pub fn hop(&self) -> usize {
        self.upsample_t[0] * self.upsample_t[1]
    }

    pub fn layers_per_block(&self) -> usize {
        self.layers / self.blocks
    }

    /// `1 + m·(K−1)·(2ⁿ−1)`
    pub fn receptive_field(&self) -> usize {
        1 + self.blocks * (self.kernel - 1) * ((1 << self.layers_per_block()) - 1)
    }
}

/// Data-dependent extents of an ε-network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub input_channels: usize,
    pub length: usize,
    pub bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerInfo {
    pub block: usize,
    pub position: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    step_w: usize,
    step_b: usize,
    dil_w: usize,
    dil_b: usize,
    cond_w: usize,
    cond_b: usize,
    res_w: usize,
    res_b: usize,
    skip_w: usize,
    skip_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    up: [usize; 2],
    in_w: usize,
    in_b: usize,
    layers: Vec<LayerSlots>,
    head: [(usize, usize); 2],
}

/// Per-layer conditioner contributions `[2C×L]`, fixed for one spectrogram.
#[derive(Debug, Clone)]
pub struct PreparedCond {
    layer_bias: Vec<Tensor>,
}

enum Cond<'a> {
    Graph(Var),
    Cached(&'a PreparedCond),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpsNet {
    config: EpsNetConfig,
    geometry: Geometry,
    params: ParamSet,
    slots: Slots,
    linear: bool,
}

impl EpsNet {
    /// Randomly initialised network. The final head projection starts at
    /// zero so an untrained network predicts ε = 0.
    pub fn new<R: Rng + ?Sized>(config: EpsNetConfig, geometry: Geometry, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(config, geometry)?;
        let last_head = net.slots.head[1].0;
        for id in 0..net.params.len() {
            let name = net.params.name(id).to_string();
            if name.ends_with(".b") || id == last_head {
                continue;
            }
            let t = net.params.get_mut(id);
            let fan_in: usize = match t.rank() {
                4 => t.shape()[2] * t.shape()[3],
                3 => t.shape()[1] * t.shape()[2],
                _ if name.contains("step") => t.shape()[0],
                _ => t.shape()[1],
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            *t = Tensor::uniform(t.shape().to_vec(), bound, rng);
        }
        Ok(net)
    }

    /// Network with every parameter zero.
    pub fn zeros(config: EpsNetConfig, geometry: Geometry) -> Result<Self> {
        config.validate()?;
        let Geometry { input_channels: h, length: l, bins } = geometry;
        if h == 0 || bins == 0 {
            return Err(invalid!("network needs input channels and conditioner bins"));
        }
        if l == 0 || l % config.hop() != 0 {
            return Err(invalid!("segment length {l} is not a multiple of the conditioner hop {}", config.hop()));
        }
        let c = config.channels;
        let mut p = ParamSet::new();
        let [s1, s2] = config.upsample_t;
        let up = [
            p.add("upsample.0.w", Tensor::zeros(vec![1, 1, FREQ_KERNEL, 2 * s1])),
            p.add("upsample.1.w", Tensor::zeros(vec![1, 1, FREQ_KERNEL, 2 * s2])),
        ];
        let in_w = p.add("input.w", Tensor::zeros(vec![c, h]));
        let in_b = p.add("input.b", Tensor::zeros(vec![c]));
        let layers = (0..config.layers)
            .map(|i| {
                let mut add = |part: &str, shape: Vec<usize>| p.add(format!("layer{i}.{part}"), Tensor::zeros(shape));
                LayerSlots {
                    step_w: add("step.w", vec![EMBEDDING_DIM, c]),
                    step_b: add("step.b", vec![c]),
                    dil_w: add("dilated.w", vec![2 * c, c, config.kernel]),
                    dil_b: add("dilated.b", vec![2 * c]),
                    cond_w: add("cond.w", vec![2 * c, bins]),
                    cond_b: add("cond.b", vec![2 * c]),
                    res_w: add("residual.w", vec![c, c]),
                    res_b: add("residual.b", vec![c]),
                    skip_w: add("skip.w", vec![c, c]),
                    skip_b: add("skip.b", vec![c]),
                }
            })
            .collect();
        let head = [
            (p.add("head.0.w", Tensor::zeros(vec![c, c])), p.add("head.0.b", Tensor::zeros(vec![c]))),
            (p.add("head.1.w", Tensor::zeros(vec![h, c])), p.add("head.1.b", Tensor::zeros(vec![h]))),
        ];
        Ok(Self { config, geometry, params: p, slots: Slots { up, in_w, in_b, layers, head }, linear: false })
    }

    /// Copy whose gates and rectifiers are replaced by identities, making the
    /// map affine in its input.
    pub fn linearized(&self) -> Self {
        Self { linear: true, ..self.clone() }
    }

    pub fn config(&self) -> &EpsNetConfig {
        &self.config
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn frames(&self) -> usize {
        self.geometry.length / self.config.hop()
    }

    pub fn layer_info(&self) -> Vec<LayerInfo> {
        let n = self.config.layers_per_block();
        (0..self.config.layers)
            .map(|i| LayerInfo { block: i / n, position: i % n, dilation: 1 << (i % n) })
            .collect()
    }

    pub fn check_cond(&self, cond: &Spectrogram) -> Result<()> {
        if cond.bins() != self.geometry.bins || cond.frames() * self.config.hop() != self.geometry.length {
            return Err(shape_err!(
                "conditioner {}×{} with hop {} does not cover {} bins × {} samples",
                cond.bins(),
                cond.frames(),
                self.config.hop(),
                self.geometry.bins,
                self.geometry.length
            ));
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.geometry.input_channels, self.geometry.length] {
            return Err(shape_err!(
                "network expects {}×{} input, got {:?}",
                self.geometry.input_channels,
                self.geometry.length,
                shape
            ));
        }
        Ok(())
    }

    fn act(&self, g: &mut Graph, x: Var, f: fn(&mut Graph, Var) -> Var) -> Var {
        if self.linear {
            x
        } else {
            f(g, x)
        }
    }

    /// Stretch `cond [bins×frames]` to `[bins×L]` with two transposed
    /// convolutions.
    pub fn upsample_conditioner(&self, g: &mut Graph, p: &[Var], cond: &Spectrogram) -> Result<Var> {
        self.check_cond(cond)?;
        let (bins, frames) = (cond.bins(), cond.frames());
        let x = g.constant(cond.values().reshape(vec![1, bins, frames])?);
        let mut y = x;
        for (i, &stride) in self.config.upsample_t.iter().enumerate() {
            y = g.transposed_conv2d(y, p[self.slots.up[i]], 1, stride)?;
            if !self.linear {
                y = g.leaky_relu(y, UPSAMPLE_SLOPE);
            }
        }
        g.reshape(y, vec![bins, self.geometry.length])
    }

    /// `W [out×in] · x [in×L] + b`
    fn pointwise(g: &mut Graph, w: Var, b: Var, x: Var) -> Result<Var> {
        let y = g.matmul(w, x)?;
        g.add_channel_bias(y, b)
    }

    /// ε prediction for `x_t` inside `g`, with parameters bound as `p`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x_t: Var, t: usize, cond: &Spectrogram) -> Result<Var> {
        self.check_input(g.shape(x_t))?;
        let up = self.upsample_conditioner(g, p, cond)?;
        self.forward_inner(g, p, x_t, t, Cond::Graph(up))
    }

    fn forward_inner(&self, g: &mut Graph, p: &[Var], x_t: Var, t: usize, cond: Cond) -> Result<Var> {
        let c = self.config.channels;
        let emb = g.constant(step_embedding(t).into_reshape(vec![1, EMBEDDING_DIM])?);
        let x = Self::pointwise(g, p[self.slots.in_w], p[self.slots.in_b], x_t)?;
        let mut residual = self.act(g, x, Graph::relu);
        let mut skip: Option<Var> = None;
        for (slots, info) in self.slots.layers.iter().zip(self.layer_info()) {
            let s = g.matmul(emb, p[slots.step_w])?;
            let s = g.reshape(s, vec![c])?;
            let s = g.add(s, p[slots.step_b])?;
            let y = g.add_channel_bias(residual, s)?;
            let h = g.dilated_conv1d(y, p[slots.dil_w], info.dilation)?;
            let h = g.add_channel_bias(h, p[slots.dil_b])?;
            let cb = match cond {
                Cond::Graph(up) => Self::pointwise(g, p[slots.cond_w], p[slots.cond_b], up)?,
                Cond::Cached(prep) => g.constant(prep.layer_bias[info.block * self.config.layers_per_block() + info.position].clone()),
            };
            let h = g.add(h, cb)?;
            let filter = g.narrow(h, 0, c)?;
            let gate = if self.linear {
                filter
            } else {
                let gate = g.narrow(h, c, c)?;
                let f = g.tanh(filter);
                let s = g.sigmoid(gate);
                g.mul(f, s)?
            };
            let r = Self::pointwise(g, p[slots.res_w], p[slots.res_b], gate)?;
            let r = g.add(residual, r)?;
            residual = g.scale(r, std::f64::consts::FRAC_1_SQRT_2);
            let k = Self::pointwise(g, p[slots.skip_w], p[slots.skip_b], gate)?;
            skip = Some(match skip {
                None => k,
                Some(acc) => g.add(acc, k)?,
            });
        }
        let skip = g.scale(skip.expect("at least one layer"), 1.0 / (self.config.layers as f64).sqrt());
        let [(w0, b0), (w1, b1)] = self.slots.head;
        let y = self.act(g, skip, Graph::relu);
        let y = Self::pointwise(g, p[w0], p[b0], y)?;
        let y = self.act(g, y, Graph::relu);
        Self::pointwise(g, p[w1], p[b1], y)
    }

    /// Precompute the conditioner contribution of every layer.
    pub fn prepare(&self, cond: &Spectrogram) -> Result<PreparedCond> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let up = self.upsample_conditioner(&mut g, &p, cond)?;
        let layer_bias = self
            .slots
            .layers
            .iter()
            .map(|s| {
                let v = Self::pointwise(&mut g, p[s.cond_w], p[s.cond_b], up)?;
                Ok(g.value(v).clone())
            })
            .collect::<Result<_>>()?;
        Ok(PreparedCond { layer_bias })
    }

    /// ε prediction without gradient bookkeeping.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: &Spectrogram) -> Result<Tensor> {
        self.predict_prepared(x_t, t, &self.prepare(cond)?)
    }

    pub fn predict_prepared(&self, x_t: &Tensor, t: usize, cond: &PreparedCond) -> Result<Tensor> {
        self.check_input(x_t.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x_t.clone());
        let y = self.forward_inner(&mut g, &p, x, t, Cond::Cached(cond))?;
        Ok(g.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        Checkpoint::new(self.params.entries())
            .with_meta("kind", "epsnet")
            .with_meta("net.channels", c.channels)
            .with_meta("net.layers", c.layers)
            .with_meta("net.blocks", c.blocks)
            .with_meta("net.kernel", c.kernel)
            .with_meta("net.upsample_t", format!("{},{}", c.upsample_t[0], c.upsample_t[1]))
            .with_meta("input_channels", self.geometry.input_channels)
            .with_meta("length", self.geometry.length)
            .with_meta("bins", self.geometry.bins)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("epsnet") {
            return Err(format_err!("checkpoint does not hold an ε-network"));
        }
        let up = ck.meta("net.upsample_t").unwrap_or_default();
        let strides: Vec<usize> = up.split(',').filter_map(|s| s.parse().ok()).collect();
        if strides.len() != 2 {
            return Err(format_err!("checkpoint metadata net.upsample_t = `{up}` is malformed"));
        }
        let config = EpsNetConfig {
            channels: ck.meta_parse("net.channels")?,
            layers: ck.meta_parse("net.layers")?,
            blocks: ck.meta_parse("net.blocks")?,
            kernel: ck.meta_parse("net.kernel")?,
            upsample_t: [strides[0], strides[1]],
        };
        let geometry = Geometry {
            input_channels: ck.meta_parse("input_channels")?,
            length: ck.meta_parse("length")?,
            bins: ck.meta_parse("bins")?,
        };
        let mut net = Self::zeros(config, geometry).map_err(|e| format_err!("checkpoint geometry: {e}"))?;
        net.params.load(&crate::diffusion::network_tensors(ck).tensors)?;
        Ok(net)
    }
}
