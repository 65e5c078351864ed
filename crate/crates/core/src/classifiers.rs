//! Segment classifiers used to measure augmentation benefit.
//!
//! Three small architectures share one interface: a spatio-temporal MLP
//! (cross-channel mixing, per-frame dense layer, average pool, dense head),
//! a multi-scale dilated CNN whose branches are fused by learned attention
//! weights, and a transformer encoder over strided-convolution patches. All
//! emit one logit; the probability is its sigmoid.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::Segment;
use crate::error::{format_err, invalid, shape_err, Error, Result};
use crate::numerics::kernels::{matmul, matmul_nt, sigmoid, softmax_last};
use crate::numerics::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Cnn,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Mlp, Arch::Cnn, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::Cnn => "cnn",
            Arch::Transformer => "transformer",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| invalid!("unknown classifier {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub arch: Arch,
    /// Width of every hidden representation.
    pub hidden: usize,
    /// Kernel sizes of the parallel CNN branches (odd).
    pub scales: Vec<usize>,
    /// Attention heads; `hidden / heads` is the key dimension.
    pub heads: usize,
    /// Temporal reduction: MLP frame length, CNN stem stride and transformer
    /// patch length, in samples.
    pub patch: usize,
    pub epochs_max: usize,
    pub patience: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Cnn,
            hidden: 16,
            scales: vec![3, 5, 7],
            heads: 2,
            patch: 8,
            epochs_max: 50,
            patience: 5,
            lr: 1e-3,
            batch: 16,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.patch == 0 || self.batch == 0 || self.epochs_max == 0 || self.patience == 0 {
            return Err(invalid!("clf.hidden, patch, batch, epochs_max and patience must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(invalid!("clf.lr must be positive"));
        }
        if self.arch == Arch::Cnn && (self.scales.len() < 3 || self.scales.iter().any(|k| k % 2 == 0)) {
            return Err(invalid!("clf.scales needs at least three odd kernel sizes, got {:?}", self.scales));
        }
        if self.arch == Arch::Transformer && (self.heads == 0 || self.hidden % self.heads != 0) {
            return Err(invalid!("clf.heads = {} must divide clf.hidden = {}", self.heads, self.hidden));
        }
        Ok(())
    }
}

/// Row-wise `softmax(QKᵀ/√d_k)`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, dq) = q.dims2()?;
    let (_, dk) = k.dims2()?;
    if dq != dk {
        return Err(shape_err!("attention: query width {dq} vs key width {dk}"));
    }
    let mut s = matmul_nt(q, k)?;
    s.scale_assign(1.0 / (dk as f64).sqrt());
    Ok(softmax_last(&s))
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if k.dims2()?.0 != v.dims2()?.0 {
        return Err(shape_err!("attention: {} keys for {} values", k.shape()[0], v.shape()[0]));
    }
    matmul(&attention_weights(q, k)?, v)
}

/// Differentiable form of [`attention`].
pub fn attention_graph(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(shape_err!("attention: Q {qs:?}, K {ks:?}, V {vs:?}"));
    }
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (qs[1] as f64).sqrt());
    let w = g.softmax(s);
    g.matmul(w, v)
}

/// Sinusoidal position code `[P × D]`.
pub fn positional_encoding(positions: usize, dim: usize) -> Tensor {
    let mut pe = Tensor::zeros(vec![positions, dim]);
    for p in 0..positions {
        for i in 0..dim {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = p as f64 * freq;
            pe.row_mut(p)[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    pe
}

/// Hands out bound parameters in registration order.
struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn take(&mut self) -> Var {
        self.next += 1;
        self.vars[self.next - 1]
    }
}

const BRANCH_DILATION: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    channels: usize,
    length: usize,
    params: ParamSet,
}

impl Classifier {
    /// Randomly initialised classifier for `[channels × length]` segments.
    /// The output layer starts at zero, so an untrained model answers 0.5.
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, channels: usize, length: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if channels == 0 || length == 0 || length % config.patch != 0 {
            return Err(invalid!("segment {channels}×{length} does not fit clf.patch = {}", config.patch));
        }
        let (h, d, s) = (channels, config.hidden, config.patch);
        let mut p = ParamSet::new();
        let mut add = |name: String, shape: Vec<usize>, fan_in: usize| {
            let t = if fan_in == 0 {
                Tensor::zeros(shape)
            } else {
                Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
            };
            p.add(name, t);
        };
        match config.arch {
            Arch::Mlp => {
                add("channel.w".into(), vec![d, h], h);
                add("channel.b".into(), vec![d], 0);
                add("frame.w".into(), vec![s, d], s);
                add("frame.b".into(), vec![d], 0);
                add("dense.w".into(), vec![d, d], d);
                add("dense.b".into(), vec![d], 0);
            }
            Arch::Cnn => {
                add("stem.w".into(), vec![d, h, 2 * s + 1], h * (2 * s + 1));
                add("stem.b".into(), vec![d], 0);
                for &k in &config.scales {
                    add(format!("branch{k}.w"), vec![d, d, k], d * k);
                    add(format!("branch{k}.b"), vec![d], 0);
                }
                add("fusion.w".into(), vec![d, d], d);
                add("fusion.b".into(), vec![d], 0);
                add("fusion.v".into(), vec![1, d], d);
                add("conv_head.w".into(), vec![d, d, 3], 3 * d);
                add("conv_head.b".into(), vec![d], 0);
            }
            Arch::Transformer => {
                let dk = d / config.heads;
                add("embed.w".into(), vec![d, h, s], h * s);
                add("embed.b".into(), vec![d], 0);
                for i in 0..config.heads {
                    for m in ["q", "k", "v"] {
                        add(format!("head{i}.{m}"), vec![d, dk], d);
                    }
                }
                add("attn_out.w".into(), vec![d, d], d);
                add("ff.0.w".into(), vec![d, 2 * d], d);
                add("ff.0.b".into(), vec![2 * d], 0);
                add("ff.1.w".into(), vec![2 * d, d], 2 * d);
                add("ff.1.b".into(), vec![d], 0);
            }
        }
        add("out.w".into(), vec![1, d], 0);
        add("out.b".into(), vec![1], 0);
        Ok(Self { config, channels, length, params: p })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn geometry(&self) -> (usize, usize) {
        (self.channels, self.length)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != [self.channels, self.length] {
            return Err(shape_err!("classifier expects {}×{}, got {:?}", self.channels, self.length, x.shape()));
        }
        Ok(())
    }

    /// Logit `[1]` for one segment.
    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let mut c = Cursor { vars: p, next: 0 };
        let pooled = match self.config.arch {
            Arch::Mlp => self.mlp_body(g, &mut c, x)?,
            Arch::Cnn => self.cnn_body(g, &mut c, x)?.0,
            Arch::Transformer => self.transformer_body(g, &mut c, x)?,
        };
        let d = self.config.hidden;
        let col = g.reshape(pooled, vec![d, 1])?;
        let w = c.take();
        let z = g.matmul(w, col)?;
        let b = c.take();
        let z = g.add_channel_bias(z, b)?;
        g.reshape(z, vec![1])
    }

    fn mlp_body(&self, g: &mut Graph, c: &mut Cursor, x: Var) -> Result<Var> {
        let (d, s) = (self.config.hidden, self.config.patch);
        let frames = self.length / s;
        // cross-channel mixing at every sample
        let w = c.take();
        let h = g.matmul(w, x)?;
        let b = c.take();
        let h = g.add_channel_bias(h, b)?;
        let h = g.relu(h);
        // dense layer over each frame of each mixed channel
        let f = g.reshape(h, vec![d * frames, s])?;
        let w = c.take();
        let t = g.matmul(f, w)?;
        let b = c.take();
        let t = g.add_row_bias(t, b)?;
        let t = g.relu(t);
        let tt = g.transpose(t)?;
        let pooled = g.mean_last_axis(tt);
        let col = g.reshape(pooled, vec![d, 1])?;
        let w = c.take();
        let z = g.matmul(w, col)?;
        let b = c.take();
        let z = g.add_channel_bias(z, b)?;
        let z = g.relu(z);
        g.reshape(z, vec![d])
    }

    /// Pooled features and the fusion weights of the branches.
    fn cnn_body(&self, g: &mut Graph, c: &mut Cursor, x: Var) -> Result<(Var, Var)> {
        let (d, s) = (self.config.hidden, self.config.patch);
        let w = c.take();
        let h = g.conv1d(x, w, s, 1, s)?;
        let b = c.take();
        let h = g.add_channel_bias(h, b)?;
        let h = g.relu(h);
        let mut branches = Vec::with_capacity(self.config.scales.len());
        for _ in &self.config.scales {
            let w = c.take();
            let y = g.dilated_conv1d(h, w, BRANCH_DILATION)?;
            let b = c.take();
            let y = g.add_channel_bias(y, b)?;
            branches.push(g.relu(y));
        }
        let (fw, fb, fv) = (c.take(), c.take(), c.take());
        let mut scores = Vec::with_capacity(branches.len());
        for &y in &branches {
            let pooled = g.global_avg_pool(y)?;
            let col = g.reshape(pooled, vec![d, 1])?;
            let a = g.matmul(fw, col)?;
            let a = g.add_channel_bias(a, fb)?;
            let a = g.tanh(a);
            let sc = g.matmul(fv, a)?;
            scores.push(g.reshape(sc, vec![1])?);
        }
        let scores = g.concat(&scores)?;
        let weights = g.softmax(scores);
        let mut fused = None;
        for (i, &y) in branches.iter().enumerate() {
            let wi = g.narrow(weights, i, 1)?;
            let term = g.mul_scalar(y, wi)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let w = c.take();
        let y = g.conv1d(fused.unwrap(), w, 2, 1, 1)?;
        let b = c.take();
        let y = g.add_channel_bias(y, b)?;
        let y = g.relu(y);
        Ok((g.global_avg_pool(y)?, weights))
    }

    fn transformer_body(&self, g: &mut Graph, c: &mut Cursor, x: Var) -> Result<Var> {
        let (d, s, heads) = (self.config.hidden, self.config.patch, self.config.heads);
        let w = c.take();
        let e = g.conv1d(x, w, s, 1, 0)?;
        let b = c.take();
        let e = g.add_channel_bias(e, b)?;
        let tokens = g.transpose(e)?;
        let n = self.length / s;
        let pe = g.constant(positional_encoding(n, d));
        let tokens = g.add(tokens, pe)?;

        let mut outs = Vec::with_capacity(heads);
        for _ in 0..heads {
            let (wq, wk, wv) = (c.take(), c.take(), c.take());
            let q = g.matmul(tokens, wq)?;
            let k = g.matmul(tokens, wk)?;
            let v = g.matmul(tokens, wv)?;
            let o = attention_graph(g, q, k, v)?;
            outs.push(g.transpose(o)?);
        }
        let cat = g.concat(&outs)?;
        let cat = g.transpose(cat)?;
        let wo = c.take();
        let attn = g.matmul(cat, wo)?;
        let tokens = g.add(tokens, attn)?;

        let (w0, b0, w1, b1) = (c.take(), c.take(), c.take(), c.take());
        let f = g.matmul(tokens, w0)?;
        let f = g.add_row_bias(f, b0)?;
        let f = g.relu(f);
        let f = g.matmul(f, w1)?;
        let f = g.add_row_bias(f, b1)?;
        let tokens = g.add(tokens, f)?;
        let t = g.transpose(tokens)?;
        Ok(g.mean_last_axis(t))
    }

    pub fn logit(&self, x: &Tensor) -> Result<f64> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let z = self.forward(&mut g, &p, xv)?;
        Ok(g.value(z).item())
    }

    /// Probability that the segment is preictal.
    pub fn classify(&self, x: &Tensor) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    pub fn classify_all(&self, segments: &[Segment]) -> Result<Vec<f64>> {
        segments.par_iter().map(|s| self.classify(&s.data)).collect()
    }

    /// Branch fusion weights of the CNN for one input.
    pub fn fusion_weights(&self, x: &Tensor) -> Result<Tensor> {
        if self.config.arch != Arch::Cnn {
            return Err(invalid!("fusion weights exist only for the cnn classifier"));
        }
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let xv = g.constant(x.clone());
        let (_, w) = self.cnn_body(&mut g, &mut Cursor { vars: &p, next: 0 }, xv)?;
        Ok(g.value(w).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.config;
        let scales: Vec<String> = c.scales.iter().map(usize::to_string).collect();
        Checkpoint::new(self.params.entries())
            .with_meta("kind", "classifier")
            .with_meta("clf.arch", c.arch.name())
            .with_meta("clf.hidden", c.hidden)
            .with_meta("clf.scales", scales.join(","))
            .with_meta("clf.heads", c.heads)
            .with_meta("clf.patch", c.patch)
            .with_meta("clf.epochs_max", c.epochs_max)
            .with_meta("clf.patience", c.patience)
            .with_meta("clf.lr", c.lr)
            .with_meta("clf.batch", c.batch)
            .with_meta("input_channels", self.channels)
            .with_meta("length", self.length)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("classifier") {
            return Err(format_err!("checkpoint does not hold a classifier"));
        }
        let scales = ck
            .meta("clf.scales")
            .unwrap_or_default()
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| format_err!("bad clf.scales entry `{s}`")))
            .collect::<Result<Vec<usize>>>()?;
        let arch: Arch = ck.meta_parse::<String>("clf.arch")?.parse().map_err(|e| format_err!("{e}"))?;
        let config = ClassifierConfig {
            arch,
            hidden: ck.meta_parse("clf.hidden")?,
            scales,
            heads: ck.meta_parse("clf.heads")?,
            patch: ck.meta_parse("clf.patch")?,
            epochs_max: ck.meta_parse("clf.epochs_max")?,
            patience: ck.meta_parse("clf.patience")?,
            lr: ck.meta_parse("clf.lr")?,
            batch: ck.meta_parse("clf.batch")?,
        };
        let (h, l) = (ck.meta_parse("input_channels")?, ck.meta_parse("length")?);
        let mut c = Self::new(config, h, l, &mut SeedTree::new(0).rng()).map_err(|e| format_err!("checkpoint geometry: {e}"))?;
        c.params.load(&ck.tensors)?;
        Ok(c)
    }
}

/// Validation sensitivity and specificity; a probability above 0.5 is a
/// preictal decision.
pub fn sens_spec(probs: &[f64], segments: &[Segment]) -> (f64, f64) {
    let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&pr, s) in probs.iter().zip(segments) {
        if s.label.is_preictal() {
            p += 1;
            tp += usize::from(pr > 0.5);
        } else {
            n += 1;
            tn += usize::from(pr <= 0.5);
        }
    }
    (tp as f64 / p.max(1) as f64, tn as f64 / n.max(1) as f64)
}

/// Stop once neither validation sensitivity nor specificity has improved
/// on its best value for `patience` consecutive epochs; remember the epoch
/// with the largest sum.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    patience: usize,
    best_sens: f64,
    best_spec: f64,
    stale: usize,
    pub best_epoch: Option<usize>,
    best_sum: f64,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best_sens: f64::NEG_INFINITY,
            best_spec: f64::NEG_INFINITY,
            stale: 0,
            best_epoch: None,
            best_sum: f64::NEG_INFINITY,
        }
    }

    /// Record an epoch; returns whether training should continue.
    pub fn observe(&mut self, epoch: usize, sens: f64, spec: f64) -> bool {
        let improved = sens > self.best_sens || spec > self.best_spec;
        self.best_sens = self.best_sens.max(sens);
        self.best_spec = self.best_spec.max(spec);
        self.stale = if improved { 0 } else { self.stale + 1 };
        if sens + spec > self.best_sum {
            self.best_sum = sens + spec;
            self.best_epoch = Some(epoch);
        }
        self.stale < self.patience
    }

    /// Whether `epoch` is the best seen so far.
    pub fn is_best(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub sens: f64,
    pub spec: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn check_classes(segments: &[Segment], what: &str) -> Result<()> {
    let pre = segments.iter().filter(|s| s.label.is_preictal()).count();
    if pre == 0 || pre == segments.len() {
        return Err(Error::Protocol(format!("{what} set holds a single class ({pre} of {} preictal)", segments.len())));
    }
    Ok(())
}

/// Mean binary cross-entropy and its gradient over a minibatch, evaluated
/// element-wise in parallel and reduced in order.
fn batch_grad(c: &Classifier, batch: &[&Segment]) -> Result<(f64, Vec<Tensor>)> {
    let results: Vec<(f64, Vec<Tensor>)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let p = c.params.bind(&mut g);
            let x = g.constant(s.data.clone());
            let z = c.forward(&mut g, &p, x)?;
            let loss = g.bce_with_logits(z, s.label.target())?;
            g.backward(loss)?;
            Ok((g.value(loss).item(), c.params.grads(&g, &p)))
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Tensor> = c.params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut total = 0.0;
    for (l, gs) in &results {
        total += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            acc.add_assign(g);
        }
    }
    grads.iter_mut().for_each(|g| g.scale_assign(scale));
    Ok((total * scale, grads))
}

/// Train with Adam on minibatches of the (balanced) training set, scoring
/// the validation set after every epoch. The parameters of the best epoch
/// are restored before returning.
pub fn fit(c: &mut Classifier, train: &[Segment], validation: &[Segment], seed: u64) -> Result<FitHistory> {
    check_classes(train, "training")?;
    check_classes(validation, "validation")?;
    for s in train.iter().chain(validation) {
        c.check_input(&s.data)?;
    }
    let cfg = c.config.clone();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &c.params);
    let root = SeedTree::new(seed).child("fit");
    let mut stop = EarlyStop::new(cfg.patience);
    let mut best = c.params.clone();
    let mut epochs = Vec::new();
    for epoch in 0..cfg.epochs_max {
        let mut order: Vec<&Segment> = train.iter().collect();
        order.shuffle(&mut root.index(epoch as u64).rng());
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch) {
            let (loss, grads) = batch_grad(c, batch)?;
            loss_sum += loss * batch.len() as f64;
            adam.update(&mut c.params, &grads);
        }
        let probs = c.classify_all(validation)?;
        let (sens, spec) = sens_spec(&probs, validation);
        epochs.push(EpochRecord { epoch, loss: loss_sum / train.len() as f64, sens, spec });
        let go_on = stop.observe(epoch, sens, spec);
        if stop.is_best(epoch) {
            best = c.params.clone();
        }
        if !go_on {
            break;
        }
    }
    c.params = best;
    Ok(FitHistory { epochs, best_epoch: stop.best_epoch.unwrap_or(0) })
}

/// Full-batch training loss trajectory, without validation or early stop.
pub fn full_batch_losses(c: &mut Classifier, train: &[Segment], epochs: usize) -> Result<Vec<f64>> {
    check_classes(train, "training")?;
    let mut adam = Adam::new(AdamConfig { lr: c.config.lr, ..AdamConfig::default() }, &c.params);
    let all: Vec<&Segment> = train.iter().collect();
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grads) = batch_grad(c, &all)?;
        out.push(loss);
        adam.update(&mut c.params, &grads);
    }
    Ok(out)
}
