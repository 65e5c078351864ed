//! Forward noising, the noise-prediction objective, training and ancestral
//! sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{format_err, invalid, Result};
use crate::network::{EpsNet, PreparedCond};
use crate::numerics::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use crate::rng::SeedTree;
use crate::schedule::Schedule;
use crate::signal::Spectrogram;

pub const EMBEDDING_DIM: usize = 128;

/// Sinusoidal encoding of a diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepEmbedding {
    pub t: usize,
    pub vector: [f64; EMBEDDING_DIM],
}

impl StepEmbedding {
    pub fn new(t: usize) -> Self {
        let half = EMBEDDING_DIM / 2;
        let mut vector = [0.0; EMBEDDING_DIM];
        for i in 0..half {
            let arg = 10f64.powf(i as f64 * 4.0 / (half - 1) as f64) * t as f64;
            vector[i] = arg.sin();
            vector[half + i] = arg.cos();
        }
        Self { t, vector }
    }
}

/// The embedding as a `[128]` tensor.
pub fn step_embedding(t: usize) -> Tensor {
    Tensor::from_vec(StepEmbedding::new(t).vector.to_vec())
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`
pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &Schedule) -> Result<Tensor> {
    sched.check_step(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Anything that predicts the injected noise.
pub trait Denoiser: Sync {
    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// `(H, L)` of the samples this denoiser works on.
    fn sample_shape(&self) -> (usize, usize);

    /// ε prediction built into `g`.
    fn eps(&self, g: &mut Graph, p: &[Var], x_t: Var, t: usize, cond: &Spectrogram) -> Result<Var>;

    /// Inference-only predictor for one conditioner, used by the sampler.
    fn predictor<'a>(&'a self, cond: &Spectrogram) -> Result<Box<dyn Fn(&Tensor, usize) -> Result<Tensor> + 'a>> {
        let cond = cond.clone();
        Ok(Box::new(move |x: &Tensor, t: usize| {
            let mut g = Graph::new();
            let p = self.params().bind(&mut g);
            let xv = g.constant(x.clone());
            let y = self.eps(&mut g, &p, xv, t, &cond)?;
            Ok(g.value(y).clone())
        }))
    }
}

impl Denoiser for EpsNet {
    fn params(&self) -> &ParamSet {
        EpsNet::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        EpsNet::params_mut(self)
    }

    fn sample_shape(&self) -> (usize, usize) {
        let g = self.geometry();
        (g.input_channels, g.length)
    }

    fn eps(&self, g: &mut Graph, p: &[Var], x_t: Var, t: usize, cond: &Spectrogram) -> Result<Var> {
        self.forward(g, p, x_t, t, cond)
    }

    fn predictor<'a>(&'a self, cond: &Spectrogram) -> Result<Box<dyn Fn(&Tensor, usize) -> Result<Tensor> + 'a>> {
        let prepared: PreparedCond = self.prepare(cond)?;
        Ok(Box::new(move |x: &Tensor, t: usize| self.predict_prepared(x, t, &prepared)))
    }
}

/// One training pair: a clean segment and its conditioner.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub x0: Tensor,
    pub cond: Spectrogram,
}

/// `mean((eps − ε_θ(forward_diffuse(x0, t, eps), t, cond))²)` as a node of
/// `g`, with `t` and `eps` drawn from `rng`.
pub fn training_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    g: &mut Graph,
    p: &[Var],
    net: &D,
    example: &TrainExample,
    sched: &Schedule,
    rng: &mut R,
) -> Result<Var> {
    let t = rng.random_range(1..=sched.steps());
    let eps = Tensor::randn(example.x0.shape().to_vec(), rng);
    loss_at(g, p, net, example, sched, t, &eps)
}

/// The objective for a given step and noise draw.
pub fn loss_at<D: Denoiser + ?Sized>(
    g: &mut Graph,
    p: &[Var],
    net: &D,
    example: &TrainExample,
    sched: &Schedule,
    t: usize,
    eps: &Tensor,
) -> Result<Var> {
    let x_t = forward_diffuse(&example.x0, t, eps, sched)?;
    let x_t = g.constant(x_t);
    let pred = net.eps(g, p, x_t, t, &example.cond)?;
    let target = g.constant(eps.clone());
    let diff = g.sub(target, pred)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { iters: 1000, batch: 8, lr: AdamConfig::default().lr, seed: 0 }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid!("train.batch must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("train.lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Optimiser state and progress of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub iteration: usize,
    pub seed: u64,
    /// Mean batch loss of every completed iteration.
    pub losses: Vec<f64>,
}

impl TrainState {
    pub fn new(params: &ParamSet, opts: &TrainOptions) -> Self {
        let adam = Adam::new(AdamConfig { lr: opts.lr, ..Default::default() }, params);
        Self { adam, iteration: 0, seed: opts.seed, losses: Vec::new() }
    }

    /// Store optimiser moments and progress next to the network parameters.
    pub fn save_into(&self, ck: Checkpoint, params: &ParamSet) -> Checkpoint {
        let mut ck = ck
            .with_meta("train.iteration", self.iteration)
            .with_meta("train.seed", self.seed)
            .with_meta("train.lr", self.adam.config.lr)
            .with_meta("adam.step", self.adam.step);
        for (i, (name, _)) in params.iter().enumerate() {
            ck.tensors.push((format!("adam.m.{name}"), self.adam.m[i].clone()));
            ck.tensors.push((format!("adam.v.{name}"), self.adam.v[i].clone()));
        }
        ck
    }

    /// Inverse of [`TrainState::save_into`]. The loss trace is not stored.
    pub fn load_from(ck: &Checkpoint, params: &ParamSet) -> Result<Self> {
        let find = |name: String| {
            ck.tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| format_err!("checkpoint lacks optimiser tensor `{name}`"))
        };
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let (mt, vt) = (find(format!("adam.m.{name}"))?, find(format!("adam.v.{name}"))?);
            if mt.shape() != p.shape() || vt.shape() != p.shape() {
                return Err(format_err!("optimiser moments for `{name}` have the wrong shape"));
            }
            m.push(mt);
            v.push(vt);
        }
        let config = AdamConfig { lr: ck.meta_parse("train.lr")?, ..Default::default() };
        Ok(Self {
            adam: Adam { config, step: ck.meta_parse("adam.step")?, m, v },
            iteration: ck.meta_parse("train.iteration")?,
            seed: ck.meta_parse("train.seed")?,
            losses: Vec::new(),
        })
    }
}

/// Strip optimiser tensors so only network parameters remain.
pub fn network_tensors(ck: &Checkpoint) -> Checkpoint {
    Checkpoint {
        meta: ck.meta.clone(),
        tensors: ck.tensors.iter().filter(|(n, _)| !n.starts_with("adam.")).cloned().collect(),
    }
}

/// Run `opts.iters` iterations from scratch.
pub fn train<D: Denoiser>(net: &mut D, data: &[TrainExample], sched: &Schedule, opts: &TrainOptions) -> Result<TrainState> {
    let mut state = TrainState::new(net.params(), opts);
    train_until(net, data, sched, opts, &mut state, opts.iters)?;
    Ok(state)
}

/// Continue training until `state.iteration == until`.
///
/// Every random draw is derived from `(seed, iteration, batch element)`, so
/// stopping and resuming from a saved state reproduces an uninterrupted run.
pub fn train_until<D: Denoiser>(
    net: &mut D,
    data: &[TrainExample],
    sched: &Schedule,
    opts: &TrainOptions,
    state: &mut TrainState,
    until: usize,
) -> Result<()> {
    opts.validate()?;
    if data.is_empty() {
        return Err(invalid!("diffusion training needs at least one segment"));
    }
    let root = SeedTree::new(state.seed).child("train");
    while state.iteration < until {
        let it = root.index(state.iteration as u64);
        let net_ref: &D = net;
        let results: Vec<(f64, Vec<Tensor>)> = (0..opts.batch)
            .into_par_iter()
            .map(|e| {
                let node = it.index(e as u64);
                let pick = node.stream("pick").random_range(0..data.len());
                let t = node.stream("t").random_range(1..=sched.steps());
                let eps = Tensor::randn(data[pick].x0.shape().to_vec(), &mut node.stream("eps"));
                let mut g = Graph::new();
                let p = net_ref.params().bind(&mut g);
                let loss = loss_at(&mut g, &p, net_ref, &data[pick], sched, t, &eps)?;
                g.backward(loss)?;
                Ok((g.value(loss).item(), net_ref.params().grads(&g, &p)))
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / opts.batch as f64;
        let mut total = 0.0;
        let mut grads: Vec<Tensor> = net.params().tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        for (loss, gs) in &results {
            total += loss;
            for (acc, g) in grads.iter_mut().zip(gs) {
                acc.add_assign(g);
            }
        }
        grads.iter_mut().for_each(|g| g.scale_assign(scale));
        state.adam.update(net.params_mut(), &grads);
        state.losses.push(total * scale);
        state.iteration += 1;
    }
    Ok(())
}

/// Ancestral sampling from `x_T ~ N(0, I)`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    net: &D,
    cond: &Spectrogram,
    sched: &Schedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (h, l) = net.sample_shape();
    let x_t = Tensor::randn(vec![h, l], rng);
    sample_from_latent(net, cond, sched, x_t, rng)
}

/// Run the reverse chain from a given `x_T`. The last step adds no noise.
pub fn sample_from_latent<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    net: &D,
    cond: &Spectrogram,
    sched: &Schedule,
    mut x: Tensor,
    rng: &mut R,
) -> Result<Tensor> {
    let predict = net.predictor(cond)?;
    for t in (1..=sched.steps()).rev() {
        let eps = predict(&x, t)?;
        let coef = sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt();
        let root_alpha = sched.alpha(t).sqrt();
        let sigma = sched.beta_tilde(t).sqrt();
        let mut mu = x.zip_map(&eps, |xv, ev| (xv - coef * ev) / root_alpha)?;
        if t > 1 {
            for v in mu.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        x = mu;
    }
    Ok(x)
}

/// Draw one sample per conditioner; item `i` uses its own stream so the
/// result does not depend on scheduling.
pub fn sample_many<D: Denoiser>(net: &D, conds: &[Spectrogram], sched: &Schedule, seed: u64) -> Result<Vec<Tensor>> {
    let root = SeedTree::new(seed).child("sample");
    conds
        .par_iter()
        .enumerate()
        .map(|(i, c)| sample(net, c, sched, &mut root.index(i as u64).rng()))
        .collect()
}
