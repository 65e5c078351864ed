//! Class balancing for the training split.
//!
//! Downsampling shrinks the interictal class; sliding windows, within-seizure
//! recombination and diffusion generation grow the preictal class until both
//! counts match. Only training data ever passes through here.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Segment};
use crate::diffusion::sample_many;
use crate::error::{invalid, Result};
use crate::network::EpsNet;
use crate::numerics::Tensor;
use crate::rng::SeedTree;
use crate::schedule::Schedule;
use crate::signal::{conditioner, normalize_channels, recombine_spectrograms};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMethod {
    Downsample,
    #[serde(alias = "sliding")]
    SlidingWindow,
    Recombine,
    Diffusion,
}

impl BalanceMethod {
    pub fn name(self) -> &'static str {
        match self {
            Self::Downsample => "downsample",
            Self::SlidingWindow => "sliding_window",
            Self::Recombine => "recombine",
            Self::Diffusion => "diffusion",
        }
    }
}

impl std::str::FromStr for BalanceMethod {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "downsample" => Ok(Self::Downsample),
            "sliding" | "sliding_window" => Ok(Self::SlidingWindow),
            "recombine" => Ok(Self::Recombine),
            "diffusion" => Ok(Self::Diffusion),
            _ => Err(invalid!("unknown balance method {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalanceConfig {
    pub method: BalanceMethod,
    pub window_s: f64,
    pub stride_s: f64,
    /// Pretrained diffusion checkpoint. When empty, the diffusion method
    /// trains a fresh network on each fold's training preictal data.
    pub checkpoint: String,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { method: BalanceMethod::Downsample, window_s: 30.0, stride_s: 5.0, checkpoint: String::new() }
    }
}

impl BalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0) || !(self.stride_s > 0.0) {
            return Err(invalid!("balance window and stride must be positive"));
        }
        Ok(())
    }
}

fn split(train: &[Segment]) -> (Vec<&Segment>, Vec<&Segment>) {
    train.iter().partition(|s| s.label.is_preictal())
}

/// Keep every preictal segment and a uniform random subset of interictal
/// segments of the same size, in their original order.
pub fn downsample<R: Rng + ?Sized>(train: &[Segment], rng: &mut R) -> Result<Vec<Segment>> {
    let (pre, inter) = split(train);
    if pre.len() > inter.len() {
        return Err(invalid!("downsampling needs interictal >= preictal, got {} < {}", inter.len(), pre.len()));
    }
    let mut keep = index::sample(rng, inter.len(), pre.len()).into_vec();
    keep.sort_unstable();
    let mut out: Vec<Segment> = pre.into_iter().cloned().collect();
    out.extend(keep.into_iter().map(|i| inter[i].clone()));
    Ok(out)
}

/// A stretch of contiguous preictal signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    /// `[H × n]`
    pub data: Tensor,
    pub start_s: f64,
    pub sample_rate: u32,
    pub source: String,
    pub seizure: Option<usize>,
}

/// Glue back-to-back real preictal segments of the same seizure into
/// regions.
pub fn preictal_regions(train: &[Segment], sample_rate: u32) -> Result<Vec<Region>> {
    let mut pre: Vec<&Segment> = train.iter().filter(|s| s.label.is_preictal() && !s.synthetic).collect();
    pre.sort_by(|a, b| (&a.source, a.start_s).partial_cmp(&(&b.source, b.start_s)).unwrap());
    let fs = sample_rate as f64;
    let mut regions: Vec<(Vec<&Segment>, f64)> = Vec::new();
    for s in pre {
        let dur = s.len() as f64 / fs;
        match regions.last_mut() {
            Some((run, end))
                if run[0].source == s.source
                    && run[0].seizure == s.seizure
                    && (s.start_s - *end).abs() < 0.5 / fs =>
            {
                run.push(s);
                *end = s.start_s + dur;
            }
            _ => regions.push((vec![s], s.start_s + dur)),
        }
    }
    regions
        .into_iter()
        .map(|(run, _)| {
            let h = run[0].channels();
            let total: usize = run.iter().map(|s| s.len()).sum();
            let mut data = Vec::with_capacity(h * total);
            for c in 0..h {
                for s in &run {
                    data.extend_from_slice(s.data.row(c));
                }
            }
            Ok(Region {
                data: Tensor::new(vec![h, total], data)?,
                start_s: run[0].start_s,
                sample_rate,
                source: run[0].source.clone(),
                seizure: run[0].seizure,
            })
        })
        .collect()
}

/// Windows of `window_s` seconds at offsets `0, stride_s, 2·stride_s, …`
/// that fit entirely inside the region.
pub fn sliding_windows(region: &Region, window_s: f64, stride_s: f64) -> Result<Vec<Segment>> {
    if !(stride_s > 0.0) || !(window_s > 0.0) {
        return Err(invalid!("sliding window and stride must be positive"));
    }
    let fs = region.sample_rate as f64;
    let w = (window_s * fs).round() as usize;
    let s = (stride_s * fs).round() as usize;
    if w == 0 || s == 0 {
        return Err(invalid!("window {window_s} s / stride {stride_s} s shorter than one sample"));
    }
    let span = region.data.shape()[1];
    let (h, mut out) = (region.data.shape()[0], Vec::new());
    let mut off = 0;
    while off + w <= span {
        let mut data = Vec::with_capacity(h * w);
        for c in 0..h {
            data.extend_from_slice(&region.data.row(c)[off..off + w]);
        }
        out.push(Segment {
            data: Tensor::new(vec![h, w], data)?,
            label: Label::Preictal,
            source: region.source.clone(),
            start_s: region.start_s + off as f64 / fs,
            synthetic: false,
            seizure: region.seizure,
        });
        off += s;
    }
    Ok(out)
}

/// Grow the preictal class with overlapping windows over the preictal
/// regions of the training data.
///
/// Windows coinciding with an existing segment are skipped; the deficit is
/// drawn uniformly without replacement from the rest. When the regions
/// cannot supply enough windows, all are used and the interictal class is
/// downsampled to the resulting preictal count.
pub fn sliding_balance<R: Rng + ?Sized>(
    train: &[Segment],
    sample_rate: u32,
    window_s: f64,
    stride_s: f64,
    rng: &mut R,
) -> Result<Vec<Segment>> {
    let (pre, inter) = split(train);
    if let Some(s) = pre.first() {
        let seg_s = s.len() as f64 / sample_rate as f64;
        if (seg_s - window_s).abs() > 1e-9 {
            return Err(invalid!("sliding window {window_s} s must equal the segment length {seg_s} s"));
        }
    }
    let deficit = inter.len().saturating_sub(pre.len());
    let mut extra = Vec::new();
    for region in preictal_regions(train, sample_rate)? {
        extra.extend(
            sliding_windows(&region, window_s, stride_s)?
                .into_iter()
                .filter(|w| !pre.iter().any(|p| p.source == w.source && (p.start_s - w.start_s).abs() < 1e-9)),
        );
    }
    let take = deficit.min(extra.len());
    let mut pick = index::sample(rng, extra.len(), take).into_vec();
    pick.sort_unstable();
    let mut out: Vec<Segment> = pre.iter().map(|s| (*s).clone()).collect();
    out.extend(pick.into_iter().map(|i| extra[i].clone()));
    if take == deficit {
        out.extend(inter.into_iter().cloned());
        Ok(out)
    } else {
        let n = out.len();
        let mut keep = index::sample(rng, inter.len(), n).into_vec();
        keep.sort_unstable();
        out.extend(keep.into_iter().map(|i| inter[i].clone()));
        Ok(out)
    }
}

/// Three donor indices into a pool, distinct when the pool allows it, in
/// random order.
fn pick_donors<R: Rng + ?Sized>(pool: usize, rng: &mut R) -> [usize; 3] {
    if pool >= 3 {
        let v = index::sample(rng, pool, 3);
        [v.index(0), v.index(1), v.index(2)]
    } else {
        let mut d = [0, 1 % pool, 2 % pool];
        d.shuffle(rng);
        d
    }
}

/// Sample index where third `i` (0..=3) of a length-`len` segment begins.
pub fn cut_point(len: usize, i: usize) -> usize {
    i * len / 3
}

/// Artificial segments spliced from thirds of donors belonging to one
/// seizure.
pub fn recombine<R: Rng + ?Sized>(pool: &[&Segment], rng: &mut R, count: usize) -> Result<Vec<Segment>> {
    let first = pool.first().ok_or_else(|| invalid!("recombination needs at least one donor"))?;
    let (h, len) = (first.channels(), first.len());
    if pool.iter().any(|s| s.data.shape() != [h, len]) {
        return Err(invalid!("recombination donors differ in shape"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let donors = pick_donors(pool.len(), rng);
        let mut data = Tensor::zeros(vec![h, len]);
        for (third, &d) in donors.iter().enumerate() {
            let (lo, hi) = (cut_point(len, third), cut_point(len, third + 1));
            for c in 0..h {
                data.row_mut(c)[lo..hi].copy_from_slice(&pool[d].data.row(c)[lo..hi]);
            }
        }
        out.push(Segment {
            data,
            label: Label::Preictal,
            source: format!("{}+recombined", first.source),
            start_s: pool[donors[0]].start_s,
            synthetic: true,
            seizure: first.seizure,
        });
    }
    Ok(out)
}

/// Split `total` across pools in proportion to their sizes (largest
/// remainder, ties to the earlier pool).
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum == 0 {
        return vec![0; sizes.len()];
    }
    let mut share: Vec<usize> = sizes.iter().map(|&s| total * s / sum).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((total * sizes[i]) % sum));
    let left = total - share.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        share[i] += 1;
    }
    share
}

/// Real preictal segments grouped by seizure, in seizure order.
fn seizure_pools(train: &[Segment]) -> BTreeMap<Option<usize>, Vec<&Segment>> {
    let mut pools: BTreeMap<Option<usize>, Vec<&Segment>> = BTreeMap::new();
    for s in train.iter().filter(|s| s.label.is_preictal() && !s.synthetic) {
        pools.entry(s.seizure).or_default().push(s);
    }
    pools
}

fn deficit(train: &[Segment]) -> Result<usize> {
    let (pre, inter) = split(train);
    if pre.is_empty() {
        return Err(invalid!("no preictal training segments to augment"));
    }
    Ok(inter.len().saturating_sub(pre.len()))
}

/// Grow the preictal class with within-seizure recombinations, spreading
/// the deficit over seizures in proportion to their preictal counts.
pub fn recombine_balance<R: Rng + ?Sized>(train: &[Segment], rng: &mut R) -> Result<Vec<Segment>> {
    let need = deficit(train)?;
    let pools = seizure_pools(train);
    let sizes: Vec<usize> = pools.values().map(Vec::len).collect();
    let mut out = train.to_vec();
    for (pool, n) in pools.values().zip(apportion(need, &sizes)) {
        out.extend(recombine(pool, rng, n)?);
    }
    Ok(out)
}

/// Generate the preictal deficit with a trained network.
///
/// `ceil(deficit/2)` samples are conditioned on spectrograms of randomly
/// chosen real preictal segments and the rest on spectrograms recombined
/// from three segments of one seizure. Outputs are normalised per channel
/// and flagged synthetic.
pub fn diffusion_augment(train: &[Segment], net: &EpsNet, sched: &Schedule, seed: u64) -> Result<Vec<Segment>> {
    let need = deficit(train)?;
    let mut out = train.to_vec();
    out.extend(diffusion_samples(train, net, sched, need, seed)?);
    Ok(out)
}

/// Draw `count` synthetic preictal segments, conditioned as in
/// [`diffusion_augment`] on the real preictal segments of `train`.
pub fn diffusion_samples(train: &[Segment], net: &EpsNet, sched: &Schedule, count: usize, seed: u64) -> Result<Vec<Segment>> {
    let need = count;
    if need == 0 {
        return Ok(Vec::new());
    }
    let geom = net.geometry();
    let (window, hop) = (2 * (geom.bins - 1), net.config().hop());
    let pools = seizure_pools(train);
    let real: Vec<&Segment> = pools.values().flatten().copied().collect();
    let root = SeedTree::new(seed).child("augment");
    let mut rng = root.stream("pick");

    let n_random = need.div_ceil(2);
    let mut conds = Vec::with_capacity(need);
    let mut origin = Vec::with_capacity(need);
    for _ in 0..n_random {
        let s = real[rng.random_range(0..real.len())];
        conds.push(conditioner(&s.data, window, hop)?);
        origin.push((s, "random"));
    }
    let sizes: Vec<usize> = pools.values().map(Vec::len).collect();
    for (pool, n) in pools.values().zip(apportion(need - n_random, &sizes)) {
        for _ in 0..n {
            let d = pick_donors(pool.len(), &mut rng);
            let specs = d.map(|i| conditioner(&pool[i].data, window, hop));
            let [a, b, c] = specs;
            conds.push(recombine_spectrograms([&a?, &b?, &c?])?);
            origin.push((pool[d[0]], "recombined"));
        }
    }

    let samples = sample_many(net, &conds, sched, root.child("sample").key())?;
    let mut out = Vec::with_capacity(need);
    for (x, (src, kind)) in samples.into_iter().zip(origin) {
        out.push(Segment {
            data: normalize_channels(&x),
            label: Label::Preictal,
            source: format!("{}+diffusion:{kind}", src.source),
            start_s: src.start_s,
            synthetic: true,
            seizure: src.seizure,
        });
    }
    Ok(out)
}

/// Counts of (preictal, interictal) segments.
pub fn class_counts(segments: &[Segment]) -> (usize, usize) {
    let pre = segments.iter().filter(|s| s.label.is_preictal()).count();
    (pre, segments.len() - pre)
}
