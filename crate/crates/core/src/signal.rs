//! Spectrograms, amplitude normalisation and the synthetic EEG generator.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dataset::{Recording, Segment, Seizure};
use crate::error::{invalid, shape_err, Result};
use crate::numerics::Tensor;
use crate::rng::SeedTree;

/// Magnitude spectrogram, `[bins × frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Tensor,
    window_len: usize,
    hop: usize,
}

impl Spectrogram {
    pub fn new(values: Tensor, window_len: usize, hop: usize) -> Result<Self> {
        let (bins, _) = values.dims2()?;
        if bins != window_len / 2 + 1 {
            return Err(shape_err!("{bins} bins do not match window {window_len}"));
        }
        if hop == 0 {
            return Err(invalid!("hop must be positive"));
        }
        if values.data().iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid!("spectrogram magnitudes must be non-negative"));
        }
        Ok(Self { values, window_len, hop })
    }

    pub fn bins(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.bins()).map(|k| self.values.data()[k * self.frames() + j]).collect()
    }

    fn same_geometry(&self, other: &Spectrogram) -> bool {
        self.values.shape() == other.values.shape() && self.window_len == other.window_len && self.hop == other.hop
    }

    /// `log(1 + S)` elementwise.
    pub fn log1p(&self) -> Spectrogram {
        Spectrogram { values: self.values.map(f64::ln_1p), ..self.clone() }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

fn frame_count(len: usize, window_len: usize, hop: usize) -> Result<usize> {
    if hop == 0 || window_len == 0 {
        return Err(invalid!("window and hop must be positive"));
    }
    if window_len > len {
        return Err(invalid!("window of {window_len} samples exceeds signal of {len}"));
    }
    Ok((len - window_len) / hop + 1)
}

/// Per-frame magnitude spectra of one channel, accumulated into `out`
/// (`[bins × frames]`, row-major) with weight `w`.
fn accumulate_stft(x: &[f64], window_len: usize, hop: usize, w: f64, out: &mut [f64], planner: &mut FftPlanner<f64>) {
    let frames = (x.len() - window_len) / hop + 1;
    let bins = window_len / 2 + 1;
    let window = hann(window_len);
    let fft = planner.plan_fft_forward(window_len);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    for j in 0..frames {
        let frame = &x[j * hop..j * hop + window_len];
        for ((b, &s), &h) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s * h, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[k * frames + j] += w * buf[k].norm();
        }
    }
}

/// Magnitude STFT of a single channel with a Hann window.
pub fn stft_magnitude(x: &[f64], window_len: usize, hop: usize) -> Result<Spectrogram> {
    let frames = frame_count(x.len(), window_len, hop)?;
    let bins = window_len / 2 + 1;
    let mut out = vec![0.0; bins * frames];
    accumulate_stft(x, window_len, hop, 1.0, &mut out, &mut FftPlanner::new());
    Spectrogram::new(Tensor::new(vec![bins, frames], out)?, window_len, hop)
}

/// Mean of the per-channel magnitude spectrograms of an `[H × L]` segment.
pub fn stft_multichannel(data: &Tensor, window_len: usize, hop: usize) -> Result<Spectrogram> {
    let (h, len) = data.dims2()?;
    let frames = frame_count(len, window_len, hop)?;
    let bins = window_len / 2 + 1;
    let mut out = vec![0.0; bins * frames];
    let mut planner = FftPlanner::new();
    for c in 0..h {
        accumulate_stft(data.row(c), window_len, hop, 1.0 / h as f64, &mut out, &mut planner);
    }
    Spectrogram::new(Tensor::new(vec![bins, frames], out)?, window_len, hop)
}

/// Log-compressed multichannel spectrogram used to condition the ε-network.
pub fn conditioner(data: &Tensor, window_len: usize, hop: usize) -> Result<Spectrogram> {
    Ok(stft_multichannel(data, window_len, hop)?.log1p())
}

/// Frame index where third `i` (0..=3) of `frames` begins.
pub fn third_cut(frames: usize, i: usize) -> usize {
    i * frames / 3
}

/// Splice three donors along time: third `i` of the output is copied from
/// `donors[i]`.
pub fn recombine_spectrograms(donors: [&Spectrogram; 3]) -> Result<Spectrogram> {
    let [a, b, c] = donors;
    if !a.same_geometry(b) || !a.same_geometry(c) {
        return Err(shape_err!("recombined spectrograms must share geometry"));
    }
    let (bins, frames) = (a.bins(), a.frames());
    let mut out = a.values.clone();
    for (third, d) in donors.iter().enumerate() {
        let (lo, hi) = (third_cut(frames, third), third_cut(frames, third + 1));
        for k in 0..bins {
            let row = k * frames;
            out.data_mut()[row + lo..row + hi].copy_from_slice(&d.values.data()[row + lo..row + hi]);
        }
    }
    Ok(Spectrogram { values: out, window_len: a.window_len, hop: a.hop })
}

/// Per-channel zero mean and unit variance; constant channels become zero.
pub fn normalize_channels(data: &Tensor) -> Tensor {
    let mut out = data.clone();
    let rows = if data.rank() == 1 { 1 } else { data.shape()[0] };
    let len = data.len() / rows;
    for c in 0..rows {
        let row = &mut out.data_mut()[c * len..(c + 1) * len];
        let mean = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / len as f64;
        let std = var.sqrt();
        let constant = std <= 1e-12 * mean.abs().max(1.0);
        for v in row.iter_mut() {
            *v = if constant { 0.0 } else { (*v - mean) / std };
        }
    }
    out
}

pub fn normalize(seg: &Segment) -> Segment {
    Segment { data: normalize_channels(&seg.data), ..seg.clone() }
}

/// Mean power between `lo_hz` and `hi_hz` over non-overlapping Hann frames.
pub fn band_power(x: &[f64], fs: f64, lo_hz: f64, hi_hz: f64, window_len: usize) -> Result<f64> {
    let spec = stft_magnitude(x, window_len, window_len)?;
    let res = fs / window_len as f64;
    let mut total = 0.0;
    for k in 0..spec.bins() {
        let f = k as f64 * res;
        if f >= lo_hz && f <= hi_hz {
            total += spec.values.row(k).iter().map(|m| m * m).sum::<f64>();
        }
    }
    Ok(total / spec.frames() as f64)
}

/// Parameters of the synthetic EEG generator.
///
/// Preictal stretches differ from background only by an added signature
/// rhythm that fades in over `signature_rise_s` starting `preictal_s` before
/// each onset and holds until the onset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticProfile {
    pub channels: usize,
    pub sample_rate: u32,
    pub background_hz: f64,
    pub background_amp: f64,
    pub pink_level: f64,
    /// Corner of a one-pole low-pass applied to the background noise; 0 disables it.
    pub noise_corner_hz: f64,
    pub signature_hz: f64,
    pub signature_amp: f64,
    /// Per-seizure signature frequency is drawn from `signature_hz ± signature_jitter_hz`.
    pub signature_jitter_hz: f64,
    pub preictal_s: f64,
    pub signature_rise_s: f64,
    pub ictal_s: f64,
    pub seed: u64,
}

impl Default for SyntheticProfile {
    fn default() -> Self {
        Self {
            channels: 4,
            sample_rate: 64,
            background_hz: 10.0,
            background_amp: 1.0,
            pink_level: 1.0,
            noise_corner_hz: 8.0,
            signature_hz: 3.0,
            signature_amp: 1.5,
            signature_jitter_hz: 0.3,
            preictal_s: 1800.0,
            signature_rise_s: 600.0,
            ictal_s: 60.0,
            seed: 0,
        }
    }
}

impl SyntheticProfile {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.sample_rate == 0 {
            return Err(invalid!("synthetic profile needs channels and sample rate"));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (name, f) in [("background_hz", self.background_hz), ("signature_hz", self.signature_hz)] {
            if !(f > 0.0 && f < nyquist) {
                return Err(invalid!("synth.{name} = {f} must lie in (0, {nyquist})"));
            }
        }
        if !(self.preictal_s > 0.0 && self.signature_rise_s >= 0.0 && self.ictal_s >= 0.0) {
            return Err(invalid!("synthetic durations must be non-negative, preictal positive"));
        }
        if !(self.noise_corner_hz >= 0.0) {
            return Err(invalid!("synth.noise_corner_hz must be non-negative"));
        }
        if self.signature_jitter_hz.abs() >= self.signature_hz {
            return Err(invalid!("signature jitter must be smaller than the signature frequency"));
        }
        Ok(())
    }
}

/// Unit-variance pink noise from a three-pole filter on white noise.
struct PinkNoise {
    state: [f64; 3],
    gain: f64,
}

impl PinkNoise {
    const POLES: [(f64, f64); 4] = [(0.99765, 0.099046), (0.963, 0.2965164), (0.57, 1.0526913), (0.0, 0.1848)];

    fn new() -> Self {
        // Stationary variance of Σ gᵢ·ARᵢ driven by one unit white source.
        let mut var = 0.0;
        for &(a, g) in &Self::POLES {
            for &(b, h) in &Self::POLES {
                var += g * h / (1.0 - a * b);
            }
        }
        Self { state: [0.0; 3], gain: 1.0 / var.sqrt() }
    }

    fn next(&mut self, white: f64) -> f64 {
        let mut out = Self::POLES[3].1 * white;
        for (s, &(a, g)) in self.state.iter_mut().zip(&Self::POLES) {
            *s = a * *s + g * white;
            out += *s;
        }
        out * self.gain
    }

    fn warm_up<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for _ in 0..2000 {
            self.next(rng.sample(StandardNormal));
        }
    }
}

/// Background noise for `n` samples, rescaled to unit sample variance.
fn background_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, fs: f64, corner_hz: f64) -> Vec<f64> {
    let mut pink = PinkNoise::new();
    pink.warm_up(rng);
    let warm = if corner_hz > 0.0 { (4.0 * fs / corner_hz).ceil() as usize } else { 0 };
    let mut x: Vec<f64> = (0..n + warm).map(|_| pink.next(rng.sample(StandardNormal))).collect();
    if corner_hz > 0.0 {
        let a = (-2.0 * PI * corner_hz / fs).exp();
        let mut y = 0.0;
        for v in x.iter_mut() {
            y = a * y + (1.0 - a) * *v;
            *v = y;
        }
    }
    let x = x.split_off(warm);
    let mean = x.iter().sum::<f64>() / n as f64;
    let std = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    x.into_iter().map(|v| (v - mean) / std).collect()
}

fn rise(tau: f64, rise_s: f64) -> f64 {
    if rise_s <= 0.0 || tau >= rise_s {
        1.0
    } else {
        0.5 - 0.5 * (PI * tau / rise_s).cos()
    }
}

/// Generate a continuous recording with seizures at the given onsets.
pub fn synth_record(profile: &SyntheticProfile, duration_s: f64, onsets: &[f64]) -> Result<Recording> {
    profile.validate()?;
    if !(duration_s > 0.0) {
        return Err(invalid!("duration must be positive"));
    }
    if onsets.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid!("seizure onsets must be strictly increasing"));
    }
    if onsets.iter().any(|&o| !(0.0..duration_s).contains(&o)) {
        return Err(invalid!("seizure onsets must lie within the recording"));
    }
    let fs = profile.sample_rate as f64;
    let n = (duration_s * fs).round() as usize;
    let h = profile.channels;
    let root = SeedTree::new(profile.seed);

    let annotations: Vec<Seizure> = onsets
        .iter()
        .enumerate()
        .map(|(k, &o)| {
            let next = onsets.get(k + 1).copied().unwrap_or(duration_s);
            Seizure::new(o, (o + profile.ictal_s).min(next).min(duration_s))
        })
        .collect();
    let sig_freqs: Vec<f64> = (0..onsets.len())
        .map(|k| {
            let mut r = root.child("seizure").index(k as u64).rng();
            profile.signature_hz + profile.signature_jitter_hz * r.random_range(-1.0..=1.0)
        })
        .collect();

    // Noise shared across channels gives a mild spatial correlation.
    let common = background_noise(&mut root.stream("common"), n, fs, profile.noise_corner_hz);

    let mut data = vec![0.0; h * n];
    for c in 0..h {
        let ch = root.child("channel").index(c as u64);
        let mut r = ch.rng();
        let bg_phase = r.random_range(0.0..2.0 * PI);
        let mod_phase = r.random_range(0.0..2.0 * PI);
        let sig_phase = r.random_range(0.0..2.0 * PI);
        let sig_gain = r.random_range(0.6..1.0);
        let own = background_noise(&mut r, n, fs, profile.noise_corner_hz);
        let row = &mut data[c * n..(c + 1) * n];
        let mut k = 0;
        for (i, v) in row.iter_mut().enumerate() {
            let t = i as f64 / fs;
            let noise = 0.5 * common[i] + 0.75f64.sqrt() * own[i];
            let am = 1.0 + 0.25 * (2.0 * PI * 0.1 * t + mod_phase).sin();
            let mut x = profile.pink_level * noise
                + profile.background_amp * am * (2.0 * PI * profile.background_hz * t + bg_phase).sin();
            while k < onsets.len() && annotations[k].offset_s <= t {
                k += 1;
            }
            if let Some(s) = annotations.get(k) {
                let f = sig_freqs[k];
                if t >= s.onset_s {
                    // ictal discharge: large rhythmic activity at the signature frequency
                    x += 3.0 * profile.signature_amp * (2.0 * PI * f * t + sig_phase).sin();
                } else if t >= s.onset_s - profile.preictal_s {
                    let env = rise(t - (s.onset_s - profile.preictal_s), profile.signature_rise_s);
                    x += env * sig_gain * profile.signature_amp * (2.0 * PI * f * t + sig_phase).sin();
                }
            }
            *v = x as f32 as f64;
        }
    }
    Recording::new(format!("synth-{}", profile.seed), profile.sample_rate, Tensor::new(vec![h, n], data)?, annotations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn full_scale_geometry() {
        let x = vec![0.0; 7680];
        let s = stft_magnitude(&x, 256, 256).unwrap();
        assert_eq!((s.bins(), s.frames()), (129, 30));
        assert!(s.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn window_longer_than_signal_rejected() {
        assert!(stft_magnitude(&[0.0; 10], 16, 4).is_err());
        assert!(stft_magnitude(&[0.0; 10], 4, 0).is_err());
    }

    #[test]
    fn bin_centre_sinusoid_peaks_at_its_bin() {
        let (n, fs) = (64, 64.0);
        for k in [1usize, 5, 13, 31] {
            let f = k as f64 * fs / n as f64;
            let x: Vec<f64> = (0..640).map(|i| (2.0 * PI * f * i as f64 / fs + 0.3).sin()).collect();
            let s = stft_magnitude(&x, n, 32).unwrap();
            for j in 0..s.frames() {
                let col = s.column(j);
                let arg = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
                assert_eq!(arg, k);
            }
        }
    }

    #[test]
    fn frame_energy_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x: Vec<f64> = (0..48).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = stft_magnitude(&x, 48, 48).unwrap();
            let spec_energy: f64 = s.values().data().iter().map(|m| m * m).sum();
            let frame_energy: f64 = x.iter().map(|v| v * v).sum();
            // one-sided bins carry at most the full DFT energy, N Σ (w x)² ≤ N Σ x²
            assert!(spec_energy <= 48.0 * frame_energy + 1e-9);
        }
    }

    #[test]
    fn shift_by_one_hop_shifts_one_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..300).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (win, hop) = (32, 12);
        let a = stft_magnitude(&x[..288], win, hop).unwrap();
        let b = stft_magnitude(&x[hop..], win, hop).unwrap();
        for j in 0..b.frames() - 1 {
            for (u, v) in b.column(j).iter().zip(a.column(j + 1)) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn multichannel_is_mean_of_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Tensor::randn(vec![3, 64], &mut rng);
        let m = stft_multichannel(&data, 16, 16).unwrap();
        let per: Vec<Spectrogram> = (0..3).map(|c| stft_magnitude(data.row(c), 16, 16).unwrap()).collect();
        for i in 0..m.values().len() {
            let mean = per.iter().map(|s| s.values().data()[i]).sum::<f64>() / 3.0;
            assert!((m.values().data()[i] - mean).abs() < 1e-12);
        }
        let cond = conditioner(&data, 16, 16).unwrap();
        assert!((cond.values().data()[7] - m.values().data()[7].ln_1p()).abs() < 1e-15);
    }

    fn spec_from(values: Vec<f64>, frames: usize) -> Spectrogram {
        Spectrogram::new(Tensor::new(vec![values.len() / frames, frames], values).unwrap(), 2, 2).unwrap()
    }

    #[test]
    fn recombination_selects_donor_thirds() {
        assert_eq!((third_cut(30, 1), third_cut(30, 2), third_cut(30, 3)), (10, 20, 30));
        let a = spec_from((0..60).map(|i| i as f64).collect(), 30);
        assert_eq!(recombine_spectrograms([&a, &a, &a]).unwrap(), a);
        let b = spec_from((0..60).map(|i| 100.0 + i as f64).collect(), 30);
        let c = spec_from((0..60).map(|i| 200.0 + i as f64).collect(), 30);
        let r = recombine_spectrograms([&c, &a, &b]).unwrap();
        for j in 0..30 {
            let donor = [&c, &a, &b][j / 10];
            assert_eq!(r.column(j), donor.column(j));
        }
        let other = spec_from(vec![0.0; 40], 20);
        assert!(recombine_spectrograms([&a, &b, &other]).is_err());
    }

    #[test]
    fn normalisation() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 2.0, 5.0, 5.0]).unwrap();
        assert_eq!(normalize_channels(&t).data(), &[-1.0, 1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(vec![3, 50], &mut rng).map(|v| 3.0 * v + 1.0);
        let once = normalize_channels(&x);
        let twice = normalize_channels(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pink_noise_has_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = PinkNoise::new();
        p.warm_up(&mut rng);
        let xs: Vec<f64> = (0..400_000).map(|_| p.next(rng.sample(StandardNormal))).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn synth_validates_onsets() {
        let p = SyntheticProfile::default();
        assert!(synth_record(&p, 100.0, &[50.0, 20.0]).is_err());
        assert!(synth_record(&p, 100.0, &[150.0]).is_err());
    }
}
