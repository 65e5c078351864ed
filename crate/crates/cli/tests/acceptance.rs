//! Acceptance suite: one check per criterion, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines always reach the terminal;
//! the process exits nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use diffeeg::balance::{class_counts, BalanceConfig, BalanceMethod};
use diffeeg::checkpoint::Checkpoint;
use diffeeg::classifiers::{fit, Arch, Classifier, ClassifierConfig};
use diffeeg::dataset::{
    admit_patient, label_segments, AdmissionRule, DatasetSpec, Label, Recording, Seizure, Segment,
};
use diffeeg::diffusion::{forward_diffuse, sample, train, train_until, Denoiser, TrainExample, TrainOptions, TrainState};
use diffeeg::evaluation::{
    alarm_indices, auc, balance_fold, cross_validate_many, run_cv_multi, AlarmPolicy, CvReport, CvSetup, DiffusionSetup,
    PatientData, Prediction, PredictionTimeline,
};
use diffeeg::network::{EpsNet, EpsNetConfig, Geometry};
use diffeeg::numerics::gradcheck::max_rel_error;
use diffeeg::numerics::{Graph, ParamSet, Var};
use diffeeg::rng::SeedTree;
use diffeeg::schedule::{Schedule, ScheduleConfig};
use diffeeg::signal::{conditioner, normalize, synth_record, Spectrogram, SyntheticProfile};
use diffeeg::store::SegmentStore;
use diffeeg::{Error, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn schedule_identities() -> Outcome {
    let mut rng = SeedTree::new(1).rng();
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let steps = rng.random_range(1..=200);
        let betas: Vec<f64> = (0..steps).map(|_| rng.random_range(1e-5..0.3)).collect();
        let s = if rng.random_bool(0.5) {
            Schedule::from_betas(betas).map_err(e2s)?
        } else {
            let lo = rng.random_range(1e-5..0.01);
            Schedule::linear(steps, lo, rng.random_range(lo..0.5)).map_err(e2s)?
        };
        let mut prod = 1.0;
        let mut prev = 1.0;
        for t in 1..=s.steps() {
            prod *= 1.0 - s.beta(t);
            worst = worst.max((s.alpha_bar(t) - prod).abs());
            if t > 1 {
                let want = (1.0 - prev) / (1.0 - prod) * s.beta(t);
                worst = worst.max((s.beta_tilde(t) - want).abs());
            }
            prev = prod;
        }
        check(s.beta_tilde(1) == s.beta(1), || "beta_tilde(1) differs from beta(1)".into())?;
    }
    check(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 schedules, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn forward_moments() -> Outcome {
    let sched = ScheduleConfig::default().build().map_err(e2s)?;
    let n = 100_000;
    let x0 = Tensor::full(vec![1, n], 1.0);
    let mut rng = SeedTree::new(2).rng();
    let mut worst = 0.0_f64;
    for t in [1, 25, 50] {
        let eps = Tensor::randn(vec![1, n], &mut rng);
        let xt = forward_diffuse(&x0, t, &eps, &sched).map_err(e2s)?;
        let mean = xt.mean();
        let var = xt.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let ab = sched.alpha_bar(t);
        let (em, ev) = ((mean / ab.sqrt() - 1.0).abs(), (var / (1.0 - ab) - 1.0).abs());
        check(em < 0.02 && ev < 0.02, || format!("t={t}: mean off by {em:.4}, variance off by {ev:.4}"))?;
        worst = worst.max(em).max(ev);
    }
    Ok(format!("t in {{1, 25, 50}}, worst relative error {:.2}%", 100.0 * worst))
}

// ---------------------------------------------------------------- 3

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> diffeeg::Result<Var>>;

/// Contract every output entry against fixed weights so all carry gradient.
fn project(g: &mut Graph, y: Var) -> diffeeg::Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 6.5 - 1.0).collect();
    let c = g.constant(Tensor::new(shape, w)?);
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

/// One instance of every op at random extents.
fn op_instances(rng: &mut impl Rng) -> Vec<(&'static str, Vec<Vec<usize>>, Builder)> {
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let (a, b, c) = (r(1, 4), r(2, 6), r(1, 4));
    let (ci, co, l, k) = (r(1, 3), r(1, 3), r(6, 12), 2 * r(0, 2) + 1);
    let (stride, dil, pad) = (r(1, 3), r(1, 2), r(0, 2));
    let d = r(1, 3);
    let (f, t, st) = (r(1, 3), r(1, 4), r(1, 3));
    let (rows, head) = (r(2, 5), r(1, 3));
    let slope = 0.1 * r(1, 5) as f64;
    let target = 0.25 * r(0, 4) as f64;
    let conv_len = (l + 2 * pad).max(dil * (k - 1) + 1);
    vec![
        ("add", vec![vec![a, b], vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        })),
        ("sub", vec![vec![b], vec![b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        })),
        ("mul", vec![vec![a, b, c], vec![a, b, c]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        })),
        ("scale", vec![vec![a, b]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.scale(v[0], slope - 0.3);
            project(g, y)
        })),
        ("matmul", vec![vec![a, b], vec![b, c]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        })),
        ("tanh", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.tanh(v[0]);
            project(g, y)
        })),
        ("sigmoid", vec![vec![b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.sigmoid(v[0]);
            project(g, y)
        })),
        ("softmax", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.softmax(v[0]);
            project(g, y)
        })),
        ("relu", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.relu(v[0]);
            project(g, y)
        })),
        ("leaky_relu", vec![vec![b, c]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.leaky_relu(v[0], slope);
            project(g, y)
        })),
        ("transpose", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.transpose(v[0])?;
            project(g, y)
        })),
        ("reshape", vec![vec![a, b]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.reshape(v[0], vec![b, a])?;
            project(g, y)
        })),
        ("narrow_concat", vec![vec![rows, b], vec![head, b]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let n = g.narrow(v[0], 1, rows - 1)?;
            let y = g.concat(&[v[1], n])?;
            project(g, y)
        })),
        ("sum", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.tanh(v[0]);
            Ok(g.sum(y))
        })),
        ("mean", vec![vec![a, b, c]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.sigmoid(v[0]);
            Ok(g.mean(y))
        })),
        ("mean_last_axis", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.mean_last_axis(v[0]);
            project(g, y)
        })),
        ("global_avg_pool", vec![vec![a, b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.global_avg_pool(v[0])?;
            project(g, y)
        })),
        ("channel_bias", vec![vec![a, b], vec![a]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.add_channel_bias(v[0], v[1])?;
            project(g, y)
        })),
        ("row_bias", vec![vec![a, b], vec![b]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.add_row_bias(v[0], v[1])?;
            project(g, y)
        })),
        ("mul_scalar", vec![vec![a, b], vec![1]], Box::new(|g: &mut Graph, v: &[Var]| {
            let y = g.mul_scalar(v[0], v[1])?;
            project(g, y)
        })),
        ("conv1d", vec![vec![ci, conv_len], vec![co, ci, k]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.conv1d(v[0], v[1], stride, dil, pad)?;
            project(g, y)
        })),
        ("dilated_conv1d", vec![vec![ci, l], vec![co, ci, k]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.dilated_conv1d(v[0], v[1], d)?;
            project(g, y)
        })),
        ("transposed_conv2d", vec![vec![ci, f, t], vec![ci, co, 3, 2 * st]], Box::new(move |g: &mut Graph, v: &[Var]| {
            let y = g.transposed_conv2d(v[0], v[1], 1, st)?;
            project(g, y)
        })),
        ("bce_with_logits", vec![vec![1]], Box::new(move |g: &mut Graph, v: &[Var]| g.bce_with_logits(v[0], target))),
    ]
}

fn autodiff_soundness() -> Outcome {
    let mut rng = SeedTree::new(3).rng();
    let mut worst = 0.0_f64;
    let mut shapes = 0;
    let mut op_count = 0;
    for _ in 0..20 {
        let ops = op_instances(&mut rng);
        op_count = ops.len();
        for (name, dims, f) in ops {
            let inputs: Vec<Tensor> = dims.iter().map(|s| Tensor::randn(s.clone(), &mut rng)).collect();
            let err = max_rel_error(&inputs, 1e-5, f).map_err(|e| format!("{name}: {e}"))?;
            check(err < 1e-3, || format!("{name} at {dims:?}: relative error {err:e}"))?;
            worst = worst.max(err);
            shapes += 1;
        }
    }

    // Full noise-predictor graphs at random geometries.
    let mut nets = 0;
    for _ in 0..4 {
        let blocks = rng.random_range(1..=2);
        let cfg = EpsNetConfig {
            channels: rng.random_range(2..=4),
            layers: blocks * rng.random_range(1..=2),
            blocks,
            kernel: 3,
            upsample_t: [rng.random_range(1..=2), 2],
        };
        let hop = cfg.hop();
        let h = rng.random_range(1..=2);
        let length = hop * rng.random_range(2..=4);
        let geom = Geometry { input_channels: h, length, bins: hop / 2 + 1 };
        let mut net = EpsNet::new(cfg, geom, &mut rng).map_err(e2s)?;
        for p in net.params_mut().tensors_mut() {
            *p = Tensor::uniform(p.shape().to_vec(), 0.5, &mut rng);
        }
        let x = Tensor::randn(vec![h, length], &mut rng);
        let cond = conditioner(&Tensor::randn(vec![h, length], &mut rng), hop, hop).map_err(e2s)?;
        let t = rng.random_range(1..=50);
        let mut inputs = net.params().tensors().to_vec();
        inputs.push(x);
        let np = net.params().len();
        let err = max_rel_error(&inputs, 1e-5, |g: &mut Graph, v| {
            let y = net.forward(g, &v[..np], v[np], t, &cond)?;
            project(g, y)
        })
        .map_err(e2s)?;
        check(err < 1e-3, || format!("EpsNet {:?} on {h}x{length}: relative error {err:e}", net.config()))?;
        worst = worst.max(err);
        nets += 1;
    }

    // Classifier graphs, every family.
    let mut clfs = 0;
    for arch in Arch::ALL {
        for _ in 0..2 {
            let h = rng.random_range(1..=3);
            let patch = 8;
            let length = patch * rng.random_range(4..=8);
            let cfg = ClassifierConfig { arch, hidden: 4, scales: vec![3, 5, 7], heads: 2, patch, ..ClassifierConfig::default() };
            let mut c = Classifier::new(cfg, h, length, &mut rng).map_err(e2s)?;
            for p in c.params_mut().tensors_mut() {
                *p = Tensor::uniform(p.shape().to_vec(), 0.5, &mut rng);
            }
            let mut inputs = c.params().tensors().to_vec();
            inputs.push(Tensor::randn(vec![h, length], &mut rng));
            let np = c.params().len();
            let target = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
            let err = max_rel_error(&inputs, 1e-5, |g: &mut Graph, v| {
                let z = c.forward(g, &v[..np], v[np])?;
                g.bce_with_logits(z, target)
            })
            .map_err(e2s)?;
            check(err < 1e-3, || format!("{arch:?} classifier on {h}x{length}: relative error {err:e}"))?;
            worst = worst.max(err);
            clfs += 1;
        }
    }
    Ok(format!(
        "{op_count} ops x 20 random shapes ({shapes} cases), {nets} EpsNet and {clfs} classifier graphs; worst {worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

/// Posterior-mean noise predictor for scalar data `x0 ~ N(mu0, var0)`.
struct GaussianOracle {
    params: ParamSet,
    mu0: f64,
    var0: f64,
    sched: Schedule,
}

impl Denoiser for GaussianOracle {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn sample_shape(&self) -> (usize, usize) {
        (1, 1)
    }
    fn eps(&self, g: &mut Graph, _: &[Var], x_t: Var, t: usize, _: &Spectrogram) -> diffeeg::Result<Var> {
        let ab = self.sched.alpha_bar(t);
        let e = g.value(x_t).map(|x| (1.0 - ab).sqrt() * (x - ab.sqrt() * self.mu0) / (ab * self.var0 + 1.0 - ab));
        Ok(g.constant(e))
    }
}

fn sampler_oracle() -> Outcome {
    // a fine schedule: x_T is then N(0, 1) and the per-step posterior nearly Gaussian
    let sched = Schedule::linear(1000, 1e-4, 0.02).map_err(e2s)?;
    let (mu0, sd0) = (2.0, 0.5);
    let net = GaussianOracle { params: ParamSet::new(), mu0, var0: sd0 * sd0, sched: sched.clone() };
    let cond = Spectrogram::new(Tensor::zeros(vec![1, 1]), 1, 1).map_err(e2s)?;
    let mut rng = SeedTree::new(4).rng();
    let xs: Vec<f64> = (0..10_000)
        .map(|_| sample(&net, &cond, &sched, &mut rng).map(|x| x.item()))
        .collect::<diffeeg::Result<_>>()
        .map_err(e2s)?;
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    let (em, ev) = ((mean - mu0).abs() / mu0, (var - sd0 * sd0).abs() / (sd0 * sd0));
    check(em < 0.05 && ev < 0.10, || format!("mean {mean:.4} ({:.1}%), variance {var:.4} ({:.1}%)", 100.0 * em, 100.0 * ev))?;
    Ok(format!("10^4 samples: mean {mean:.4} vs {mu0}, variance {var:.4} vs {}", sd0 * sd0))
}

// ---------------------------------------------------------------- 5

fn training_signal() -> Outcome {
    let profile = SyntheticProfile { channels: 2, preictal_s: 600.0, signature_rise_s: 200.0, seed: 11, ..SyntheticProfile::default() };
    let rec = synth_record(&profile, 1800.0, &[1200.0]).map_err(e2s)?;
    let spec = DatasetSpec { preictal_minutes: 10.0, segment_seconds: 4.0, ..DatasetSpec::default() };
    let (window, hop) = (32, 32);
    let examples: Vec<TrainExample> = label_segments(&rec, &spec)
        .map_err(e2s)?
        .iter()
        .filter(|s| s.label == Label::Preictal)
        .map(|s| {
            let x0 = normalize(s).data;
            Ok(TrainExample { cond: conditioner(&x0, window, hop)?, x0 })
        })
        .collect::<diffeeg::Result<_>>()
        .map_err(e2s)?;
    let cfg = EpsNetConfig { channels: 16, layers: 6, blocks: 3, kernel: 3, upsample_t: [4, 8] };
    let geom = Geometry { input_channels: 2, length: 256, bins: window / 2 + 1 };
    let sched = ScheduleConfig::default().build().map_err(e2s)?;
    let opts = TrainOptions { iters: 500, batch: 8, lr: 1e-3, seed: 7 };
    let fresh = || EpsNet::new(cfg.clone(), geom, &mut SeedTree::new(5).stream("init"));

    let mut net = fresh().map_err(e2s)?;
    let state = train(&mut net, &examples, &sched, &opts).map_err(e2s)?;
    let first = state.losses[..20].iter().sum::<f64>() / 20.0;
    let last = state.losses[480..].iter().sum::<f64>() / 20.0;

    // same seed, same trajectory
    let mut again = fresh().map_err(e2s)?;
    let mut st = TrainState::new(again.params(), &opts);
    train_until(&mut again, &examples, &sched, &opts, &mut st, 30).map_err(e2s)?;
    check(st.losses[..] == state.losses[..30], || "rerun with the same seed diverged".into())?;

    check(last <= 0.5 * first, || format!("loss {first:.4} -> {last:.4} (ratio {:.3})", last / first))?;
    Ok(format!(
        "{} preictal segments, mean loss of first/last 20 iterations {first:.4} -> {last:.4} (ratio {:.3}), rerun identical",
        examples.len(),
        last / first
    ))
}

// ---------------------------------------------------------------- 6

fn alarm_logic() -> Outcome {
    const STEP: f64 = 30.0;
    let (k, n) = (8, 10);
    let mut checked = 0;
    for refractory in [0.0, STEP, 2.0 * STEP, 3.5 * STEP, 6.0 * STEP, 1800.0] {
        let policy = AlarmPolicy { k, n, refractory_s: refractory, ..AlarmPolicy::default() };
        for bits in 0u32..1 << 12 {
            let d: Vec<bool> = (0..12).map(|i| bits >> i & 1 == 1).collect();
            let records = d
                .iter()
                .enumerate()
                .map(|(i, &p)| Prediction { start_s: i as f64 * STEP, probability: if p { 0.9 } else { 0.1 }, positive: p })
                .collect();
            let tl = PredictionTimeline::new(records, STEP).map_err(e2s)?;
            // brute force: recount each window, then thin greedily
            let mut want: Vec<usize> = Vec::new();
            for i in 0..12usize {
                let count = d[i.saturating_sub(n - 1)..=i].iter().filter(|&&x| x).count();
                if count >= k && want.last().is_none_or(|&j| (i - j) as f64 * STEP >= refractory) {
                    want.push(i);
                }
            }
            let got = alarm_indices(&tl, &policy);
            check(got == want, || format!("sequence {bits:012b}, refractory {refractory}: {got:?} vs {want:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} sequences (2^12 x 6 refractory periods) match the brute-force oracle"))
}

// ---------------------------------------------------------------- 7

fn auc_oracle() -> Outcome {
    let mut rng = SeedTree::new(7).rng();
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=20);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
        let fast = auc(&scores, &labels).map_err(e2s)?;
        worst = worst.max((fast - wins / pairs).abs());
        let flat = auc(&vec![0.37; n], &labels).map_err(e2s)?;
        check(flat == 0.5, || format!("all-equal scores gave {flat}"))?;
    }
    check(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 random sets with ties, max deviation {worst:.1e}; all-equal scores give exactly 0.5"))
}

// ---------------------------------------------------------------- 8

/// Expected (preictal per merged seizure, interictal) counts by interval arithmetic.
fn interval_oracle(dur: f64, seizures: &[(f64, f64)], spec: &DatasetSpec) -> (Vec<usize>, usize) {
    let (seg, pre, gap) = (spec.segment_seconds, spec.preictal_minutes * 60.0, spec.interictal_gap_hours * 3600.0);
    let mut merged: Vec<(f64, f64)> = Vec::new();
    for &(on, off) in seizures {
        match merged.last_mut() {
            Some(last) if on - last.1 < spec.merge_gap_minutes * 60.0 => last.1 = last.1.max(off),
            _ => merged.push((on, off)),
        }
    }
    let preictal = merged
        .iter()
        .enumerate()
        .map(|(i, &(on, _))| {
            let floor = if i == 0 { 0.0 } else { merged[i - 1].1 };
            let lo = (on - pre).max(floor).max(0.0);
            ((on - lo) / seg).floor() as usize
        })
        .collect();
    let mut zones: Vec<(f64, f64)> = merged.iter().map(|&(on, off)| (on - gap.max(pre), off + gap)).collect();
    zones.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut free = 0;
    let mut cursor = 0.0_f64;
    for (z0, z1) in zones {
        if z0 > cursor {
            free += ((z0.min(dur) - cursor) / seg).floor() as usize;
        }
        cursor = cursor.max(z1);
    }
    if cursor < dur {
        free += ((dur - cursor) / seg).floor() as usize;
    }
    (preictal, free)
}

fn recording(id: &str, hours: f64, seizures: &[(f64, f64)]) -> diffeeg::Result<Recording> {
    let n = (hours * 3600.0) as usize;
    let ann = seizures.iter().map(|&(a, b)| Seizure::new(a, b)).collect();
    Recording::new(id, 1, Tensor::zeros(vec![1, n]), ann)
}

fn dataset_rules() -> Outcome {
    let spec = DatasetSpec::default();
    // A, then B 10 min after A ends (merged), then C exactly 15 min after B
    // ends (not merged; its window is clipped by the merged seizure), then
    // two isolated seizures with overlapping 4-h exclusion zones.
    let first: Vec<(f64, f64)> =
        vec![(18_000.0, 18_060.0), (18_660.0, 18_700.0), (19_600.0, 19_650.0), (72_000.0, 72_100.0), (100_000.0, 100_030.0)];
    // a seizure 10 min into the recording clips its own window at zero
    let second: Vec<(f64, f64)> = vec![(600.0, 660.0), (28_800.0, 28_900.0)];
    let recs = [("r1", 40.0, &first), ("r2", 10.0, &second)];

    let mut totals = (0usize, 0usize, 0usize);
    for (id, hours, sz) in recs {
        let rec = recording(id, hours, sz).map_err(e2s)?;
        let segs = label_segments(&rec, &spec).map_err(e2s)?;
        let (want_pre, want_inter) = interval_oracle(hours * 3600.0, sz, &spec);
        let mut got_pre = vec![0usize; want_pre.len()];
        for s in segs.iter().filter(|s| s.label == Label::Preictal) {
            got_pre[s.seizure.ok_or("preictal segment without seizure")?] += 1;
        }
        let got_inter = segs.iter().filter(|s| s.label == Label::Interictal).count();
        check(got_pre == want_pre && got_inter == want_inter, || {
            format!("{id}: preictal {got_pre:?} vs {want_pre:?}, interictal {got_inter} vs {want_inter}")
        })?;
        totals.0 += want_pre.len();
        totals.1 += want_pre.iter().sum::<usize>();
        totals.2 += want_inter;
    }
    let r1 = interval_oracle(144_000.0, &first, &spec).0;
    check(r1 == vec![60, 30, 60, 60], || format!("fixture no longer exercises merging and clipping: {r1:?}"))?;

    let recordings = [recording("r1", 40.0, &first).map_err(e2s)?, recording("r2", 10.0, &second).map_err(e2s)?];
    let (seizures, pre, inter) = totals;
    let per_day = seizures as f64 / (50.0 / 24.0);
    let ratio = inter as f64 / pre as f64;
    let cases = [
        (spec.clone(), vec![]),
        (DatasetSpec { min_seizures: seizures, ..spec.clone() }, vec![AdmissionRule::TooFewSeizures]),
        (DatasetSpec { min_seizures: seizures - 1, ..spec.clone() }, vec![]),
        (DatasetSpec { max_seizures_per_day: per_day, ..spec.clone() }, vec![AdmissionRule::TooManySeizuresPerDay]),
        (DatasetSpec { max_seizures_per_day: per_day * 1.0001, ..spec.clone() }, vec![]),
        (DatasetSpec { min_inter_pre_ratio: ratio, ..spec.clone() }, vec![AdmissionRule::RatioTooLow]),
        (DatasetSpec { min_inter_pre_ratio: ratio * 0.9999, ..spec.clone() }, vec![]),
    ];
    for (s, want) in cases {
        let a = admit_patient(&recordings, &s).map_err(e2s)?;
        check(a.violations == want && a.admitted == want.is_empty(), || {
            format!("admission with {s:?}: {:?} vs {want:?}", a.violations)
        })?;
        check(a.stats.seizures == seizures && a.stats.preictal_segments == pre && a.stats.interictal_segments == inter, || {
            format!("admission stats {:?}", a.stats)
        })?;
    }
    Ok(format!(
        "{seizures} merged seizures, {pre} preictal, {inter} interictal segments match the oracle; each filter trips alone at its boundary"
    ))
}

// ---------------------------------------------------------------- 9

const SEEDS: u64 = 5;

fn desk_patient(seed: u64) -> diffeeg::Result<PatientData> {
    let profile = SyntheticProfile { preictal_s: 180.0, signature_rise_s: 60.0, signature_amp: 0.5, seed, ..SyntheticProfile::default() };
    let rec = synth_record(&profile, 8400.0, &[1200.0, 3900.0, 6600.0])?;
    let spec =
        DatasetSpec { preictal_minutes: 3.0, interictal_gap_hours: 0.25, segment_seconds: 4.0, ..DatasetSpec::default() };
    PatientData::from_recording(&rec, &spec)
}

fn desk_setup(method: BalanceMethod, seed: u64) -> diffeeg::Result<CvSetup> {
    Ok(CvSetup {
        balance: BalanceConfig { method, window_s: 4.0, stride_s: 1.0, ..BalanceConfig::default() },
        clf: ClassifierConfig { hidden: 8, patch: 16, epochs_max: 30, batch: 16, ..ClassifierConfig::default() },
        policy: AlarmPolicy { sop_s: 600.0, refractory_s: 600.0, ..AlarmPolicy::default() },
        diffusion: Some(DiffusionSetup {
            net: EpsNetConfig { channels: 8, layers: 4, blocks: 2, kernel: 3, upsample_t: [4, 8] },
            schedule: Schedule::linear(50, 1e-4, 0.05)?,
            train: TrainOptions { iters: 300, batch: 8, lr: 1e-3, seed: 0 },
            pretrained: None,
        }),
        seed,
        jobs: 3,
    })
}

/// The per-fold pipeline, instrumented to count synthetic segments on each side.
fn observed_cv(
    patient: &PatientData,
    setup: &CvSetup,
    synth_test: &AtomicUsize,
    synth_train: &AtomicUsize,
) -> diffeeg::Result<Vec<CvReport>> {
    cross_validate_many(patient, &setup.policy, setup.jobs, Arch::ALL.len(), |fold| {
        synth_test.fetch_add(fold.test.iter().filter(|s| s.synthetic).count(), Ordering::Relaxed);
        let balanced = balance_fold(&fold.train, setup, patient.sample_rate, fold.index)?;
        synth_train.fetch_add(balanced.iter().filter(|s| s.synthetic).count(), Ordering::Relaxed);
        let validation: Vec<Segment> = fold.validation.iter().map(normalize).collect();
        let test: Vec<Segment> = fold.test.iter().map(normalize).collect();
        let (h, l) = (test[0].channels(), test[0].len());
        let root = SeedTree::new(setup.seed).child("classifier").index(fold.index as u64);
        Arch::ALL
            .iter()
            .map(|&arch| {
                let node = root.child(arch.name());
                let mut c = Classifier::new(ClassifierConfig { arch, ..setup.clf.clone() }, h, l, &mut node.stream("init"))?;
                fit(&mut c, &balanced, &validation, node.child("fit").key())?;
                c.classify_all(&test)
            })
            .collect()
    })
}

fn directional_claim() -> Outcome {
    let mut sums = [[0.0_f64; 3]; 2];
    let synth_test = AtomicUsize::new(0);
    let synth_train = AtomicUsize::new(0);
    let mut ratio = f64::INFINITY;
    for seed in 0..SEEDS {
        let patient = desk_patient(seed).map_err(e2s)?;
        let (pre, inter) = class_counts(&patient.segments);
        ratio = ratio.min(inter as f64 / pre as f64);
        check(patient.seizure_count() == 3, || format!("seed {seed}: {} seizures", patient.seizure_count()))?;
        for (m, method) in [BalanceMethod::Downsample, BalanceMethod::Diffusion].into_iter().enumerate() {
            let setup = desk_setup(method, seed).map_err(e2s)?;
            let reports = observed_cv(&patient, &setup, &synth_test, &synth_train).map_err(e2s)?;
            if seed == 0 {
                let direct = run_cv_multi(&patient, &setup, &Arch::ALL).map_err(e2s)?;
                check(direct == reports, || "instrumented pipeline differs from run_cv_multi".into())?;
            }
            for (a, r) in reports.iter().enumerate() {
                sums[m][a] += r.auc;
            }
        }
    }
    let mean = |m: usize, a: usize| sums[m][a] / SEEDS as f64;
    let wins = (0..3).filter(|&a| mean(1, a) >= mean(0, a)).count();
    let table = Arch::ALL
        .iter()
        .enumerate()
        .map(|(a, arch)| format!("{} {:.3}/{:.3}", arch.name(), mean(0, a), mean(1, a)))
        .collect::<Vec<_>>()
        .join(", ");
    check(ratio >= 4.0, || format!("imbalance only {ratio:.2}:1"))?;
    check(synth_test.load(Ordering::Relaxed) == 0, || "synthetic segments reached a test split".into())?;
    check(synth_train.load(Ordering::Relaxed) > 0, || "diffusion balancing produced no synthetic segments".into())?;
    check(wins >= 2, || format!("diffusion >= downsample for {wins}/3 families ({table})"))?;
    Ok(format!(
        "mean AUC downsample/diffusion over {SEEDS} seeds: {table}; {wins}/3 families favour diffusion; imbalance {ratio:.1}:1; 0 synthetic test segments, {} synthetic training segments",
        synth_train.load(Ordering::Relaxed)
    ))
}

// ---------------------------------------------------------------- 10

fn format_round_trips() -> Outcome {
    let mut rng = SeedTree::new(10).rng();
    let segments: Vec<Segment> = (0..6)
        .map(|i| Segment {
            data: Tensor::randn(vec![3, 40], &mut rng).map(|v| v as f32 as f64),
            label: if i % 2 == 0 { Label::Preictal } else { Label::Interictal },
            source: "fixture".into(),
            start_s: i as f64 * 0.625,
            synthetic: i == 4,
            seizure: None,
        })
        .collect();
    let store = SegmentStore::from_segments(64, segments).map_err(e2s)?;
    let bytes = store.to_bytes();
    let back = SegmentStore::from_bytes(&bytes, "fixture").map_err(e2s)?;
    check(back == store && back.to_bytes() == bytes, || "segment store did not round-trip".into())?;

    let net = EpsNet::new(
        EpsNetConfig { channels: 4, layers: 2, blocks: 1, kernel: 3, upsample_t: [2, 2] },
        Geometry { input_channels: 2, length: 16, bins: 3 },
        &mut rng,
    )
    .map_err(e2s)?;
    let ck = net.to_checkpoint();
    let ck_bytes = ck.to_bytes().map_err(e2s)?;
    let ck_back = Checkpoint::from_bytes(&ck_bytes).map_err(e2s)?;
    check(ck_back == ck && ck_back.to_bytes().map_err(e2s)? == ck_bytes, || "checkpoint did not round-trip".into())?;
    check(EpsNet::from_checkpoint(&ck_back).map_err(e2s)? == net, || "network changed through its checkpoint".into())?;

    let is_format = |r: Result<(), Error>| matches!(r, Err(Error::Format(_)));
    let mut corrupt = 0;
    for (what, offset, value) in [("magic", 0, b'X'), ("version", 4, 9), ("channels", 6, 0), ("count", 16, 7), ("flags", 20, 0xF0)] {
        let mut b = bytes.clone();
        b[offset] = value;
        check(is_format(SegmentStore::from_bytes(&b, "x").map(drop)), || format!("corrupt store {what} not a format error"))?;
        corrupt += 1;
    }
    check(is_format(SegmentStore::from_bytes(&bytes[..bytes.len() - 1], "x").map(drop)), || "truncated store".into())?;
    let mut b = ck_bytes.clone();
    b[0] = b'#';
    check(is_format(Checkpoint::from_bytes(&b).map(drop)), || "corrupt checkpoint header".into())?;
    check(is_format(Checkpoint::from_bytes(&ck_bytes[..ck_bytes.len() - 8]).map(drop)), || "short checkpoint payload".into())?;
    corrupt += 3;

    // through the binary: corrupt files exit with status 3
    let dir = tempfile::TempDir::new().map_err(e2s)?;
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(dir.path().join("bad.eegs"), &bad).map_err(e2s)?;
    std::fs::write(dir.path().join("ann.csv"), "record_id,onset_s,offset_s\n").map_err(e2s)?;
    std::fs::write(dir.path().join("bad.ckpt"), &ck_bytes[..ck_bytes.len() - 8]).map_err(e2s)?;
    let exe = Path::new(env!("CARGO_BIN_EXE_diffeeg"));
    let run = |args: &[&str]| Command::new(exe).current_dir(dir.path()).args(args).output().map(|o| o.status.code());
    let ev = run(&["evaluate", "--data", "bad.eegs", "--annotations", "ann.csv"]).map_err(e2s)?;
    let tr = run(&["train-diffusion", "--data", "bad.eegs"]).map_err(e2s)?;
    let gen = run(&["generate", "--checkpoint", "bad.ckpt"]).map_err(e2s)?;
    check(ev == Some(3) && tr == Some(3) && gen == Some(3), || format!("exit codes {ev:?}, {tr:?}, {gen:?}"))?;
    Ok(format!("store and checkpoint bytes round-trip exactly; {corrupt} corruptions give format errors; CLI exits 3"))
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(&str, Option<Duration>, fn() -> Outcome); 10] = [
        ("schedule identities", None, schedule_identities),
        ("forward-process moments", Some(Duration::from_secs(10)), forward_moments),
        ("autodiff soundness", Some(Duration::from_secs(60)), autodiff_soundness),
        ("sampler oracle", Some(Duration::from_secs(30)), sampler_oracle),
        ("training signal", Some(Duration::from_secs(300)), training_signal),
        ("alarm logic", None, alarm_logic),
        ("AUC oracle", None, auc_oracle),
        ("dataset rules", None, dataset_rules),
        ("directional claim", Some(Duration::from_secs(1800)), directional_claim),
        ("format round-trips", None, format_round_trips),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = f();
        let took = start.elapsed();
        if let (Ok(detail), Some(limit)) = (&outcome, limit) {
            if took > limit {
                outcome = Err(format!("{detail}; took {took:.1?}, limit {limit:?}"));
            }
        }
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{:.1}s]", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
