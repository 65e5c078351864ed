//! Alarm-level scoring and leave-one-seizure-out cross-validation.
//!
//! Per-segment probabilities become decisions at a fixed threshold, decisions
//! become alarms through k-of-n voting with a refractory period, and alarms
//! are scored against seizure onsets with prediction horizon (SPH) and
//! occurrence period (SOP) semantics.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::{diffusion_augment, downsample, recombine_balance, sliding_balance, BalanceConfig, BalanceMethod};
use crate::classifiers::{fit, Arch, Classifier, ClassifierConfig};
use crate::dataset::{make_folds, Segment};
use crate::diffusion::{train, TrainExample, TrainOptions};
use crate::error::{invalid, Error, Result};
use crate::network::{EpsNet, EpsNetConfig, Geometry};
use crate::rng::SeedTree;
use crate::schedule::Schedule;
use crate::signal::{conditioner, normalize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub start_s: f64,
    pub probability: f64,
    pub positive: bool,
}

/// Time-ordered predictions over a test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTimeline {
    records: Vec<Prediction>,
    /// Duration a segment covers. An alarm is stamped at the end of the
    /// segment that triggers it, when its data becomes available.
    stride_s: f64,
}

impl PredictionTimeline {
    pub fn new(records: Vec<Prediction>, stride_s: f64) -> Result<Self> {
        if !(stride_s > 0.0) {
            return Err(invalid!("timeline stride must be positive, got {stride_s}"));
        }
        if let Some(w) = records.windows(2).find(|w| w[1].start_s <= w[0].start_s) {
            return Err(invalid!("timeline start times not increasing at {} s", w[1].start_s));
        }
        Ok(Self { records, stride_s })
    }

    /// Threshold probabilities into decisions; a segment is positive when its
    /// probability exceeds `threshold`.
    pub fn from_probabilities(starts: &[f64], probs: &[f64], threshold: f64, stride_s: f64) -> Result<Self> {
        if starts.len() != probs.len() {
            return Err(invalid!("{} start times for {} probabilities", starts.len(), probs.len()));
        }
        let records = starts
            .iter()
            .zip(probs)
            .map(|(&start_s, &probability)| Prediction { start_s, probability, positive: probability > threshold })
            .collect();
        Self::new(records, stride_s)
    }

    pub fn records(&self) -> &[Prediction] {
        &self.records
    }

    pub fn stride_s(&self) -> f64 {
        self.stride_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlarmPolicy {
    pub k: usize,
    pub n: usize,
    pub refractory_s: f64,
    pub sph_s: f64,
    pub sop_s: f64,
    /// Probability above which a segment counts as a positive decision.
    pub threshold: f64,
}

impl Default for AlarmPolicy {
    fn default() -> Self {
        Self { k: 8, n: 10, refractory_s: 1800.0, sph_s: 60.0, sop_s: 1800.0, threshold: 0.5 }
    }
}

impl AlarmPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.n {
            return Err(invalid!("alarm policy needs 1 <= k <= n, got k={} n={}", self.k, self.n));
        }
        if !(self.sop_s > 0.0) || !(self.sph_s >= 0.0) || !(self.refractory_s >= 0.0) {
            return Err(invalid!("alarm policy times must be non-negative with sop > 0"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(invalid!("decision threshold {} outside [0, 1]", self.threshold));
        }
        Ok(())
    }
}

/// Indices of the segments that raise an alarm.
///
/// At each segment the positives among the last `n` segment slots in time
/// (fewer at the start or after a gap) are counted; `k` or more fires an alarm unless the
/// previous alarm is less than `refractory_s` earlier.
pub fn alarm_indices(tl: &PredictionTimeline, policy: &AlarmPolicy) -> Vec<usize> {
    let recs = tl.records();
    // the window spans the last n segment slots in time, so records on the far
    // side of a gap in the timeline drop out; half a stride absorbs rounding
    let span = (policy.n as f64 - 0.5) * tl.stride_s();
    let mut out: Vec<usize> = Vec::new();
    let (mut count, mut lo) = (0usize, 0usize);
    let mut last: Option<f64> = None;
    for i in 0..recs.len() {
        let t = recs[i].start_s;
        count += usize::from(recs[i].positive);
        while recs[lo].start_s < t - span {
            count -= usize::from(recs[lo].positive);
            lo += 1;
        }
        if count >= policy.k && last.is_none_or(|a| t - a >= policy.refractory_s) {
            out.push(i);
            last = Some(t);
        }
    }
    out
}

/// Alarm times in seconds, stamped at the end of each triggering segment.
pub fn raise_alarms(tl: &PredictionTimeline, policy: &AlarmPolicy) -> Vec<f64> {
    alarm_indices(tl, policy).into_iter().map(|i| tl.records()[i].start_s + tl.stride_s()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeizureOutcome {
    pub onset_s: f64,
    pub predicted: bool,
}

/// Alarm-level metrics for one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct AlarmScore {
    pub sens_percent: f64,
    pub fpr_per_hour: f64,
    pub false_alarms: usize,
    pub outcomes: Vec<SeizureOutcome>,
}

fn within_sop(alarm: f64, onset: f64, policy: &AlarmPolicy) -> bool {
    onset >= alarm + policy.sph_s && onset <= alarm + policy.sph_s + policy.sop_s
}

/// Score alarms against the test seizures.
///
/// A seizure counts as predicted when some alarm `a` has its onset inside
/// `[a + sph, a + sph + sop]`. An alarm whose occurrence period contains no
/// onset is false.
pub fn score_fold(alarms: &[f64], onsets: &[f64], interictal_hours: f64, policy: &AlarmPolicy) -> Result<AlarmScore> {
    let outcomes: Vec<SeizureOutcome> = onsets
        .iter()
        .map(|&onset_s| SeizureOutcome { onset_s, predicted: alarms.iter().any(|&a| within_sop(a, onset_s, policy)) })
        .collect();
    let false_alarms = alarms.iter().filter(|&&a| !onsets.iter().any(|&o| within_sop(a, o, policy))).count();
    let fpr_per_hour = if interictal_hours > 0.0 {
        false_alarms as f64 / interictal_hours
    } else if false_alarms == 0 {
        0.0
    } else {
        return Err(invalid!("{false_alarms} false alarms over zero interictal hours"));
    };
    let hits = outcomes.iter().filter(|o| o.predicted).count();
    let sens_percent = if onsets.is_empty() { 0.0 } else { 100.0 * hits as f64 / onsets.len() as f64 };
    Ok(AlarmScore { sens_percent, fpr_per_hour, false_alarms, outcomes })
}

/// Area under the ROC curve as the normalised Mann–Whitney statistic, with
/// tied scores contributing one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid!("AUC scores contain NaN"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(invalid!("AUC needs both classes, got {n_pos} positive and {n_neg} negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of mid-ranks (1-based) over the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub sens_percent: f64,
    pub fpr_per_hour: f64,
    pub auc: f64,
    pub alarms: Vec<f64>,
    pub outcomes: Vec<SeizureOutcome>,
    pub false_alarms: usize,
    pub interictal_hours: f64,
}

/// Per-fold reports and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub patient: String,
    pub folds: Vec<FoldReport>,
    pub sens_percent: f64,
    pub fpr_per_hour: f64,
    pub auc: f64,
}

impl CvReport {
    pub fn aggregate(patient: impl Into<String>, folds: Vec<FoldReport>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean = |f: fn(&FoldReport) -> f64| folds.iter().map(f).sum::<f64>() / n;
        Self {
            patient: patient.into(),
            sens_percent: mean(|r| r.sens_percent),
            fpr_per_hour: mean(|r| r.fpr_per_hour),
            auc: mean(|r| r.auc),
            folds,
        }
    }

    /// `Patient,Sens,FPR,AUC` with one row per fold and a closing `Ave` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("Patient,Sens,FPR,AUC\n");
        for f in &self.folds {
            let _ = writeln!(s, "{}/fold{},{:.1},{:.3},{:.3}", self.patient, f.fold, f.sens_percent, f.fpr_per_hour, f.auc);
        }
        let _ = writeln!(s, "Ave,{:.1},{:.3},{:.3}", self.sens_percent, self.fpr_per_hour, self.auc);
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("patient {}: {} folds\n", self.patient, self.folds.len());
        let _ = writeln!(s, "{:>6} {:>8} {:>9} {:>7} {:>7}", "fold", "Sens %", "FPR /h", "AUC", "alarms");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:>6} {:>8.1} {:>9.3} {:>7.3} {:>7}",
                f.fold,
                f.sens_percent,
                f.fpr_per_hour,
                f.auc,
                f.alarms.len()
            );
        }
        let _ = writeln!(s, "{:>6} {:>8.1} {:>9.3} {:>7.3}", "Ave", self.sens_percent, self.fpr_per_hour, self.auc);
        s
    }
}

/// Reject test material that contains generated data.
pub fn assert_real(segments: &[Segment], fold: usize) -> Result<()> {
    match segments.iter().filter(|s| s.synthetic).count() {
        0 => Ok(()),
        n => Err(Error::Protocol(format!("fold {fold}: {n} synthetic segments in the test split"))),
    }
}

/// Labelled segments of one patient with the onset of every (merged)
/// seizure, indexed like `Segment::seizure`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientData {
    pub id: String,
    pub sample_rate: u32,
    pub segments: Vec<Segment>,
    pub onsets: Vec<f64>,
}

impl PatientData {
    /// Label a recording and collect the onsets of its merged seizures.
    pub fn from_recording(rec: &crate::dataset::Recording, spec: &crate::dataset::DatasetSpec) -> Result<Self> {
        let segments = crate::dataset::label_segments(rec, spec)?;
        let onsets = crate::dataset::merge_seizures(&rec.annotations, spec.merge_gap_minutes)
            .iter()
            .map(|s| s.onset_s)
            .collect();
        Ok(Self { id: rec.id.clone(), sample_rate: rec.sample_rate, segments, onsets })
    }

    pub fn seizure_count(&self) -> usize {
        let mut ids: Vec<usize> =
            self.segments.iter().filter(|s| s.label.is_preictal() && !s.synthetic).filter_map(|s| s.seizure).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    fn segment_seconds(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.len() as f64 / self.sample_rate as f64)
    }
}

/// Material handed to the per-fold training routine.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub index: usize,
    pub train: Vec<Segment>,
    pub validation: Vec<Segment>,
    pub test: Vec<Segment>,
}

fn gather(segments: &[Segment], idx: &[usize]) -> Vec<Segment> {
    idx.iter().map(|&i| segments[i].clone()).collect()
}

/// Leave-one-seizure-out evaluation around a caller-supplied model.
///
/// `predict` receives the raw training, validation and test splits of a
/// fold and returns one probability per test segment. At most `jobs` folds
/// run at once; reports come back in fold order.
pub fn cross_validate<F>(patient: &PatientData, policy: &AlarmPolicy, jobs: usize, predict: F) -> Result<CvReport>
where
    F: Fn(&FoldData) -> Result<Vec<f64>> + Sync,
{
    let mut reports = cross_validate_many(patient, policy, jobs, 1, |fold| Ok(vec![predict(fold)?]))?;
    Ok(reports.remove(0))
}

/// [`cross_validate`] for `models` predictors sharing each fold's data;
/// `predict` returns one probability vector per model.
pub fn cross_validate_many<F>(
    patient: &PatientData,
    policy: &AlarmPolicy,
    jobs: usize,
    models: usize,
    predict: F,
) -> Result<Vec<CvReport>>
where
    F: Fn(&FoldData) -> Result<Vec<Vec<f64>>> + Sync,
{
    policy.validate()?;
    let folds = make_folds(&patient.segments, patient.seizure_count())?;
    let seg_s = patient.segment_seconds();
    let run = |f: &crate::dataset::Fold| -> Result<Vec<FoldReport>> {
        let data = FoldData {
            index: f.index,
            train: gather(&patient.segments, &f.train),
            validation: gather(&patient.segments, &f.validation),
            test: gather(&patient.segments, &f.test),
        };
        assert_real(&data.test, f.index)?;
        let labels: Vec<bool> = data.test.iter().map(|s| s.label.is_preictal()).collect();
        if labels.iter().all(|&l| l) || !labels.iter().any(|&l| l) {
            return Err(Error::Protocol(format!("fold {}: test split holds a single class", f.index)));
        }
        let all_probs = predict(&data)?;
        if all_probs.len() != models {
            return Err(invalid!("fold {}: {} predictions for {models} models", f.index, all_probs.len()));
        }
        let starts: Vec<f64> = data.test.iter().map(|s| s.start_s).collect();
        let mut onsets: Vec<f64> = data
            .test
            .iter()
            .filter_map(|s| s.seizure.filter(|_| s.label.is_preictal()))
            .map(|k| patient.onsets.get(k).copied().ok_or_else(|| invalid!("seizure {k} has no recorded onset")))
            .collect::<Result<_>>()?;
        onsets.dedup();
        let interictal_hours = labels.iter().filter(|&&l| !l).count() as f64 * seg_s / 3600.0;
        all_probs
            .iter()
            .map(|probs| {
                if probs.len() != data.test.len() {
                    return Err(invalid!(
                        "fold {}: {} probabilities for {} test segments",
                        f.index,
                        probs.len(),
                        data.test.len()
                    ));
                }
                let tl = PredictionTimeline::from_probabilities(&starts, probs, policy.threshold, seg_s)?;
                let alarms = raise_alarms(&tl, policy);
                let score = score_fold(&alarms, &onsets, interictal_hours, policy)?;
                Ok(FoldReport {
                    fold: f.index,
                    sens_percent: score.sens_percent,
                    fpr_per_hour: score.fpr_per_hour,
                    auc: auc(probs, &labels)?,
                    alarms,
                    outcomes: score.outcomes,
                    false_alarms: score.false_alarms,
                    interictal_hours,
                })
            })
            .collect()
    };
    let mut per_fold = Vec::with_capacity(folds.len());
    for chunk in folds.chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            per_fold.push(run(&chunk[0])?);
        } else {
            per_fold.extend(chunk.par_iter().map(run).collect::<Result<Vec<_>>>()?);
        }
    }
    Ok((0..models)
        .map(|m| CvReport::aggregate(patient.id.clone(), per_fold.iter().map(|f| f[m].clone()).collect()))
        .collect())
}

/// Diffusion model settings for per-fold augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSetup {
    pub net: EpsNetConfig,
    pub schedule: Schedule,
    pub train: TrainOptions,
    /// Use this network instead of training one per fold.
    pub pretrained: Option<EpsNet>,
}

/// Everything `run_cv` needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct CvSetup {
    pub balance: BalanceConfig,
    pub clf: ClassifierConfig,
    pub policy: AlarmPolicy,
    pub diffusion: Option<DiffusionSetup>,
    pub seed: u64,
    pub jobs: usize,
}

/// Train a diffusion model on the real preictal training segments of one
/// fold, which must already be normalised.
pub fn train_fold_diffusion(train_set: &[Segment], setup: &DiffusionSetup, seed: u64) -> Result<EpsNet> {
    let first = train_set.first().ok_or_else(|| invalid!("empty training split"))?;
    let hop = setup.net.hop();
    let geom = Geometry { input_channels: first.channels(), length: first.len(), bins: hop / 2 + 1 };
    let root = SeedTree::new(seed);
    let mut net = EpsNet::new(setup.net.clone(), geom, &mut root.stream("init"))?;
    let examples = train_set
        .iter()
        .filter(|s| s.label.is_preictal() && !s.synthetic)
        .map(|s| Ok(TrainExample { x0: s.data.clone(), cond: conditioner(&s.data, hop, hop)? }))
        .collect::<Result<Vec<_>>>()?;
    train(&mut net, &examples, &setup.schedule, &TrainOptions { seed: root.child("train").key(), ..setup.train })?;
    Ok(net)
}

/// Balance a fold's training split and return it normalised.
pub fn balance_fold(train_set: &[Segment], setup: &CvSetup, sample_rate: u32, fold: usize) -> Result<Vec<Segment>> {
    let root = SeedTree::new(setup.seed).child("balance").index(fold as u64);
    let mut rng = root.rng();
    let norm = |v: Vec<Segment>| v.iter().map(normalize).collect::<Vec<_>>();
    Ok(match setup.balance.method {
        BalanceMethod::Downsample => norm(downsample(train_set, &mut rng)?),
        BalanceMethod::SlidingWindow => {
            norm(sliding_balance(train_set, sample_rate, setup.balance.window_s, setup.balance.stride_s, &mut rng)?)
        }
        BalanceMethod::Recombine => norm(recombine_balance(train_set, &mut rng)?),
        BalanceMethod::Diffusion => {
            let d = setup
                .diffusion
                .as_ref()
                .ok_or_else(|| invalid!("diffusion balancing needs a diffusion model configuration"))?;
            let normed = norm(train_set.to_vec());
            let net = match &d.pretrained {
                Some(net) => net.clone(),
                None => train_fold_diffusion(&normed, d, root.child("diffusion").key())?,
            };
            diffusion_augment(&normed, &net, &d.schedule, root.child("augment").key())?
        }
    })
}

/// Full protocol: per fold balance the training split (training a fresh
/// diffusion model on it when required), fit the classifier with early
/// stopping on the validation split and score the held-out seizure.
pub fn run_cv(patient: &PatientData, setup: &CvSetup) -> Result<CvReport> {
    Ok(run_cv_multi(patient, setup, &[setup.clf.arch])?.remove(0))
}

/// [`run_cv`] for several classifier families trained on the same balanced
/// folds; `setup.clf` supplies every setting except the architecture.
pub fn run_cv_multi(patient: &PatientData, setup: &CvSetup, archs: &[Arch]) -> Result<Vec<CvReport>> {
    setup.balance.validate()?;
    let configs: Vec<ClassifierConfig> = archs.iter().map(|&arch| ClassifierConfig { arch, ..setup.clf.clone() }).collect();
    for c in &configs {
        c.validate()?;
    }
    cross_validate_many(patient, &setup.policy, setup.jobs, configs.len(), |fold| {
        let balanced = balance_fold(&fold.train, setup, patient.sample_rate, fold.index)?;
        let validation: Vec<Segment> = fold.validation.iter().map(normalize).collect();
        let test: Vec<Segment> = fold.test.iter().map(normalize).collect();
        let (h, l) = (test[0].channels(), test[0].len());
        let root = SeedTree::new(setup.seed).child("classifier").index(fold.index as u64);
        configs
            .iter()
            .map(|cfg| {
                let node = root.child(cfg.arch.name());
                let mut clf = Classifier::new(cfg.clone(), h, l, &mut node.stream("init"))?;
                fit(&mut clf, &balanced, &validation, node.child("fit").key())?;
                clf.classify_all(&test)
            })
            .collect()
    })
}
