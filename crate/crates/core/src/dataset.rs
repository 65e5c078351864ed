//! Recordings, seizure annotations, segment labelling, patient admission
//! and leave-one-seizure-out fold construction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{format_err, invalid, Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Interictal,
    Preictal,
}

impl Label {
    pub fn is_preictal(self) -> bool {
        self == Label::Preictal
    }

    /// 1.0 for preictal, 0.0 for interictal.
    pub fn target(self) -> f64 {
        if self.is_preictal() {
            1.0
        } else {
            0.0
        }
    }
}

/// One annotated seizure, in seconds from the start of its recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seizure {
    pub onset_s: f64,
    pub offset_s: f64,
}

impl Seizure {
    pub fn new(onset_s: f64, offset_s: f64) -> Self {
        Self { onset_s, offset_s }
    }
}

/// Continuous multichannel recording with its seizure annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub sample_rate: u32,
    /// `[H × total]`
    pub samples: Tensor,
    pub annotations: Vec<Seizure>,
}

impl Recording {
    pub fn new(id: impl Into<String>, sample_rate: u32, samples: Tensor, annotations: Vec<Seizure>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(invalid!("sample rate must be positive"));
        }
        samples.dims2()?;
        let rec = Self { id: id.into(), sample_rate, samples, annotations };
        let dur = rec.duration_s();
        for (i, s) in rec.annotations.iter().enumerate() {
            if !(s.onset_s >= 0.0 && s.offset_s >= s.onset_s && s.offset_s <= dur) {
                return Err(invalid!("annotation {i} ({}, {}) outside recording of {dur} s", s.onset_s, s.offset_s));
            }
            if i > 0 && s.onset_s < rec.annotations[i - 1].offset_s {
                return Err(invalid!("annotations must be sorted and non-overlapping (entry {i})"));
            }
        }
        Ok(rec)
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn total_samples(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn duration_s(&self) -> f64 {
        self.total_samples() as f64 / self.sample_rate as f64
    }

    /// Copy samples `[start, start+len)` of every channel.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        let (h, total) = (self.channels(), self.total_samples());
        let mut data = Vec::with_capacity(h * len);
        for c in 0..h {
            data.extend_from_slice(&self.samples.data()[c * total + start..c * total + start + len]);
        }
        Tensor::new(vec![h, len], data).unwrap()
    }
}

/// Fixed-length labelled window.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// `[H × L]`
    pub data: Tensor,
    pub label: Label,
    pub source: String,
    pub start_s: f64,
    pub synthetic: bool,
    /// Index of the (merged) seizure a preictal segment precedes.
    pub seizure: Option<usize>,
}

impl Segment {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub preictal_minutes: f64,
    pub interictal_gap_hours: f64,
    pub merge_gap_minutes: f64,
    /// Admitted patients need strictly more seizures than this.
    pub min_seizures: usize,
    /// Admitted patients need strictly fewer seizures per day than this.
    pub max_seizures_per_day: f64,
    /// Admitted patients need an interictal:preictal ratio strictly above this.
    pub min_inter_pre_ratio: f64,
    pub segment_seconds: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            preictal_minutes: 30.0,
            interictal_gap_hours: 4.0,
            merge_gap_minutes: 15.0,
            min_seizures: 3,
            max_seizures_per_day: 10.0,
            min_inter_pre_ratio: 2.0,
            segment_seconds: 30.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("preictal_minutes", self.preictal_minutes),
            ("interictal_gap_hours", self.interictal_gap_hours),
            ("merge_gap_minutes", self.merge_gap_minutes),
            ("max_seizures_per_day", self.max_seizures_per_day),
            ("min_inter_pre_ratio", self.min_inter_pre_ratio),
            ("segment_seconds", self.segment_seconds),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid!("dataset.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    /// Samples per segment at `fs`, rejecting non-integral products.
    pub fn segment_samples(&self, fs: u32) -> Result<usize> {
        let n = self.segment_seconds * fs as f64;
        if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
            return Err(invalid!(
                "segment of {} s at {} Hz is not a whole number of samples",
                self.segment_seconds,
                fs
            ));
        }
        Ok(n.round() as usize)
    }
}

/// Absorb every seizure starting less than `merge_gap_minutes` after the
/// previous one ended. The combined seizure keeps the leading onset and the
/// last offset.
pub fn merge_seizures(annotations: &[Seizure], merge_gap_minutes: f64) -> Vec<Seizure> {
    let gap = merge_gap_minutes * 60.0;
    let mut out: Vec<Seizure> = Vec::with_capacity(annotations.len());
    for s in annotations {
        match out.last_mut() {
            Some(prev) if s.onset_s - prev.offset_s < gap => prev.offset_s = prev.offset_s.max(s.offset_s),
            _ => out.push(*s),
        }
    }
    out
}

fn overlaps(a0: f64, a1: f64, b0: f64, b1: f64) -> bool {
    a0 < b1 && b0 < a1
}

/// Cut a recording into labelled segments.
///
/// Preictal segments tile `[onset − preictal, onset)` backwards from each
/// merged onset; interictal segments tile the time at least
/// `interictal_gap_hours` away from every seizure. Partial windows, and
/// windows touching an ictal interval, are dropped. Everything else is
/// discarded.
pub fn label_segments(rec: &Recording, spec: &DatasetSpec) -> Result<Vec<Segment>> {
    spec.validate()?;
    let fs = rec.sample_rate as f64;
    let len = spec.segment_samples(rec.sample_rate)?;
    let seg_s = len as f64 / fs;
    let total = rec.total_samples();
    let seizures = merge_seizures(&rec.annotations, spec.merge_gap_minutes);
    let pre_s = spec.preictal_minutes * 60.0;
    let gap_s = spec.interictal_gap_hours * 3600.0;
    let touches_ictal = |a: f64, b: f64| seizures.iter().any(|s| overlaps(a, b, s.onset_s, s.offset_s.max(s.onset_s + 1e-9)));

    let make = |start: usize, label: Label, seizure: Option<usize>| Segment {
        data: rec.window(start, len),
        label,
        source: rec.id.clone(),
        start_s: start as f64 / fs,
        synthetic: false,
        seizure,
    };

    let mut preictal: Vec<Segment> = Vec::new();
    let mut claimed: Vec<(f64, f64)> = Vec::new();
    for (k, s) in seizures.iter().enumerate() {
        let onset = (s.onset_s * fs).round() as i64;
        let window_start = ((s.onset_s - pre_s) * fs).round() as i64;
        let mut starts = Vec::new();
        let mut end = onset;
        while end - len as i64 >= window_start {
            let start = end - len as i64;
            end = start;
            if start < 0 || start as usize + len > total {
                continue;
            }
            let (a, b) = (start as f64 / fs, start as f64 / fs + seg_s);
            if touches_ictal(a, b) || claimed.iter().any(|&(c0, c1)| overlaps(a, b, c0, c1)) {
                continue;
            }
            starts.push(start as usize);
        }
        starts.reverse();
        for start in starts {
            let a = start as f64 / fs;
            claimed.push((a, a + seg_s));
            preictal.push(make(start, Label::Preictal, Some(k)));
        }
    }

    // Interictal: complement of the exclusion zones, tiled forwards.
    let mut zones: Vec<(f64, f64)> = seizures
        .iter()
        .map(|s| ((s.onset_s - gap_s.max(pre_s)), s.offset_s + gap_s))
        .collect();
    zones.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut interictal = Vec::new();
    let mut cursor = 0.0_f64;
    let dur = rec.duration_s();
    let mut regions = Vec::new();
    for &(z0, z1) in &zones {
        if z0 > cursor {
            regions.push((cursor, z0.min(dur)));
        }
        cursor = cursor.max(z1);
    }
    if cursor < dur {
        regions.push((cursor, dur));
    }
    for (r0, r1) in regions {
        let mut start = (r0 * fs - 1e-9).ceil().max(0.0) as usize;
        let stop = ((r1 * fs + 1e-9).floor() as usize).min(total);
        while start + len <= stop {
            interictal.push(make(start, Label::Interictal, None));
            start += len;
        }
    }

    let mut all = preictal;
    all.extend(interictal);
    all.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    Ok(all)
}

/// Re-derive the seizure index of preictal segments loaded without one: a
/// preictal segment belongs to the first merged seizure whose onset is at
/// or after the segment's end.
pub fn attach_seizures(segments: &mut [Segment], annotations: &[Seizure], spec: &DatasetSpec) -> Result<()> {
    let merged = merge_seizures(annotations, spec.merge_gap_minutes);
    for s in segments.iter_mut().filter(|s| s.label.is_preictal() && !s.synthetic) {
        let end = s.start_s + spec.segment_seconds;
        let k = merged
            .iter()
            .position(|z| z.onset_s >= end - 1e-6 && z.onset_s - end < spec.preictal_minutes * 60.0 + 1e-6)
            .ok_or_else(|| format_err!("preictal segment at {} s precedes no annotated seizure", s.start_s))?;
        s.seizure = Some(k);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmissionRule {
    TooFewSeizures,
    TooManySeizuresPerDay,
    RatioTooLow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientStats {
    pub seizures: usize,
    pub duration_h: f64,
    pub interictal_segments: usize,
    pub preictal_segments: usize,
}

impl PatientStats {
    pub fn seizures_per_day(&self) -> f64 {
        self.seizures as f64 / (self.duration_h / 24.0)
    }

    pub fn inter_pre_ratio(&self) -> f64 {
        if self.preictal_segments == 0 {
            f64::INFINITY
        } else {
            self.interictal_segments as f64 / self.preictal_segments as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Admission {
    pub admitted: bool,
    pub stats: PatientStats,
    pub violations: Vec<AdmissionRule>,
}

/// Apply the three inclusion filters to precomputed statistics.
pub fn admit(stats: PatientStats, spec: &DatasetSpec) -> Admission {
    let mut violations = Vec::new();
    if stats.seizures <= spec.min_seizures {
        violations.push(AdmissionRule::TooFewSeizures);
    }
    if stats.seizures_per_day() >= spec.max_seizures_per_day {
        violations.push(AdmissionRule::TooManySeizuresPerDay);
    }
    if stats.inter_pre_ratio() <= spec.min_inter_pre_ratio {
        violations.push(AdmissionRule::RatioTooLow);
    }
    Admission { admitted: violations.is_empty(), stats, violations }
}

/// Label every recording of a patient and decide admission.
pub fn admit_patient(recordings: &[Recording], spec: &DatasetSpec) -> Result<Admission> {
    let mut stats =
        PatientStats { seizures: 0, duration_h: 0.0, interictal_segments: 0, preictal_segments: 0 };
    for rec in recordings {
        stats.seizures += merge_seizures(&rec.annotations, spec.merge_gap_minutes).len();
        stats.duration_h += rec.duration_s() / 3600.0;
        for s in label_segments(rec, spec)? {
            match s.label {
                Label::Preictal => stats.preictal_segments += 1,
                Label::Interictal => stats.interictal_segments += 1,
            }
        }
    }
    Ok(admit(stats, spec))
}

/// Index sets of one cross-validation fold. `train` excludes `validation`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub test: Vec<usize>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Leave-one-seizure-out folds.
///
/// Fold `i` tests on seizure `i`'s preictal block plus the `i`-th of `n`
/// contiguous chronological parts of the interictal data. Within the
/// remaining data the chronologically last quarter of each class is held out
/// for validation. Synthetic segments are never placed in a test set.
pub fn make_folds(segments: &[Segment], n: usize) -> Result<Vec<Fold>> {
    if n < 2 {
        return Err(invalid!("leave-one-out needs at least 2 seizures, got {n}"));
    }
    let mut seizure_ids: Vec<usize> = segments
        .iter()
        .filter(|s| s.label.is_preictal() && !s.synthetic)
        .map(|s| s.seizure.ok_or_else(|| invalid!("preictal segment at {} s has no seizure index", s.start_s)))
        .collect::<Result<_>>()?;
    seizure_ids.sort_unstable();
    seizure_ids.dedup();
    if seizure_ids.len() != n {
        return Err(invalid!("data holds {} seizures with preictal segments, expected {n}", seizure_ids.len()));
    }

    let chrono = |mut idx: Vec<usize>| {
        idx.sort_by(|&a, &b| segments[a].start_s.total_cmp(&segments[b].start_s));
        idx
    };
    let interictal = chrono(
        (0..segments.len())
            .filter(|&i| !segments[i].label.is_preictal() && !segments[i].synthetic)
            .collect(),
    );
    let m = interictal.len();
    if m < n {
        return Err(invalid!("{m} interictal segments cannot be split into {n} parts"));
    }
    let mut bounds = vec![0];
    for i in 0..n {
        bounds.push(bounds[i] + m / n + usize::from(i < m % n));
    }

    let mut folds = Vec::with_capacity(n);
    for (i, &sz) in seizure_ids.iter().enumerate() {
        let mut test: Vec<usize> = interictal[bounds[i]..bounds[i + 1]].to_vec();
        test.extend(
            (0..segments.len()).filter(|&j| !segments[j].synthetic && segments[j].seizure == Some(sz) && segments[j].label.is_preictal()),
        );
        let in_test: std::collections::HashSet<usize> = test.iter().copied().collect();
        let rest: Vec<usize> = (0..segments.len()).filter(|j| !in_test.contains(j)).collect();
        let (train, validation) = holdout(segments, &rest);
        folds.push(Fold { index: i, test: chrono(test), train, validation });
    }
    Ok(folds)
}

/// Split `candidates` into (train, validation) index sets, holding out the
/// chronologically last quarter of each class. Both come back in time order.
pub fn holdout(segments: &[Segment], candidates: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let chrono = |idx: &mut Vec<usize>| idx.sort_by(|&a, &b| segments[a].start_s.total_cmp(&segments[b].start_s));
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for label in [Label::Interictal, Label::Preictal] {
        let mut pool: Vec<usize> = candidates.iter().copied().filter(|&j| segments[j].label == label).collect();
        chrono(&mut pool);
        let cut = pool.len() - validation_count(pool.len());
        train.extend_from_slice(&pool[..cut]);
        validation.extend_from_slice(&pool[cut..]);
    }
    chrono(&mut train);
    chrono(&mut validation);
    (train, validation)
}

fn validation_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        ((n as f64 * 0.25).round() as usize).clamp(1, n - 1)
    }
}

/// One row of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub record_id: String,
    pub onset_s: f64,
    pub offset_s: f64,
}

pub fn write_annotations(path: &Path, rows: &[AnnotationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["record_id", "onset_s", "offset_s"]).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["record_id", "onset_s", "offset_s"] {
        return Err(format_err!("annotation header must be record_id,onset_s,offset_s, got {:?}", headers));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        format_err!("annotation csv: {e}")
    }
}
