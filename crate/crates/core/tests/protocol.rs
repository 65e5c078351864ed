use diffeeg::balance::{BalanceConfig, BalanceMethod};
use diffeeg::classifiers::{Arch, ClassifierConfig};
use diffeeg::dataset::{DatasetSpec, Label, Segment};
use diffeeg::diffusion::TrainOptions;
use diffeeg::evaluation::{
    assert_real, cross_validate, run_cv, run_cv_multi, AlarmPolicy, CvSetup, DiffusionSetup, PatientData,
};
use diffeeg::network::EpsNetConfig;
use diffeeg::schedule::Schedule;
use diffeeg::signal::{synth_record, SyntheticProfile};
use diffeeg::Error;

/// Four channels at 64 Hz, 2-s segments, 1-min preictal windows.
fn patient(onsets_min: &[f64], duration_min: f64) -> PatientData {
    let profile = SyntheticProfile { preictal_s: 60.0, signature_rise_s: 20.0, seed: 5, ..SyntheticProfile::default() };
    let onsets: Vec<f64> = onsets_min.iter().map(|m| m * 60.0).collect();
    let rec = synth_record(&profile, duration_min * 60.0, &onsets).unwrap();
    let spec = DatasetSpec { preictal_minutes: 1.0, interictal_gap_hours: 0.1, segment_seconds: 2.0, ..DatasetSpec::default() };
    PatientData::from_recording(&rec, &spec).unwrap()
}

fn three_seizures() -> PatientData {
    patient(&[8.0, 24.0, 40.0], 50.0)
}

fn setup(method: BalanceMethod) -> CvSetup {
    CvSetup {
        balance: BalanceConfig { method, window_s: 2.0, stride_s: 0.5, ..BalanceConfig::default() },
        clf: ClassifierConfig { arch: Arch::Cnn, hidden: 4, patch: 16, epochs_max: 3, patience: 2, ..ClassifierConfig::default() },
        policy: AlarmPolicy { sop_s: 300.0, refractory_s: 300.0, ..AlarmPolicy::default() },
        diffusion: Some(DiffusionSetup {
            net: EpsNetConfig { channels: 4, layers: 2, blocks: 1, kernel: 3, upsample_t: [2, 4] },
            schedule: Schedule::linear(8, 1e-3, 0.2).unwrap(),
            train: TrainOptions { iters: 10, batch: 4, lr: 1e-3, seed: 0 },
            pretrained: None,
        }),
        seed: 3,
        jobs: 1,
    }
}

#[test]
fn patient_fixture_is_imbalanced() {
    let p = three_seizures();
    let pre = p.segments.iter().filter(|s| s.label.is_preictal()).count();
    assert_eq!(pre, 90);
    assert_eq!(p.segments.len() - pre, 330);
    assert_eq!(p.seizure_count(), 3);
    assert_eq!(p.onsets, vec![480.0, 1440.0, 2400.0]);
}

#[test]
fn constant_classifier_is_chance_and_silent() {
    let p = patient(&[8.0, 24.0, 40.0, 56.0], 66.0);
    let r = cross_validate(&p, &AlarmPolicy::default(), 1, |fold| Ok(vec![0.5; fold.test.len()])).unwrap();
    assert_eq!(r.folds.len(), 4);
    assert_eq!(r.auc, 0.5);
    assert!(r.folds.iter().all(|f| f.alarms.is_empty() && f.sens_percent == 0.0 && f.fpr_per_hour == 0.0));
    let csv = r.to_csv();
    assert!(csv.starts_with("Patient,Sens,FPR,AUC\n"));
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.lines().last().unwrap().starts_with("Ave,"));
}

#[test]
fn oracle_classifier_predicts_every_seizure() {
    let p = three_seizures();
    // the eighth positive segment ends 44 s before onset
    let policy = AlarmPolicy { sph_s: 10.0, sop_s: 300.0, refractory_s: 300.0, ..AlarmPolicy::default() };
    let r = cross_validate(&p, &policy, 1, |fold| {
        Ok(fold.test.iter().map(|s| if s.label.is_preictal() { 0.9 } else { 0.1 }).collect())
    })
    .unwrap();
    assert_eq!(r.auc, 1.0);
    assert_eq!(r.sens_percent, 100.0);
    assert_eq!(r.fpr_per_hour, 0.0);
}

#[test]
fn synthetic_segments_never_reach_test_splits() {
    let mut p = three_seizures();
    let extra: Vec<Segment> = p
        .segments
        .iter()
        .filter(|s| s.label == Label::Preictal)
        .map(|s| Segment { synthetic: true, start_s: s.start_s + 0.5, ..s.clone() })
        .collect();
    p.segments.extend(extra);
    p.segments.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let r = cross_validate(&p, &AlarmPolicy::default(), 1, |fold| {
        assert!(fold.test.iter().all(|s| !s.synthetic));
        assert!(fold.train.iter().any(|s| s.synthetic));
        Ok(vec![0.5; fold.test.len()])
    });
    assert!(r.is_ok());
    let fake = Segment { synthetic: true, ..p.segments[0].clone() };
    assert!(matches!(assert_real(&[fake], 0), Err(Error::Protocol(_))));
}

#[test]
fn every_balance_method_completes() {
    let p = three_seizures();
    for method in [BalanceMethod::Downsample, BalanceMethod::SlidingWindow, BalanceMethod::Recombine, BalanceMethod::Diffusion] {
        let r = run_cv(&p, &setup(method)).unwrap();
        assert_eq!(r.folds.len(), 3, "{method:?}");
        assert!((0.0..=1.0).contains(&r.auc));
        assert!((0.0..=100.0).contains(&r.sens_percent) && r.fpr_per_hour >= 0.0);
    }
}

#[test]
fn diffusion_balancing_requires_a_model() {
    let p = three_seizures();
    let s = CvSetup { diffusion: None, ..setup(BalanceMethod::Diffusion) };
    assert!(run_cv(&p, &s).is_err());
}

#[test]
fn runs_are_reproducible_and_jobs_invariant() {
    let p = three_seizures();
    let s = setup(BalanceMethod::Recombine);
    let a = run_cv(&p, &s).unwrap();
    assert_eq!(a, run_cv(&p, &s).unwrap());
    assert_eq!(a, run_cv(&p, &CvSetup { jobs: 3, ..s.clone() }).unwrap());
    let multi = run_cv_multi(&p, &s, &[Arch::Mlp, Arch::Cnn]).unwrap();
    assert_eq!(multi[1], a);
}

#[test]
fn too_few_seizures_rejected() {
    let p = patient(&[8.0], 20.0);
    assert!(cross_validate(&p, &AlarmPolicy::default(), 1, |f| Ok(vec![0.5; f.test.len()])).is_err());
}
