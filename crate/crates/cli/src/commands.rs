//! One function per subcommand. Each takes a resolved [`Config`].

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use diffeeg::balance::{class_counts, diffusion_samples, BalanceMethod};
use diffeeg::checkpoint::Checkpoint;
use diffeeg::classifiers::{fit, sens_spec, Arch, Classifier};
use diffeeg::dataset::{
    attach_seizures, holdout, label_segments, merge_seizures, read_annotations, write_annotations, AnnotationRow, Segment,
    Seizure,
};
use diffeeg::diffusion::{train_until, TrainExample, TrainState};
use diffeeg::evaluation::{balance_fold, run_cv_multi, CvSetup, DiffusionSetup, PatientData};
use diffeeg::network::{EpsNet, Geometry};
use diffeeg::rng::SeedTree;
use diffeeg::schedule::ScheduleConfig;
use diffeeg::signal::{conditioner, normalize, synth_record};
use diffeeg::store::SegmentStore;
use diffeeg::Error;

use crate::config::Config;

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn synth(cfg: &Config) -> Result<()> {
    let s = &cfg.synth;
    let rec = synth_record(&s.profile, s.duration_s(), &s.onsets())?;
    let segments = label_segments(&rec, &cfg.dataset)?;
    let (pre, inter) = class_counts(&segments);
    let store = SegmentStore::from_segments(rec.sample_rate, segments)?;
    create_parent(&cfg.paths.data)?;
    store.write(&cfg.paths.data)?;
    let rows: Vec<AnnotationRow> = rec
        .annotations
        .iter()
        .map(|a| AnnotationRow { record_id: rec.id.clone(), onset_s: a.onset_s, offset_s: a.offset_s })
        .collect();
    create_parent(&cfg.paths.annotations)?;
    write_annotations(&cfg.paths.annotations, &rows)?;
    eprintln!(
        "wrote {} ({pre} preictal, {inter} interictal segments) and {} ({} seizures)",
        cfg.paths.data.display(),
        cfg.paths.annotations.display(),
        rows.len()
    );
    Ok(())
}

/// Segment store plus annotations, with seizure indices restored.
pub fn load_patient(cfg: &Config) -> Result<PatientData> {
    let store = SegmentStore::read(&cfg.paths.data).with_context(|| format!("reading {}", cfg.paths.data.display()))?;
    let rows = read_annotations(&cfg.paths.annotations)
        .with_context(|| format!("reading {}", cfg.paths.annotations.display()))?;
    let expected = cfg.dataset.segment_samples(store.sample_rate)?;
    if expected != store.length {
        return Err(Error::InvalidArgument(format!(
            "dataset.segment_seconds = {} gives {expected} samples at {} Hz, the store holds {}",
            cfg.dataset.segment_seconds, store.sample_rate, store.length
        ))
        .into());
    }
    let id = rows.first().map_or_else(|| "patient".to_string(), |r| r.record_id.clone());
    let seizures: Vec<Seizure> = rows.iter().map(|r| Seizure::new(r.onset_s, r.offset_s)).collect();
    let mut segments = store.segments;
    attach_seizures(&mut segments, &seizures, &cfg.dataset)?;
    let onsets = merge_seizures(&seizures, cfg.dataset.merge_gap_minutes).iter().map(|s| s.onset_s).collect();
    Ok(PatientData { id, sample_rate: store.sample_rate, segments, onsets })
}

fn schedule_from(ck: &Checkpoint) -> Result<ScheduleConfig> {
    Ok(ScheduleConfig {
        steps: ck.meta_parse("schedule.steps")?,
        beta_start: ck.meta_parse("schedule.beta_start")?,
        beta_end: ck.meta_parse("schedule.beta_end")?,
    })
}

/// Real preictal segments, normalised, paired with their conditioners.
fn training_examples(segments: &[Segment], hop: usize) -> Result<Vec<TrainExample>> {
    Ok(segments
        .iter()
        .filter(|s| s.label.is_preictal() && !s.synthetic)
        .map(|s| {
            let x0 = normalize(s).data;
            let cond = conditioner(&x0, hop, hop)?;
            Ok(TrainExample { x0, cond })
        })
        .collect::<diffeeg::Result<_>>()?)
}

pub fn train_diffusion(cfg: &Config, resume: Option<&Path>) -> Result<()> {
    let store = SegmentStore::read(&cfg.paths.data).with_context(|| format!("reading {}", cfg.paths.data.display()))?;
    let (mut net, mut state, sched_cfg) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path).with_context(|| format!("reading {}", path.display()))?;
            let net = EpsNet::from_checkpoint(&ck)?;
            let state = TrainState::load_from(&ck, net.params())?;
            (net, state, schedule_from(&ck)?)
        }
        None => {
            let hop = cfg.net.hop();
            let geom = Geometry { input_channels: store.channels, length: store.length, bins: hop / 2 + 1 };
            let net = EpsNet::new(cfg.net.clone(), geom, &mut SeedTree::new(cfg.seeds.init).stream("init"))?;
            let state = TrainState::new(net.params(), &cfg.train);
            (net, state, cfg.schedule)
        }
    };
    let sched = sched_cfg.build()?;
    let examples = training_examples(&store.segments, net.config().hop())?;
    let start = state.iteration;
    eprintln!("training on {} preictal segments, iterations {start}..{}", examples.len(), cfg.train.iters);
    train_until(&mut net, &examples, &sched, &cfg.train, &mut state, cfg.train.iters)?;

    let ck = state.save_into(net.to_checkpoint(), net.params());
    let ck = ck
        .with_meta("schedule.steps", sched_cfg.steps)
        .with_meta("schedule.beta_start", sched_cfg.beta_start)
        .with_meta("schedule.beta_end", sched_cfg.beta_end)
        .with_meta("sample_rate", store.sample_rate);
    create_parent(&cfg.paths.checkpoint)?;
    ck.write(&cfg.paths.checkpoint)?;

    // a resumed run appends to the existing trace
    let append = resume.is_some() && cfg.paths.trace.exists();
    create_parent(&cfg.paths.trace)?;
    let mut trace = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&cfg.paths.trace)?;
    let mut text = String::new();
    if !append {
        text.push_str("iter,loss\n");
    }
    for (i, loss) in state.losses.iter().enumerate() {
        text.push_str(&format!("{},{loss}\n", start + i + 1));
    }
    trace.write_all(text.as_bytes())?;
    if let (Some(first), Some(last)) = (state.losses.first(), state.losses.last()) {
        eprintln!("loss {first:.4} -> {last:.4}");
    }
    eprintln!("wrote {} and {}", cfg.paths.checkpoint.display(), cfg.paths.trace.display());
    Ok(())
}

pub fn generate(cfg: &Config) -> Result<()> {
    let ck = Checkpoint::read(&cfg.paths.checkpoint).with_context(|| format!("reading {}", cfg.paths.checkpoint.display()))?;
    let net = EpsNet::from_checkpoint(&ck)?;
    let sched = schedule_from(&ck)?.build()?;
    let patient = load_patient(cfg)?;
    let real: Vec<Segment> = patient.segments.iter().filter(|s| s.label.is_preictal() && !s.synthetic).map(normalize).collect();
    if real.is_empty() {
        return Err(Error::InvalidArgument("the data holds no real preictal segments to condition on".into()).into());
    }
    let samples = diffusion_samples(&real, &net, &sched, cfg.generate.count, cfg.seeds.generate)?;
    let store = SegmentStore::new(net.geometry().input_channels, patient.sample_rate, net.geometry().length, samples)?;
    create_parent(&cfg.paths.samples)?;
    store.write(&cfg.paths.samples)?;
    eprintln!("wrote {} synthetic preictal segments to {}", store.segments.len(), cfg.paths.samples.display());
    Ok(())
}

fn cv_setup(cfg: &Config) -> Result<CvSetup> {
    let pretrained = if cfg.balance.method == BalanceMethod::Diffusion && !cfg.balance.checkpoint.is_empty() {
        let ck = Checkpoint::read(Path::new(&cfg.balance.checkpoint))
            .with_context(|| format!("reading {}", cfg.balance.checkpoint))?;
        Some(EpsNet::from_checkpoint(&ck)?)
    } else {
        None
    };
    Ok(CvSetup {
        balance: cfg.balance.clone(),
        clf: cfg.clf.clone(),
        policy: cfg.policy,
        diffusion: Some(DiffusionSetup {
            net: cfg.net.clone(),
            schedule: cfg.schedule.build()?,
            train: cfg.train,
            pretrained,
        }),
        seed: cfg.seeds.cv,
        jobs: cfg.eval.jobs,
    })
}

pub fn train_classifier(cfg: &Config) -> Result<()> {
    let patient = load_patient(cfg)?;
    let setup = cv_setup(cfg)?;
    let real: Vec<usize> = (0..patient.segments.len()).filter(|&i| !patient.segments[i].synthetic).collect();
    let (train_idx, val_idx) = holdout(&patient.segments, &real);
    let pick = |idx: &[usize]| idx.iter().map(|&i| patient.segments[i].clone()).collect::<Vec<_>>();
    let balanced = balance_fold(&pick(&train_idx), &setup, patient.sample_rate, 0)?;
    let validation: Vec<Segment> = pick(&val_idx).iter().map(normalize).collect();
    let (pre, inter) = class_counts(&balanced);
    eprintln!("balanced training set: {pre} preictal, {inter} interictal; validation {}", validation.len());
    let root = SeedTree::new(cfg.seeds.cv).child("classifier");
    let first = &validation.first().ok_or_else(|| Error::Protocol("empty validation split".into()))?.data;
    let mut clf = Classifier::new(cfg.clf.clone(), first.shape()[0], first.shape()[1], &mut root.stream("init"))?;
    let hist = fit(&mut clf, &balanced, &validation, root.child("fit").key())?;
    let (sens, spec) = sens_spec(&clf.classify_all(&validation)?, &validation);
    eprintln!(
        "{} epochs, best epoch {}; validation sensitivity {sens:.3}, specificity {spec:.3}",
        hist.epochs.len(),
        hist.best_epoch
    );
    create_parent(&cfg.paths.classifier)?;
    clf.to_checkpoint().write(&cfg.paths.classifier)?;
    eprintln!("wrote {}", cfg.paths.classifier.display());
    Ok(())
}

fn archs(cfg: &Config) -> Result<Vec<Arch>> {
    if cfg.eval.archs.is_empty() {
        return Ok(vec![cfg.clf.arch]);
    }
    if cfg.eval.archs.iter().any(|a| a == "all") {
        return Ok(Arch::ALL.to_vec());
    }
    Ok(cfg.eval.archs.iter().map(|a| a.parse::<Arch>()).collect::<diffeeg::Result<_>>()?)
}

/// `report.csv` for a single family, `report_<arch>.csv` for several.
fn report_path(base: &Path, arch: Arch, many: bool) -> std::path::PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    let ext = base.extension().map_or_else(|| "csv".into(), |e| e.to_string_lossy().into_owned());
    base.with_file_name(format!("{stem}_{}.{ext}", arch.name()))
}

pub fn evaluate(cfg: &Config) -> Result<()> {
    let patient = load_patient(cfg)?;
    let (pre, inter) = class_counts(&patient.segments);
    eprintln!("{}: {} seizures, {pre} preictal, {inter} interictal segments", patient.id, patient.seizure_count());
    let setup = cv_setup(cfg)?;
    let archs = archs(cfg)?;
    let reports = run_cv_multi(&patient, &setup, &archs)?;
    for (arch, report) in archs.iter().zip(&reports) {
        let path = report_path(&cfg.paths.report, *arch, archs.len() > 1);
        create_parent(&path)?;
        fs::write(&path, report.to_csv())?;
        println!("{} / {}", arch.name(), cfg.balance.method.name());
        println!("{}", report.summary());
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
