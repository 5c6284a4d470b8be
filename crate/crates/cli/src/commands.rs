use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use facectl_core::coretypes::{AuVocabulary, CoarseCondition, FineCondition};
use facectl_core::data::{binarize as binarize_motion, read_motion, write_motion, BinarizeConfig, ClipRecord, Dataset};
use facectl_core::denoiser::{ConditionBundle, Generator, ModelConfig};
use facectl_core::diffusion::{sample_batch, GuidanceConfig, NoiseSchedule, SampleJob};
use facectl_core::evaluation::{diversity, lve, ClassifierTraining, ClipEval, ControlReport, EmotionClassifier, EvalReport, CR_WINDOW};
use facectl_core::seeds::{stream, sub_seed};
use facectl_core::training::{append_log, validation_loss, Stage, TrainState, Trainer, MODEL_FILE, STATE_FILE};
use facectl_core::{verify as checks, Profile, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{EvalSettings, Precision, RunConfig, SampleSettings};
use crate::{BinarizeArgs, EvalArgs, GenDataArgs, SampleArgs, TrainArgs, VerifyArgs};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SAMPLES_FILE: &str = "samples.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub struct Context {
    pub profile: Profile,
    pub seed: u64,
}

/// Bad flags or inputs the caller can fix; exits with 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() || matches!(e.downcast_ref::<facectl_core::Error>(), Some(facectl_core::Error::Config(_))) {
        2
    } else {
        1
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn print_json<S: Serialize>(value: &S) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn gen_data(ctx: &Context, a: GenDataArgs) -> Result<bool> {
    let mut spec = ctx.profile.data();
    spec.seed = sub_seed(ctx.seed, "data", 0);
    if let Some(n) = a.n_clips {
        spec.n_clips = n;
    }
    if let Some(t) = a.frames {
        spec.frames = t;
    }
    if let Some(e) = a.max_events {
        spec.max_events = e;
    }
    if let Some(v) = a.val_fraction {
        spec.val_fraction = v;
    }
    let vocab = AuVocabulary::default_arkit();
    spec.validate(&vocab)?;
    let ds = Dataset::<f64>::generate(spec.clone(), &vocab)?;
    let manifest = ds.save(&a.out, &vocab, a.force)?;
    let mut cfg = RunConfig::new("gen-data", ctx.profile, ctx.seed, Precision::F64);
    cfg.paths.out = Some(a.out.clone());
    cfg.data = Some(spec);
    cfg.echo(&a.out)?;
    print_json(&serde_json::json!({ "clips": manifest.clips.len(), "dataset_hash": manifest.dataset_hash }))?;
    Ok(true)
}

/// The model must agree with the dataset it is trained or sampled on.
fn check_dataset<T: Scalar>(m: &ModelConfig, ds: &Dataset<T>, vocab: &AuVocabulary) -> Result<()> {
    let labels = ds.labels();
    let pairs = [
        ("motion channels", m.d_motion, ds.spec.channels),
        ("audio features", m.d_audio, ds.spec.d_audio),
        ("AU vocabulary", m.vocab_size, vocab.len()),
        ("styles", m.n_styles, labels.styles.len()),
        ("emotions", m.n_emotions, labels.emotions.len()),
    ];
    for (what, model, data) in pairs {
        if model != data {
            bail!(usage(format!("dataset mismatch: model expects {model} {what}, dataset has {data}")));
        }
    }
    Ok(())
}

fn read_state(dir: &Path) -> Result<TrainState> {
    let p = dir.join(STATE_FILE);
    let text = fs::read_to_string(&p).with_context(|| format!("reading checkpoint state {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_generator<T: Scalar>(dir: &Path) -> Result<Generator<T>> {
    let st = read_state(dir)?;
    let p = dir.join(MODEL_FILE);
    Generator::<T>::load(st.model, &p).with_context(|| format!("loading {}", p.display()))
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<bool> {
    let stage = Stage::from_number(a.stage)?;
    if stage == Stage::Fine && a.base_checkpoint.is_none() && !a.resume {
        bail!(usage("stage 2 needs --base-checkpoint pointing at a stage-1 output directory"));
    }
    if let Some(b) = &a.base_checkpoint {
        if !b.join(MODEL_FILE).is_file() {
            bail!(usage(format!("no {MODEL_FILE} in {}", b.display())));
        }
    }
    match a.precision {
        Precision::F32 => train_with::<f32>(ctx, &a, stage),
        Precision::F64 => train_with::<f64>(ctx, &a, stage),
    }
}

fn train_with<T: Scalar>(ctx: &Context, a: &TrainArgs, stage: Stage) -> Result<bool> {
    let (ds, vocab) = Dataset::<T>::load(&a.dataset)?;
    let mut tc = ctx.profile.train(stage);
    tc.seed = sub_seed(ctx.seed, "train", stage.number() as u64);
    if let Some(n) = a.iterations {
        tc.iterations = n;
    }
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    if let Some(lr) = a.lr {
        tc.optimizer.lr = lr;
    }
    if let Some(p) = a.p_swap {
        tc.p_swap = p;
    }
    if let Some(p) = a.p_triplet {
        tc.p_triplet = p;
    }
    if let Some(p) = a.p_au {
        tc.p_au = p;
    }
    if a.grad_clip.is_some() {
        tc.grad_clip = a.grad_clip;
    }
    tc.validate()?;
    let fine_vocab = (stage == Stage::Fine).then(|| vocab.clone());
    let log = a.out.join(TRAIN_LOG);
    let mut trainer = if a.resume {
        if !a.out.join(STATE_FILE).is_file() {
            bail!(usage(format!("nothing to resume in {}", a.out.display())));
        }
        Trainer::<T>::resume(&a.out, tc.clone(), fine_vocab)?
    } else {
        let generator = match stage {
            Stage::Base => {
                let labels = ds.labels();
                let mut m = ModelConfig {
                    d_motion: ds.spec.channels,
                    d_audio: ds.spec.d_audio,
                    vocab_size: vocab.len(),
                    n_styles: labels.styles.len(),
                    n_emotions: labels.emotions.len(),
                    ..ctx.profile.model()
                };
                if let Some(d) = a.d_model {
                    m.d_model = d;
                }
                if let Some(h) = a.heads {
                    m.n_heads = h;
                }
                if let Some(b) = a.blocks {
                    m.n_blocks = b;
                }
                if let Some(f) = a.ff_hidden {
                    m.ff_hidden = f;
                }
                if let Some(s) = a.diffusion_steps {
                    m.diffusion_steps = s;
                }
                m.validate()?;
                Generator::<T>::new(m, &mut stream(ctx.seed, "init", 0))?
            }
            Stage::Fine => {
                let dir = a.base_checkpoint.as_ref().expect("checked above");
                let mut g = load_generator::<T>(dir)?;
                if g.has_adapter() {
                    bail!(usage(format!("{} already carries an adapter; pass a stage-1 checkpoint", dir.display())));
                }
                g.insert_adapter(&mut stream(ctx.seed, "adapter", 0))?;
                g
            }
        };
        check_dataset(generator.config(), &ds, &vocab)?;
        if log.exists() {
            fs::remove_file(&log)?;
        }
        match stage {
            Stage::Base => Trainer::new_base(tc.clone(), generator)?,
            Stage::Fine => Trainer::new_fine(tc.clone(), generator, vocab.clone())?,
        }
    };
    check_dataset(trainer.generator.config(), &ds, &vocab)?;

    let mut cfg = RunConfig::new("train", ctx.profile, ctx.seed, a.precision);
    cfg.paths.dataset = Some(a.dataset.clone());
    cfg.paths.checkpoint = a.base_checkpoint.clone();
    cfg.paths.out = Some(a.out.clone());
    cfg.model = Some(trainer.generator.config().clone());
    cfg.train = Some(tc.clone());
    cfg.echo(&a.out)?;

    let val: &[ClipRecord<T>] = if ds.val().is_empty() { ds.train() } else { ds.val() };
    let val_seed = sub_seed(ctx.seed, "validation", 0);
    let val_vocab = (stage == Stage::Fine).then_some(&vocab);
    let before = validation_loss(&trainer.generator, &trainer.schedule, val, val_vocab, val_seed)?;
    let every = a.checkpoint_every;
    let total = tc.iterations;
    let ckpt_root = a.out.join("checkpoints");
    trainer.run(ds.train(), |t, rec| {
        append_log(&log, rec)?;
        let done = rec.iteration + 1;
        if every > 0 && done % every == 0 && done < total {
            t.save(&ckpt_root.join(format!("iter_{done:06}")))?;
        }
        Ok(())
    })?;
    trainer.save(&a.out)?;
    let after = validation_loss(&trainer.generator, &trainer.schedule, val, val_vocab, val_seed)?;
    print_json(&serde_json::json!({
        "stage": stage.number(),
        "iterations": trainer.iteration,
        "validation_loss_start": before,
        "validation_loss_end": after,
    }))?;
    Ok(true)
}

/// One sampled clip as listed in `samples.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub clip: usize,
    pub file: String,
    pub seed: u64,
    pub coarse: CoarseCondition,
    #[serde(default)]
    pub fine: FineCondition,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesFile {
    pub alpha: f64,
    pub beta: f64,
    pub samples: Vec<SampleRecord>,
}

fn find_clip<T: Scalar>(ds: &Dataset<T>, index: usize) -> Option<&ClipRecord<T>> {
    ds.clips.iter().find(|c| c.index == index)
}

pub fn sample(ctx: &Context, a: SampleArgs) -> Result<bool> {
    match a.precision {
        Precision::F32 => sample_with::<f32>(ctx, &a),
        Precision::F64 => sample_with::<f64>(ctx, &a),
    }
}

fn sample_with<T: Scalar>(ctx: &Context, a: &SampleArgs) -> Result<bool> {
    let gen = load_generator::<T>(&a.checkpoint)?;
    let (ds, vocab) = Dataset::<T>::load(&a.dataset)?;
    check_dataset(gen.config(), &ds, &vocab)?;
    let fine = match &a.fine {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let fc = FineCondition::from_json(&text)?;
            fc.resolve(&vocab)?;
            fc.validate(ds.spec.frames)?;
            Some(fc)
        }
        None => None,
    };
    let fine = fine.filter(|f| !f.is_empty());
    if fine.is_some() && !gen.has_adapter() {
        bail!(usage("fine control needs a stage-2 checkpoint"));
    }
    if let Some(e) = a.emotion {
        if e >= gen.config().n_emotions {
            bail!(usage(format!("emotion {e} outside 0..{}", gen.config().n_emotions)));
        }
    }
    let indices: Vec<usize> = if a.clips.is_empty() { ds.val().iter().map(|c| c.index).collect() } else { a.clips.clone() };
    let mut jobs = Vec::with_capacity(indices.len());
    let mut records = Vec::with_capacity(indices.len());
    for &i in &indices {
        let clip = find_clip(&ds, i).ok_or_else(|| usage(format!("dataset has no clip {i}")))?;
        let frames = clip.motion.len();
        let coarse = CoarseCondition { emotion_id: a.emotion.unwrap_or(clip.coarse.emotion_id), ..clip.coarse };
        let base = ConditionBundle::new(Some(clip.audio.clone()), Some(coarse));
        let (cond, guidance) = match &fine {
            Some(fc) => (base.with_fine(fc, &vocab, frames)?, GuidanceConfig::for_fine(a.alpha, a.beta, fc, frames)?),
            None => (base, GuidanceConfig::coarse_only(a.alpha)),
        };
        let seed = sub_seed(ctx.seed, "sample", i as u64);
        jobs.push(SampleJob { cond, guidance, seed });
        records.push(SampleRecord { clip: i, file: format!("{i:04}.motion"), seed, coarse, fine: fine.clone().unwrap_or_default() });
    }
    let schedule = NoiseSchedule::cosine(gen.config().diffusion_steps)?;
    let frames = ds.spec.frames;
    let outs = sample_batch(&gen, &schedule, &jobs, frames)?;
    fs::create_dir_all(&a.out)?;
    for (m, r) in outs.iter().zip(&records) {
        write_motion(&a.out.join(&r.file), m)?;
    }
    let file = SamplesFile { alpha: a.alpha, beta: a.beta, samples: records };
    fs::write(a.out.join(SAMPLES_FILE), serde_json::to_string_pretty(&file)?)?;

    let mut cfg = RunConfig::new("sample", ctx.profile, ctx.seed, a.precision);
    cfg.paths.dataset = Some(a.dataset.clone());
    cfg.paths.checkpoint = Some(a.checkpoint.clone());
    cfg.paths.out = Some(a.out.clone());
    cfg.model = Some(gen.config().clone());
    cfg.sample = Some(SampleSettings { alpha: a.alpha, beta: a.beta, fine, emotion: a.emotion, clips: indices });
    cfg.echo(&a.out)?;
    print_json(&serde_json::json!({ "samples": outs.len(), "out": a.out }))?;
    Ok(true)
}

pub fn binarize(ctx: &Context, a: BinarizeArgs) -> Result<bool> {
    let vocab = match &a.vocab {
        Some(p) => AuVocabulary::load(p)?,
        None => AuVocabulary::default_arkit(),
    };
    let mut bc = BinarizeConfig::default();
    if let Some(t) = a.threshold {
        bc.threshold = t;
    }
    if let Some(s) = a.spacing {
        bc.spacing = s;
    }
    if let Some(p) = a.merge_prob {
        bc.merge_prob = p;
    }
    if let Some(m) = a.min_run {
        bc.min_run = m;
    }
    bc.validate()?;
    let mut out: BTreeMap<String, FineCondition> = BTreeMap::new();
    for (i, p) in a.motion.iter().enumerate() {
        let m = read_motion::<f64>(p).with_context(|| format!("reading {}", p.display()))?;
        let fc = binarize_motion(&m, &vocab, &bc, &mut stream(ctx.seed, "binarize", i as u64))?;
        out.insert(p.display().to_string(), fc);
    }
    let dir = a.out.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    fs::write(&a.out, serde_json::to_string_pretty(&out)?)?;
    let mut cfg = RunConfig::new("binarize", ctx.profile, ctx.seed, Precision::F64);
    cfg.paths.out = Some(a.out.clone());
    cfg.binarize = Some(bc);
    cfg.echo(&dir)?;
    print_json(&serde_json::json!({ "files": out.len(), "triplets": out.values().map(|f| f.len()).sum::<usize>() }))?;
    Ok(true)
}

/// Motion files in `dir` named `NNNN.motion`, keyed by clip index.
fn scan_motion_files(dir: &Path) -> Result<Vec<(usize, String)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".motion") {
            if let Ok(i) = stem.parse::<usize>() {
                found.push((i, name));
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<bool> {
    let (ds, vocab) = Dataset::<f64>::load(&a.dataset)?;
    let listed = a.samples.join(SAMPLES_FILE);
    let items: Vec<SampleRecord> = if listed.is_file() {
        serde_json::from_str::<SamplesFile>(&fs::read_to_string(&listed)?)?.samples
    } else {
        scan_motion_files(&a.samples)?
            .into_iter()
            .map(|(clip, file)| {
                let coarse = find_clip(&ds, clip).map(|c| c.coarse).unwrap_or(CoarseCondition { style_id: 0, emotion_id: 0, intensity: 0.0 });
                SampleRecord { clip, file, seed: 0, coarse, fine: FineCondition::empty() }
            })
            .collect()
    };
    if items.is_empty() {
        bail!(usage(format!("no samples found in {}", a.samples.display())));
    }
    let mut motions = Vec::with_capacity(items.len());
    let mut mismatched = Vec::new();
    for it in &items {
        let m = read_motion::<f64>(&a.samples.join(&it.file)).with_context(|| format!("reading {}", it.file))?;
        match find_clip(&ds, it.clip) {
            Some(c) if c.motion.len() == m.len() && c.motion.channels() == m.channels() => {}
            _ => mismatched.push(it.clip),
        }
        motions.push(m);
    }
    if !mismatched.is_empty() {
        eprintln!("error: sample ids {mismatched:?} do not match any dataset clip of the same shape");
        return Ok(false);
    }

    let epochs = a.classifier_epochs.unwrap_or(ctx.profile.classifier_training().epochs);
    let clf_seed = sub_seed(ctx.seed, "classifier", 0);
    let n_emotions = ds.labels().emotions.len();
    let train_clips: &[ClipRecord<f64>] = if ds.train().is_empty() { &ds.clips } else { ds.train() };
    let mut clf = EmotionClassifier::<f64>::new(ctx.profile.classifier(n_emotions), clf_seed)?;
    let xs: Vec<_> = train_clips.iter().map(|c| &c.motion).collect();
    let ys: Vec<_> = train_clips.iter().map(|c| c.coarse.emotion_id).collect();
    clf.train(&xs, &ys, &ClassifierTraining { epochs, seed: clf_seed, ..ctx.profile.classifier_training() })?;
    let classified = clf.classify_batch(&motions.iter().collect::<Vec<_>>())?;

    let mut rows = Vec::with_capacity(items.len());
    for ((it, m), cls) in items.iter().zip(&motions).zip(&classified) {
        let gt = find_clip(&ds, it.clip).expect("checked above");
        let (cr, cr_conditions) = if it.fine.is_empty() {
            (None, 0)
        } else {
            let r = ControlReport::from_clips([(it.clip, m, &it.fine)], &vocab, CR_WINDOW)?;
            (r.mean, r.conditions)
        };
        rows.push(ClipEval {
            clip: it.clip,
            lve: Some(lve(m, &gt.motion, &ds.spec.lip_channels)?),
            cr,
            cr_conditions,
            target_emotion: Some(it.coarse.emotion_id),
            predicted_emotion: Some(cls.emotion),
        });
    }
    let features: Vec<Vec<f64>> = classified.into_iter().map(|c| c.feature).collect();
    let report = EvalReport::new(rows, diversity(&features).ok());
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join(REPORT_JSON), report.to_json()?)?;
    fs::write(a.out.join(REPORT_CSV), report.to_csv())?;
    let mut cfg = RunConfig::new("eval", ctx.profile, ctx.seed, Precision::F64);
    cfg.paths.dataset = Some(a.dataset.clone());
    cfg.paths.samples = Some(a.samples.clone());
    cfg.paths.out = Some(a.out.clone());
    cfg.eval = Some(EvalSettings { classifier_epochs: epochs, classifier_seed: clf_seed });
    cfg.echo(&a.out)?;
    print_json(&report.aggregate)?;
    Ok(true)
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    precision: Precision,
    passed: bool,
    checks: Vec<checks::CheckResult>,
}

pub fn verify(ctx: &Context, a: VerifyArgs) -> Result<bool> {
    match a.precision {
        Precision::F32 => verify_with::<f32>(ctx, &a),
        Precision::F64 => verify_with::<f64>(ctx, &a),
    }
}

fn verify_with<T: Scalar>(ctx: &Context, a: &VerifyArgs) -> Result<bool> {
    let seed = ctx.seed;
    let vocab = AuVocabulary::default_arkit();
    let (n_identity, n_draws, n_cr, n_bin, n_masks) = if a.quick { (4, 10_000, 200, 30, 20) } else { (16, 10_000, 1000, 100, 100) };
    let mut spec = ctx.profile.data();
    spec.n_clips = n_identity;
    spec.seed = sub_seed(seed, "data", 0);
    let ds = Dataset::<T>::generate(spec, &vocab)?;
    let mut gen = match &a.checkpoint {
        Some(dir) => load_generator::<T>(dir)?,
        None => {
            let labels = ds.labels();
            let m = ModelConfig {
                d_motion: ds.spec.channels,
                d_audio: ds.spec.d_audio,
                vocab_size: vocab.len(),
                n_styles: labels.styles.len(),
                n_emotions: labels.emotions.len(),
                ..ctx.profile.model()
            };
            Generator::<T>::new(m, &mut stream(seed, "init", 0))?
        }
    };
    check_dataset(gen.config(), &ds, &vocab)?;
    if !gen.has_adapter() {
        gen.insert_adapter(&mut stream(seed, "adapter", 0))?;
    }
    if a.corrupt_zero_proj {
        for id in gen.zero_proj_params() {
            let p = gen.store_mut().get_mut(id);
            p.tensor = p.tensor.map(|_| T::lit(0.1));
        }
    }
    let schedule = NoiseSchedule::cosine(gen.config().diffusion_steps)?;

    let mut results = checks::grad_results::<T>(seed)?;
    results.push(checks::cfg_algebra(Some(&gen), seed)?);
    results.push(checks::adapter_identity(&gen, &schedule, &ds.clips, &vocab, 2.0, seed)?);
    results.push(checks::forward_stats(ds.clips[0].motion.frames(), &schedule, n_draws, seed)?);
    results.push(checks::oracle_control_rate(&vocab, n_cr, seed)?);
    results.push(checks::oracle_binarize(&vocab, n_bin, seed)?);
    results.push(checks::swap_locality(&vocab, n_masks, seed)?);

    let passed = results.iter().all(|r| r.passed);
    let report = VerifyReport { precision: a.precision, passed, checks: results };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        let dir = out.parent().filter(|d| !d.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        fs::write(out, &text)?;
        let mut cfg = RunConfig::new("verify", ctx.profile, seed, a.precision);
        cfg.paths.checkpoint = a.checkpoint.clone();
        cfg.paths.out = Some(out.clone());
        cfg.model = Some(gen.config().clone());
        cfg.echo(&dir)?;
    }
    Ok(passed)
}
