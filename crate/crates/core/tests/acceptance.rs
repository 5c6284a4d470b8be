//! Desk-scale acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::time::Instant;

use facectl_core::coretypes::{AuVocabulary, MotionSequence};
use facectl_core::data::{ClipRecord, Dataset};
use facectl_core::denoiser::{ConditionBundle, Generator};
use facectl_core::diffusion::{sample_batch, GuidanceConfig, SampleJob};
use facectl_core::evaluation::{conflict_cases, lve, scale_sweep, EmotionClassifier, ScaleScore};
use facectl_core::numerics::Tensor;
use facectl_core::seeds::{stream, sub_seed};
use facectl_core::training::{validation_loss, Stage, TrainConfig, Trainer};
use facectl_core::verify;
use facectl_core::{Profile, Result};

const SEED: u64 = 2024;
/// Fine-guidance scale used for the conflict criterion.
const BETA_CONTROL: f64 = 0.5;
const CONFLICT_WINDOW: usize = 10;
const SWEEP: [f64; 4] = [0.0, 1.0, 2.0, 4.0];
const SWEEP_SEEDS: usize = 20;

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

#[derive(Default)]
struct Ledger(Vec<Line>);

impl Ledger {
    fn record(&mut self, id: usize, name: &'static str, start: Instant, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        let line = Line { id, name, passed, detail, seconds: start.elapsed().as_secs_f64() };
        println!("{}", render(&line));
        self.0.push(line);
    }
}

fn render(l: &Line) -> String {
    format!("criterion {:>2} {:<24} {}  ({:.1}s) {}", l.id, l.name, if l.passed { "PASS" } else { "FAIL" }, l.seconds, l.detail)
}

fn all_pass(results: &[verify::CheckResult]) -> (bool, String) {
    let failed: Vec<String> = results.iter().filter(|r| !r.passed || r.skipped).map(|r| format!("{}: {}", r.name, r.detail)).collect();
    if failed.is_empty() {
        (true, results.iter().map(|r| format!("{}: {}", r.name, r.detail)).collect::<Vec<_>>().join("; "))
    } else {
        (false, failed.join("; "))
    }
}

fn constant_mean(clips: &[ClipRecord<f32>], frames: usize) -> Result<MotionSequence<f32>> {
    let d = clips[0].motion.channels();
    let mut mean = vec![0.0f64; d];
    for c in clips {
        let f = c.motion.frames();
        for t in 0..f.rows() {
            for (k, m) in mean.iter_mut().enumerate() {
                *m += f.get(t, k) as f64;
            }
        }
    }
    let n = (clips.len() * frames) as f64;
    MotionSequence::at_default_fps(Tensor::from_fn(frames, d, |_, k| (mean[k] / n) as f32))
}

fn mean_lve(outs: &[MotionSequence<f32>], clips: &[ClipRecord<f32>], lips: &[usize]) -> Result<f64> {
    let mut s = 0.0;
    for (o, c) in outs.iter().zip(clips) {
        s += lve(o, &c.motion, lips)?;
    }
    Ok(s / clips.len() as f64)
}

fn train_stage2(base: &Generator<f32>, clips: &[ClipRecord<f32>], vocab: &AuVocabulary, p_swap: f64) -> Result<Generator<f32>> {
    let mut gen = base.clone();
    gen.insert_adapter(&mut stream(SEED, "adapter", 0))?;
    let cfg = TrainConfig { p_swap, seed: sub_seed(SEED, "train", 2), ..Profile::Desk.train(Stage::Fine) };
    let mut t = Trainer::new_fine(cfg, gen, vocab.clone())?;
    t.run(clips, |_, _| Ok(()))?;
    Ok(t.generator)
}

fn describe(s: &ScaleScore) -> String {
    format!("beta {}: CR {:.3} LVE {:.5} peak {:.3} leak {:.3}", s.beta, s.cr, s.lve, s.peak, s.leakage().unwrap_or(f64::NAN))
}

#[test]
fn acceptance() {
    let mut ledger = Ledger::default();
    let vocab = AuVocabulary::default_arkit();
    let profile = Profile::Desk;
    let data = Dataset::<f32>::generate(profile.data(), &vocab).expect("dataset");
    let (train, val) = (data.train(), data.val());
    let frames = data.spec.frames;
    let lips = data.spec.lip_channels.clone();

    // Criterion 7 first: later criteria reuse its model.
    let start = Instant::now();
    let base = Generator::<f32>::new(profile.model(), &mut stream(SEED, "init", 0)).expect("model");
    let cfg = TrainConfig { seed: sub_seed(SEED, "train", 1), ..profile.train(Stage::Base) };
    let mut trainer = Trainer::new_base(cfg, base).expect("trainer");
    let val_seed = sub_seed(SEED, "validation", 0);
    let stage1 = (|| -> Result<(bool, String)> {
        let v0 = validation_loss(&trainer.generator, &trainer.schedule, val, None, val_seed)?;
        trainer.run(train, |_, _| Ok(()))?;
        let v1 = validation_loss(&trainer.generator, &trainer.schedule, val, None, val_seed)?;
        let jobs: Vec<SampleJob<f32>> = val
            .iter()
            .map(|c| SampleJob {
                cond: ConditionBundle::new(Some(c.audio.clone()), Some(c.coarse)),
                guidance: GuidanceConfig::coarse_only(1.0),
                seed: sub_seed(SEED, "sample", c.index as u64),
            })
            .collect();
        let outs = sample_batch(&trainer.generator, &trainer.schedule, &jobs, frames)?;
        let l_gen = mean_lve(&outs, val, &lips)?;
        let constant = constant_mean(train, frames)?;
        let l_const = mean_lve(&vec![constant; val.len()], val, &lips)?;
        let clf_seed = sub_seed(SEED, "classifier", 0);
        let mut clf = EmotionClassifier::<f32>::new(profile.classifier(data.spec.emotion_names.len()), clf_seed)?;
        let xs: Vec<_> = train.iter().map(|c| &c.motion).collect();
        let ys: Vec<_> = train.iter().map(|c| c.coarse.emotion_id).collect();
        clf.train(&xs, &ys, &profile.classifier_training())?;
        let vy: Vec<_> = val.iter().map(|c| c.coarse.emotion_id).collect();
        let acc_gt = clf.accuracy(&val.iter().map(|c| &c.motion).collect::<Vec<_>>(), &vy)?;
        let acc_gen = clf.accuracy(&outs.iter().collect::<Vec<_>>(), &vy)?;
        let passed = v1 <= 0.1 * v0 && l_gen <= 0.5 * l_const && acc_gt >= 0.95 && acc_gen >= 0.8;
        Ok((
            passed,
            format!(
                "val loss {v1:.3} / {v0:.3} = {:.3} (<= 0.1); LVE {l_gen:.5} / constant {l_const:.5} = {:.3} (<= 0.5); classifier on ground truth {acc_gt:.3} (>= 0.95), on samples {acc_gen:.3} (>= 0.8); {} steps",
                v1 / v0,
                l_gen / l_const,
                trainer.iteration
            ),
        ))
    })();
    ledger.record(7, "stage-1 end to end", start, stage1);
    let base = trainer.generator.clone();
    let schedule = trainer.schedule.clone();

    let start = Instant::now();
    let outcome = (|| {
        let mut gen = base.cast::<f64>();
        gen.insert_adapter(&mut stream(SEED, "adapter", 0))?;
        let clips64 = Dataset::<f64>::generate(profile.data(), &vocab)?;
        let val64: Vec<_> = clips64.val().iter().take(16).cloned().collect();
        let r = verify::adapter_identity(&gen, &schedule, &val64, &vocab, 2.0, SEED)?;
        Ok((r.passed, r.detail))
    })();
    ledger.record(1, "adapter identity", start, outcome);

    let start = Instant::now();
    let outcome = (|| {
        let mut gen = base.cast::<f64>();
        gen.insert_adapter(&mut stream(SEED, "adapter", 0))?;
        let r = verify::cfg_algebra(Some(&gen), SEED)?;
        Ok((r.passed, r.detail))
    })();
    ledger.record(2, "guidance algebra", start, outcome);

    let start = Instant::now();
    ledger.record(3, "gradient suite", start, verify::grad_results::<f64>(SEED).map(|r| all_pass(&r)));

    let start = Instant::now();
    let outcome = (|| {
        let clean = Tensor::<f64>::from_fn(frames, data.spec.channels, |t, k| val[0].motion.frames().get(t, k) as f64);
        let r = verify::forward_stats(&clean, &schedule, 10_000, SEED)?;
        Ok((r.passed, r.detail))
    })();
    ledger.record(4, "forward statistics", start, outcome);

    let start = Instant::now();
    let outcome = (|| Ok(all_pass(&[verify::oracle_control_rate(&vocab, 1000, SEED)?, verify::oracle_binarize(&vocab, 100, SEED)?])))();
    ledger.record(5, "oracle equivalence", start, outcome);

    let start = Instant::now();
    let outcome = (|| {
        let r = verify::swap_locality(&vocab, 100, SEED)?;
        Ok((r.passed, r.detail))
    })();
    ledger.record(6, "swap-loss locality", start, outcome);

    let start = Instant::now();
    let cases = conflict_cases(val, &data.spec, &vocab, CONFLICT_WINDOW, SEED).expect("conflict cases");
    let full = train_stage2(&base, train, &vocab, profile.train(Stage::Fine).p_swap);
    let outcome = (|| {
        let full = full.as_ref().map_err(|e| facectl_core::Error::State(e.to_string()))?;
        let ablated = train_stage2(&base, train, &vocab, 0.0)?;
        let sweep = scale_sweep(full, &schedule, val, &cases, &vocab, &lips, 1.0, &[0.0, BETA_CONTROL], SEED)?;
        let ablation = scale_sweep(&ablated, &schedule, val, &cases, &vocab, &lips, 1.0, &[BETA_CONTROL], SEED)?;
        let (off, on, abl) = (&sweep[0], &sweep[1], &ablation[0]);
        let passed = on.cr >= 0.3 && on.lve <= 1.2 * off.lve && abl.cr < on.cr;
        Ok((
            passed,
            format!(
                "{} conflict cases at beta {BETA_CONTROL}: CR {:.3} (>= 0.3), LVE {:.5} vs {:.5} at beta 0 = {:.3}x (<= 1.2); without swap CR {:.3} (< {:.3})",
                cases.len(),
                on.cr,
                on.lve,
                off.lve,
                on.lve / off.lve,
                abl.cr,
                on.cr
            ),
        ))
    })();
    ledger.record(8, "stage-2 conflict control", start, outcome);

    let sweep_cases: Vec<_> = cases.iter().take(SWEEP_SEEDS).cloned().collect();
    let start = Instant::now();
    let sweep = full.and_then(|g| scale_sweep(&g, &schedule, val, &sweep_cases, &vocab, &lips, 1.0, &SWEEP, sub_seed(SEED, "sweep", 0)));
    let outcome = match &sweep {
        Ok(s) => {
            let monotone = s.windows(2).all(|w| w[1].peak >= w[0].peak);
            Ok((monotone, format!("{} seeds; peak {}", sweep_cases.len(), s.iter().map(|x| format!("{:.3}", x.peak)).collect::<Vec<_>>().join(" -> "))))
        }
        Err(e) => Err(facectl_core::Error::State(e.to_string())),
    };
    ledger.record(9, "beta monotonicity", start, outcome);

    let start = Instant::now();
    let outcome = match &sweep {
        Ok(s) => {
            let leaks: Vec<f64> = s[1..].iter().map(|x| x.leakage().unwrap_or(f64::INFINITY)).collect();
            let passed = leaks.iter().all(|&l| l <= 0.25);
            Ok((passed, s[1..].iter().map(describe).collect::<Vec<_>>().join("; ") + " (leak <= 0.25)"))
        }
        Err(e) => Err(facectl_core::Error::State(e.to_string())),
    };
    ledger.record(10, "mask locality", start, outcome);

    ledger.0.sort_by_key(|l| l.id);
    println!("\nsummary");
    for l in &ledger.0 {
        println!("{}", render(l));
    }
    let failed: Vec<usize> = ledger.0.iter().filter(|l| !l.passed).map(|l| l.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
