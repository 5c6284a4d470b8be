//! Conflict-control experiments: a swapped emotion plus a fine triplet on an
//! AU the new emotion does not use, sampled under a sweep of fine-guidance
//! scales with paired noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coretypes::{AuVocabulary, CoarseCondition, FineCondition, MotionSequence, Triplet};
use crate::data::{ClipRecord, SyntheticSpec};
use crate::denoiser::{ConditionBundle, Generator};
use crate::diffusion::{sample_batch, GuidanceConfig, NoiseSchedule, SampleJob};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{au_activation, lve, ControlReport, CR_WINDOW};
use crate::scalar::Scalar;
use crate::seeds;

/// One conflicting request built from a clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictCase {
    /// Position of the source clip in the slice the cases were built from.
    pub clip: usize,
    pub coarse: CoarseCondition,
    pub fine: FineCondition,
}

/// Per clip: move the emotion to a different label, then ask for one
/// upper-face AU the new emotion does not use and the clip never shows,
/// over `window` frames starting at least `CR_WINDOW + 3` frames from
/// either end.
pub fn conflict_cases<T: Scalar>(
    clips: &[ClipRecord<T>],
    spec: &SyntheticSpec,
    vocab: &AuVocabulary,
    window: usize,
    seed: u64,
) -> Result<Vec<ConflictCase>> {
    let margin = CR_WINDOW + 3;
    let pool = spec.event_aus(vocab);
    let n_emotions = spec.emotion_aus.len();
    if n_emotions < 2 {
        return Err(Error::Config("conflicts need at least two emotions".into()));
    }
    clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let frames = c.motion.len();
            if frames < window + 2 * margin {
                return Err(Error::Config(format!("{frames} frames leave no room for a {window}-frame window")));
            }
            let mut rng = seeds::stream(seed, "conflict", c.index as u64);
            let emotion_id = (c.coarse.emotion_id + rng.random_range(1..n_emotions)) % n_emotions;
            let used: Vec<usize> = spec.emotion_aus[emotion_id].iter().map(|a| vocab.require(a)).collect::<Result<_>>()?;
            let shown: Vec<usize> = c.events.triplets.iter().flat_map(|t| t.aus.iter()).filter_map(|a| vocab.index_of(a)).collect();
            let cand: Vec<usize> = pool.iter().copied().filter(|j| !used.contains(j) && !shown.contains(j)).collect();
            if cand.is_empty() {
                return Err(Error::Config(format!("no AU left to request for clip {}", c.index)));
            }
            let au = cand[rng.random_range(0..cand.len())];
            let start = rng.random_range(margin..=frames - margin - window);
            Ok(ConflictCase {
                clip: i,
                coarse: CoarseCondition { emotion_id, ..c.coarse },
                fine: FineCondition::new(vec![Triplet::new([vocab.entry(au).id.clone()], start, start + window)]),
            })
        })
        .collect()
}

/// Guided samples for every case. Case `k` draws its noise from
/// `sub_seed(seed, "conflict.sample", k)`, so different scales are paired.
pub fn sample_cases<T: Scalar>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    clips: &[ClipRecord<T>],
    cases: &[ConflictCase],
    vocab: &AuVocabulary,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> Result<Vec<MotionSequence<T>>> {
    let frames = clips.first().map_or(0, |c| c.motion.len());
    let jobs = cases
        .iter()
        .enumerate()
        .map(|(k, case)| {
            let c = &clips[case.clip];
            Ok(SampleJob {
                cond: ConditionBundle::new(Some(c.audio.clone()), Some(case.coarse)).with_fine(&case.fine, vocab, frames)?,
                guidance: GuidanceConfig::for_fine(alpha, beta, &case.fine, frames)?,
                seed: seeds::sub_seed(seed, "conflict.sample", k as u64),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sample_batch(gen, schedule, &jobs, frames)
}

/// Outcome of one fine-guidance scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleScore {
    pub beta: f64,
    /// Mean control rate over cases.
    pub cr: f64,
    /// Mean lip error against each source clip's ground truth.
    pub lve: f64,
    /// Mean over cases of the requested AU's peak activation in its window.
    pub peak: f64,
    /// Mean absolute change from the first scale of the sweep inside the
    /// window and outside the window widened by `CR_WINDOW` frames.
    pub change_inside: f64,
    pub change_outside: f64,
}

impl ScaleScore {
    /// Outside change as a fraction of inside change.
    pub fn leakage(&self) -> Option<f64> {
        (self.change_inside > 0.0).then(|| self.change_outside / self.change_inside)
    }
}

fn peak_in_window<T: Scalar>(m: &MotionSequence<T>, case: &ConflictCase, vocab: &AuVocabulary) -> Result<f64> {
    let tr = &case.fine.triplets[0];
    let mut peak = f64::NEG_INFINITY;
    for au in &tr.aus {
        let a = au_activation(m, vocab.channels(vocab.require(au)?));
        peak = a[tr.start..tr.end].iter().copied().fold(peak, f64::max);
    }
    Ok(peak)
}

/// Mean absolute difference per entry, split into inside `[s, e)` and
/// outside `[s - CR_WINDOW, e + CR_WINDOW)`.
fn change_split<T: Scalar>(a: &MotionSequence<T>, b: &MotionSequence<T>, tr: &Triplet) -> (f64, usize, f64, usize) {
    let (fa, fb) = (a.frames(), b.frames());
    let lo = tr.start.saturating_sub(CR_WINDOW);
    let hi = tr.end + CR_WINDOW;
    let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
    for t in 0..fa.rows() {
        let d: f64 = (0..fa.cols()).map(|c| (fa.get(t, c).to_f64_lossy() - fb.get(t, c).to_f64_lossy()).abs()).sum();
        if t >= tr.start && t < tr.end {
            si += d;
            ni += fa.cols();
        } else if t < lo || t >= hi {
            so += d;
            no += fa.cols();
        }
    }
    (si, ni, so, no)
}

/// Sample every case at each scale in `betas` (paired noise) and score it.
/// Change statistics are relative to `betas[0]`.
pub fn scale_sweep<T: Scalar>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    clips: &[ClipRecord<T>],
    cases: &[ConflictCase],
    vocab: &AuVocabulary,
    lips: &[usize],
    alpha: f64,
    betas: &[f64],
    seed: u64,
) -> Result<Vec<ScaleScore>> {
    if betas.is_empty() || cases.is_empty() {
        return Err(Error::Config("scale sweep needs scales and cases".into()));
    }
    let runs: Vec<Vec<MotionSequence<T>>> =
        betas.iter().map(|&b| sample_cases(gen, schedule, clips, cases, vocab, alpha, b, seed)).collect::<Result<_>>()?;
    let n = cases.len() as f64;
    betas
        .iter()
        .zip(&runs)
        .map(|(&beta, outs)| {
            let report = ControlReport::from_clips(outs.iter().zip(cases).map(|(o, c)| (c.clip, o, &c.fine)), vocab, CR_WINDOW)?;
            let mut l = 0.0;
            let mut peak = 0.0;
            let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
            for ((o, case), base) in outs.iter().zip(cases).zip(&runs[0]) {
                l += lve(o, &clips[case.clip].motion, lips)?;
                peak += peak_in_window(o, case, vocab)?;
                let (a, b, c, d) = change_split(o, base, &case.fine.triplets[0]);
                si += a;
                ni += b;
                so += c;
                no += d;
            }
            Ok(ScaleScore {
                beta,
                cr: report.mean.unwrap_or(0.0),
                lve: l / n,
                peak: peak / n,
                change_inside: if ni > 0 { si / ni as f64 } else { 0.0 },
                change_outside: if no > 0 { so / no as f64 } else { 0.0 },
            })
        })
        .collect()
}
