//! Deliberately naive re-implementations used as oracles. They walk frames
//! and channels one at a time and share no code with the production paths.

use rand::Rng;

use crate::coretypes::{AuVocabulary, FineCondition, MotionSequence, Triplet};
use crate::data::BinarizeConfig;
use crate::scalar::Scalar;

/// Control rate of every AU in `triplet`, in the triplet's AU order.
pub fn control_rate_brute<T: Scalar>(motion: &MotionSequence<T>, triplet: &Triplet, vocab: &AuVocabulary, window: usize) -> Vec<f64> {
    let f = motion.frames();
    let n = f.rows();
    let mut out = Vec::new();
    for au in &triplet.aus {
        let j = vocab.index_of(au).expect("known AU");
        let act = |t: usize| {
            let mut m = f64::NEG_INFINITY;
            for &c in vocab.channels(j) {
                let v = f.get(t, c).to_f64_lossy();
                if v > m {
                    m = v;
                }
            }
            m
        };
        let mut peak = f64::NEG_INFINITY;
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..n {
            let inside = t >= triplet.start && t < triplet.end;
            let before = t < triplet.start && t + window >= triplet.start;
            let after = t >= triplet.end && t < triplet.end + window;
            if inside {
                peak = peak.max(act(t));
            }
            if before || after {
                sum += act(t);
                count += 1;
            }
        }
        let baseline = if count == 0 { 0.0 } else { sum / count as f64 };
        out.push(peak - baseline);
    }
    out
}

/// Frame-by-frame binarization consuming the RNG in the documented order:
/// one kernel draw per AU, then one merge draw per short gap.
pub fn binarize_brute<T: Scalar, R: Rng + ?Sized>(
    motion: &MotionSequence<T>,
    vocab: &AuVocabulary,
    cfg: &BinarizeConfig,
    rng: &mut R,
) -> FineCondition {
    let f = motion.frames();
    let n = f.rows();
    let mut intervals: Vec<((usize, usize), Vec<String>)> = Vec::new();
    for (j, entry) in vocab.entries().iter().enumerate() {
        let mut on = vec![false; n];
        for (t, slot) in on.iter_mut().enumerate() {
            for &c in vocab.channels(j) {
                if f.get(t, c).to_f64_lossy() > cfg.threshold {
                    *slot = true;
                }
            }
        }
        let kernel = cfg.kernels[rng.random_range(0..cfg.kernels.len())];
        let r = (kernel - 1) / 2;
        let mut pooled = vec![false; n];
        for (t, slot) in pooled.iter_mut().enumerate() {
            for (s, &a) in on.iter().enumerate() {
                if a && s + r >= t && s <= t + r {
                    *slot = true;
                }
            }
        }
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut t = 0;
        while t < n {
            if pooled[t] {
                let s = t;
                while t < n && pooled[t] {
                    t += 1;
                }
                runs.push((s, t));
            } else {
                t += 1;
            }
        }
        let mut kept: Vec<(usize, usize)> = Vec::new();
        for run in runs {
            let merge = match kept.last() {
                Some(&(_, e)) if run.0 - e < cfg.spacing => rng.random::<f64>() < cfg.merge_prob,
                _ => false,
            };
            if merge {
                kept.last_mut().expect("non-empty").1 = run.1;
            } else {
                kept.push(run);
            }
        }
        for run in kept.into_iter().filter(|&(s, e)| e - s >= cfg.min_run) {
            match intervals.iter_mut().find(|(iv, _)| *iv == run) {
                Some((_, ids)) => ids.push(entry.id.clone()),
                None => intervals.push((run, vec![entry.id.clone()])),
            }
        }
    }
    intervals.sort_by_key(|(iv, _)| *iv);
    FineCondition::new(intervals.into_iter().map(|((s, e), ids)| Triplet::new(ids, s, e)).collect())
}
