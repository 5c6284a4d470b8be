//! Rule-based extraction of AU triplets from a coefficient sequence:
//! threshold, widen with a randomly sized max-pool, randomly merge nearby runs.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coretypes::{AuVocabulary, FineCondition, MotionSequence, Triplet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarizeConfig {
    /// An AU is active on a frame when its strongest channel exceeds this.
    pub threshold: f64,
    /// Candidate max-pool kernel sizes, each odd; one is drawn per AU.
    pub kernels: Vec<usize>,
    /// Runs separated by fewer than this many inactive frames may merge.
    pub spacing: usize,
    pub merge_prob: f64,
    /// Shorter runs are discarded.
    pub min_run: usize,
}

impl Default for BinarizeConfig {
    fn default() -> Self {
        Self { threshold: 0.25, kernels: vec![3, 5, 7], spacing: 5, merge_prob: 0.5, min_run: 2 }
    }
}

impl BinarizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("kernels {:?} must be odd and positive", self.kernels)));
        }
        if !(0.0..=1.0).contains(&self.merge_prob) {
            return Err(Error::Config(format!("merge probability {}", self.merge_prob)));
        }
        if self.min_run == 0 {
            return Err(Error::Config("min_run must be at least 1".into()));
        }
        Ok(())
    }
}

/// Intermediate state of one AU, exposed for inspection and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuTrace {
    pub thresholded: Vec<bool>,
    pub kernel: usize,
    pub pooled: Vec<bool>,
    /// Half-open runs after merging and the length filter.
    pub runs: Vec<(usize, usize)>,
}

fn runs_of(active: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = None;
    for (t, &a) in active.iter().enumerate() {
        match (a, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                runs.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, active.len()));
    }
    runs
}

/// Per-AU trace. RNG use per AU: one kernel draw, then one merge draw for
/// every gap shorter than `spacing`, left to right.
pub fn trace_au<T: Scalar, R: Rng + ?Sized>(
    motion: &MotionSequence<T>,
    channels: &[usize],
    cfg: &BinarizeConfig,
    rng: &mut R,
) -> AuTrace {
    let frames = motion.frames();
    let thresholded: Vec<bool> = (0..frames.rows())
        .map(|t| channels.iter().map(|&c| frames.get(t, c).to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max) > cfg.threshold)
        .collect();
    let kernel = cfg.kernels[rng.random_range(0..cfg.kernels.len())];
    let r = kernel / 2;
    let n = thresholded.len();
    let pooled: Vec<bool> = (0..n).map(|t| thresholded[t.saturating_sub(r)..(t + r + 1).min(n)].iter().any(|&a| a)).collect();
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for run in runs_of(&pooled) {
        if let Some(last) = merged.last_mut() {
            if run.0 - last.1 < cfg.spacing && rng.random::<f64>() < cfg.merge_prob {
                last.1 = run.1;
                continue;
            }
        }
        merged.push(run);
    }
    merged.retain(|&(s, e)| e - s >= cfg.min_run);
    AuTrace { thresholded, kernel, pooled, runs: merged }
}

/// Extract triplets from a clean sequence. Runs sharing an interval across
/// AUs are grouped into one triplet; output is sorted by `(start, end)`.
pub fn binarize<T: Scalar, R: Rng + ?Sized>(
    motion: &MotionSequence<T>,
    vocab: &AuVocabulary,
    cfg: &BinarizeConfig,
    rng: &mut R,
) -> Result<FineCondition> {
    cfg.validate()?;
    if vocab.num_channels != motion.channels() {
        return Err(Error::Config(format!(
            "vocabulary maps {} channels, motion has {}",
            vocab.num_channels,
            motion.channels()
        )));
    }
    let mut groups: BTreeMap<(usize, usize), BTreeSet<String>> = BTreeMap::new();
    for (j, entry) in vocab.entries().iter().enumerate() {
        let tr = trace_au(motion, vocab.channels(j), cfg, rng);
        for run in tr.runs {
            groups.entry(run).or_default().insert(entry.id.clone());
        }
    }
    Ok(FineCondition::new(
        groups.into_iter().map(|((start, end), aus)| Triplet { aus, start, end }).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn motion(t: Tensor<f64>) -> MotionSequence<f64> {
        MotionSequence::at_default_fps(t).unwrap()
    }

    #[test]
    fn zero_motion_gives_nothing() {
        let v = AuVocabulary::default_arkit();
        let fc = binarize(&motion(Tensor::zeros(40, 51)), &v, &BinarizeConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(fc.is_empty());
    }

    #[test]
    fn saturated_au_spans_the_clip() {
        let v = AuVocabulary::default_arkit();
        let j = v.require("AU12").unwrap();
        let mut m = Tensor::zeros(30, 51);
        for t in 0..30 {
            for &c in v.channels(j) {
                m.set(t, c, 0.9);
            }
        }
        let fc = binarize(&motion(m), &v, &BinarizeConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(fc, FineCondition::new(vec![Triplet::new(["AU12"], 0, 30)]));
    }

    #[test]
    fn identical_intervals_group_into_one_triplet() {
        let v = AuVocabulary::default_arkit();
        let mut m = Tensor::zeros(20, 51);
        for id in ["AU01", "AU02"] {
            for &c in v.channels(v.require(id).unwrap()) {
                for t in 0..20 {
                    m.set(t, c, 0.6);
                }
            }
        }
        let fc = binarize(&motion(m), &v, &BinarizeConfig::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(fc, FineCondition::new(vec![Triplet::new(["AU01", "AU02"], 0, 20)]));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = BinarizeConfig { kernels: vec![4], ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = BinarizeConfig { threshold: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn pooling_inflates_and_runs_are_disjoint(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = motion(Tensor::<f64>::uniform(40, 51, 1.0, &mut rng).map(|x| x.abs() * 0.4));
            let v = AuVocabulary::default_arkit();
            let cfg = BinarizeConfig::default();
            for j in 0..v.len() {
                let tr = trace_au(&m, v.channels(j), &cfg, &mut rng);
                for t in 0..40 {
                    prop_assert!(!tr.thresholded[t] || tr.pooled[t]);
                }
                for w in tr.runs.windows(2) {
                    prop_assert!(w[0].1 < w[1].0);
                }
                for &(s, e) in &tr.runs {
                    prop_assert!(e - s >= cfg.min_run);
                    // Merging may bridge gaps, so only run ends are guaranteed pooled.
                    prop_assert!(tr.pooled[s] && tr.pooled[e - 1]);
                }
            }
        }

        #[test]
        fn output_is_sorted_and_valid(seed in 0u64..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = motion(Tensor::<f64>::uniform(32, 51, 1.0, &mut rng).map(|x| x.abs() * 0.4));
            let v = AuVocabulary::default_arkit();
            let fc = binarize(&m, &v, &BinarizeConfig::default(), &mut rng).unwrap();
            prop_assert!(fc.validate(32).is_ok());
            for w in fc.triplets.windows(2) {
                prop_assert!((w[0].start, w[0].end) < (w[1].start, w[1].end));
            }
        }
    }
}
