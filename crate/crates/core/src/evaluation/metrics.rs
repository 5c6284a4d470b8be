//! Control rate, lip error and feature diversity.

use serde::{Deserialize, Serialize};

use crate::coretypes::{AuVocabulary, FineCondition, MotionSequence, Triplet};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Neighbor frames on each side of a control window.
pub const CR_WINDOW: usize = 5;

/// Per-frame activation of one AU: the max over its mapped channels.
pub fn au_activation<T: Scalar>(motion: &MotionSequence<T>, channels: &[usize]) -> Vec<f64> {
    let f = motion.frames();
    (0..f.rows())
        .map(|t| channels.iter().map(|&c| f.get(t, c).to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuControl {
    pub au: String,
    pub cr: f64,
    pub peak: f64,
    pub baseline: f64,
    /// Neighbor frames actually available after clipping at the clip ends.
    pub neighbors: usize,
    /// Set when no neighbor frame exists; the baseline is then 0.
    pub flagged: bool,
}

/// Peak activation inside `[start, end)` minus the mean activation over the
/// `window` frames before `start` and the `window` frames from `end`,
/// pooled, one entry per AU of the triplet.
pub fn control_rate<T: Scalar>(
    motion: &MotionSequence<T>,
    triplet: &Triplet,
    vocab: &AuVocabulary,
    window: usize,
) -> Result<Vec<AuControl>> {
    let n = motion.len();
    if triplet.start >= triplet.end || triplet.end > n {
        return Err(Error::Range(format!("interval [{}, {}) in {n} frames", triplet.start, triplet.end)));
    }
    let before = triplet.start.saturating_sub(window)..triplet.start;
    let after = triplet.end..(triplet.end + window).min(n);
    let neighbors = before.len() + after.len();
    triplet
        .aus
        .iter()
        .map(|au| {
            let j = vocab.require(au)?;
            let b = au_activation(motion, vocab.channels(j));
            let peak = b[triplet.start..triplet.end].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = b[before.clone()].iter().chain(&b[after.clone()]).sum();
            let baseline = if neighbors > 0 { sum / neighbors as f64 } else { 0.0 };
            Ok(AuControl { au: au.clone(), cr: peak - baseline, peak, baseline, neighbors, flagged: neighbors == 0 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEntry {
    pub clip: usize,
    pub triplet: usize,
    pub au: String,
    pub cr: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub entries: Vec<ControlEntry>,
    /// Mean over conditions of each condition's mean over its AUs.
    pub mean: Option<f64>,
    pub conditions: usize,
}

impl ControlReport {
    pub fn from_clips<'a, T: Scalar + 'a>(
        items: impl IntoIterator<Item = (usize, &'a MotionSequence<T>, &'a FineCondition)>,
        vocab: &AuVocabulary,
        window: usize,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        let mut per_condition = Vec::new();
        for (clip, motion, fc) in items {
            for (k, tr) in fc.triplets.iter().enumerate() {
                let rates = control_rate(motion, tr, vocab, window)?;
                per_condition.push(rates.iter().map(|r| r.cr).sum::<f64>() / rates.len() as f64);
                entries.extend(rates.into_iter().map(|r| ControlEntry { clip, triplet: k, au: r.au, cr: r.cr, flagged: r.flagged }));
            }
        }
        let mean = (!per_condition.is_empty()).then(|| per_condition.iter().sum::<f64>() / per_condition.len() as f64);
        Ok(Self { entries, mean, conditions: per_condition.len() })
    }
}

/// Per frame, the largest squared error over `lips`; averaged over frames.
pub fn lve<T: Scalar>(pred: &MotionSequence<T>, gt: &MotionSequence<T>, lips: &[usize]) -> Result<f64> {
    let (p, g) = (pred.frames(), gt.frames());
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape())));
    }
    if let Some(&c) = lips.iter().find(|&&c| c >= p.cols()) {
        return Err(Error::Range(format!("lip channel {c} of {}", p.cols())));
    }
    let total: f64 = (0..p.rows())
        .map(|t| {
            lips.iter()
                .map(|&c| {
                    let e = p.get(t, c).to_f64_lossy() - g.get(t, c).to_f64_lossy();
                    e * e
                })
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / p.rows() as f64)
}

/// Mean over dimensions of the population standard deviation across vectors.
pub fn diversity(features: &[Vec<f64>]) -> Result<f64> {
    if features.len() < 2 {
        return Err(Error::Config(format!("diversity needs at least two vectors, got {}", features.len())));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors must share a positive length".into()));
    }
    let n = features.len() as f64;
    let mut acc = 0.0;
    for k in 0..d {
        let mean = features.iter().map(|f| f[k]).sum::<f64>() / n;
        let var = features.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n;
        acc += var.sqrt();
    }
    Ok(acc / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(t: Tensor<f64>) -> MotionSequence<f64> {
        MotionSequence::at_default_fps(t).unwrap()
    }

    fn vocab() -> AuVocabulary {
        AuVocabulary::default_arkit()
    }

    #[test]
    fn cr_examples() {
        let v = vocab();
        let j = v.require("AU12").unwrap();
        let mut m = Tensor::zeros(30, 51);
        for t in 10..20 {
            for &c in v.channels(j) {
                m.set(t, c, 0.8);
            }
        }
        let tr = Triplet::new(["AU12"], 10, 20);
        let r = control_rate(&seq(m), &tr, &v, CR_WINDOW).unwrap();
        assert_eq!(r[0].cr, 0.8);
        let r = control_rate(&seq(Tensor::full(30, 51, 0.5)), &tr, &v, CR_WINDOW).unwrap();
        assert_eq!(r[0].cr, 0.0);
    }

    #[test]
    fn cr_boundaries_and_flags() {
        let v = vocab();
        let m = seq(Tensor::full(12, 51, 0.2));
        let r = control_rate(&m, &Triplet::new(["AU01"], 0, 4), &v, 5).unwrap();
        assert_eq!(r[0].neighbors, 5);
        assert!(!r[0].flagged);
        let r = control_rate(&m, &Triplet::new(["AU01"], 0, 12), &v, 5).unwrap();
        assert!(r[0].flagged);
        assert_eq!(r[0].neighbors, 0);
        assert!(control_rate(&m, &Triplet::new(["AU01"], 4, 13), &v, 5).is_err());
        assert!(control_rate(&m, &Triplet::new(["AU99"], 0, 3), &v, 5).is_err());
    }

    #[test]
    fn lve_examples() {
        let gt = seq(Tensor::zeros(10, 51));
        let mut p = Tensor::zeros(10, 51);
        assert_eq!(lve(&seq(p.clone()), &gt, &[17, 18]).unwrap(), 0.0);
        p.set(3, 18, 0.1);
        let got = lve(&seq(p.clone()), &gt, &[17, 18]).unwrap();
        assert!((got - 0.001).abs() < 1e-15);
        // Non-lip channels are ignored.
        p.set(5, 0, 0.9);
        assert_eq!(lve(&seq(p), &gt, &[17, 18]).unwrap(), got);
        assert!(lve(&seq(Tensor::zeros(9, 51)), &gt, &[17]).is_err());
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(), 0.0);
        assert_eq!(diversity(&[vec![0.0; 4], vec![1.0; 4]]).unwrap(), 0.5);
        assert!(diversity(&[vec![1.0]]).is_err());
    }

    #[test]
    fn lve_and_diversity_match_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let t = rng.random_range(1..20);
            let a = Tensor::<f64>::uniform(t, 51, 1.0, &mut rng);
            let b = Tensor::<f64>::uniform(t, 51, 1.0, &mut rng);
            let lips = [17usize, 18, 19, 20, 37, 38];
            let mut total = 0.0;
            for i in 0..t {
                let mut worst = 0.0f64;
                for &c in &lips {
                    let e = a.get(i, c) - b.get(i, c);
                    if e * e > worst {
                        worst = e * e;
                    }
                }
                total += worst;
            }
            assert!((lve(&seq(a), &seq(b), &lips).unwrap() - total / t as f64).abs() < 1e-12);

            let n = rng.random_range(2..10);
            let feats: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
            let mut acc = 0.0;
            for k in 0..5 {
                let mut mean = 0.0;
                for f in &feats {
                    mean += f[k];
                }
                mean /= n as f64;
                let mut var = 0.0;
                for f in &feats {
                    var += (f[k] - mean) * (f[k] - mean);
                }
                acc += (var / n as f64).sqrt();
            }
            assert!((diversity(&feats).unwrap() - acc / 5.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cr_is_shift_equivariant_and_local(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = vocab();
            let m = Tensor::<f64>::uniform(40, 51, 1.0, &mut rng).map(|x| x.abs());
            let start = rng.random_range(6..20);
            let end = start + rng.random_range(1..8);
            let tr = Triplet::new(["AU04", "AU12"], start, end);
            let base = control_rate(&seq(m.clone()), &tr, &v, 5).unwrap();

            let shift = rng.random_range(1..5);
            let shifted = Tensor::from_fn(40, 51, |t, c| if t >= shift { m.get(t - shift, c) } else { 0.0 });
            let tr2 = Triplet::new(["AU04", "AU12"], start + shift, end + shift);
            let moved = control_rate(&seq(shifted), &tr2, &v, 5).unwrap();
            prop_assert_eq!(&base, &moved);

            let mut edited = m.clone();
            for t in (0..start.saturating_sub(5)).chain((end + 5).min(40)..40) {
                for c in 0..51 {
                    edited.set(t, c, rng.random::<f64>());
                }
            }
            prop_assert_eq!(base, control_rate(&seq(edited), &tr, &v, 5).unwrap());
        }
    }
}
