//! Procedural talking-face corpus with known structure.
//!
//! Lip channels follow a phoneme token stream that the audio features encode,
//! emotion adds an intensity-scaled offset on a fixed AU set, and sparse AU
//! bumps provide ground-truth fine events. Every draw comes from a per-clip
//! sub-stream, so any clip can be regenerated from the manifest alone.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::coretypes::{normalize_intensity, AudioFeatures, AuVocabulary, CoarseCondition, FineCondition, MotionSequence, Triplet};
use crate::data::binarize::{binarize, BinarizeConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVocab {
    pub styles: Vec<String>,
    pub emotions: Vec<String>,
}

impl LabelVocab {
    pub fn style_id(&self, name: &str) -> Result<usize> {
        self.styles.iter().position(|s| s == name).ok_or_else(|| Error::Config(format!("unknown style {name:?}")))
    }

    pub fn emotion_id(&self, name: &str) -> Result<usize> {
        self.emotions.iter().position(|s| s == name).ok_or_else(|| Error::Config(format!("unknown emotion {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub frames: usize,
    pub fps: f64,
    pub channels: usize,
    /// Token 0 is silence.
    pub n_phonemes: usize,
    pub d_audio: usize,
    pub audio_noise: f64,
    /// Inclusive range of phoneme segment lengths in frames.
    pub segment_len: (usize, usize),
    pub p_silence: f64,
    pub lip_channels: Vec<usize>,
    /// Upper bound of a phoneme's lip target before the style gain.
    pub lip_max: f64,
    pub style_names: Vec<String>,
    pub style_gains: Vec<f64>,
    pub emotion_names: Vec<String>,
    pub emotion_aus: Vec<Vec<String>>,
    /// Offset at full intensity.
    pub offset_scale: f64,
    pub intensity_levels: Vec<u32>,
    pub max_level: u32,
    /// Events per clip are drawn uniformly from `0..=max_events`.
    pub max_events: usize,
    /// Probability that an event uses an AU of the clip's emotion.
    pub p_emotion_au: f64,
    pub event_width: (usize, usize),
    pub event_peak: f64,
    pub noise_std: f64,
    pub val_fraction: f64,
    pub binarize: BinarizeConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            seed: 0,
            n_clips: 500,
            frames: 50,
            fps: 25.0,
            channels: 51,
            n_phonemes: 12,
            d_audio: 16,
            audio_noise: 0.1,
            segment_len: (2, 5),
            p_silence: 0.15,
            // jawOpen, mouthClose, mouthFunnel, mouthPucker, mouthLowerDown L/R
            lip_channels: vec![17, 18, 19, 20, 37, 38],
            lip_max: 0.6,
            style_names: s(&["steady", "lively", "subtle", "broad"]),
            style_gains: vec![1.0, 1.15, 0.8, 1.3],
            emotion_names: s(&["angry", "fear", "happy", "sad", "surprised"]),
            emotion_aus: vec![
                s(&["AU04", "AU07", "AU09"]),
                s(&["AU01", "AU04", "AU20"]),
                s(&["AU06", "AU12"]),
                s(&["AU01", "AU15", "AU17"]),
                s(&["AU02", "AU05"]),
            ],
            offset_scale: 0.45,
            intensity_levels: vec![1, 2, 3],
            max_level: 3,
            max_events: 2,
            p_emotion_au: 0.8,
            event_width: (8, 14),
            event_peak: 0.8,
            noise_std: 0.01,
            val_fraction: 0.1,
            binarize: BinarizeConfig::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn labels(&self) -> LabelVocab {
        LabelVocab { styles: self.style_names.clone(), emotions: self.emotion_names.clone() }
    }

    pub fn validate(&self, vocab: &AuVocabulary) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 {
            return bad("clips need at least one frame".into());
        }
        if self.channels != vocab.num_channels {
            return bad(format!("{} channels, vocabulary maps {}", self.channels, vocab.num_channels));
        }
        if self.n_phonemes < 2 || self.d_audio == 0 {
            return bad("need a silence token, one phoneme and d_audio > 0".into());
        }
        let (lo, hi) = self.segment_len;
        if lo == 0 || lo > hi {
            return bad(format!("segment length range {lo}..={hi}"));
        }
        let (wlo, whi) = self.event_width;
        if wlo == 0 || wlo > whi || whi > self.frames {
            return bad(format!("event width range {wlo}..={whi} for {} frames", self.frames));
        }
        if self.lip_channels.iter().any(|&c| c >= self.channels) {
            return bad("lip channel out of range".into());
        }
        if self.style_names.is_empty() || self.style_names.len() != self.style_gains.len() {
            return bad("style names and gains must match".into());
        }
        if self.emotion_names.len() < 2 || self.emotion_names.len() != self.emotion_aus.len() {
            return bad("need at least two emotions, each with an AU set".into());
        }
        let lips = self.lip_channels.iter().copied().collect::<std::collections::BTreeSet<_>>();
        for aus in &self.emotion_aus {
            for id in aus {
                let j = vocab.require(id)?;
                if vocab.channels(j).iter().any(|c| lips.contains(c)) {
                    return bad(format!("emotion AU {id} overlaps a lip channel"));
                }
            }
        }
        if self.intensity_levels.is_empty() || self.intensity_levels.iter().any(|&l| l > self.max_level) || self.max_level == 0 {
            return bad("intensity levels must lie in 0..=max_level".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("validation fraction {}", self.val_fraction));
        }
        for p in [self.p_silence, self.p_emotion_au] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p}"));
            }
        }
        self.binarize.validate()
    }

    pub fn n_val(&self) -> usize {
        ((self.n_clips as f64) * self.val_fraction).round() as usize
    }

    /// AUs an event may use: everything not touching a lip channel.
    pub fn event_aus(&self, vocab: &AuVocabulary) -> Vec<usize> {
        (0..vocab.len()).filter(|&j| vocab.channels(j).iter().all(|c| !self.lip_channels.contains(c))).collect()
    }
}

/// Lookup tables shared by every clip of a corpus.
#[derive(Debug, Clone)]
pub struct CorpusTables {
    /// `n_phonemes x |lip_channels|`; row 0 (silence) is zero.
    pub visemes: Vec<Vec<f64>>,
    /// `n_phonemes x d_audio`.
    pub audio_codes: Vec<Vec<f64>>,
}

impl CorpusTables {
    pub fn new(spec: &SyntheticSpec) -> Self {
        let mut rng = seeds::stream(spec.seed, "tables", 0);
        let visemes = (0..spec.n_phonemes)
            .map(|p| {
                spec.lip_channels.iter().map(|_| if p == 0 { 0.0 } else { rng.random_range(0.0..spec.lip_max) }).collect()
            })
            .collect();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let audio_codes = (0..spec.n_phonemes).map(|_| (0..spec.d_audio).map(|_| normal.sample(&mut rng)).collect()).collect();
        Self { visemes, audio_codes }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord<T: Scalar> {
    pub index: usize,
    pub seed: u64,
    pub tokens: Vec<usize>,
    pub audio: AudioFeatures<T>,
    pub coarse: CoarseCondition,
    pub motion: MotionSequence<T>,
    /// Injected AU bumps, exact intervals.
    pub events: FineCondition,
    /// What binarizing the clean motion recovers; used for fine-control training.
    pub fine: FineCondition,
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn to_tensor<T: Scalar>(rows: usize, cols: usize, v: &[f64]) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |i, j| T::lit(v[i * cols + j]))
}

/// Deterministic clip `index` of the corpus described by `spec`.
pub fn generate_clip<T: Scalar>(
    spec: &SyntheticSpec,
    tables: &CorpusTables,
    vocab: &AuVocabulary,
    index: usize,
) -> Result<ClipRecord<T>> {
    let seed = seeds::sub_seed(spec.seed, "clip", index as u64);
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let (nt, nd) = (spec.frames, spec.channels);

    let style_id = rng.random_range(0..spec.style_names.len());
    let emotion_id = rng.random_range(0..spec.emotion_names.len());
    let level = spec.intensity_levels[rng.random_range(0..spec.intensity_levels.len())];
    let intensity = normalize_intensity(level, spec.max_level)?;

    let mut tokens = Vec::with_capacity(nt);
    while tokens.len() < nt {
        let len = rng.random_range(spec.segment_len.0..=spec.segment_len.1);
        let tok = if rng.random::<f64>() < spec.p_silence { 0 } else { rng.random_range(1..spec.n_phonemes) };
        tokens.extend(std::iter::repeat_n(tok, len));
    }
    tokens.truncate(nt);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut audio = vec![0.0; nt * spec.d_audio];
    for t in 0..nt {
        for k in 0..spec.d_audio {
            audio[t * spec.d_audio + k] = round_f32(tables.audio_codes[tokens[t]][k] + spec.audio_noise * normal.sample(&mut rng));
        }
    }

    let mut m = vec![0.0; nt * nd];
    let gain = spec.style_gains[style_id];
    for t in 0..nt {
        let prev = tokens[t.saturating_sub(1)];
        let next = tokens[(t + 1).min(nt - 1)];
        for (l, &c) in spec.lip_channels.iter().enumerate() {
            let v = 0.25 * tables.visemes[prev][l] + 0.5 * tables.visemes[tokens[t]][l] + 0.25 * tables.visemes[next][l];
            m[t * nd + c] = gain * v;
        }
    }
    let emotion_aus: Vec<usize> = spec.emotion_aus[emotion_id].iter().map(|id| vocab.require(id)).collect::<Result<_>>()?;
    let offset = spec.offset_scale * intensity;
    for c in vocab.channel_union(&emotion_aus) {
        for t in 0..nt {
            m[t * nd + c] += offset;
        }
    }

    let event_pool = spec.event_aus(vocab);
    let others: Vec<usize> = event_pool.iter().copied().filter(|j| !emotion_aus.contains(j)).collect();
    let n_events = rng.random_range(0..=spec.max_events);
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let from_emotion = rng.random::<f64>() < spec.p_emotion_au || others.is_empty();
        let pool = if from_emotion { &emotion_aus } else { &others };
        let j = pool[rng.random_range(0..pool.len())];
        let width = rng.random_range(spec.event_width.0..=spec.event_width.1);
        let start = rng.random_range(0..=nt - width);
        for t in start..start + width {
            let phase = std::f64::consts::PI * ((t - start) as f64 + 0.5) / width as f64;
            let bump = spec.event_peak * phase.sin().powi(2);
            for &c in vocab.channels(j) {
                m[t * nd + c] += bump;
            }
        }
        events.push(Triplet::new([vocab.entry(j).id.clone()], start, start + width));
    }
    events.sort();

    for x in &mut m {
        *x = round_f32((*x + spec.noise_std * normal.sample(&mut rng)).clamp(0.0, 1.0));
    }

    let motion = MotionSequence::new(to_tensor(nt, nd, &m), spec.fps)?;
    let mut brng = seeds::stream(spec.seed, "binarize", index as u64);
    let fine = binarize(&motion, vocab, &spec.binarize, &mut brng)?;
    Ok(ClipRecord {
        index,
        seed,
        tokens,
        audio: AudioFeatures::new(to_tensor(nt, spec.d_audio, &audio))?,
        coarse: CoarseCondition { style_id, emotion_id, intensity },
        motion,
        events: FineCondition::new(events),
        fine,
    })
}

pub fn generate_clips<T: Scalar>(spec: &SyntheticSpec, vocab: &AuVocabulary) -> Result<Vec<ClipRecord<T>>> {
    spec.validate(vocab)?;
    let tables = CorpusTables::new(spec);
    (0..spec.n_clips).map(|i| generate_clip(spec, &tables, vocab, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec { n_clips: 12, seed: 5, ..Default::default() }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let v = AuVocabulary::default_arkit();
        let a = generate_clips::<f64>(&small(), &v).unwrap();
        let b = generate_clips::<f64>(&small(), &v).unwrap();
        assert_eq!(a, b);
        let c = generate_clips::<f64>(&SyntheticSpec { seed: 6, ..small() }, &v).unwrap();
        assert_ne!(a[0].motion, c[0].motion);
    }

    #[test]
    fn clips_are_independent_of_corpus_size() {
        let v = AuVocabulary::default_arkit();
        let a = generate_clips::<f64>(&small(), &v).unwrap();
        let b = generate_clips::<f64>(&SyntheticSpec { n_clips: 3, ..small() }, &v).unwrap();
        assert_eq!(&a[..3], &b[..]);
    }

    #[test]
    fn values_are_clean_and_f32_exact() {
        let v = AuVocabulary::default_arkit();
        for clip in generate_clips::<f64>(&small(), &v).unwrap() {
            for &x in clip.motion.frames().data() {
                assert!((0.0..=1.0).contains(&x));
                assert_eq!(x, x as f32 as f64);
            }
            assert!(clip.events.validate(clip.motion.len()).is_ok());
            assert!(clip.fine.validate(clip.motion.len()).is_ok());
        }
    }

    #[test]
    fn zero_intensity_leaves_expression_channels_at_noise() {
        let spec = SyntheticSpec { intensity_levels: vec![0], max_events: 0, n_clips: 20, ..small() };
        let v = AuVocabulary::default_arkit();
        for clip in generate_clips::<f64>(&spec, &v).unwrap() {
            let aus: Vec<usize> = spec.emotion_aus[clip.coarse.emotion_id].iter().map(|a| v.require(a).unwrap()).collect();
            let chans = v.channel_union(&aus);
            let mut sum = 0.0;
            for t in 0..spec.frames {
                for &c in &chans {
                    sum += clip.motion.frames().get(t, c);
                }
            }
            let mean = sum / (spec.frames * chans.len()) as f64;
            assert!(mean.abs() < spec.noise_std, "mean offset {mean}");
        }
    }

    #[test]
    fn emotion_offsets_never_touch_lips() {
        let spec = SyntheticSpec::default();
        let v = AuVocabulary::default_arkit();
        spec.validate(&v).unwrap();
        let bad = SyntheticSpec { emotion_aus: vec![vec!["AU26".into()]; 5], ..SyntheticSpec::default() };
        assert!(bad.validate(&v).is_err());
    }

    #[test]
    fn lips_follow_tokens() {
        let spec = SyntheticSpec { audio_noise: 0.0, noise_std: 0.0, ..small() };
        let v = AuVocabulary::default_arkit();
        let tables = CorpusTables::new(&spec);
        let clip = generate_clip::<f64>(&spec, &tables, &v, 0).unwrap();
        for t in 1..spec.frames - 1 {
            let (p, c, n) = (clip.tokens[t - 1], clip.tokens[t], clip.tokens[t + 1]);
            let gain = spec.style_gains[clip.coarse.style_id];
            let want = gain * (0.25 * tables.visemes[p][0] + 0.5 * tables.visemes[c][0] + 0.25 * tables.visemes[n][0]);
            let got = clip.motion.frames().get(t, spec.lip_channels[0]);
            assert!((got - round_f32(want.clamp(0.0, 1.0))).abs() < 1e-12);
            let code = &tables.audio_codes[c];
            assert!((clip.audio.features().get(t, 0) - round_f32(code[0])).abs() < 1e-12);
        }
    }
}
