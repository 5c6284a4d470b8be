use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::coretypes::vocab::AuVocabulary;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Default frame rate of motion clips.
pub const DEFAULT_FPS: f64 = 25.0;

/// `T x D` blendshape coefficients.
///
/// Clean data sits in `[0, 1]`; intermediate diffusion states are unbounded
/// but always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence<T: Scalar> {
    frames: Tensor<T>,
    fps: f64,
}

impl<T: Scalar> MotionSequence<T> {
    pub fn new(frames: Tensor<T>, fps: f64) -> Result<Self> {
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Shape(format!("motion needs at least one frame and channel, got {:?}", frames.shape())));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Range(format!("fps {fps}")));
        }
        if let Some(i) = frames.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "motion entry ({}, {})",
                i / frames.cols(),
                i % frames.cols()
            )));
        }
        Ok(Self { frames, fps })
    }

    pub fn at_default_fps(frames: Tensor<T>) -> Result<Self> {
        Self::new(frames, DEFAULT_FPS)
    }

    pub fn frames(&self) -> &Tensor<T> {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor<T> {
        self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }
}

/// Frame-aligned acoustic features, `T x d_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures<T: Scalar> {
    features: Tensor<T>,
}

impl<T: Scalar> AudioFeatures<T> {
    pub fn new(features: Tensor<T>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Shape("audio features need at least one frame".into()));
        }
        if !features.all_finite() {
            return Err(Error::NonFinite("audio features".into()));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn expect_frames(&self, t: usize) -> Result<()> {
        if self.len() != t {
            return Err(Error::Shape(format!("audio has {} frames, motion has {t}", self.len())));
        }
        Ok(())
    }
}

/// Sequence-constant control: talking style, emotion and its intensity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseCondition {
    pub style_id: usize,
    pub emotion_id: usize,
    pub intensity: f64,
}

impl CoarseCondition {
    pub fn validate(&self, n_styles: usize, n_emotions: usize) -> Result<()> {
        if self.style_id >= n_styles {
            return Err(Error::Range(format!("style id {} of {n_styles}", self.style_id)));
        }
        if self.emotion_id >= n_emotions {
            return Err(Error::Range(format!("emotion id {} of {n_emotions}", self.emotion_id)));
        }
        if !(self.intensity >= 0.0 && self.intensity.is_finite()) {
            return Err(Error::Range(format!("intensity {}", self.intensity)));
        }
        Ok(())
    }
}

/// Maps a raw intensity level in `0..=max_level` onto `[0, 1]`.
pub fn normalize_intensity(level: u32, max_level: u32) -> Result<f64> {
    if max_level == 0 || level > max_level {
        return Err(Error::Range(format!("intensity level {level} of {max_level}")));
    }
    Ok(f64::from(level) / f64::from(max_level))
}

/// One fine-grained control request: these AUs active over `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub aus: BTreeSet<String>,
    pub start: usize,
    pub end: usize,
}

impl Triplet {
    pub fn new<S: Into<String>>(aus: impl IntoIterator<Item = S>, start: usize, end: usize) -> Self {
        Self { aus: aus.into_iter().map(Into::into).collect(), start, end }
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        self.start <= t && t < self.end
    }
}

/// Ordered list of triplets; empty means "no fine control".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FineCondition {
    pub triplets: Vec<Triplet>,
}

impl FineCondition {
    pub fn new(triplets: Vec<Triplet>) -> Self {
        Self { triplets }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    /// Checks `0 <= start < end <= frames` and non-empty AU sets.
    pub fn validate(&self, frames: usize) -> Result<()> {
        for (i, tr) in self.triplets.iter().enumerate() {
            if tr.aus.is_empty() {
                return Err(Error::Range(format!("triplet {i} has no AUs")));
            }
            if tr.start >= tr.end || tr.end > frames {
                return Err(Error::Range(format!(
                    "triplet {i} spans [{}, {}) in a {frames}-frame clip",
                    tr.start, tr.end
                )));
            }
        }
        Ok(())
    }

    /// Vocabulary indices of each triplet's AUs.
    pub fn resolve(&self, vocab: &AuVocabulary) -> Result<Vec<Vec<usize>>> {
        self.triplets
            .iter()
            .map(|tr| tr.aus.iter().map(|a| vocab.require(a)).collect())
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fine condition serializes")
    }
}
