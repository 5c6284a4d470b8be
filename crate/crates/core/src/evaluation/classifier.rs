//! Transformer emotion classifier read out at a prepended class token.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coretypes::MotionSequence;
use crate::error::{Error, Result};
use crate::numerics::layers::LAYER_NORM_EPS;
use crate::numerics::{sinusoidal_table, FeedForward, Graph, Init, Linear, MultiHeadAttention, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::training::{optimizer_update, AdamState, AdamWConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub d_motion: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_hidden: usize,
    pub n_classes: usize,
}

impl ClassifierConfig {
    pub fn desk(n_classes: usize) -> Self {
        Self { d_motion: 51, d_model: 32, n_heads: 4, ff_hidden: 64, n_classes }
    }

    pub fn paper(n_classes: usize) -> Self {
        Self { d_motion: 51, d_model: 256, n_heads: 8, ff_hidden: 1024, n_classes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct EmotionClassifier<T: Scalar> {
    config: ClassifierConfig,
    store: ParamStore<T>,
    input: Linear,
    cls: ParamId,
    attn: MultiHeadAttention,
    ffn: FeedForward,
    head: Linear,
}

/// Prediction and the class-token feature used for diversity.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub emotion: usize,
    pub feature: Vec<f64>,
}

impl<T: Scalar> EmotionClassifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.n_classes < 2 {
            return Err(Error::Config("classifier needs at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.d_model;
        let input = Linear::new(&mut s, "cls.input", config.d_motion, d, Init::FanIn, &mut rng)?;
        let cls = s.add("cls.token", Tensor::randn(1, d, 0.02, &mut rng))?;
        let attn = MultiHeadAttention::new(&mut s, "cls.attn", d, d, config.n_heads, &mut rng)?;
        let ffn = FeedForward::new(&mut s, "cls.ffn", d, config.ff_hidden, &mut rng)?;
        let head = Linear::new(&mut s, "cls.head", d, config.n_classes, Init::FanIn, &mut rng)?;
        Ok(Self { config, store: s, input, cls, attn, ffn, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Returns `(features, logits)` for equally long clips.
    fn forward(&self, g: &mut Graph<'_, T>, clips: &[&MotionSequence<T>]) -> Result<(Var, Var)> {
        let b = clips.len();
        let t = clips.first().ok_or_else(|| Error::Config("no clips".into()))?.len();
        if clips.iter().any(|c| c.len() != t || c.channels() != self.config.d_motion) {
            return Err(Error::Shape("classifier batches need equal clip shapes".into()));
        }
        let x: Vec<&Tensor<T>> = clips.iter().map(|c| c.frames()).collect();
        let x = g.input(Tensor::vstack(&x)?);
        let h = self.input.forward(g, x)?;
        let pos = g.input(sinusoidal_table(&(1..=t).map(|p| p as f64).collect::<Vec<_>>(), self.config.d_model));
        let cls = g.param(self.cls);
        let mut parts = Vec::with_capacity(2 * b);
        for i in 0..b {
            let hi = g.slice_rows(h, i * t, t)?;
            parts.push(cls);
            parts.push(g.add(hi, pos)?);
        }
        let seq = g.concat_rows(&parts)?;
        let n = g.layer_norm(seq, LAYER_NORM_EPS);
        let a = self.attn.forward(g, n, n, None, b)?;
        let seq = g.add(seq, a)?;
        let n = g.layer_norm(seq, LAYER_NORM_EPS);
        let f = self.ffn.forward(g, n)?;
        let seq = g.add(seq, f)?;
        let rows: Vec<usize> = (0..b).map(|i| i * (t + 1)).collect();
        let feat = g.select_rows(seq, &rows)?;
        let feat = g.layer_norm(feat, LAYER_NORM_EPS);
        let logits = self.head.forward(g, feat)?;
        Ok((feat, logits))
    }

    /// Cross-entropy training with AdamW; returns the mean loss of each epoch.
    pub fn train(&mut self, clips: &[&MotionSequence<T>], labels: &[usize], cfg: &ClassifierTraining) -> Result<Vec<f64>> {
        if clips.len() != labels.len() || clips.is_empty() {
            return Err(Error::Shape(format!("{} clips for {} labels", clips.len(), labels.len())));
        }
        let opt = AdamWConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() };
        let mut state = AdamState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<&MotionSequence<T>> = chunk.iter().map(|&i| clips[i]).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let grads = {
                    let mut g = Graph::new(&self.store);
                    let (_, logits) = self.forward(&mut g, &batch)?;
                    let l = g.cross_entropy(logits, &ys)?;
                    total += g.value(l).get(0, 0).to_f64_lossy();
                    let l = g.scale(l, T::lit(1.0 / chunk.len() as f64));
                    g.backward(l)?.param_grads()
                };
                optimizer_update(&mut self.store, &grads, &mut state, &opt)?;
            }
            history.push(total / clips.len() as f64);
        }
        Ok(history)
    }

    pub fn classify_batch(&self, clips: &[&MotionSequence<T>]) -> Result<Vec<Classification>> {
        let mut out = Vec::with_capacity(clips.len());
        for chunk in clips.chunks(32) {
            let mut g = Graph::new(&self.store);
            let (feat, logits) = self.forward(&mut g, chunk)?;
            let (f, l) = (g.value(feat), g.value(logits));
            for i in 0..chunk.len() {
                let row = l.row(i);
                let emotion = (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best });
                out.push(Classification { emotion, feature: f.row(i).iter().map(|x| x.to_f64_lossy()).collect() });
            }
        }
        Ok(out)
    }

    pub fn classify(&self, motion: &MotionSequence<T>) -> Result<Classification> {
        Ok(self.classify_batch(&[motion])?.remove(0))
    }

    pub fn accuracy(&self, clips: &[&MotionSequence<T>], labels: &[usize]) -> Result<f64> {
        if clips.len() != labels.len() || clips.is_empty() {
            return Err(Error::Shape(format!("{} clips for {} labels", clips.len(), labels.len())));
        }
        let preds = self.classify_batch(clips)?;
        Ok(preds.iter().zip(labels).filter(|(p, &y)| p.emotion == y).count() as f64 / labels.len() as f64)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::numerics::checkpoint::save(&self.store, path)
    }

    pub fn load(config: ClassifierConfig, path: &std::path::Path) -> Result<Self> {
        let mut c = Self::new(config, 0)?;
        let records = crate::numerics::checkpoint::read_records(path)?;
        crate::numerics::checkpoint::load_into(&mut c.store, &records, true)?;
        Ok(c)
    }
}
