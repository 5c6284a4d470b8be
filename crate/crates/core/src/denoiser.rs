//! The x0-predicting generator: stacked transformer blocks conditioned on
//! audio, a fused coarse vector and the diffusion step, plus the insertable
//! fine-condition adapter.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{CoarseEncoder, CoarseEncoderDims};
use crate::diffusion::NoiseSchedule;
use crate::coretypes::{build_align_mask, build_fine_grid, AudioFeatures, AuVocabulary, CoarseCondition, FineCondition, MotionSequence};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, Record};
use crate::numerics::layers::LAYER_NORM_EPS;
use crate::numerics::{
    sinusoidal_table, AdaLn, FeedForward, Film, Graph, Init, Linear, MultiHeadAttention, ParamId, ParamStore, Tensor,
    Var, ZeroProj,
};
use crate::scalar::Scalar;

/// Name prefix of every stage-1 parameter.
pub const BASE_PREFIX: &str = "base.";
/// Name prefix of every adapter parameter.
pub const ADAPTER_PREFIX: &str = "adapter.";

/// Where the adapter output joins the residual stream inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTap {
    #[default]
    AfterFilmSelfAttention,
    AfterFeedForward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub profile: String,
    pub d_motion: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub ff_hidden: usize,
    pub d_audio: usize,
    pub vocab_size: usize,
    pub n_styles: usize,
    pub n_emotions: usize,
    pub d_style: usize,
    pub d_emotion: usize,
    pub d_intensity: usize,
    pub d_cond: usize,
    pub align_half_width: usize,
    pub diffusion_steps: usize,
    #[serde(default)]
    pub adapter_tap: AdapterTap,
    /// Data scale of the noise-level skip around the network. With `None`
    /// the network output is the prediction itself.
    #[serde(default)]
    pub sigma_data: Option<f64>,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            profile: "desk".into(),
            d_motion: 51,
            d_model: 64,
            n_heads: 4,
            n_blocks: 2,
            ff_hidden: 128,
            d_audio: 16,
            vocab_size: 16,
            n_styles: 4,
            n_emotions: 5,
            d_style: 16,
            d_emotion: 16,
            d_intensity: 16,
            d_cond: 64,
            align_half_width: 1,
            diffusion_steps: 100,
            adapter_tap: AdapterTap::default(),
            sigma_data: Some(0.1),
        }
    }

    pub fn paper() -> Self {
        Self {
            profile: "paper".into(),
            d_model: 512,
            n_heads: 8,
            n_blocks: 8,
            ff_hidden: 2048,
            d_style: 128,
            d_emotion: 128,
            d_intensity: 128,
            d_cond: 512,
            diffusion_steps: 1000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_motion", self.d_motion),
            ("d_model", self.d_model),
            ("n_blocks", self.n_blocks),
            ("ff_hidden", self.ff_hidden),
            ("d_audio", self.d_audio),
            ("vocab_size", self.vocab_size),
            ("d_cond", self.d_cond),
            ("diffusion_steps", self.diffusion_steps),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if let Some(sd) = self.sigma_data {
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::Config(format!("sigma_data {sd} must be positive")));
            }
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }

    pub fn coarse_dims(&self) -> CoarseEncoderDims {
        CoarseEncoderDims {
            n_styles: self.n_styles,
            n_emotions: self.n_emotions,
            d_style: self.d_style,
            d_emotion: self.d_emotion,
            d_intensity: self.d_intensity,
            d_cond: self.d_cond,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Conditions for one clip. `None` selects the learned null embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle<T: Scalar> {
    pub audio: Option<AudioFeatures<T>>,
    pub coarse: Option<CoarseCondition>,
    /// `T x |vocab|` multi-hot grid.
    pub fine: Option<Tensor<T>>,
}

impl<T: Scalar> ConditionBundle<T> {
    pub fn null() -> Self {
        Self { audio: None, coarse: None, fine: None }
    }

    pub fn new(audio: Option<AudioFeatures<T>>, coarse: Option<CoarseCondition>) -> Self {
        Self { audio, coarse, fine: None }
    }

    /// Attach a fine condition; an empty one means null.
    pub fn with_fine(mut self, fc: &FineCondition, vocab: &AuVocabulary, frames: usize) -> Result<Self> {
        self.fine = if fc.is_empty() { None } else { Some(build_fine_grid(fc, vocab, frames)?) };
        Ok(self)
    }

    pub fn without_fine(&self) -> Self {
        Self { fine: None, ..self.clone() }
    }
}

#[derive(Debug, Clone)]
struct Block {
    ada: AdaLn,
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    audio_film: Film,
    film_attn: MultiHeadAttention,
    film: Film,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct AdapterBlock {
    attn: MultiHeadAttention,
    film: Film,
    zero: ZeroProj,
}

#[derive(Debug, Clone)]
struct Adapter {
    fine_proj: Linear,
    null_fine: ParamId,
    blocks: Vec<AdapterBlock>,
}

#[derive(Debug, Clone)]
struct Base {
    input: Linear,
    time_in: Linear,
    time_out: Linear,
    coarse: CoarseEncoder,
    coarse_proj: Linear,
    null_coarse: ParamId,
    audio_proj: Linear,
    null_audio: ParamId,
    blocks: Vec<Block>,
    output: Linear,
}

/// Generator weights and structure.
#[derive(Debug, Clone)]
pub struct Generator<T: Scalar> {
    config: ModelConfig,
    store: ParamStore<T>,
    base: Base,
    adapter: Option<Adapter>,
}

/// Sinusoidal features of diffusion steps, one row per step.
pub fn timestep_features<T: Scalar>(taus: &[usize], d: usize) -> Tensor<T> {
    let pos: Vec<f64> = taus.iter().map(|&t| t as f64).collect();
    sinusoidal_table(&pos, d)
}

impl<T: Scalar> Generator<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut s = ParamStore::new();
        let d = c.d_model;
        let input = Linear::new(&mut s, "base.input", c.d_motion, d, Init::FanIn, rng)?;
        let time_in = Linear::new(&mut s, "base.time.in", d, d, Init::FanIn, rng)?;
        let time_out = Linear::new(&mut s, "base.time.out", d, d, Init::FanIn, rng)?;
        let coarse = CoarseEncoder::new(&mut s, "base.coarse", c.coarse_dims(), rng)?;
        let coarse_proj = Linear::new(&mut s, "base.coarse_proj", c.d_cond, d, Init::FanIn, rng)?;
        let null_coarse = s.add("base.null_coarse", Tensor::randn(1, c.d_cond, 1.0, rng))?;
        let audio_proj = Linear::new(&mut s, "base.audio_proj", c.d_audio, d, Init::FanIn, rng)?;
        let null_audio = s.add("base.null_audio", Tensor::randn(1, c.d_audio, 1.0, rng))?;
        let mut blocks = Vec::with_capacity(c.n_blocks);
        for i in 0..c.n_blocks {
            let p = format!("base.block{i}");
            blocks.push(Block {
                ada: AdaLn::new(&mut s, &format!("{p}.ada"), d, d, rng)?,
                self_attn: MultiHeadAttention::new(&mut s, &format!("{p}.self_attn"), d, d, c.n_heads, rng)?,
                cross_attn: MultiHeadAttention::new(&mut s, &format!("{p}.cross_attn"), d, d, c.n_heads, rng)?,
                audio_film: Film::new(&mut s, &format!("{p}.audio_film"), d, d, rng)?,
                film_attn: MultiHeadAttention::new(&mut s, &format!("{p}.film_attn"), d, d, c.n_heads, rng)?,
                film: Film::new(&mut s, &format!("{p}.film"), d, d, rng)?,
                ffn: FeedForward::new(&mut s, &format!("{p}.ffn"), d, c.ff_hidden, rng)?,
            });
        }
        let output = Linear::new(&mut s, "base.output", d, c.d_motion, Init::FanIn, rng)?;
        let base = Base {
            input,
            time_in,
            time_out,
            coarse,
            coarse_proj,
            null_coarse,
            audio_proj,
            null_audio,
            blocks,
            output,
        };
        Ok(Self { config, store: s, base, adapter: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn coarse_encoder(&self) -> &CoarseEncoder {
        &self.base.coarse
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// Allocate one adapter per block with a zero-initialized output
    /// projection, freeze every base parameter and make the adapter trainable.
    pub fn insert_adapter<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::State("adapter already present".into()));
        }
        let c = &self.config;
        let d = c.d_model;
        let s = &mut self.store;
        let fine_proj = Linear::new(s, "adapter.fine_proj", c.vocab_size, d, Init::FanIn, rng)?;
        let null_fine = s.add("adapter.null_fine", Tensor::randn(1, d, 1.0, rng))?;
        let mut blocks = Vec::with_capacity(c.n_blocks);
        for i in 0..c.n_blocks {
            let p = format!("adapter.block{i}");
            blocks.push(AdapterBlock {
                attn: MultiHeadAttention::new(s, &format!("{p}.attn"), d, d, c.n_heads, rng)?,
                film: Film::new(s, &format!("{p}.film"), d, d, rng)?,
                zero: ZeroProj::new(s, &format!("{p}.zero"), d, rng)?,
            });
        }
        s.set_trainable_prefix(BASE_PREFIX, false);
        s.set_trainable_prefix(ADAPTER_PREFIX, true);
        self.adapter = Some(Adapter { fine_proj, null_fine, blocks });
        Ok(())
    }

    /// Parameter ids of every adapter zero projection (weights and biases).
    pub fn zero_proj_params(&self) -> Vec<ParamId> {
        self.adapter
            .as_ref()
            .map(|a| a.blocks.iter().flat_map(|b| [b.zero.0.weight, b.zero.0.bias]).collect())
            .unwrap_or_default()
    }

    pub fn check_tau(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.config.diffusion_steps {
            return Err(Error::Range(format!("step {tau} outside [1, {}]", self.config.diffusion_steps)));
        }
        Ok(())
    }

    fn check_cond(&self, cond: &ConditionBundle<T>, frames: usize) -> Result<()> {
        if let Some(a) = &cond.audio {
            a.expect_frames(frames)?;
            if a.dim() != self.config.d_audio {
                return Err(Error::Shape(format!("audio width {} but model expects {}", a.dim(), self.config.d_audio)));
            }
        }
        if let Some(c) = &cond.coarse {
            self.base.coarse.check(c)?;
        }
        if let Some(f) = &cond.fine {
            f.expect_shape([frames, self.config.vocab_size], "fine grid")?;
        }
        Ok(())
    }

    /// Rows from per-element tensors, with absent elements replaced by a
    /// single learned null row repeated `per` times.
    fn rows_or_null<'a>(
        g: &mut Graph<'a, T>,
        parts: &[Option<&Tensor<T>>],
        present: Option<Var>,
        null: Var,
        per: usize,
    ) -> Result<Var> {
        let k = parts.iter().filter(|p| p.is_some()).count();
        if k == parts.len() {
            return present.ok_or_else(|| Error::State("missing stacked rows".into()));
        }
        let (table, null_row) = match present {
            Some(p) => (g.concat_rows(&[p, null])?, k * per),
            None => (null, 0),
        };
        let mut idx = Vec::with_capacity(parts.len() * per);
        let mut next = 0;
        for p in parts {
            if p.is_some() {
                idx.extend(next..next + per);
                next += per;
            } else {
                idx.extend(std::iter::repeat_n(null_row, per));
            }
        }
        g.select_rows(table, &idx)
    }

    fn stack_input<'a>(g: &mut Graph<'a, T>, parts: &[Option<&Tensor<T>>]) -> Result<Option<Var>> {
        let present: Vec<&Tensor<T>> = parts.iter().flatten().copied().collect();
        if present.is_empty() {
            return Ok(None);
        }
        Ok(Some(g.input(Tensor::vstack(&present)?)))
    }

    /// Batched x0 prediction. `noisy` stacks `conds.len()` clips of equal
    /// length; `taus[b]` is the diffusion step of clip `b`.
    pub fn forward<'a>(
        &self,
        g: &mut Graph<'a, T>,
        noisy: Var,
        taus: &[usize],
        conds: &[ConditionBundle<T>],
    ) -> Result<Var> {
        let c = &self.config;
        let batch = conds.len();
        if batch == 0 || taus.len() != batch {
            return Err(Error::Shape(format!("{} steps for {batch} conditions", taus.len())));
        }
        let [n, dm] = g.shape(noisy);
        if dm != c.d_motion || n % batch != 0 || n == 0 {
            return Err(Error::Shape(format!("noisy input {n}x{dm} for {batch} clips of width {}", c.d_motion)));
        }
        let frames = n / batch;
        for &t in taus {
            self.check_tau(t)?;
        }
        for cond in conds {
            self.check_cond(cond, frames)?;
        }
        let d = c.d_model;

        let pos_one: Tensor<T> = sinusoidal_table(&(0..frames).map(|t| t as f64).collect::<Vec<_>>(), d);
        let pos = Tensor::vstack(&vec![&pos_one; batch])?;
        let pre = self.preconditioning(taus, frames)?;
        let scaled = match &pre {
            Some((c_in, _, _)) => {
                let c_in = g.input(c_in.clone());
                g.mul(noisy, c_in)?
            }
            None => noisy,
        };
        let x = self.base.input.forward(g, scaled)?;
        let pos = g.input(pos);
        let mut h = g.add(x, pos)?;

        let tf = g.input(timestep_features(taus, d));
        let t = self.base.time_in.forward(g, tf)?;
        let t = g.silu(t);
        let t_emb = self.base.time_out.forward(g, t)?;

        let coarse: Vec<CoarseCondition> = conds.iter().filter_map(|b| b.coarse).collect();
        let cf = if coarse.is_empty() { None } else { Some(self.base.coarse.forward(g, &coarse)?) };
        let dummy = Tensor::zeros(0, 0);
        let coarse_parts: Vec<Option<&Tensor<T>>> = conds.iter().map(|b| b.coarse.map(|_| &dummy)).collect();
        let null_coarse = g.param(self.base.null_coarse);
        let cf = Self::rows_or_null(g, &coarse_parts, cf, null_coarse, 1)?;
        let ce = self.base.coarse_proj.forward(g, cf)?;
        let pooled = g.add(t_emb, ce)?;
        let pooled = g.repeat_rows(pooled, frames);

        let audio_parts: Vec<Option<&Tensor<T>>> = conds.iter().map(|b| b.audio.as_ref().map(|a| a.features())).collect();
        let audio = Self::stack_input(g, &audio_parts)?;
        let null_audio = g.param(self.base.null_audio);
        let audio = Self::rows_or_null(g, &audio_parts, audio, null_audio, frames)?;
        let audio = self.base.audio_proj.forward(g, audio)?;

        let fine = match &self.adapter {
            Some(ad) => {
                let parts: Vec<Option<&Tensor<T>>> = conds.iter().map(|b| b.fine.as_ref()).collect();
                let stacked = match Self::stack_input(g, &parts)? {
                    Some(v) => Some(ad.fine_proj.forward(g, v)?),
                    None => None,
                };
                let null_fine = g.param(ad.null_fine);
                Some(Self::rows_or_null(g, &parts, stacked, null_fine, frames)?)
            }
            None => None,
        };

        let align: Tensor<T> = build_align_mask(frames, c.align_half_width);
        for (i, blk) in self.base.blocks.iter().enumerate() {
            h = blk.ada.forward(g, h, pooled, |g, z| blk.self_attn.forward(g, z, z, None, batch))?;
            let nrm = g.layer_norm(h, LAYER_NORM_EPS);
            let a = blk.cross_attn.forward(g, nrm, audio, Some(&align), batch)?;
            let a = blk.audio_film.forward(g, a, audio)?;
            h = g.add(h, a)?;
            let nrm = g.layer_norm(h, LAYER_NORM_EPS);
            let s = blk.film_attn.forward(g, nrm, nrm, None, batch)?;
            let s = blk.film.forward(g, s, pooled)?;
            h = g.add(h, s)?;
            if c.adapter_tap == AdapterTap::AfterFilmSelfAttention {
                h = self.adapter_step(g, h, fine, i, batch)?;
            }
            let nrm = g.layer_norm(h, LAYER_NORM_EPS);
            let f = blk.ffn.forward(g, nrm)?;
            h = g.add(h, f)?;
            if c.adapter_tap == AdapterTap::AfterFeedForward {
                h = self.adapter_step(g, h, fine, i, batch)?;
            }
        }
        let nrm = g.layer_norm(h, LAYER_NORM_EPS);
        let out = self.base.output.forward(g, nrm)?;
        match pre {
            Some((_, c_skip, c_out)) => {
                let c_skip = g.input(c_skip);
                let c_out = g.input(c_out);
                let skip = g.mul(noisy, c_skip)?;
                let out = g.mul(out, c_out)?;
                g.add(skip, out)
            }
            None => Ok(out),
        }
    }

    /// Per-row `(c_in, c_skip, c_out)` columns: the input is scaled to unit
    /// variance and the output is the linear estimate of the clean signal
    /// from `x_tau` plus a residual scaled by that estimate's error.
    fn preconditioning(&self, taus: &[usize], frames: usize) -> Result<Option<(Tensor<T>, Tensor<T>, Tensor<T>)>> {
        let Some(sd) = self.config.sigma_data else {
            return Ok(None);
        };
        let schedule = NoiseSchedule::cosine(self.config.diffusion_steps)?;
        let n = taus.len() * frames;
        let (mut c_in, mut c_skip, mut c_out) = (Tensor::zeros(n, 1), Tensor::zeros(n, 1), Tensor::zeros(n, 1));
        for (b, &tau) in taus.iter().enumerate() {
            let ab = schedule.alpha_bar(tau);
            let (s, var_n) = (ab.sqrt(), 1.0 - ab);
            let v = ab * sd * sd + var_n;
            for r in b * frames..(b + 1) * frames {
                c_in.set(r, 0, T::lit(1.0 / v.sqrt()));
                c_skip.set(r, 0, T::lit(s * sd * sd / v));
                c_out.set(r, 0, T::lit(sd * var_n.sqrt() / v.sqrt()));
            }
        }
        Ok(Some((c_in, c_skip, c_out)))
    }

    /// `h + zero_proj(film(self_attn(LN(h) + fine), fine))`.
    fn adapter_step<'a>(&self, g: &mut Graph<'a, T>, h: Var, fine: Option<Var>, block: usize, batch: usize) -> Result<Var> {
        let (Some(ad), Some(fine)) = (&self.adapter, fine) else {
            return Ok(h);
        };
        let ab = &ad.blocks[block];
        let nrm = g.layer_norm(h, LAYER_NORM_EPS);
        let z = g.add(nrm, fine)?;
        let a = ab.attn.forward(g, z, z, None, batch)?;
        let a = ab.film.forward(g, a, fine)?;
        let o = ab.zero.forward(g, a)?;
        g.add(h, o)
    }

    pub fn predict_batch(&self, noisy: &Tensor<T>, taus: &[usize], conds: &[ConditionBundle<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let x = g.input_ref(noisy);
        let out = self.forward(&mut g, x, taus, conds)?;
        Ok(g.value(out).clone())
    }

    pub fn predict_x0(&self, noisy: &MotionSequence<T>, tau: usize, cond: &ConditionBundle<T>) -> Result<MotionSequence<T>> {
        let out = self.predict_batch(noisy.frames(), &[tau], std::slice::from_ref(cond))?;
        MotionSequence::new(out, noisy.fps())
    }

    /// `MLP(sinusoid(tau))`, `1 x d_model`.
    pub fn encode_timestep(&self, tau: usize) -> Result<Tensor<T>> {
        self.check_tau(tau)?;
        let mut g = Graph::new(&self.store);
        let tf = g.input(timestep_features(&[tau], self.config.d_model));
        let t = self.base.time_in.forward(&mut g, tf)?;
        let t = g.silu(t);
        let t = self.base.time_out.forward(&mut g, t)?;
        Ok(g.value(t).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Rebuild from checkpoint records. Adapter records imply an adapter.
    pub fn from_records(config: ModelConfig, records: &[Record]) -> Result<Self> {
        // Values are overwritten by the records; the seed only fixes allocation.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut g = Self::new(config, &mut rng)?;
        if records.iter().any(|r| r.name.starts_with(ADAPTER_PREFIX)) {
            g.insert_adapter(&mut rng)?;
        }
        checkpoint::load_into(&mut g.store, records, true)?;
        Ok(g)
    }

    pub fn load(config: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_records(config, &checkpoint::read_records(path)?)
    }

    /// Same structure over another scalar type.
    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator { config: self.config.clone(), store: self.store.cast(), base: self.base.clone(), adapter: self.adapter.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coretypes::Triplet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            profile: "test".into(),
            d_motion: 6,
            d_model: 8,
            n_heads: 2,
            n_blocks: 2,
            ff_hidden: 12,
            d_audio: 3,
            vocab_size: 16,
            n_styles: 2,
            n_emotions: 3,
            d_style: 4,
            d_emotion: 4,
            d_intensity: 4,
            d_cond: 8,
            align_half_width: 1,
            diffusion_steps: 10,
            adapter_tap: AdapterTap::default(),
            sigma_data: Some(0.1),
        }
    }

    fn bundle(rng: &mut ChaCha8Rng, frames: usize) -> ConditionBundle<f64> {
        ConditionBundle::new(
            Some(AudioFeatures::new(Tensor::randn(frames, 3, 1.0, rng)).unwrap()),
            Some(CoarseCondition { style_id: 1, emotion_id: 2, intensity: 0.5 }),
        )
    }

    fn with_random_fine(b: ConditionBundle<f64>, rng: &mut ChaCha8Rng, frames: usize) -> ConditionBundle<f64> {
        let fine = Tensor::from_fn(frames, 16, |_, _| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 });
        ConditionBundle { fine: Some(fine), ..b }
    }

    #[test]
    fn shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        let noisy = MotionSequence::at_default_fps(Tensor::randn(7, 6, 1.0, &mut rng)).unwrap();
        let cond = bundle(&mut rng, 7);
        let a = gen.predict_x0(&noisy, 4, &cond).unwrap();
        let b = gen.predict_x0(&noisy, 4, &cond).unwrap();
        assert_eq!(a.frames().shape(), [7, 6]);
        assert_eq!(a, b);
    }

    #[test]
    fn step_and_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        let noisy = MotionSequence::at_default_fps(Tensor::randn(5, 6, 1.0, &mut rng)).unwrap();
        let cond = bundle(&mut rng, 5);
        assert!(matches!(gen.predict_x0(&noisy, 0, &cond), Err(Error::Range(_))));
        assert!(matches!(gen.predict_x0(&noisy, 11, &cond), Err(Error::Range(_))));
        let short = bundle(&mut rng, 4);
        assert!(matches!(gen.predict_x0(&noisy, 3, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn untrained_adapter_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        let noisy = MotionSequence::at_default_fps(Tensor::randn(9, 6, 1.0, &mut rng)).unwrap();
        let cond = bundle(&mut rng, 9);
        let before = gen.predict_x0(&noisy, 5, &cond).unwrap();
        let base_sum = gen.store().checksum(BASE_PREFIX);
        gen.insert_adapter(&mut rng).unwrap();
        assert_eq!(gen.store().checksum(BASE_PREFIX), base_sum);
        let fine = with_random_fine(cond.clone(), &mut rng, 9);
        assert_eq!(gen.predict_x0(&noisy, 5, &fine).unwrap(), before);
        assert_eq!(gen.predict_x0(&noisy, 5, &cond).unwrap(), before);
        assert!(matches!(gen.insert_adapter(&mut rng), Err(Error::State(_))));
    }

    #[test]
    fn trainable_count_after_insertion_is_adapter_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        assert_eq!(gen.store().trainable_count(), gen.store().element_count());
        gen.insert_adapter(&mut rng).unwrap();
        let adapter: usize = gen
            .store()
            .iter()
            .filter(|(_, p)| p.name.starts_with(ADAPTER_PREFIX))
            .map(|(_, p)| p.tensor.len())
            .sum();
        assert!(adapter > 0);
        assert_eq!(gen.store().trainable_count(), adapter);
        assert!(gen.store().iter().all(|(_, p)| p.trainable == p.name.starts_with(ADAPTER_PREFIX)));
    }

    #[test]
    fn corrupted_zero_projection_breaks_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        let noisy = MotionSequence::at_default_fps(Tensor::randn(6, 6, 1.0, &mut rng)).unwrap();
        let cond = bundle(&mut rng, 6);
        let before = gen.predict_x0(&noisy, 2, &cond).unwrap();
        gen.insert_adapter(&mut rng).unwrap();
        let w = gen.zero_proj_params()[0];
        gen.store_mut().get_mut(w).tensor.data_mut()[0] = 0.5;
        let fine = with_random_fine(cond, &mut rng, 6);
        assert_ne!(gen.predict_x0(&noisy, 2, &fine).unwrap(), before);
    }

    #[test]
    fn batched_rows_match_single_clips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        gen.insert_adapter(&mut rng).unwrap();
        let w = gen.zero_proj_params()[0];
        gen.store_mut().get_mut(w).tensor.data_mut()[3] = 0.7;
        let frames = 5;
        let x = Tensor::randn(3 * frames, 6, 1.0, &mut rng);
        let full = bundle(&mut rng, frames);
        let conds = vec![
            ConditionBundle::null(),
            full.clone(),
            with_random_fine(ConditionBundle { coarse: None, ..full }, &mut rng, frames),
        ];
        let taus = [3, 7, 1];
        let batched = gen.predict_batch(&x, &taus, &conds).unwrap();
        for b in 0..3 {
            let single = gen.predict_batch(&x.slice_rows(b * frames, frames), &taus[b..b + 1], &conds[b..b + 1]).unwrap();
            let part = batched.slice_rows(b * frames, frames);
            for (p, s) in part.data().iter().zip(single.data()) {
                assert!((p - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn timestep_features_match_closed_form() {
        let d = 8;
        let f: Tensor<f64> = timestep_features(&[1, 7, 100], d);
        for (r, tau) in [1.0f64, 7.0, 100.0].iter().enumerate() {
            for i in 0..d / 2 {
                let w = (10_000f64).powf(-(2.0 * i as f64) / d as f64);
                assert!((f.get(r, 2 * i) - (tau * w).sin()).abs() < 1e-15);
                assert!((f.get(r, 2 * i + 1) - (tau * w).cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn timestep_embedding_is_deterministic_and_injective() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gen = Generator::<f64>::new(ModelConfig::desk(), &mut rng).unwrap();
        let all: Vec<Tensor<f64>> = (1..=100).map(|t| gen.encode_timestep(t).unwrap()).collect();
        assert_eq!(all[4], gen.encode_timestep(5).unwrap());
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "steps {} and {}", i + 1, j + 1);
            }
        }
        let feats: Tensor<f64> = timestep_features(&(1..=100).collect::<Vec<_>>(), 64);
        for i in 0..100 {
            for j in i + 1..100 {
                assert_ne!(feats.row(i), feats.row(j));
            }
        }
    }

    #[test]
    fn fine_condition_from_triplets() {
        let v = AuVocabulary::default_arkit();
        let b = ConditionBundle::<f64>::null().with_fine(&FineCondition::empty(), &v, 5).unwrap();
        assert!(b.fine.is_none());
        let fc = FineCondition::new(vec![Triplet::new(["AU01"], 1, 3)]);
        let b = ConditionBundle::<f64>::null().with_fine(&fc, &v, 5).unwrap();
        assert_eq!(b.fine.unwrap().sum(), 2.0);
    }

    #[test]
    fn checkpoint_round_trip_restores_adapter() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gen = Generator::<f64>::new(tiny_config(), &mut rng).unwrap();
        gen.insert_adapter(&mut rng).unwrap();
        let recs = checkpoint::store_records(gen.store());
        let back = Generator::<f64>::from_records(tiny_config(), &recs).unwrap();
        assert!(back.has_adapter());
        assert_eq!(back.store().checksum(""), gen.store().checksum(""));
        assert_eq!(back.store().trainable_count(), gen.store().trainable_count());
    }

    #[test]
    fn config_json_round_trip() {
        for c in [ModelConfig::desk(), ModelConfig::paper()] {
            assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
        }
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::desk() };
        assert!(bad.validate().is_err());
    }
}
