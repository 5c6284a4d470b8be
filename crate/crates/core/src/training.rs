//! Two-stage training: the base model on audio and coarse conditions with
//! condition dropout, then the fine adapter alone with the swap-label branch.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{apply_dropout, sparsify_fine, swap_emotion, DropoutPolicy};
use crate::coretypes::{build_ctrl_mask, AuVocabulary};
use crate::data::ClipRecord;
use crate::denoiser::{ConditionBundle, Generator};
use crate::diffusion::{forward_noise, simple_loss_var, swap_loss_var, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{self, Record};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Fine,
}

impl Stage {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Self::Base),
            2 => Ok(Self::Fine),
            _ => Err(Error::Config(format!("stage {n}; expected 1 or 2"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Base => 1,
            Self::Fine => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments per parameter, indexed by [`ParamId::index`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self { step: 0, moments: Vec::new() }
    }
}

const OPT_STEP: &str = "opt.step";

impl<T: Scalar> AdamState<T> {
    pub fn moments(&self, id: ParamId) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(id.index()).and_then(Option::as_ref)
    }

    pub fn to_records(&self, store: &ParamStore<T>) -> Vec<Record> {
        let mut out = vec![Record { name: OPT_STEP.into(), rows: 1, cols: 1, values: vec![self.step as f64] }];
        for (i, slot) in self.moments.iter().enumerate() {
            if let Some((m, v)) = slot {
                let name = &store.get(ParamId(i)).name;
                out.push(Record::from_tensor(&format!("opt.m.{name}"), m));
                out.push(Record::from_tensor(&format!("opt.v.{name}"), v));
            }
        }
        out
    }

    pub fn from_records(store: &ParamStore<T>, records: &[Record]) -> Result<Self> {
        let mut st = Self::default();
        for r in records {
            if r.name == OPT_STEP {
                st.step = r.values.first().copied().unwrap_or(0.0) as u64;
                continue;
            }
            let (kind, name) = if let Some(n) = r.name.strip_prefix("opt.m.") {
                (0, n)
            } else if let Some(n) = r.name.strip_prefix("opt.v.") {
                (1, n)
            } else {
                return Err(Error::Format(format!("unexpected optimizer record {}", r.name)));
            };
            let id = store.id(name).ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter {name}")))?;
            let t = r.to_tensor::<T>();
            t.expect_shape(store.get(id).tensor.shape(), &r.name)?;
            if st.moments.len() <= id.index() {
                st.moments.resize(id.index() + 1, None);
            }
            let slot = st.moments[id.index()].get_or_insert_with(|| (Tensor::zeros(t.rows(), t.cols()), Tensor::zeros(t.rows(), t.cols())));
            if kind == 0 {
                slot.0 = t;
            } else {
                slot.1 = t;
            }
        }
        Ok(st)
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
/// Frozen parameters are skipped even when a gradient is supplied.
pub fn optimizer_update<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut AdamState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (one, lr, eps) = (T::one(), T::lit(cfg.lr), T::lit(cfg.eps));
    let decay = T::lit(1.0 - cfg.lr * cfg.weight_decay);
    let (c1, c2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    for (id, g) in grads {
        let p = store.get_mut(*id);
        if !p.trainable {
            continue;
        }
        g.expect_shape(p.tensor.shape(), &p.name)?;
        let (m, v) = state.moments[id.index()]
            .get_or_insert_with(|| (Tensor::zeros(g.rows(), g.cols()), Tensor::zeros(g.rows(), g.cols())));
        let (pm, vm, gd) = (m.data_mut(), v.data_mut(), g.data());
        for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
            pm[k] = b1 * pm[k] + (one - b1) * gd[k];
            vm[k] = b2 * vm[k] + (one - b2) * gd[k] * gd[k];
            let mh = pm[k] * c1;
            let vh = vm[k] * c2;
            *w = *w * decay - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub dropout: DropoutPolicy,
    pub p_triplet: f64,
    pub p_au: f64,
    pub p_swap: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            optimizer: AdamWConfig::default(),
            batch_size: 16,
            iterations: 1000,
            seed: 0,
            dropout: DropoutPolicy::default(),
            p_triplet: 0.8,
            p_au: 0.3,
            p_swap: 0.5,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        for (name, p) in [("p_triplet", self.p_triplet), ("p_au", self.p_au), ("p_swap", self.p_swap)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::Config(format!("optimizer settings {o:?}")));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Simple,
    Swap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepRecord {
    pub iteration: usize,
    /// Summed squared error over supervised entries, averaged over the batch.
    pub loss: f64,
    pub branch: Branch,
    /// Supervised entries per clip, averaged over the batch.
    pub supervised: f64,
    pub seconds: f64,
}

impl TrainStepRecord {
    /// Mean squared error per supervised entry; `None` when nothing was supervised.
    pub fn per_entry(&self) -> Option<f64> {
        (self.supervised > 0.0).then(|| self.loss / self.supervised)
    }
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub branch: Branch,
    pub supervised: f64,
}

fn clip_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) {
    let total: f64 = grads.iter().map(|(_, g)| g.sum_squares().to_f64_lossy()).sum::<f64>().sqrt();
    if total > max_norm {
        let s = T::lit(max_norm / total);
        for (_, g) in grads.iter_mut() {
            *g = g.scale(s);
        }
    }
}

/// Loss value and parameter gradients of one batch objective.
fn loss_and_grads<T: Scalar>(
    gen: &Generator<T>,
    build: impl FnOnce(&mut Graph<'_, T>) -> Result<Var>,
) -> Result<(f64, Vec<(ParamId, Tensor<T>)>)> {
    let mut g = Graph::new(gen.store());
    let l = build(&mut g)?;
    let loss = g.value(l).get(0, 0).to_f64_lossy();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    Ok((loss, g.backward(l)?.param_grads()))
}

fn apply_update<T: Scalar>(
    gen: &mut Generator<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    mut grads: Vec<(ParamId, Tensor<T>)>,
) -> Result<()> {
    if let Some(c) = cfg.grad_clip {
        clip_norm(&mut grads, c);
    }
    optimizer_update(gen.store_mut(), &grads, state, &cfg.optimizer)
}

fn stack<'a, T: Scalar>(parts: impl Iterator<Item = &'a Tensor<T>>) -> Result<Tensor<T>> {
    let v: Vec<&Tensor<T>> = parts.collect();
    Tensor::vstack(&v)
}

fn diagnose(e: Error, iteration: usize, branch: Branch, taus: &[usize]) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at iteration {iteration} ({branch:?} branch, steps {taus:?})")),
        other => other,
    }
}

/// One base-model update: per-clip uniform step, forward noising, condition
/// dropout, batched x0 prediction and the summed squared error averaged over
/// the batch.
pub fn stage1_step<T: Scalar, R: Rng + ?Sized>(
    batch: &[&ClipRecord<T>],
    gen: &mut Generator<T>,
    schedule: &NoiseSchedule,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if gen.has_adapter() {
        return Err(Error::State("base training expects a generator without adapter".into()));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut noisy = Vec::with_capacity(batch.len());
    let mut taus = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    for clip in batch {
        let tau = rng.random_range(1..=schedule.steps());
        noisy.push(forward_noise(clip.motion.frames(), tau, schedule, rng)?);
        taus.push(tau);
        let full = ConditionBundle::new(Some(clip.audio.clone()), Some(clip.coarse));
        conds.push(apply_dropout(full, &cfg.dropout, rng));
    }
    let x = stack(noisy.iter())?;
    let target = stack(batch.iter().map(|c| c.motion.frames()))?;
    let inv_b = T::lit(1.0 / batch.len() as f64);
    let (loss, grads) = loss_and_grads(gen, |g| {
        let xv = g.input(x);
        let tv = g.input(target);
        let pred = gen.forward(g, xv, &taus, &conds)?;
        let l = simple_loss_var(g, pred, tv)?;
        Ok(g.scale(l, inv_b))
    })
    .map_err(|e| diagnose(e, state.step as usize, Branch::Simple, &taus))?;
    apply_update(gen, state, cfg, grads)?;
    let [rows, cols] = batch[0].motion.frames().shape();
    Ok(StepOutcome { loss, branch: Branch::Simple, supervised: (rows * cols) as f64 })
}

/// One adapter update. Fine conditions are sparsified per clip; with
/// probability `p_swap` the whole batch takes the swap branch, where every
/// emotion label is replaced by a different one and only entries inside the
/// control mask of the sparsified condition are supervised.
pub fn stage2_step<T: Scalar, R: Rng + ?Sized>(
    batch: &[&ClipRecord<T>],
    gen: &mut Generator<T>,
    vocab: &AuVocabulary,
    schedule: &NoiseSchedule,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    if !gen.has_adapter() {
        return Err(Error::State("fine training needs an adapter; insert one first".into()));
    }
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let branch = if rng.random::<f64>() < cfg.p_swap { Branch::Swap } else { Branch::Simple };
    let n_emotions = gen.config().n_emotions;
    let mut noisy = Vec::with_capacity(batch.len());
    let mut taus = Vec::with_capacity(batch.len());
    let mut conds = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for clip in batch {
        let frames = clip.motion.len();
        let fine = sparsify_fine(&clip.fine, cfg.p_triplet, cfg.p_au, rng)?;
        let coarse = match branch {
            Branch::Swap => swap_emotion(&clip.coarse, n_emotions, rng)?,
            Branch::Simple => clip.coarse,
        };
        let tau = rng.random_range(1..=schedule.steps());
        noisy.push(forward_noise(clip.motion.frames(), tau, schedule, rng)?);
        taus.push(tau);
        if branch == Branch::Swap {
            masks.push(build_ctrl_mask::<T>(&fine, vocab, frames, clip.motion.channels())?);
        }
        conds.push(ConditionBundle::new(Some(clip.audio.clone()), Some(coarse)).with_fine(&fine, vocab, frames)?);
    }
    let x = stack(noisy.iter())?;
    let target = stack(batch.iter().map(|c| c.motion.frames()))?;
    let ctrl = if branch == Branch::Swap { Some(stack(masks.iter())?) } else { None };
    let supervised = match &ctrl {
        Some(z) => z.sum().to_f64_lossy(),
        None => target.len() as f64,
    } / batch.len() as f64;
    let inv_b = T::lit(1.0 / batch.len() as f64);
    let (loss, grads) = loss_and_grads(gen, |g| {
        let xv = g.input(x);
        let tv = g.input(target);
        let pred = gen.forward(g, xv, &taus, &conds)?;
        let l = match ctrl {
            Some(z) => {
                let zv = g.input(z);
                swap_loss_var(g, pred, tv, zv)?
            }
            None => simple_loss_var(g, pred, tv)?,
        };
        Ok(g.scale(l, inv_b))
    })
    .map_err(|e| diagnose(e, state.step as usize, branch, &taus))?;
    apply_update(gen, state, cfg, grads)?;
    Ok(StepOutcome { loss, branch, supervised })
}

/// Mean simple loss on `clips` with steps and noise drawn from a fixed
/// stream, all conditions present. Comparable across checkpoints.
pub fn validation_loss<T: Scalar>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    clips: &[ClipRecord<T>],
    vocab: Option<&AuVocabulary>,
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Config("no validation clips".into()));
    }
    let mut total = 0.0;
    for chunk in clips.chunks(16) {
        let mut noisy = Vec::with_capacity(chunk.len());
        let mut taus = Vec::with_capacity(chunk.len());
        let mut conds = Vec::with_capacity(chunk.len());
        for clip in chunk {
            let mut rng = seeds::stream(seed, "validation", clip.index as u64);
            let tau = rng.random_range(1..=schedule.steps());
            noisy.push(forward_noise(clip.motion.frames(), tau, schedule, &mut rng)?);
            taus.push(tau);
            let mut c = ConditionBundle::new(Some(clip.audio.clone()), Some(clip.coarse));
            if let Some(v) = vocab {
                c = c.with_fine(&clip.fine, v, clip.motion.len())?;
            }
            conds.push(c);
        }
        let pred = gen.predict_batch(&stack(noisy.iter())?, &taus, &conds)?;
        let target = stack(chunk.iter().map(|c| c.motion.frames()))?;
        total += crate::diffusion::simple_loss(&pred, &target)?.to_f64_lossy();
    }
    Ok(total / clips.len() as f64)
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const STATE_FILE: &str = "train_state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: usize,
    pub config: TrainConfig,
    pub model: crate::denoiser::ModelConfig,
}

/// Owns the weights and optimizer for one stage. Iteration `i` draws all its
/// randomness from a stream keyed by `(seed, i)`, so a resumed run replays
/// an unbroken one exactly.
pub struct Trainer<T: Scalar> {
    pub config: TrainConfig,
    pub generator: Generator<T>,
    pub schedule: NoiseSchedule,
    pub optimizer: AdamState<T>,
    pub iteration: usize,
    vocab: Option<AuVocabulary>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new_base(config: TrainConfig, generator: Generator<T>) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Base {
            return Err(Error::Config("base trainer needs stage 1".into()));
        }
        if generator.has_adapter() {
            return Err(Error::State("base training expects a generator without adapter".into()));
        }
        let schedule = NoiseSchedule::cosine(generator.config().diffusion_steps)?;
        Ok(Self { config, generator, schedule, optimizer: AdamState::default(), iteration: 0, vocab: None })
    }

    /// `generator` must already carry its adapter (see [`Generator::insert_adapter`]).
    pub fn new_fine(config: TrainConfig, generator: Generator<T>, vocab: AuVocabulary) -> Result<Self> {
        config.validate()?;
        if config.stage != Stage::Fine {
            return Err(Error::Config("fine trainer needs stage 2".into()));
        }
        if !generator.has_adapter() {
            return Err(Error::State("fine training needs an adapter; insert one first".into()));
        }
        if vocab.len() != generator.config().vocab_size {
            return Err(Error::Config(format!("vocabulary has {} AUs, model expects {}", vocab.len(), generator.config().vocab_size)));
        }
        let schedule = NoiseSchedule::cosine(generator.config().diffusion_steps)?;
        Ok(Self { config, generator, schedule, optimizer: AdamState::default(), iteration: 0, vocab: Some(vocab) })
    }

    pub fn vocab(&self) -> Option<&AuVocabulary> {
        self.vocab.as_ref()
    }

    fn iteration_rng(&self) -> ChaCha8Rng {
        seeds::stream(self.config.seed, "train", self.iteration as u64)
    }

    pub fn step(&mut self, clips: &[ClipRecord<T>]) -> Result<TrainStepRecord> {
        if clips.is_empty() {
            return Err(Error::Config("no training clips".into()));
        }
        let start = Instant::now();
        let mut rng = self.iteration_rng();
        let b = self.config.batch_size;
        let picks: Vec<usize> = if clips.len() >= b {
            index::sample(&mut rng, clips.len(), b).into_vec()
        } else {
            (0..b).map(|_| rng.random_range(0..clips.len())).collect()
        };
        let batch: Vec<&ClipRecord<T>> = picks.iter().map(|&i| &clips[i]).collect();
        let out = match &self.vocab {
            None => stage1_step(&batch, &mut self.generator, &self.schedule, &mut self.optimizer, &self.config, &mut rng)?,
            Some(v) => stage2_step(&batch, &mut self.generator, v, &self.schedule, &mut self.optimizer, &self.config, &mut rng)?,
        };
        let rec = TrainStepRecord {
            iteration: self.iteration,
            loss: out.loss,
            branch: out.branch,
            supervised: out.supervised,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.iteration += 1;
        Ok(rec)
    }

    /// Steps until `config.iterations` is reached, reporting each record.
    pub fn run(&mut self, clips: &[ClipRecord<T>], mut on_step: impl FnMut(&Self, &TrainStepRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let rec = self.step(clips)?;
            on_step(self, &rec)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.generator.save(&dir.join(MODEL_FILE))?;
        checkpoint::write_records(&dir.join(OPTIMIZER_FILE), &self.optimizer.to_records(self.generator.store()))?;
        let st = TrainState { iteration: self.iteration, config: self.config.clone(), model: self.generator.config().clone() };
        fs::write(dir.join(STATE_FILE), serde_json::to_string_pretty(&st)?)?;
        Ok(())
    }

    /// Resume from [`Trainer::save`] output. `config` may extend the
    /// iteration budget; everything else should match the saved run.
    pub fn resume(dir: &Path, config: TrainConfig, vocab: Option<AuVocabulary>) -> Result<Self> {
        let st: TrainState = serde_json::from_str(&fs::read_to_string(dir.join(STATE_FILE))?)?;
        if st.config.stage != config.stage {
            return Err(Error::Config("resumed stage differs from the saved run".into()));
        }
        // Loading adapter records re-inserts the adapter, which refreezes the base.
        let generator = Generator::<T>::load(st.model, &dir.join(MODEL_FILE))?;
        let optimizer = AdamState::from_records(generator.store(), &checkpoint::read_records(&dir.join(OPTIMIZER_FILE))?)?;
        let mut t = match (config.stage, vocab) {
            (Stage::Base, _) => Self::new_base(config, generator)?,
            (Stage::Fine, Some(v)) => Self::new_fine(config, generator, v)?,
            (Stage::Fine, None) => return Err(Error::Config("fine training needs the AU vocabulary".into())),
        };
        t.optimizer = optimizer;
        t.iteration = st.iteration;
        Ok(t)
    }
}

/// Append one JSON line per record.
pub fn append_log(path: &Path, rec: &TrainStepRecord) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(rec)?)?;
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<TrainStepRecord>> {
    fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_clips, SyntheticSpec};
    use crate::denoiser::{ModelConfig, BASE_PREFIX};
    use rand::SeedableRng;

    fn tiny_model() -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 2, n_blocks: 1, ff_hidden: 32, d_style: 4, d_emotion: 4, d_intensity: 4, d_cond: 8, diffusion_steps: 20, ..ModelConfig::desk() }
    }

    fn clips(n: usize) -> Vec<ClipRecord<f64>> {
        let spec = SyntheticSpec { n_clips: n, frames: 16, event_width: (6, 10), seed: 3, ..Default::default() };
        generate_clips(&spec, &AuVocabulary::default_arkit()).unwrap()
    }

    fn base_trainer(cfg: TrainConfig) -> Trainer<f64> {
        let gen = Generator::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Trainer::new_base(cfg, gen).unwrap()
    }

    fn fine_trainer(cfg: TrainConfig) -> Trainer<f64> {
        let mut gen = Generator::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        gen.insert_adapter(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        Trainer::new_fine(cfg, gen, AuVocabulary::default_arkit()).unwrap()
    }

    fn cfg(stage: Stage) -> TrainConfig {
        TrainConfig { batch_size: 3, iterations: 4, seed: 9, optimizer: AdamWConfig { lr: 1e-3, ..Default::default() }, ..TrainConfig::new(stage) }
    }

    fn store_values(s: &ParamStore<f64>) -> Vec<Vec<f64>> {
        s.iter().map(|(_, p)| p.tensor.data().to_vec()).collect()
    }

    #[test]
    fn adamw_first_step_matches_closed_form() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let g: Tensor<f64> = Tensor::from_vec(1, 3, vec![0.3, -2.0, 0.0]).unwrap();
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut st = AdamState::default();
        optimizer_update(&mut s, &[(id, g.clone())], &mut st, &cfg).unwrap();
        // Bias-corrected moments after one step are g and g^2.
        for (k, (&w0, &gk)) in [0.5f64, -1.0, 2.0].iter().zip(g.data()).enumerate() {
            let want = w0 * (1.0 - 0.01 * 0.1) - 0.01 * gk / (gk.abs() + 1e-8);
            assert!((s.get(id).tensor.data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn adamw_zero_gradient_and_decay() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(2, 2, 3.0)).unwrap();
        let zero = Tensor::zeros(2, 2);
        let mut st = AdamState::default();
        optimizer_update(&mut s, &[(id, zero.clone())], &mut st, &AdamWConfig { weight_decay: 0.0, ..Default::default() }).unwrap();
        assert_eq!(s.get(id).tensor, Tensor::full(2, 2, 3.0));
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        optimizer_update(&mut s, &[(id, zero)], &mut st, &cfg).unwrap();
        assert_eq!(s.get(id).tensor, Tensor::full(2, 2, 3.0 * (1.0 - 0.1 * 0.5)));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = ParamStore::new();
        let id = s.add("base.w", Tensor::full(1, 2, 1.0)).unwrap();
        s.set_trainable_prefix("base.", false);
        let mut st = AdamState::default();
        optimizer_update(&mut s, &[(id, Tensor::full(1, 2, 5.0))], &mut st, &AdamWConfig::default()).unwrap();
        assert_eq!(s.get(id).tensor, Tensor::full(1, 2, 1.0));
        assert!(st.moments(id).is_none());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let data = clips(6);
        let mut t = base_trainer(TrainConfig { optimizer: AdamWConfig { lr: 0.0, ..Default::default() }, ..cfg(Stage::Base) });
        let before = store_values(t.generator.store());
        t.step(&data).unwrap();
        assert_eq!(before, store_values(t.generator.store()));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = clips(6);
        let run = || {
            let mut t = base_trainer(TrainConfig { iterations: 60, batch_size: 4, optimizer: AdamWConfig { lr: 3e-3, ..Default::default() }, ..cfg(Stage::Base) });
            let mut losses = Vec::new();
            t.run(&data, |_, r| {
                losses.push(r.loss);
                Ok(())
            })
            .unwrap();
            losses
        };
        let a = run();
        assert_eq!(a, run());
        let head: f64 = a[..10].iter().sum();
        let tail: f64 = a[50..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn resume_replays_an_unbroken_run() {
        let data = clips(6);
        let mut full = fine_trainer(cfg(Stage::Fine));
        let mut unbroken = Vec::new();
        full.run(&data, |_, r| {
            unbroken.push(r.loss);
            Ok(())
        })
        .unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = fine_trainer(TrainConfig { iterations: 2, ..cfg(Stage::Fine) });
        let mut losses = Vec::new();
        first.run(&data, |_, r| {
            losses.push(r.loss);
            Ok(())
        })
        .unwrap();
        first.save(dir.path()).unwrap();
        let mut second = Trainer::<f64>::resume(dir.path(), cfg(Stage::Fine), Some(AuVocabulary::default_arkit())).unwrap();
        assert_eq!(second.iteration, 2);
        second.run(&data, |_, r| {
            losses.push(r.loss);
            Ok(())
        })
        .unwrap();
        assert_eq!(losses, unbroken);
        assert_eq!(store_values(second.generator.store()), store_values(full.generator.store()));
    }

    #[test]
    fn fine_training_never_touches_the_base() {
        let data = clips(6);
        let mut t = fine_trainer(TrainConfig { iterations: 5, ..cfg(Stage::Fine) });
        let before = t.generator.store().checksum(BASE_PREFIX);
        let adapter_before = t.generator.store().checksum("adapter.");
        t.run(&data, |_, _| Ok(())).unwrap();
        assert_eq!(before, t.generator.store().checksum(BASE_PREFIX));
        assert_ne!(adapter_before, t.generator.store().checksum("adapter."));
    }

    #[test]
    fn swap_probability_controls_branches() {
        let data = clips(6);
        let mut t = fine_trainer(TrainConfig { p_swap: 0.0, iterations: 6, ..cfg(Stage::Fine) });
        let mut branches = Vec::new();
        t.run(&data, |_, r| {
            branches.push(r.branch);
            Ok(())
        })
        .unwrap();
        assert!(branches.iter().all(|&b| b == Branch::Simple));
        let mut t = fine_trainer(TrainConfig { p_swap: 1.0, iterations: 3, ..cfg(Stage::Fine) });
        t.run(&data, |_, r| {
            assert_eq!(r.branch, Branch::Swap);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn empty_control_mask_gives_zero_loss_and_no_update() {
        let mut data = clips(4);
        for c in &mut data {
            c.fine = crate::coretypes::FineCondition::empty();
        }
        let zero_decay = AdamWConfig { lr: 1e-2, weight_decay: 0.0, ..Default::default() };
        let mut t = fine_trainer(TrainConfig { p_swap: 1.0, optimizer: zero_decay, ..cfg(Stage::Fine) });
        let before = store_values(t.generator.store());
        let rec = t.step(&data).unwrap();
        assert_eq!(rec.loss, 0.0);
        assert_eq!(rec.per_entry(), None);
        assert_eq!(before, store_values(t.generator.store()));
    }

    #[test]
    fn stage_preconditions() {
        let gen = Generator::<f64>::new(tiny_model(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(
            Trainer::new_fine(cfg(Stage::Fine), gen.clone(), AuVocabulary::default_arkit()),
            Err(Error::State(_))
        ));
        assert!(Trainer::new_base(cfg(Stage::Fine), gen).is_err());
        assert!(TrainConfig { p_swap: 1.5, ..cfg(Stage::Fine) }.validate().is_err());
        assert!(Stage::from_number(3).is_err());
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let r = TrainStepRecord { iteration: 3, loss: 1.25, branch: Branch::Swap, supervised: 12.0, seconds: 0.5 };
        append_log(&p, &r).unwrap();
        append_log(&p, &r).unwrap();
        assert_eq!(read_log(&p).unwrap(), vec![r.clone(), r]);
    }
}
