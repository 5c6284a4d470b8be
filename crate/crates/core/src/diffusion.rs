//! Noise schedule, closed-form forward process, training losses and the
//! re-noising reverse sampler with mask-gated guidance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coretypes::{build_cfg_mask, FineCondition, MotionSequence};
use crate::denoiser::{ConditionBundle, Generator};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Offset of the cosine schedule; keeps the first steps from being too small.
pub const COSINE_OFFSET: f64 = 0.008;
/// Coarse guidance scale used when none is given. Larger values exaggerate
/// the lips: the all-null branch cannot see the audio.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Upper bound on a single step's noise fraction `1 - alpha`.
pub const MAX_BETA: f64 = 0.999;

/// Per-step `alpha` and cumulative `alpha_bar`, indexed by step `1..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine `alpha_bar`, with per-step fractions clipped at [`MAX_BETA`].
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: f64| ((t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let alpha = (1..=steps)
            .map(|t| {
                let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).min(MAX_BETA);
                1.0 - beta
            })
            .collect();
        Self::from_alphas(alpha)
    }

    /// Arbitrary per-step alphas in `(0, 1]`.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(a) = alpha.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::Config(format!("alpha {a} outside (0, 1]")));
        }
        let mut acc = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn check_step(&self, tau: usize) -> Result<()> {
        if tau == 0 || tau > self.steps() {
            return Err(Error::Range(format!("step {tau} outside [1, {}]", self.steps())));
        }
        Ok(())
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.alpha[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.alpha_bar[tau - 1]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// `sqrt(ab) * clean + sqrt(1 - ab) * noise` for a given noise draw.
pub fn noise_with<T: Scalar>(clean: &Tensor<T>, tau: usize, schedule: &NoiseSchedule, noise: &Tensor<T>) -> Result<Tensor<T>> {
    schedule.check_step(tau)?;
    let ab = schedule.alpha_bar(tau);
    let (a, b) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    clean.zip_map(noise, |x, e| a * x + b * e)
}

/// Closed-form forward process at step `tau`, drawing the noise from `rng`.
pub fn forward_noise<T: Scalar, R: Rng + ?Sized>(
    clean: &Tensor<T>,
    tau: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    schedule.check_step(tau)?;
    let eps = Tensor::randn(clean.rows(), clean.cols(), 1.0, rng);
    noise_with(clean, tau, schedule, &eps)
}

/// Squared L2 over every entry (sum, not mean).
pub fn simple_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    Ok(target.sub(pred)?.sum_squares())
}

/// Squared L2 of `ctrl * (target - pred)`.
pub fn swap_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, ctrl: &Tensor<T>) -> Result<T> {
    Ok(target.sub(pred)?.mul(ctrl)?.sum_squares())
}

/// [`simple_loss`] on the tape.
pub fn simple_loss_var<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(target, pred)?;
    Ok(g.sum_squares(d))
}

/// [`swap_loss`] on the tape.
pub fn swap_loss_var<T: Scalar>(g: &mut Graph<'_, T>, pred: Var, target: Var, ctrl: Var) -> Result<Var> {
    let d = g.sub(target, pred)?;
    let m = g.mul(d, ctrl)?;
    Ok(g.sum_squares(m))
}

/// Guidance scales and the temporal mask gating the fine term.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig<T: Scalar> {
    pub alpha: f64,
    pub beta: f64,
    /// `T x 1`; `None` behaves as all zeros.
    pub cfg_mask: Option<Tensor<T>>,
}

impl<T: Scalar> GuidanceConfig<T> {
    /// Audio and coarse guidance only.
    pub fn coarse_only(alpha: f64) -> Self {
        Self { alpha, beta: 0.0, cfg_mask: None }
    }

    /// Mask taken from the frames covered by `fc`.
    pub fn for_fine(alpha: f64, beta: f64, fc: &FineCondition, frames: usize) -> Result<Self> {
        Ok(Self { alpha, beta, cfg_mask: Some(build_cfg_mask(fc, frames)?) })
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config(format!("guidance scales {} / {}", self.alpha, self.beta)));
        }
        if let Some(m) = &self.cfg_mask {
            m.expect_shape([frames, 1], "guidance mask")?;
        }
        Ok(())
    }

    /// Whether the fine term can contribute at all.
    pub fn uses_fine_term(&self) -> bool {
        self.beta != 0.0 && self.cfg_mask.as_ref().is_some_and(|m| m.data().iter().any(|&z| z != T::zero()))
    }
}

/// The three generator evaluations combined by guidance.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTerms<T: Scalar> {
    /// All conditions null.
    pub uncond: Tensor<T>,
    /// Audio and coarse, fine null.
    pub cond: Tensor<T>,
    /// All conditions. Absent when the fine term is inactive.
    pub full: Option<Tensor<T>>,
}

/// `uncond + alpha (cond - uncond) + beta Z (full - uncond)`, evaluated per
/// entry in exactly that order. The third term is skipped when `beta = 0`
/// or the mask is empty, which leaves the value unchanged.
pub fn combine<T: Scalar>(terms: &GuidanceTerms<T>, guidance: &GuidanceConfig<T>) -> Result<Tensor<T>> {
    let [rows, cols] = terms.uncond.shape();
    terms.cond.expect_shape([rows, cols], "guidance cond term")?;
    guidance.validate(rows)?;
    let a = T::lit(guidance.alpha);
    let mut out = terms.uncond.zip_map(&terms.cond, |u, c| u + a * (c - u))?;
    if guidance.uses_fine_term() {
        let full = terms.full.as_ref().ok_or_else(|| Error::State("fine guidance term was not evaluated".into()))?;
        full.expect_shape([rows, cols], "guidance full term")?;
        let mask = guidance.cfg_mask.as_ref().expect("checked by uses_fine_term");
        let b = T::lit(guidance.beta);
        for i in 0..rows {
            let z = mask.get(i, 0);
            for j in 0..cols {
                let u = terms.uncond.get(i, j);
                let v = out.get(i, j) + b * (z * (full.get(i, j) - u));
                out.set(i, j, v);
            }
        }
    }
    Ok(out)
}

/// Conditions to evaluate for one guided prediction, in the order
/// `[uncond, cond, full?]`.
fn guidance_conds<T: Scalar>(cond: &ConditionBundle<T>, guidance: &GuidanceConfig<T>) -> Vec<ConditionBundle<T>> {
    let mut v = vec![ConditionBundle::null(), cond.without_fine()];
    if guidance.uses_fine_term() {
        v.push(cond.clone());
    }
    v
}

/// The generator evaluations needed by [`combine`], batched into one pass.
pub fn guidance_terms<T: Scalar>(
    gen: &Generator<T>,
    noisy: &Tensor<T>,
    tau: usize,
    cond: &ConditionBundle<T>,
    guidance: &GuidanceConfig<T>,
) -> Result<GuidanceTerms<T>> {
    let conds = guidance_conds(cond, guidance);
    let k = conds.len();
    let x = Tensor::vstack(&vec![noisy; k])?;
    let out = gen.predict_batch(&x, &vec![tau; k], &conds)?;
    let t = noisy.rows();
    Ok(GuidanceTerms {
        uncond: out.slice_rows(0, t),
        cond: out.slice_rows(t, t),
        full: (k == 3).then(|| out.slice_rows(2 * t, t)),
    })
}

/// Guided x0 prediction.
pub fn masked_cfg<T: Scalar>(
    gen: &Generator<T>,
    noisy: &Tensor<T>,
    tau: usize,
    cond: &ConditionBundle<T>,
    guidance: &GuidanceConfig<T>,
) -> Result<Tensor<T>> {
    guidance.validate(noisy.rows())?;
    combine(&guidance_terms(gen, noisy, tau, cond, guidance)?, guidance)
}

/// One clip to sample in a batch, with its own noise stream.
#[derive(Debug, Clone)]
pub struct SampleJob<T: Scalar> {
    pub cond: ConditionBundle<T>,
    pub guidance: GuidanceConfig<T>,
    pub seed: u64,
}

fn check_sampling<T: Scalar>(gen: &Generator<T>, schedule: &NoiseSchedule) -> Result<()> {
    if schedule.steps() > gen.config().diffusion_steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, generator was built for {}",
            schedule.steps(),
            gen.config().diffusion_steps
        )));
    }
    Ok(())
}

/// Reverse process: start from noise, predict x0 with guidance at every
/// step and re-noise it to the previous step; return the last prediction.
pub fn sample<T: Scalar, R: Rng + ?Sized>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    cond: &ConditionBundle<T>,
    guidance: &GuidanceConfig<T>,
    frames: usize,
    rng: &mut R,
) -> Result<MotionSequence<T>> {
    check_sampling(gen, schedule)?;
    guidance.validate(frames)?;
    let d = gen.config().d_motion;
    let mut x = Tensor::randn(frames, d, 1.0, rng);
    let mut x0 = x.clone();
    for tau in (1..=schedule.steps()).rev() {
        x0 = masked_cfg(gen, &x, tau, cond, guidance)?;
        if !x0.all_finite() {
            return Err(Error::NonFinite(format!("prediction at step {tau}")));
        }
        if tau > 1 {
            x = forward_noise(&x0, tau - 1, schedule, rng)?;
        }
    }
    MotionSequence::at_default_fps(x0)
}

/// Sample many clips of equal length with one generator pass per step.
///
/// Job `i` draws its noise from `ChaCha8Rng::seed_from_u64(seed_i)` in the
/// same order as [`sample`], so each output matches a lone call with that
/// stream up to floating-point reassociation inside the batched kernels.
pub fn sample_batch<T: Scalar>(
    gen: &Generator<T>,
    schedule: &NoiseSchedule,
    jobs: &[SampleJob<T>],
    frames: usize,
) -> Result<Vec<MotionSequence<T>>> {
    check_sampling(gen, schedule)?;
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let d = gen.config().d_motion;
    let mut rngs: Vec<ChaCha8Rng> = jobs.iter().map(|j| ChaCha8Rng::seed_from_u64(j.seed)).collect();
    let plans: Vec<Vec<ConditionBundle<T>>> = jobs
        .iter()
        .map(|j| {
            j.guidance.validate(frames)?;
            Ok(guidance_conds(&j.cond, &j.guidance))
        })
        .collect::<Result<_>>()?;
    let conds: Vec<ConditionBundle<T>> = plans.iter().flatten().cloned().collect();
    let mut xs: Vec<Tensor<T>> = rngs.iter_mut().map(|r| Tensor::randn(frames, d, 1.0, r)).collect();
    let mut x0s = xs.clone();
    for tau in (1..=schedule.steps()).rev() {
        let mut parts = Vec::with_capacity(conds.len());
        for (x, p) in xs.iter().zip(&plans) {
            parts.extend(std::iter::repeat_n(x, p.len()));
        }
        let out = gen.predict_batch(&Tensor::vstack(&parts)?, &vec![tau; conds.len()], &conds)?;
        let mut row = 0;
        for (i, (job, p)) in jobs.iter().zip(&plans).enumerate() {
            let terms = GuidanceTerms {
                uncond: out.slice_rows(row, frames),
                cond: out.slice_rows(row + frames, frames),
                full: (p.len() == 3).then(|| out.slice_rows(row + 2 * frames, frames)),
            };
            row += p.len() * frames;
            x0s[i] = combine(&terms, &job.guidance)?;
            if !x0s[i].all_finite() {
                return Err(Error::NonFinite(format!("prediction for job {i} at step {tau}")));
            }
            if tau > 1 {
                xs[i] = forward_noise(&x0s[i], tau - 1, schedule, &mut rngs[i])?;
            }
        }
    }
    x0s.into_iter().map(MotionSequence::at_default_fps).collect()
}
