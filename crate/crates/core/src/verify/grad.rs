//! Finite-difference checks of every differentiable layer on random shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{CoarseEncoder, CoarseEncoderDims};
use crate::coretypes::{build_align_mask, AudioFeatures, CoarseCondition};
use crate::denoiser::{ConditionBundle, Generator, ModelConfig};
use crate::error::Result;
use crate::numerics::layers::LAYER_NORM_EPS;
use crate::numerics::{grad_check, AdaLn, FeedForward, Film, GradCheckReport, Init, Linear, MultiHeadAttention, ParamStore, Tensor, ZeroProj};
use crate::scalar::Scalar;
use crate::seeds;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SHAPES: usize = 5;

/// Worst case over the random shapes of one layer.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LayerGradCheck {
    pub layer: &'static str,
    pub shapes: Vec<String>,
    pub max_rel_err: f64,
    pub worst_entry: String,
    pub entries: usize,
    pub skipped: bool,
}

impl LayerGradCheck {
    pub fn passes(&self) -> bool {
        self.skipped || self.max_rel_err < GRAD_TOL
    }
}

/// Replace every parameter with noise so zero-initialized maps take part.
fn perturb<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R) {
    for (_, p) in store.iter_mut() {
        let [r, c] = p.tensor.shape();
        p.tensor = Tensor::randn(r, c, 0.5, rng);
    }
}

fn dim<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

type Case = fn(&mut ChaCha8Rng) -> Result<(String, GradCheckReport)>;

fn linear<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, i, o) = (dim(rng, 1, 5), dim(rng, 1, 6), dim(rng, 1, 6));
    let mut s = ParamStore::<T>::new();
    let l = Linear::new(&mut s, "l", i, o, Init::FanIn, rng)?;
    let x = Tensor::randn(n, i, 1.0, rng);
    let r = grad_check(&mut s, &[x], |g, v| l.forward(g, v[0]), GRAD_EPS, rng)?;
    Ok((format!("{n}x{i}->{o}"), r))
}

fn zero_proj<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, d) = (dim(rng, 1, 5), dim(rng, 1, 6));
    let mut s = ParamStore::<T>::new();
    let z = ZeroProj::new(&mut s, "z", d, rng)?;
    perturb(&mut s, rng);
    let x = Tensor::randn(n, d, 1.0, rng);
    let r = grad_check(&mut s, &[x], |g, v| z.forward(g, v[0]), GRAD_EPS, rng)?;
    Ok((format!("{n}x{d}"), r))
}

fn feed_forward<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, d, h) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 8));
    let mut s = ParamStore::<T>::new();
    let f = FeedForward::new(&mut s, "f", d, h, rng)?;
    let x = Tensor::randn(n, d, 1.0, rng);
    let r = grad_check(&mut s, &[x], |g, v| f.forward(g, v[0]), GRAD_EPS, rng)?;
    Ok((format!("{n}x{d} hidden {h}"), r))
}

fn film<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, d, dc) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
    let rc = if rng.random::<bool>() { 1 } else { n };
    let mut s = ParamStore::<T>::new();
    let f = Film::new(&mut s, "f", dc, d, rng)?;
    perturb(&mut s, rng);
    let x = Tensor::randn(n, d, 1.0, rng);
    let c = Tensor::randn(rc, dc, 1.0, rng);
    let r = grad_check(&mut s, &[x, c], |g, v| f.forward(g, v[0], v[1]), GRAD_EPS, rng)?;
    Ok((format!("{n}x{d} cond {rc}x{dc}"), r))
}

fn adaln<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, d, dc, h) = (dim(rng, 1, 5), dim(rng, 2, 5), dim(rng, 1, 5), dim(rng, 1, 6));
    let rc = if rng.random::<bool>() { 1 } else { n };
    let mut s = ParamStore::<T>::new();
    let a = AdaLn::new(&mut s, "a", dc, d, rng)?;
    let f = FeedForward::new(&mut s, "f", d, h, rng)?;
    perturb(&mut s, rng);
    let x = Tensor::randn(n, d, 1.0, rng);
    let c = Tensor::randn(rc, dc, 1.0, rng);
    let r = grad_check(&mut s, &[x, c], |g, v| a.forward(g, v[0], v[1], |g, z| f.forward(g, z)), GRAD_EPS, rng)?;
    Ok((format!("{n}x{d} cond {rc}x{dc}"), r))
}

fn self_attention<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (b, t, heads, hd) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 3), dim(rng, 1, 2));
    let d = heads * hd;
    let mut s = ParamStore::<T>::new();
    let m = MultiHeadAttention::new(&mut s, "m", d, d, heads, rng)?;
    let x = Tensor::randn(b * t, d, 1.0, rng);
    let r = grad_check(&mut s, &[x], |g, v| m.forward(g, v[0], v[0], None, b), GRAD_EPS, rng)?;
    Ok((format!("{b}x{t}x{d} heads {heads}"), r))
}

fn aligned_cross_attention<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (b, t, heads, hd, da) = (dim(rng, 1, 3), dim(rng, 2, 5), dim(rng, 1, 2), dim(rng, 1, 2), dim(rng, 1, 4));
    let d = heads * hd;
    let mut s = ParamStore::<T>::new();
    let m = MultiHeadAttention::new(&mut s, "m", d, da, heads, rng)?;
    let mask: Tensor<T> = build_align_mask(t, 1);
    let x = Tensor::randn(b * t, d, 1.0, rng);
    let a = Tensor::randn(b * t, da, 1.0, rng);
    let r = grad_check(&mut s, &[x, a], |g, v| m.forward(g, v[0], v[1], Some(&mask), b), GRAD_EPS, rng)?;
    Ok((format!("{b}x{t}x{d} audio {da} heads {heads}"), r))
}

fn layer_norm<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, d) = (dim(rng, 1, 5), dim(rng, 2, 7));
    let mut s = ParamStore::<T>::new();
    let x = Tensor::randn(n, d, 1.0, rng);
    let r = grad_check(&mut s, &[x], |g, v| Ok(g.layer_norm(v[0], LAYER_NORM_EPS)), GRAD_EPS, rng)?;
    Ok((format!("{n}x{d}"), r))
}

fn activations<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, d) = (dim(rng, 1, 5), dim(rng, 1, 6));
    let mut s = ParamStore::<T>::new();
    let x = Tensor::randn(n, d, 1.5, rng);
    let r = grad_check(
        &mut s,
        &[x],
        |g, v| {
            let a = g.silu(v[0]);
            let b = g.gelu(v[0]);
            g.mul(a, b)
        },
        GRAD_EPS,
        rng,
    )?;
    Ok((format!("{n}x{d}"), r))
}

fn cross_entropy<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut s = ParamStore::<T>::new();
    let x = Tensor::randn(n, k, 1.0, rng);
    let r = grad_check(&mut s, &[x], |g, v| g.cross_entropy(v[0], &labels), GRAD_EPS, rng)?;
    Ok((format!("{n}x{k}"), r))
}

fn coarse_encoder<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let dims = CoarseEncoderDims {
        n_styles: dim(rng, 1, 3),
        n_emotions: dim(rng, 1, 3),
        d_style: dim(rng, 1, 3),
        d_emotion: dim(rng, 1, 3),
        d_intensity: dim(rng, 1, 3),
        d_cond: dim(rng, 1, 4),
    };
    let n = dim(rng, 1, 4);
    let conds: Vec<CoarseCondition> = (0..n)
        .map(|_| CoarseCondition {
            style_id: rng.random_range(0..dims.n_styles),
            emotion_id: rng.random_range(0..dims.n_emotions),
            intensity: rng.random::<f64>(),
        })
        .collect();
    let mut s = ParamStore::<T>::new();
    let e = CoarseEncoder::new(&mut s, "c", dims, rng)?;
    let r = grad_check(&mut s, &[], |g, _| e.forward(g, &conds), GRAD_EPS, rng)?;
    Ok((format!("{n} conditions into {}", dims.d_cond), r))
}

fn tiny_model<R: Rng + ?Sized>(rng: &mut R) -> ModelConfig {
    let heads = dim(rng, 1, 2);
    ModelConfig {
        profile: "gradcheck".into(),
        d_motion: dim(rng, 2, 3),
        d_model: heads * dim(rng, 2, 3).max(4 / heads),
        n_heads: heads,
        n_blocks: dim(rng, 1, 2),
        ff_hidden: 3,
        d_audio: 2,
        vocab_size: 3,
        n_styles: 2,
        n_emotions: 2,
        d_style: 2,
        d_emotion: 2,
        d_intensity: 2,
        d_cond: 3,
        align_half_width: 1,
        diffusion_steps: 10,
        adapter_tap: Default::default(),
        sigma_data: Some(0.3),
    }
}

/// The full generator with its adapter, mixing present and null conditions.
fn generator<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<(String, GradCheckReport)> {
    let cfg = tiny_model(rng);
    let (b, t) = (dim(rng, 1, 2), dim(rng, 2, 3));
    let mut gen = Generator::<T>::new(cfg.clone(), rng)?;
    gen.insert_adapter(rng)?;
    let structure = gen.clone();
    let store = gen.store_mut();
    perturb(store, rng);
    store.set_trainable_prefix("", true);
    let conds: Vec<ConditionBundle<T>> = (0..b)
        .map(|_| {
            let audio = rng.random_bool(0.7).then(|| AudioFeatures::new(Tensor::randn(t, cfg.d_audio, 1.0, rng)).expect("rows"));
            let coarse = rng.random_bool(0.7).then(|| CoarseCondition {
                style_id: rng.random_range(0..cfg.n_styles),
                emotion_id: rng.random_range(0..cfg.n_emotions),
                intensity: rng.random::<f64>(),
            });
            let fine = rng.random_bool(0.7).then(|| Tensor::from_fn(t, cfg.vocab_size, |_, _| T::lit(f64::from(rng.random_bool(0.5) as u8))));
            ConditionBundle { audio, coarse, fine }
        })
        .collect();
    let taus: Vec<usize> = (0..b).map(|_| rng.random_range(1..=cfg.diffusion_steps)).collect();
    let x = Tensor::randn(b * t, cfg.d_motion, 1.0, rng);
    let r = grad_check(store, &[x], |g, v| structure.forward(g, v[0], &taus, &conds), GRAD_EPS, rng)?;
    Ok((format!("{b} clips x {t} frames, {} blocks, d {}", cfg.n_blocks, cfg.d_model), r))
}

fn cases<T: Scalar>() -> Vec<(&'static str, Case)> {
    vec![
        ("linear", linear::<T>),
        ("zero_proj", zero_proj::<T>),
        ("feed_forward", feed_forward::<T>),
        ("film", film::<T>),
        ("adaln", adaln::<T>),
        ("self_attention", self_attention::<T>),
        ("aligned_cross_attention", aligned_cross_attention::<T>),
        ("layer_norm", layer_norm::<T>),
        ("silu_gelu", activations::<T>),
        ("cross_entropy", cross_entropy::<T>),
        ("coarse_encoder", coarse_encoder::<T>),
        ("generator", generator::<T>),
    ]
}

/// Every layer on [`GRAD_SHAPES`] random shapes. Non-f64 scalars are run
/// but reported as skipped, since the fp64 bound does not apply to them.
pub fn grad_suite<T: Scalar>(seed: u64) -> Result<Vec<LayerGradCheck>> {
    let mut out = Vec::new();
    for (i, (layer, case)) in cases::<T>().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::sub_seed(seed, "gradcheck", i as u64));
        let mut check = LayerGradCheck { layer, shapes: Vec::new(), max_rel_err: 0.0, worst_entry: "-".into(), entries: 0, skipped: false };
        for _ in 0..GRAD_SHAPES {
            let (shape, r) = case(&mut rng)?;
            check.skipped |= r.status != crate::numerics::CheckStatus::Checked;
            check.entries += r.entries;
            if r.max_rel_err >= check.max_rel_err {
                check.max_rel_err = r.max_rel_err;
                check.worst_entry = format!("{} ({shape}) analytic {:e} numeric {:e}", r.worst_entry, r.worst_pair.0, r.worst_pair.1);
            }
            check.shapes.push(shape);
        }
        out.push(check);
    }
    Ok(out)
}
