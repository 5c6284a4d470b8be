//! Differentiable layers used by the generator and the emotion classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};
use crate::numerics::tensor::Tensor;
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Widths shared by the conditioning layers of one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_audio: usize,
    pub d_cond: usize,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model == 0 || self.d_audio == 0 || self.d_cond == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    FanIn,
    /// Uniform in `+-sqrt(6/(fan_in+fan_out))`.
    Xavier,
    Zeros,
}

/// `y = x W + b` with `W: d_in x d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            Init::FanIn => Tensor::uniform(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng),
            Init::Xavier => Tensor::uniform(d_in, d_out, (6.0 / (d_in + d_out) as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(d_in, d_out),
        };
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, d_out))?;
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [_, c] = g.shape(x);
        if c != self.d_in {
            return Err(Error::Shape(format!("linear expects {} inputs, got {c}", self.d_in)));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

/// Zero-initialized affine projection: an exact no-op output until trained.
#[derive(Debug, Clone)]
pub struct ZeroProj(pub Linear);

impl ZeroProj {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self(Linear::new(store, name, d, d, Init::Zeros, rng)?))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.0.forward(g, x)
    }
}

/// Feature-wise modulation `x * (1 + gamma(c)) + delta(c)`.
///
/// `gamma` and `delta` are zero-initialized affine maps, so a fresh layer is
/// the identity. `cond` must have either one row (broadcast over frames) or
/// as many rows as `x`.
#[derive(Debug, Clone)]
pub struct Film {
    pub gamma: Linear,
    pub delta: Linear,
}

impl Film {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_cond: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gamma: Linear::new(store, &format!("{name}.gamma"), d_cond, d, Init::Zeros, rng)?,
            delta: Linear::new(store, &format!("{name}.delta"), d_cond, d, Init::Zeros, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var) -> Result<Var> {
        let [rx, _] = g.shape(x);
        let [rc, _] = g.shape(cond);
        if rc != 1 && rc != rx {
            return Err(Error::Shape(format!("film condition has {rc} rows for {rx} frames")));
        }
        let gamma = self.gamma.forward(g, cond)?;
        let scale = g.offset(gamma, T::one());
        let delta = self.delta.forward(g, cond)?;
        let xs = g.mul(x, scale)?;
        g.add(xs, delta)
    }
}

/// Condition-driven layer-norm modulation with a zero-initialized residual gate.
///
/// `out = x + gate(c) * sublayer(LN(x) * (1 + scale(c)) + shift(c))`, where
/// the three maps act on `silu(c)`.
#[derive(Debug, Clone)]
pub struct AdaLn {
    pub shift: Linear,
    pub scale: Linear,
    pub gate: Linear,
}

impl AdaLn {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_cond: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            shift: Linear::new(store, &format!("{name}.shift"), d_cond, d, Init::Zeros, rng)?,
            scale: Linear::new(store, &format!("{name}.scale"), d_cond, d, Init::Zeros, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), d_cond, d, Init::Zeros, rng)?,
        })
    }

    pub fn forward<'a, T: Scalar>(
        &self,
        g: &mut Graph<'a, T>,
        x: Var,
        cond: Var,
        sublayer: impl FnOnce(&mut Graph<'a, T>, Var) -> Result<Var>,
    ) -> Result<Var> {
        let [rx, _] = g.shape(x);
        let [rc, _] = g.shape(cond);
        if rc != 1 && rc != rx {
            return Err(Error::Shape(format!("adaln condition has {rc} rows for {rx} frames")));
        }
        let c = g.silu(cond);
        let shift = self.shift.forward(g, c)?;
        let scale = self.scale.forward(g, c)?;
        let gate = self.gate.forward(g, c)?;
        let normed = g.layer_norm(x, LAYER_NORM_EPS);
        let one_plus = g.offset(scale, T::one());
        let modulated = g.mul(normed, one_plus)?;
        let modulated = g.add(modulated, shift)?;
        let h = sublayer(g, modulated)?;
        let gated = g.mul(h, gate)?;
        g.add(x, gated)
    }
}

/// Projected multi-head attention.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        d_kv: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, Init::Xavier, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_kv, d_model, Init::Xavier, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_kv, d_model, Init::Xavier, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, Init::Xavier, rng)?,
            heads,
        })
    }

    /// `query` and `context` each hold `batch` stacked segments.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        context: Var,
        mask: Option<&Tensor<T>>,
        batch: usize,
    ) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, batch, mask)?;
        self.out.forward(g, a)
    }
}

/// Position-wise two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, Init::Xavier, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, d, Init::Xavier, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Fixed sinusoidal table: row `p`, column `2i` is `sin(p / 10000^(2i/d))`
/// and column `2i+1` the matching cosine.
pub fn sinusoidal_table<T: Scalar>(positions: &[f64], d: usize) -> Tensor<T> {
    Tensor::from_fn(positions.len(), d, |r, c| {
        let i = (c / 2) as f64;
        let freq = 1.0 / 10_000f64.powf(2.0 * i / d as f64);
        let a = positions[r] * freq;
        T::lit(if c % 2 == 0 { a.sin() } else { a.cos() })
    })
}
