//! Coarse-condition encoder, condition dropout, emotion swapping and
//! fine-condition sparsification.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coretypes::{CoarseCondition, FineCondition, Triplet};
use crate::denoiser::ConditionBundle;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, Linear, ParamId, ParamStore, Tensor, Var};
use crate::scalar::Scalar;

/// Learned style/emotion tables and an intensity direction, fused by one
/// linear map: `fuse([style[s], emotion[e], intensity * v])`.
#[derive(Debug, Clone)]
pub struct CoarseEncoder {
    pub style_table: ParamId,
    pub emotion_table: ParamId,
    pub intensity_vector: ParamId,
    pub fuse: Linear,
    pub n_styles: usize,
    pub n_emotions: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoarseEncoderDims {
    pub n_styles: usize,
    pub n_emotions: usize,
    pub d_style: usize,
    pub d_emotion: usize,
    pub d_intensity: usize,
    pub d_cond: usize,
}

impl CoarseEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: CoarseEncoderDims,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.n_styles == 0 || dims.n_emotions == 0 {
            return Err(Error::Config("coarse encoder needs at least one style and one emotion".into()));
        }
        let style_table = store.add(format!("{name}.style_table"), Tensor::randn(dims.n_styles, dims.d_style, 1.0, rng))?;
        let emotion_table =
            store.add(format!("{name}.emotion_table"), Tensor::randn(dims.n_emotions, dims.d_emotion, 1.0, rng))?;
        let intensity_vector = store.add(format!("{name}.intensity_vector"), Tensor::randn(1, dims.d_intensity, 1.0, rng))?;
        let d_in = dims.d_style + dims.d_emotion + dims.d_intensity;
        let fuse = Linear::new(store, &format!("{name}.fuse"), d_in, dims.d_cond, Init::FanIn, rng)?;
        Ok(Self { style_table, emotion_table, intensity_vector, fuse, n_styles: dims.n_styles, n_emotions: dims.n_emotions })
    }

    pub fn check(&self, c: &CoarseCondition) -> Result<()> {
        c.validate(self.n_styles, self.n_emotions)
    }

    /// One fused row per condition.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, conds: &[CoarseCondition]) -> Result<Var> {
        for c in conds {
            self.check(c)?;
        }
        let styles: Vec<usize> = conds.iter().map(|c| c.style_id).collect();
        let emotions: Vec<usize> = conds.iter().map(|c| c.emotion_id).collect();
        let st = g.param(self.style_table);
        let s = g.select_rows(st, &styles)?;
        let et = g.param(self.emotion_table);
        let e = g.select_rows(et, &emotions)?;
        let scalars = g.input(Tensor::from_fn(conds.len(), 1, |i, _| T::lit(conds[i].intensity)));
        let v = g.param(self.intensity_vector);
        let i = g.matmul(scalars, v)?;
        let cat = g.concat_cols(&[s, e, i])?;
        self.fuse.forward(g, cat)
    }
}

/// `C_f` for one condition, evaluated eagerly.
pub fn encode_coarse<T: Scalar>(enc: &CoarseEncoder, store: &ParamStore<T>, c: &CoarseCondition) -> Result<Tensor<T>> {
    let mut g = Graph::new(store);
    let v = enc.forward(&mut g, std::slice::from_ref(c))?;
    Ok(g.value(v).clone())
}

/// Independent null-replacement probabilities used while training the base model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_audio: f64,
    pub p_coarse: f64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self { p_audio: 0.2, p_coarse: 0.2 }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        check_probability("p_audio", self.p_audio)?;
        check_probability("p_coarse", self.p_coarse)
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("{name} = {p} is not a probability")));
    }
    Ok(())
}

/// Replace audio and coarse conditions by their null embeddings, each with
/// its own probability. Both draws always happen so the stream advances the
/// same way whatever the outcome.
pub fn apply_dropout<T: Scalar, R: Rng + ?Sized>(
    mut cond: ConditionBundle<T>,
    policy: &DropoutPolicy,
    rng: &mut R,
) -> ConditionBundle<T> {
    let drop_audio = rng.random::<f64>() < policy.p_audio;
    let drop_coarse = rng.random::<f64>() < policy.p_coarse;
    if drop_audio {
        cond.audio = None;
    }
    if drop_coarse {
        cond.coarse = None;
    }
    cond
}

/// Resample the emotion uniformly among the other labels.
pub fn swap_emotion<R: Rng + ?Sized>(c: &CoarseCondition, n_emotions: usize, rng: &mut R) -> Result<CoarseCondition> {
    if n_emotions < 2 {
        return Err(Error::Config(format!("cannot swap among {n_emotions} emotions")));
    }
    if c.emotion_id >= n_emotions {
        return Err(Error::Range(format!("emotion id {} of {n_emotions}", c.emotion_id)));
    }
    let k = rng.random_range(0..n_emotions - 1);
    let emotion_id = if k >= c.emotion_id { k + 1 } else { k };
    Ok(CoarseCondition { emotion_id, ..*c })
}

/// Drop each triplet with `p_triplet`; within survivors drop each AU with
/// `p_au`; triplets left without AUs disappear. Intervals never change.
pub fn sparsify_fine<R: Rng + ?Sized>(fc: &FineCondition, p_triplet: f64, p_au: f64, rng: &mut R) -> Result<FineCondition> {
    check_probability("p_triplet", p_triplet)?;
    check_probability("p_au", p_au)?;
    let mut out = Vec::new();
    for tr in &fc.triplets {
        if rng.random::<f64>() < p_triplet {
            continue;
        }
        let aus: Vec<String> = tr.aus.iter().filter(|_| rng.random::<f64>() >= p_au).cloned().collect();
        if !aus.is_empty() {
            out.push(Triplet::new(aus, tr.start, tr.end));
        }
    }
    Ok(FineCondition::new(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> CoarseEncoderDims {
        CoarseEncoderDims { n_styles: 3, n_emotions: 5, d_style: 4, d_emotion: 5, d_intensity: 3, d_cond: 6 }
    }

    fn encoder(seed: u64) -> (CoarseEncoder, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = CoarseEncoder::new(&mut store, "c", dims(), &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn matches_concat_then_matmul_oracle() {
        let (enc, store) = encoder(3);
        let c = CoarseCondition { style_id: 2, emotion_id: 4, intensity: 0.7 };
        let got = encode_coarse(&enc, &store, &c).unwrap();
        let st = &store.get(enc.style_table).tensor;
        let et = &store.get(enc.emotion_table).tensor;
        let iv = &store.get(enc.intensity_vector).tensor;
        let w = &store.get(enc.fuse.weight).tensor;
        let b = &store.get(enc.fuse.bias).tensor;
        let mut x = Vec::new();
        x.extend_from_slice(st.row(2));
        x.extend_from_slice(et.row(4));
        x.extend(iv.row(0).iter().map(|v| 0.7 * v));
        for j in 0..6 {
            let mut s = b.get(0, j);
            for (k, xk) in x.iter().enumerate() {
                s += xk * w.get(k, j);
            }
            assert!((got.get(0, j) - s).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_intensity_zeroes_its_segment() {
        let (enc, store) = encoder(4);
        let c = CoarseCondition { style_id: 0, emotion_id: 1, intensity: 0.0 };
        // With intensity 0 only the style and emotion rows reach the fuse map.
        let st = &store.get(enc.style_table).tensor;
        let et = &store.get(enc.emotion_table).tensor;
        let w = &store.get(enc.fuse.weight).tensor;
        let b = &store.get(enc.fuse.bias).tensor;
        let got = encode_coarse(&enc, &store, &c).unwrap();
        for j in 0..6 {
            let mut s = b.get(0, j);
            for k in 0..4 {
                s += st.get(0, k) * w.get(k, j);
            }
            for k in 0..5 {
                s += et.get(1, k) * w.get(4 + k, j);
            }
            assert!((got.get(0, j) - s).abs() < 1e-12);
        }
        assert_eq!(encode_coarse(&enc, &store, &c).unwrap(), got);
    }

    #[test]
    fn out_of_range_ids_are_rejected() {
        let (enc, store) = encoder(5);
        let c = CoarseCondition { style_id: 3, emotion_id: 0, intensity: 1.0 };
        assert!(matches!(encode_coarse(&enc, &store, &c), Err(Error::Range(_))));
    }

    #[test]
    fn encoding_is_linear_in_intensity() {
        let (enc, store) = encoder(6);
        let at = |a: f64| encode_coarse(&enc, &store, &CoarseCondition { style_id: 1, emotion_id: 2, intensity: a }).unwrap();
        let (c0, c1) = (at(0.0), at(1.0));
        for a in [0.25, 1.0 / 3.0, 0.9, 2.5] {
            let ca = at(a);
            for j in 0..6 {
                let lhs = ca.get(0, j) - c0.get(0, j);
                let rhs = a * (c1.get(0, j) - c0.get(0, j));
                assert!((lhs - rhs).abs() < 1e-12, "a={a} j={j}");
            }
        }
    }

    fn bundle() -> ConditionBundle<f64> {
        ConditionBundle {
            audio: Some(crate::coretypes::AudioFeatures::new(Tensor::zeros(4, 2)).unwrap()),
            coarse: Some(CoarseCondition { style_id: 0, emotion_id: 0, intensity: 1.0 }),
            fine: None,
        }
    }

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kept = apply_dropout(bundle(), &DropoutPolicy { p_audio: 0.0, p_coarse: 0.0 }, &mut rng);
        assert!(kept.audio.is_some() && kept.coarse.is_some());
        let dropped = apply_dropout(bundle(), &DropoutPolicy { p_audio: 1.0, p_coarse: 1.0 }, &mut rng);
        assert!(dropped.audio.is_none() && dropped.coarse.is_none());
    }

    #[test]
    fn dropout_rates_and_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let policy = DropoutPolicy::default();
        let draws: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let b = apply_dropout(bundle(), &policy, &mut rng);
                (b.audio.is_none() as u8 as f64, b.coarse.is_none() as u8 as f64)
            })
            .collect();
        let ma = draws.iter().map(|d| d.0).sum::<f64>() / n as f64;
        let mc = draws.iter().map(|d| d.1).sum::<f64>() / n as f64;
        assert!((ma - 0.2).abs() <= 0.015, "audio rate {ma}");
        assert!((mc - 0.2).abs() <= 0.015, "coarse rate {mc}");
        let cov = draws.iter().map(|d| (d.0 - ma) * (d.1 - mc)).sum::<f64>() / n as f64;
        let corr = cov / ((ma * (1.0 - ma)).sqrt() * (mc * (1.0 - mc)).sqrt());
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn two_emotions_always_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = CoarseCondition { style_id: 1, emotion_id: 0, intensity: 0.5 };
        for _ in 0..50 {
            let s = swap_emotion(&c, 2, &mut rng).unwrap();
            assert_eq!((s.emotion_id, s.style_id, s.intensity), (1, 1, 0.5));
        }
        assert!(swap_emotion(&c, 1, &mut rng).is_err());
    }

    #[test]
    fn swap_is_uniform_over_alternatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = CoarseCondition { style_id: 0, emotion_id: 2, intensity: 1.0 };
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[swap_emotion(&c, 5, &mut rng).unwrap().emotion_id] += 1;
        }
        assert_eq!(counts[2], 0);
        for (k, &n) in counts.iter().enumerate().filter(|(k, _)| *k != 2) {
            let f = n as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "emotion {k}: {f}");
        }
    }

    #[test]
    fn sparsify_extremes_and_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fc = FineCondition::new((0..10_000).map(|i| Triplet::new(["AU01", "AU12"], i % 40, i % 40 + 3)).collect());
        assert_eq!(sparsify_fine(&fc, 0.0, 0.0, &mut rng).unwrap(), fc);
        assert!(sparsify_fine(&fc, 1.0, 0.0, &mut rng).unwrap().is_empty());
        let kept = sparsify_fine(&fc, 0.8, 0.0, &mut rng).unwrap();
        let rate = kept.len() as f64 / 10_000.0;
        assert!((rate - 0.2).abs() <= 0.015, "survival {rate}");
        assert!(sparsify_fine(&fc, 1.5, 0.0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn swap_never_returns_input(seed in 0u64..10_000, n in 2usize..8, e in 0usize..8) {
            let e = e % n;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = CoarseCondition { style_id: 0, emotion_id: e, intensity: 0.3 };
            let s = swap_emotion(&c, n, &mut rng).unwrap();
            prop_assert_ne!(s.emotion_id, e);
            prop_assert!(s.emotion_id < n);
        }

        #[test]
        fn sparsify_is_a_subset(seed in 0u64..10_000, p_t in 0.0f64..1.0, p_a in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fc = FineCondition::new(vec![
                Triplet::new(["AU01", "AU02", "AU04"], 0, 5),
                Triplet::new(["AU12"], 3, 9),
                Triplet::new(["AU26", "AU45"], 10, 20),
            ]);
            let out = sparsify_fine(&fc, p_t, p_a, &mut rng).unwrap();
            for tr in &out.triplets {
                prop_assert!(!tr.aus.is_empty());
                let src = fc.triplets.iter().find(|s| s.start == tr.start && s.end == tr.end);
                prop_assert!(src.is_some());
                prop_assert!(tr.aus.is_subset(&src.unwrap().aus));
            }
        }
    }
}
