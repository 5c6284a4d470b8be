//! Frame-level encodings of a fine condition and the banded audio alignment mask.

use crate::coretypes::condition::FineCondition;
use crate::coretypes::vocab::AuVocabulary;
use crate::error::Result;
use crate::numerics::{Tensor, MASK_SENTINEL};
use crate::scalar::Scalar;

/// Default alignment band: each motion frame sees its own audio frame and
/// the immediate neighbours.
pub const DEFAULT_ALIGN_HALF_WIDTH: usize = 1;

/// `T x |vocab|` multi-hot grid: `(t, j) = 1` iff a triplet naming AU `j`
/// covers frame `t`.
pub fn build_fine_grid<T: Scalar>(fc: &FineCondition, vocab: &AuVocabulary, frames: usize) -> Result<Tensor<T>> {
    fc.validate(frames)?;
    let resolved = fc.resolve(vocab)?;
    let mut grid = Tensor::zeros(frames, vocab.len());
    for (tr, aus) in fc.triplets.iter().zip(&resolved) {
        for t in tr.start..tr.end {
            for &j in aus {
                grid.set(t, j, T::one());
            }
        }
    }
    Ok(grid)
}

/// `T x D` spatiotemporal control mask: `(t, c) = 1` iff an active triplet
/// at `t` names an AU mapped to channel `c`.
pub fn build_ctrl_mask<T: Scalar>(
    fc: &FineCondition,
    vocab: &AuVocabulary,
    frames: usize,
    channels: usize,
) -> Result<Tensor<T>> {
    fc.validate(frames)?;
    let resolved = fc.resolve(vocab)?;
    if vocab.num_channels != channels {
        return Err(crate::Error::Config(format!(
            "vocabulary maps {} channels, motion has {channels}",
            vocab.num_channels
        )));
    }
    let mut mask = Tensor::zeros(frames, channels);
    for (tr, aus) in fc.triplets.iter().zip(&resolved) {
        let cs = vocab.channel_union(aus);
        for t in tr.start..tr.end {
            for &c in &cs {
                mask.set(t, c, T::one());
            }
        }
    }
    Ok(mask)
}

/// `T x 1` temporal mask: 1 on every frame covered by some triplet.
pub fn build_cfg_mask<T: Scalar>(fc: &FineCondition, frames: usize) -> Result<Tensor<T>> {
    fc.validate(frames)?;
    let mut mask = Tensor::zeros(frames, 1);
    for tr in &fc.triplets {
        for t in tr.start..tr.end {
            mask.set(t, 0, T::one());
        }
    }
    Ok(mask)
}

/// `T x T` additive attention mask: 0 inside the band `|i - j| <= half_width`,
/// [`MASK_SENTINEL`] outside. The sentinel underflows to an exact zero weight
/// after softmax while keeping the scores finite.
pub fn build_align_mask<T: Scalar>(frames: usize, half_width: usize) -> Tensor<T> {
    let neg = T::lit(MASK_SENTINEL);
    Tensor::from_fn(frames, frames, |i, j| if i.abs_diff(j) <= half_width { T::zero() } else { neg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coretypes::condition::Triplet;
    use crate::coretypes::vocab::{AuEntry, FaceRegion};
    use crate::Error;
    use proptest::prelude::*;

    fn vocab() -> AuVocabulary {
        AuVocabulary::default_arkit()
    }

    fn triplet_strategy(frames: usize) -> impl Strategy<Value = Triplet> {
        let ids: Vec<String> = vocab().ids().map(String::from).collect();
        (proptest::sample::subsequence(ids, 1..4), 0..frames)
            .prop_flat_map(move |(aus, start)| (Just(aus), Just(start), start + 1..=frames))
            .prop_map(|(aus, start, end)| Triplet::new(aus, start, end))
    }

    fn fine_strategy(frames: usize, max: usize) -> impl Strategy<Value = FineCondition> {
        proptest::collection::vec(triplet_strategy(frames), 0..max).prop_map(FineCondition::new)
    }

    #[test]
    fn empty_condition_gives_zero_grid() {
        let g: Tensor<f64> = build_fine_grid(&FineCondition::empty(), &vocab(), 10).unwrap();
        assert_eq!(g.shape(), [10, 16]);
        assert_eq!(g.sum(), 0.0);
        let m: Tensor<f64> = build_ctrl_mask(&FineCondition::empty(), &vocab(), 10, 51).unwrap();
        assert_eq!(m.sum(), 0.0);
        let c: Tensor<f64> = build_cfg_mask(&FineCondition::empty(), 10).unwrap();
        assert_eq!(c.sum(), 0.0);
    }

    #[test]
    fn single_triplet_grid() {
        let v = vocab();
        let fc = FineCondition::new(vec![Triplet::new(["AU12"], 2, 5)]);
        let g: Tensor<f64> = build_fine_grid(&fc, &v, 8).unwrap();
        let col = v.index_of("AU12").unwrap();
        for t in 0..8 {
            for j in 0..16 {
                let want = if (2..5).contains(&t) && j == col { 1.0 } else { 0.0 };
                assert_eq!(g.get(t, j), want, "({t},{j})");
            }
        }
    }

    #[test]
    fn ctrl_mask_uses_channel_map() {
        let smile = AuEntry { id: "AU12".into(), region: FaceRegion::Lower, description: String::new(), channels: vec![38, 39] };
        let v = AuVocabulary::new(51, vec![smile]).unwrap();
        let fc = FineCondition::new(vec![Triplet::new(["AU12"], 10, 20)]);
        let m: Tensor<f64> = build_ctrl_mask(&fc, &v, 30, 51).unwrap();
        for t in 0..30 {
            for c in 0..51 {
                let want = (10..20).contains(&t) && (c == 38 || c == 39);
                assert_eq!(m.get(t, c) == 1.0, want);
            }
        }
    }

    #[test]
    fn full_span_cfg_mask_is_all_ones() {
        let fc = FineCondition::new(vec![Triplet::new(["AU01"], 0, 12)]);
        let m: Tensor<f64> = build_cfg_mask(&fc, 12).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn errors_are_typed() {
        let v = vocab();
        let out = FineCondition::new(vec![Triplet::new(["AU01"], 3, 11)]);
        assert!(matches!(build_fine_grid::<f64>(&out, &v, 10), Err(Error::Range(_))));
        let unknown = FineCondition::new(vec![Triplet::new(["AU99"], 0, 2)]);
        assert!(matches!(build_ctrl_mask::<f64>(&unknown, &v, 10, 51), Err(Error::Config(_))));
    }

    #[test]
    fn align_mask_examples() {
        let m: Tensor<f64> = build_align_mask(3, 1);
        let s = MASK_SENTINEL;
        assert_eq!(m.data(), &[0.0, 0.0, s, 0.0, 0.0, 0.0, s, 0.0, 0.0]);
        assert_eq!(build_align_mask::<f64>(1, 1).data(), &[0.0]);
        assert!(build_align_mask::<f64>(7, 7).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fifty_random_triplets_match_brute_force() {
        use rand::{Rng, SeedableRng};
        let v = vocab();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let frames = 80;
        let triplets: Vec<Triplet> = (0..50)
            .map(|_| {
                let start = rng.random_range(0..frames);
                let end = rng.random_range(start + 1..=frames);
                let n = rng.random_range(1..=3);
                let aus: Vec<String> = (0..n).map(|_| v.entry(rng.random_range(0..v.len())).id.clone()).collect();
                Triplet::new(aus, start, end)
            })
            .collect();
        let fc = FineCondition::new(triplets);
        let m: Tensor<f64> = build_ctrl_mask(&fc, &v, frames, 51).unwrap();
        for t in 0..frames {
            for c in 0..51 {
                let want = fc.triplets.iter().any(|tr| {
                    tr.contains_frame(t) && tr.aus.iter().any(|a| v.entry(v.index_of(a).unwrap()).channels.contains(&c))
                });
                assert_eq!(m.get(t, c) == 1.0, want, "({t},{c})");
            }
        }
    }

    proptest! {
        #[test]
        fn grid_matches_membership(fc in fine_strategy(24, 6)) {
            let v = vocab();
            let g: Tensor<f64> = build_fine_grid(&fc, &v, 24).unwrap();
            for t in 0..24 {
                for j in 0..v.len() {
                    let want = fc.triplets.iter().any(|tr| tr.contains_frame(t) && tr.aus.contains(&v.entry(j).id));
                    prop_assert_eq!(g.get(t, j) == 1.0, want);
                }
            }
        }

        #[test]
        fn adding_a_triplet_never_clears_a_cell(fc in fine_strategy(20, 5), extra in triplet_strategy(20)) {
            let v = vocab();
            let before: Tensor<f64> = build_fine_grid(&fc, &v, 20).unwrap();
            let mut more = fc.clone();
            more.triplets.push(extra);
            let after: Tensor<f64> = build_fine_grid(&more, &v, 20).unwrap();
            for (a, b) in before.data().iter().zip(after.data()) {
                prop_assert!(*b >= *a);
            }
        }

        #[test]
        fn cfg_mask_is_row_or_of_grid(fc in fine_strategy(20, 5)) {
            let v = vocab();
            let g: Tensor<f64> = build_fine_grid(&fc, &v, 20).unwrap();
            let c: Tensor<f64> = build_cfg_mask(&fc, 20).unwrap();
            for t in 0..20 {
                let any = g.row(t).contains(&1.0);
                prop_assert_eq!(c.get(t, 0) == 1.0, any);
            }
        }

        #[test]
        fn spatial_mask_implies_temporal_mask(fc in fine_strategy(20, 5)) {
            let v = vocab();
            let m: Tensor<f64> = build_ctrl_mask(&fc, &v, 20, 51).unwrap();
            let c: Tensor<f64> = build_cfg_mask(&fc, 20).unwrap();
            for t in 0..20 {
                if m.row(t).contains(&1.0) {
                    prop_assert_eq!(c.get(t, 0), 1.0);
                }
            }
        }

        #[test]
        fn builders_are_deterministic(fc in fine_strategy(16, 4)) {
            let v = vocab();
            prop_assert_eq!(build_ctrl_mask::<f64>(&fc, &v, 16, 51).unwrap(), build_ctrl_mask::<f64>(&fc, &v, 16, 51).unwrap());
            prop_assert_eq!(build_fine_grid::<f64>(&fc, &v, 16).unwrap(), build_fine_grid::<f64>(&fc, &v, 16).unwrap());
        }

        #[test]
        fn band_softmax_zeroes_outside(frames in 1usize..12, hw in 0usize..4, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let store = crate::numerics::ParamStore::<f64>::new();
            let mut g = crate::numerics::Graph::new(&store);
            // Width-T queries/keys with identity values expose the weights directly.
            let q = g.input(Tensor::randn(frames, frames, 3.0, &mut rng));
            let k = g.input(Tensor::randn(frames, frames, 3.0, &mut rng));
            let v = g.input(Tensor::identity(frames));
            let mask = build_align_mask::<f64>(frames, hw);
            let out = g.attention(q, k, v, 1, 1, Some(&mask)).unwrap();
            let w = g.value(out);
            for i in 0..frames {
                let s: f64 = w.row(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                for j in 0..frames {
                    if i.abs_diff(j) > hw {
                        prop_assert_eq!(w.get(i, j), 0.0);
                    }
                }
            }
        }
    }
}
