use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scl_core::selection::{batch_score, build_batches, incremental_score, BatchOptions, Picker};
use scl_core::snapshot::{SimilarityMatrix, SimilaritySeries};
use scl_core::trajectory::{classify, delta_matrix, Category, DeltaMatrix};

fn square(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
}

fn delta_and_n() -> impl Strategy<Value = (usize, DeltaMatrix)> {
    (2usize..14).prop_flat_map(|n| square(n).prop_map(move |m| (n, DeltaMatrix::new(m).unwrap())))
}

proptest! {
    #[test]
    fn incremental_score_is_the_batch_score_difference(
        (n, delta) in delta_and_n(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
    ) {
        let mut ids: Vec<usize> = Vec::new();
        for p in picks {
            let u = p.index(n);
            if !ids.contains(&u) {
                ids.push(u);
            }
        }
        let u = ids.pop().unwrap();
        let mut grown = ids.clone();
        grown.push(u);
        let diff = batch_score(&grown, &delta).unwrap() - batch_score(&ids, &delta).unwrap();
        prop_assert!((incremental_score(u, &ids, &delta).unwrap() - diff).abs() < 1e-9);
    }

    #[test]
    fn greedy_batches_partition_the_ids(
        (n, delta) in delta_and_n(),
        batch_size in 1usize..7,
        alpha in prop::option::of(0.0f64..=1.0),
        seed in any::<u64>(),
    ) {
        let picker = alpha.map_or(Picker::Uniform, Picker::Quantile);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batches = build_batches(&delta, picker, batch_size, &mut rng, BatchOptions::default()).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.ids.iter().copied()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for b in &batches[..batches.len() - 1] {
            prop_assert_eq!(b.ids.len(), batch_size);
        }
        for b in &batches {
            prop_assert_eq!(b.ids[0], b.seed_id);
            prop_assert!((b.score - batch_score(&b.ids, &delta).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn relabelling_samples_permutes_delta(
        mats in (2usize..7).prop_flat_map(|n| prop::collection::vec(square(n), 3)),
        perm_seed in any::<u64>(),
    ) {
        let n = mats[0].nrows();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
        let series = |relabel: bool| {
            SimilaritySeries::new(
                mats.iter()
                    .enumerate()
                    .map(|(t, m)| SimilarityMatrix {
                        checkpoint: 3 * t,
                        values: if relabel { Array2::from_shape_fn((n, n), |(i, j)| m[[perm[i], perm[j]]]) } else { m.clone() },
                    })
                    .collect(),
            )
            .unwrap()
        };
        let base = delta_matrix(&series(false)).unwrap();
        let moved = delta_matrix(&series(true)).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(moved.delta.get(i, j), base.delta.get(perm[i], perm[j]));
            }
        }
        prop_assert!((moved.s_mean - base.s_mean).abs() < 1e-12);
    }

    #[test]
    fn fall_through_only_where_the_base_rules_leave_a_gap(
        end in -1.0f64..1.0,
        delta in -1.0f64..1.0,
        s_mean in -1.0f64..1.0,
        eps in 0.0f64..0.5,
    ) {
        let label = classify(end, delta, s_mean, eps);
        let gap = (end <= s_mean && delta > eps) || (end > s_mean && delta < -eps);
        prop_assert_eq!(label.fall_through, gap);
        prop_assert_eq!(label.category.ends_high(), end > s_mean);
        if delta.abs() > eps && !gap {
            let expected = if delta > 0.0 { Category::LowToHigh } else { Category::HighToLow };
            prop_assert_eq!(label.category, expected);
        }
    }
}
