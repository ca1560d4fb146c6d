//! Property-based invariants across modules.

use emtal_core::archive::{archive_bytes, read_archive_bytes, AnyMatrix, Meta, TensorMap};
use emtal_core::linalg::{softmax_rows, Matrix};
use emtal_core::moefy::partition_balanced_kmeans;
use emtal_core::taskdata::{batch_iter, build_label_space};
use proptest::prelude::*;

fn matrix_strategy(max_dim: usize, scale: f64) -> impl Strategy<Value = Matrix<f64>> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(-scale..scale, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(m in matrix_strategy(8, 50.0)) {
        let s = softmax_rows(&m);
        for i in 0..s.rows() {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6, "row {i}: {sum}");
            prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn archive_round_trip_is_identity(
        tensors in proptest::collection::btree_map(
            "[a-z][a-z0-9.]{0,12}",
            (matrix_strategy(5, 10.0), any::<bool>()).prop_map(|(m, f32_flag)| {
                if f32_flag {
                    AnyMatrix::F32(Matrix::from_f64_matrix(&m))
                } else {
                    AnyMatrix::F64(m)
                }
            }),
            0..8,
        )
    ) {
        let map: TensorMap = tensors.into_iter().collect();
        let meta = Meta::new();
        let bytes = archive_bytes(&map, &meta).unwrap();
        let (back, _) = read_archive_bytes(&bytes).unwrap();
        prop_assert_eq!(map, back);
    }

    #[test]
    fn label_space_round_trips(counts in proptest::collection::vec(1usize..9, 1..6)) {
        let space = build_label_space(&counts).unwrap();
        for global in 0..space.n_class() {
            let (task, local) = space.to_local(global).unwrap();
            prop_assert_eq!(space.to_global(task, local).unwrap(), global);
        }
    }

    #[test]
    fn balanced_partition_is_a_balanced_bijection(
        k in 1usize..5,
        per in 1usize..5,
        seed in 0u64..50,
    ) {
        let h = k * per;
        let m: Matrix<f64> = emtal_core::linalg::Rng::new(seed).normal_matrix(4, h, 1.0);
        let p = partition_balanced_kmeans(&m, k, 10, seed).unwrap();
        let mut seen = vec![false; h];
        for &old in &p.permutation {
            prop_assert!(!seen[old]);
            seen[old] = true;
        }
        for cluster in 0..k {
            prop_assert_eq!(p.assignment.iter().filter(|&&a| a == cluster).count(), per);
        }
        let inv = p.inverse_permutation();
        for old in 0..h {
            prop_assert_eq!(p.permutation[inv[old]], old);
        }
    }

    #[test]
    fn epoch_batches_partition_the_dataset(
        n in 1usize..50,
        batch in 1usize..9,
        seed in 0u64..20,
        epoch in 0u64..4,
    ) {
        let batches = batch_iter(n, batch, seed, epoch);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for (i, b) in batches.iter().enumerate() {
            if i + 1 < batches.len() {
                prop_assert_eq!(b.len(), batch);
            } else {
                prop_assert!(b.len() <= batch && !b.is_empty());
            }
        }
    }

    #[test]
    fn kyfan_ratio_is_monotone_and_bounded(m in matrix_strategy(7, 3.0)) {
        let min_dim = m.rows().min(m.cols());
        let mut last = 0.0f64;
        for k in 1..=min_dim {
            let r = emtal_core::analysis::kyfan_ratio(&m, k).unwrap();
            prop_assert!(r >= last - 1e-9);
            prop_assert!(r <= 1.0 + 1e-9);
            last = r;
        }
        prop_assert!((last - 1.0).abs() < 1e-9);
    }
}
