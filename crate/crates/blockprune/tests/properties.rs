//! Property tests for the operator invariants, partition algebra, schedule
//! shape, and checkpoint round-trips.

use proptest::prelude::*;

use blockprune::blocks::{BlockPartition, BlockSpec, LayerDesc, Reduction};
use blockprune::dtopk;
use blockprune::smart::{compute_k, ScheduleFamily, TempSchedule};
use blockprune::tensor::Tensor;
use blockprune::workbench::{Checkpoint, PartitionDesc, PrunerState, TensorEntry};

fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-5.0f64..5.0, n..=n)
}

proptest! {
    #[test]
    fn sum_constraint_and_range_hold(
        x in proptest::collection::vec(-5.0f64..5.0, 2..24),
        k_frac in 0.0f64..1.0,
        tau_exp in -5.0f64..0.5,
    ) {
        let n = x.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        prop_assume!(k < n);
        let tau = 10f64.powf(tau_exp);
        let sol = dtopk::topk_forward(&x, k, tau).unwrap();
        let sum: f64 = sol.f.iter().sum();
        prop_assert!((sum - k as f64).abs() <= 1e-9 * n as f64, "sum {sum} vs k {k}");
        for (i, &fi) in sol.f.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&fi), "f[{i}] = {fi}");
            for (j, &fj) in sol.f.iter().enumerate() {
                if x[i] >= x[j] {
                    prop_assert!(fi >= fj - 1e-12, "order broken at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn shift_invariance(
        x in proptest::collection::vec(-2.0f64..2.0, 2..12),
        shift in -10.0f64..10.0,
        k_frac in 0.0f64..1.0,
    ) {
        let n = x.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        prop_assume!(k < n);
        let a = dtopk::topk_forward(&x, k, 0.4).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
        let b = dtopk::topk_forward(&shifted, k, 0.4).unwrap();
        for (fa, fb) in a.f.iter().zip(&b.f) {
            prop_assert!((fa - fb).abs() <= 1e-9, "{fa} vs {fb}");
        }
    }

    #[test]
    fn hard_topk_matches_independent_sort(
        x in proptest::collection::vec(-3.0f64..3.0, 1..20),
        k_frac in 0.0f64..=1.0,
    ) {
        let n = x.len();
        let k = (n as f64 * k_frac) as usize;
        prop_assume!(k <= n);
        let got = dtopk::hard_topk(&x, k).unwrap();
        let mut pairs: Vec<(usize, f64)> = x.iter().cloned().enumerate().collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut want = vec![0.0; n];
        for &(i, _) in &pairs[..k] {
            want[i] = 1.0;
        }
        prop_assert_eq!(got, want);
    }

    #[test]
    fn vjp_agrees_with_dense_jacobian(
        x in proptest::collection::vec(-2.0f64..2.0, 2..10),
        u in proptest::collection::vec(-1.0f64..1.0, 10..=10),
        k_frac in 0.0f64..1.0,
    ) {
        let n = x.len();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        prop_assume!(k < n);
        let u = &u[..n];
        let jac = dtopk::topk_jacobian(&x, k, 0.6).unwrap();
        let want: Vec<f64> = (0..n).map(|i| (0..n).map(|j| jac[i][j] * u[j]).sum()).collect();
        let got = dtopk::topk_vjp(&x, k, 0.6, u).unwrap();
        for (a, b) in got.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn compute_k_stays_in_bounds(r in 0.0f64..=1.0, n in 1usize..3000) {
        let k = compute_k(r, n);
        prop_assert!(k <= n);
        // Monotone: more sparsity, fewer kept blocks.
        if r >= 0.5 {
            prop_assert!(k <= compute_k(r - 0.5, n));
        }
    }

    #[test]
    fn partition_block_count_formula(
        o in 1usize..40,
        i in 1usize..40,
        kh in 1usize..4,
        kw in 1usize..4,
        bo in 1usize..20,
        bi in 1usize..20,
    ) {
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", o, i, kh, kw, 1.0)],
            BlockSpec::new(bo, bi).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(p.n_blocks(), o.div_ceil(bo) * i.div_ceil(bi) * kh * kw);
        // Every element covered exactly once.
        let mut seen = vec![0usize; o * i * kh * kw];
        for b in 0..p.n_blocks() {
            p.for_each_elem(b, |e| seen[e] += 1);
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn expand_then_reduce_is_identity(
        o in 1usize..12,
        i in 1usize..12,
        bo in 1usize..6,
        bi in 1usize..6,
        seed in 0u64..1000,
    ) {
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", o, i, 1, 1, 1.0)],
            BlockSpec::new(bo, bi).unwrap(),
        )
        .unwrap();
        let mut rng = blockprune::rng::Rng::new(seed);
        let v: Vec<f64> = (0..p.n_blocks()).map(|_| rng.uniform(0.0, 2.0)).collect();
        let mult = p.expand_mask(&v).unwrap();
        let back = p.block_reduce(&mult, Reduction::MeanAbs).unwrap();
        for (a, b) in back.iter().zip(&v) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn hardened_sparsity_is_exact(
        n_blocks in 1usize..200,
        r in 0.0f64..=1.0,
    ) {
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", n_blocks, 1, 1, 1, 1.0)],
            BlockSpec::new(1, 1).unwrap(),
        )
        .unwrap();
        let mut rng = blockprune::rng::Rng::new(n_blocks as u64);
        let m: Vec<f64> = (0..n_blocks).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k = compute_k(r, n_blocks);
        let mask = dtopk::hard_topk(&m, k).unwrap();
        let rep = p.sparsity_report(&mask).unwrap();
        prop_assert_eq!(rep.zero_blocks, n_blocks - k);
    }

    #[test]
    fn schedules_are_monotone_with_exact_ends(
        family_ix in 0usize..3,
        tau_end_exp in -6.0f64..-1.0,
        delta_exp in -3.0f64..-0.1,
        si in 1u64..500,
    ) {
        let family = [
            ScheduleFamily::Linear,
            ScheduleFamily::Exponential,
            ScheduleFamily::InverseExponential,
        ][family_ix];
        let tau_end = 10f64.powf(tau_end_exp);
        let tau_start = tau_end + 10f64.powf(delta_exp);
        if family == ScheduleFamily::Exponential && tau_end - tau_start + 1.0 <= 0.0 {
            return Ok(());
        }
        let s = TempSchedule::new(family, tau_start, tau_end, si).unwrap();
        prop_assert!((s.value(0) - tau_start).abs() <= 1e-12);
        prop_assert!((s.value(si) - tau_end).abs() <= 1e-12);
        let mut prev = f64::INFINITY;
        let step = (si / 50).max(1);
        let mut n = 0;
        while n <= si + 3 * step {
            let v = s.value(n);
            prop_assert!(v <= prev + 1e-15);
            prop_assert!(v > 0.0);
            prev = v;
            n += step;
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(
        data in finite_vec(12),
        m in finite_vec(5),
        tau in 1e-6f64..1.0,
        iter in 0u64..100000,
        hash in proptest::num::u64::ANY,
    ) {
        let ck = Checkpoint {
            config_hash: hash,
            tensors: vec![TensorEntry { name: "w".into(), shape: vec![3, 4], data: data.clone() }],
            pruner: Some(PrunerState {
                m: m.clone(),
                tau,
                t: -3.25,
                iter,
                phase: 1,
                epoch: 9,
                hard_mask: Some(vec![1.0, 0.0, 1.0, 1.0, 0.0]),
            }),
            partition: Some(PartitionDesc {
                bo: 2,
                bi: 2,
                layers: vec![LayerDesc::linear("fc", 4, 3)],
            }),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        // Bitwise field equality, not just PartialEq.
        for (a, b) in ck.tensors[0].data.iter().zip(&back.tensors[0].data) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(bytes, back.to_bytes());
    }
}

#[test]
fn masked_weight_multiplier_counts() {
    // Binary block values expand to exactly (pruned blocks x block size) zeros.
    let p = BlockPartition::new(
        vec![LayerDesc::conv("c", 6, 6, 1, 1, 1.0)],
        BlockSpec::new(2, 3).unwrap(),
    )
    .unwrap();
    let mask: Vec<f64> = (0..p.n_blocks()).map(|b| (b % 2) as f64).collect();
    let mult = p.expand_mask(&mask).unwrap();
    let zeros = mult[0].data().iter().filter(|&&v| v == 0.0).count();
    let want: usize = (0..p.n_blocks()).filter(|&b| b % 2 == 0).map(|b| p.block_size(b)).sum();
    assert_eq!(zeros, want);
    let _ = Tensor::zeros(vec![1]);
}
