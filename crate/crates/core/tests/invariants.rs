//! Property tests of structural invariants across the crate.

use proptest::prelude::*;
use qllm_core::circuit::{apply_circuit_dense, apply_circuit_mpo, brickwork, CircuitLayout, GateInit, Parity, Side};
use qllm_core::disentangler::{procrustes_gate_update, FactorizedOperator};
use qllm_core::layer::{apply_to_batch, enhance, EnhanceConfig};
use qllm_core::mpo::{bond_entropies, canonicalize, mpo_from_matrix, mpo_to_matrix, truncate_mpo, SiteSpec};
use qllm_core::planted::{plant_instance, PlantedSpec};
use qllm_core::sampling::{encode_state, sample_counts};
use qllm_core::tensor::{haar_unitary, seeded_rng, svd_truncate, DenseTensor, TruncationPolicy};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn svd_truncation_error_matches_discarded_weight(rows in 1usize..9, cols in 1usize..9, chi in 1usize..9, seed: u64) {
        let m = DenseTensor::random(&[rows, cols], &mut seeded_rng(seed));
        let svd = svd_truncate(&m, &TruncationPolicy::with_chi(chi)).unwrap();
        prop_assert!(svd.rank() <= chi.min(rows).min(cols));
        prop_assert!(svd.singular_values.windows(2).all(|p| p[0] >= p[1]));
        let direct = svd.reconstruct().rel_diff(&m);
        prop_assert!((direct - svd.trunc_error).abs() < 1e-10);
        let left = svd.left_factor.adjoint().matmul(&svd.left_factor).unwrap();
        prop_assert!(left.max_abs_diff(&DenseTensor::identity(svd.rank())) < 1e-10);
    }

    #[test]
    fn mpo_round_trip_for_any_shape(a in 0u32..4, b in 0u32..4, d in 2usize..4, seed: u64) {
        let (rows, cols) = (d.pow(a.max(1)), d.pow(b.max(1)));
        let w = DenseTensor::random(&[rows, cols], &mut seeded_rng(seed));
        let spec = SiteSpec::for_shape(rows, cols, d).unwrap();
        let (m, err) = mpo_from_matrix(&w, &spec, &TruncationPolicy::unbounded()).unwrap();
        prop_assert!(err < 1e-12);
        prop_assert!(mpo_to_matrix(&m).unwrap().rel_diff(&w) < 1e-10);
    }

    #[test]
    fn canonical_forms_represent_the_same_operator(k in 2usize..5, center in 0usize..4, seed: u64) {
        let center = center % k;
        let w = DenseTensor::random(&[1 << k, 1 << k], &mut seeded_rng(seed));
        let (m, _) = mpo_from_matrix(&w, &SiteSpec::uniform(k, 2), &TruncationPolicy::unbounded()).unwrap();
        let c = canonicalize(&m, center).unwrap();
        prop_assert!(c.isometry_residual(center) < 1e-10);
        prop_assert!(mpo_to_matrix(&c).unwrap().rel_diff(&w) < 1e-10);
        let (e1, e2) = (bond_entropies(&m).unwrap(), bond_entropies(&c).unwrap());
        for (x, y) in e1.iter().zip(&e2) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn truncation_respects_bond_cap(k in 2usize..5, chi in 1usize..5, seed: u64) {
        let w = DenseTensor::random(&[1 << k, 1 << k], &mut seeded_rng(seed));
        let (m, _) = mpo_from_matrix(&w, &SiteSpec::uniform(k, 2), &TruncationPolicy::unbounded()).unwrap();
        let (t, _) = truncate_mpo(&m, &TruncationPolicy::with_chi(chi)).unwrap();
        prop_assert!(t.max_bond() <= chi);
        prop_assert!(mpo_to_matrix(&t).unwrap().norm() <= w.norm() * (1.0 + 1e-12));
    }

    #[test]
    fn circuit_then_adjoint_is_identity(k in 2usize..6, layers in 0usize..4, odd: bool, output: bool, seed: u64) {
        let mut layout = CircuitLayout::new(k, layers);
        layout.parity_start = if odd { Parity::Odd } else { Parity::Even };
        let side = if output { Side::Output } else { Side::Input };
        let c = brickwork(&layout, &vec![2; k], side, GateInit::Haar { seed }).unwrap();
        prop_assert!(c.max_unitarity_residual() < 1e-10);
        let w = DenseTensor::random(&[1 << k, 1 << k], &mut seeded_rng(seed ^ 1));
        let there = apply_circuit_dense(&c, &w, false).unwrap();
        let back = apply_circuit_dense(&c, &there, true).unwrap();
        prop_assert!(back.rel_diff(&w) < 1e-10);
        prop_assert!((there.norm() - w.norm()).abs() < 1e-10 * w.norm());
        let (m, _) = mpo_from_matrix(&w, &SiteSpec::uniform(k, 2), &TruncationPolicy::unbounded()).unwrap();
        let (cm, _) = apply_circuit_mpo(&m, &c, false, &TruncationPolicy::unbounded()).unwrap();
        prop_assert!(mpo_to_matrix(&cm).unwrap().rel_diff(&there) < 1e-9);
    }

    #[test]
    fn gate_update_beats_random_unitaries(n in 2usize..7, seed: u64) {
        let mut rng = seeded_rng(seed);
        let env = DenseTensor::random(&[n, n], &mut rng);
        let (g, obj) = procrustes_gate_update(&env).unwrap();
        prop_assert!(g.unitarity_residual() < 1e-10);
        prop_assert!((g.matmul(&env).unwrap().trace().re - obj).abs() < 1e-10 * obj.max(1.0));
        for _ in 0..20 {
            let h = haar_unitary(n, &mut rng);
            prop_assert!(h.matmul(&env).unwrap().trace().re <= obj + 1e-10);
        }
    }

    #[test]
    fn enhancement_without_noise_preserves_operator(layers in 0usize..3, extra in 0usize..3, grow in 0usize..3, seed in 0u64..1000) {
        let (_, truth) = plant_instance(&PlantedSpec::new(3, layers, 2, seed)).unwrap();
        let mut cfg = EnhanceConfig::new(2 + grow);
        cfg.add_layers_u = extra;
        cfg.add_layers_v = extra;
        let grown = enhance(&truth, &cfg).unwrap();
        prop_assert!(grown.to_dense().unwrap().rel_diff(&truth.to_dense().unwrap()) < 1e-12);
        prop_assert_eq!(grown.u.num_layers(), layers + extra);
    }

    #[test]
    fn batched_application_matches_dense(layers in 0usize..3, batch in 1usize..5, seed in 0u64..1000) {
        let (w, truth) = plant_instance(&PlantedSpec::new(3, layers, 2, seed)).unwrap();
        let x = DenseTensor::random(&[8, batch], &mut seeded_rng(seed));
        let y = apply_to_batch(&truth, &x).unwrap();
        prop_assert!(y.rel_diff(&w.matmul(&x).unwrap()) < 1e-10);
        let plain = FactorizedOperator::plain(truth.core.clone());
        let yc = apply_to_batch(&plain, &x).unwrap();
        prop_assert!(yc.rel_diff(&mpo_to_matrix(&truth.core).unwrap().matmul(&x).unwrap()) < 1e-10);
    }

    #[test]
    fn sampled_counts_sum_to_shots(k in 1usize..5, shots in 1u64..100_000, seed: u64) {
        let x = DenseTensor::random(&[1 << k], &mut seeded_rng(seed)).into_data();
        let s = encode_state(&x, &vec![2; k]).unwrap();
        let counts = sample_counts(&s, shots, seed).unwrap();
        prop_assert_eq!(counts.len(), 1 << k);
        prop_assert_eq!(counts.iter().sum::<u64>(), shots);
    }
}
