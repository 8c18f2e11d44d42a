//! Simulated execution: amplitude encoding, exact statevector evolution and
//! computational-basis sampling.

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{apply_to_columns, Circuit};
use crate::error::{mismatch, Error, Result};
use crate::mpo::check_guard;
use crate::tensor::{seeded_rng, DenseTensor, C64};

/// Largest statevector dimension simulated.
pub const STATE_GUARD: u128 = 1 << 20;

const SHOT_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub num_sites: usize,
    pub site_dims: Vec<usize>,
    pub amplitudes: Vec<C64>,
    /// Norm of the encoded input before normalization.
    pub input_norm: f64,
}

impl StateVector {
    pub fn probabilities(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    /// `amplitudes · input_norm`.
    pub fn decode(&self) -> Vec<C64> {
        self.amplitudes.iter().map(|a| a * self.input_norm).collect()
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Amplitude encoding of `x` on sites with the given dims.
pub fn encode_state(x: &[C64], site_dims: &[usize]) -> Result<StateVector> {
    let dim: usize = site_dims.iter().product();
    if site_dims.is_empty() || x.len() != dim {
        return Err(mismatch(format!(
            "vector of length {} does not fit site dims {site_dims:?}",
            x.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoded vector".into()));
    }
    let norm = x.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidConfig("cannot encode the zero vector".into()));
    }
    Ok(StateVector {
        num_sites: site_dims.len(),
        site_dims: site_dims.to_vec(),
        amplitudes: x.iter().map(|v| v / norm).collect(),
        input_norm: norm,
    })
}

/// Exact evolution `C|ψ⟩`, gate by gate in circuit order.
pub fn apply_circuit_state(c: &Circuit, s: &StateVector) -> Result<StateVector> {
    check_guard(s.amplitudes.len() as u128, STATE_GUARD)?;
    if c.site_dims() != s.site_dims.as_slice() {
        return Err(mismatch(format!(
            "circuit on sites {:?} applied to state on {:?}",
            c.site_dims(),
            s.site_dims
        )));
    }
    let col = DenseTensor::new(vec![s.amplitudes.len(), 1], s.amplitudes.clone())?;
    let out = apply_to_columns(c, &col, false)?;
    Ok(StateVector {
        amplitudes: out.into_data(),
        ..s.clone()
    })
}

/// Multinomial draw of `shots` basis outcomes from `|amplitude|²`, drawn as a
/// chain of conditional binomials.
pub fn sample_counts(s: &StateVector, shots: u64, seed: u64) -> Result<Vec<u64>> {
    if shots == 0 {
        return Err(Error::InvalidConfig("shots must be at least 1".into()));
    }
    let probs = s.probabilities();
    let total: f64 = probs.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFinite("state probabilities".into()));
    }
    let mut rng = seeded_rng(seed);
    let mut counts = vec![0u64; probs.len()];
    let mut left = shots;
    let mut mass = total;
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if i + 1 == probs.len() || p >= mass {
            counts[i] = left;
            break;
        }
        let q = (p / mass).clamp(0.0, 1.0);
        let k = Binomial::new(left, q).expect("probability in [0, 1]").sample(&mut rng);
        counts[i] = k;
        left -= k;
        mass -= p;
    }
    Ok(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotStudy {
    pub shots_list: Vec<u64>,
    pub l2_errors: Vec<f64>,
    pub seed: u64,
}

/// Seed used for the `index`-th shot setting of a study seeded with `seed`.
pub fn shot_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(SHOT_SEED_MIX.wrapping_mul(index as u64 + 1))
}

/// `‖p̂ − p‖₂` between empirical and exact output probabilities of `C|x⟩` for
/// each shot count.
pub fn shot_noise_study(c: &Circuit, x: &[C64], shots_list: &[u64], seed: u64) -> Result<ShotStudy> {
    let state = apply_circuit_state(c, &encode_state(x, c.site_dims())?)?;
    let exact = state.probabilities();
    let l2_errors = shots_list
        .par_iter()
        .enumerate()
        .map(|(i, &shots)| {
            let counts = sample_counts(&state, shots, shot_seed(seed, i))?;
            let n = shots as f64;
            Ok(counts
                .iter()
                .zip(&exact)
                .map(|(&k, &p)| (k as f64 / n - p).powi(2))
                .sum::<f64>()
                .sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShotStudy {
        shots_list: shots_list.to_vec(),
        l2_errors,
        seed,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::{apply_circuit_dense, brickwork, cnot, CircuitLayout, Gate, GateInit, Parity, Side};

    fn real(v: &[f64]) -> Vec<C64> {
        v.iter().map(|&r| C64::new(r, 0.0)).collect()
    }

    fn basis(dim: usize, i: usize) -> Vec<C64> {
        let mut v = vec![C64::new(0.0, 0.0); dim];
        v[i] = C64::new(1.0, 0.0);
        v
    }

    #[test]
    fn encoding_normalizes_and_records_norm() {
        let s = encode_state(&real(&[3.0, 4.0, 0.0, 0.0]), &[2, 2]).unwrap();
        assert!((s.amplitudes[0].re - 0.6).abs() < 1e-15);
        assert!((s.amplitudes[1].re - 0.8).abs() < 1e-15);
        assert_eq!(s.input_norm, 5.0);
        let e = encode_state(&basis(8, 3), &[2, 2, 2]).unwrap();
        assert_eq!(e.amplitudes, basis(8, 3));
        assert_eq!(e.input_norm, 1.0);
    }

    #[test]
    fn decode_round_trips() {
        let x = DenseTensor::random(&[16, 1], &mut seeded_rng(1)).into_data();
        let s = encode_state(&x, &[2; 4]).unwrap();
        assert!((s.norm() - 1.0).abs() < 1e-10);
        for (a, b) in s.decode().iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn encoding_rejects_bad_input() {
        assert!(matches!(
            encode_state(&real(&[0.0; 4]), &[2, 2]),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            encode_state(&real(&[1.0; 3]), &[2, 2]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cnot_flips_target() {
        let c = Circuit::from_layers(
            &[2, 2],
            Parity::Even,
            vec![vec![Gate::new(0, (2, 2), cnot()).unwrap()]],
            Side::Output,
        )
        .unwrap();
        let s = apply_circuit_state(&c, &encode_state(&basis(4, 2), &[2, 2]).unwrap()).unwrap();
        assert!((s.amplitudes[3] - C64::new(1.0, 0.0)).norm() < 1e-15);
        let id = Circuit::empty(&[2, 2], Side::Output);
        let x = encode_state(&real(&[1.0, 2.0, 3.0, 4.0]), &[2, 2]).unwrap();
        assert_eq!(apply_circuit_state(&id, &x).unwrap(), x);
    }

    #[test]
    fn evolution_matches_dense_circuit() {
        let c = brickwork(
            &CircuitLayout::new(6, 2),
            &[2; 6],
            Side::Output,
            GateInit::Haar { seed: 4 },
        )
        .unwrap();
        let x = DenseTensor::random(&[64, 1], &mut seeded_rng(5));
        let s = apply_circuit_state(&c, &encode_state(x.data(), &[2; 6]).unwrap()).unwrap();
        assert!((s.norm() - 1.0).abs() < 1e-10);
        let dense = apply_circuit_dense(&c, &x, false).unwrap();
        for (a, b) in s.decode().iter().zip(dense.data()) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn basis_state_counts_land_in_one_bin() {
        let s = encode_state(&basis(8, 5), &[2, 2, 2]).unwrap();
        let counts = sample_counts(&s, 1000, 3).unwrap();
        assert_eq!(counts[5], 1000);
        assert_eq!(counts.iter().sum::<u64>(), 1000);
    }

    #[test]
    fn uniform_state_concentrates() {
        let s = encode_state(&real(&[1.0; 4]), &[2, 2]).unwrap();
        let shots = 400_000;
        let counts = sample_counts(&s, shots, 9).unwrap();
        assert_eq!(counts.iter().sum::<u64>(), shots);
        for &k in &counts {
            assert!((k as f64 / shots as f64 - 0.25).abs() <= 0.01);
        }
        assert_eq!(counts, sample_counts(&s, shots, 9).unwrap());
    }

    #[test]
    fn zero_shots_are_rejected() {
        let s = encode_state(&basis(2, 0), &[2]).unwrap();
        assert!(sample_counts(&s, 0, 0).is_err());
    }

    #[test]
    fn basis_input_study_has_zero_error() {
        let c = Circuit::empty(&[2, 2, 2], Side::Output);
        let study = shot_noise_study(&c, &basis(8, 1), &[100, 1000], 0).unwrap();
        assert_eq!(study.l2_errors, vec![0.0, 0.0]);
        assert_eq!(study.shots_list.len(), study.l2_errors.len());
    }

    #[test]
    fn error_shrinks_with_shots() {
        let c = brickwork(
            &CircuitLayout::new(4, 2),
            &[2; 4],
            Side::Output,
            GateInit::Haar { seed: 6 },
        )
        .unwrap();
        let x = DenseTensor::random(&[16, 1], &mut seeded_rng(7)).into_data();
        let study = shot_noise_study(&c, &x, &[100, 1_000_000], 8).unwrap();
        assert!(study.l2_errors[1] < study.l2_errors[0]);
    }

    #[test]
    fn median_error_ratio_follows_inverse_sqrt() {
        let c = brickwork(
            &CircuitLayout::new(4, 2),
            &[2; 4],
            Side::Output,
            GateInit::Haar { seed: 10 },
        )
        .unwrap();
        let x = DenseTensor::random(&[16, 1], &mut seeded_rng(11)).into_data();
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            (v[9] + v[10]) / 2.0
        };
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for seed in 0..20 {
            let s = shot_noise_study(&c, &x, &[100, 10_000], seed).unwrap();
            lo.push(s.l2_errors[0]);
            hi.push(s.l2_errors[1]);
        }
        let ratio = median(hi) / median(lo);
        assert!((0.03..=0.3).contains(&ratio), "{ratio}");
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 10.0, 100.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.5)).collect();
        assert!((log_log_slope(&xs, &ys) + 0.5).abs() < 1e-12);
    }
}
