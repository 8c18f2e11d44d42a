//! Synthetic targets built from known factors, `W = U₀ · M₀ · V₀† (+ noise)`.

use serde::{Deserialize, Serialize};

use crate::circuit::{brickwork, CircuitLayout, GateInit, Side};
use crate::disentangler::FactorizedOperator;
use crate::error::{Error, Result};
use crate::mpo::{check_guard, dense_guard, truncate_mpo, Mpo, SiteSpec};
use crate::tensor::{seeded_rng, DenseTensor, TruncationPolicy, C64};

const U_SEED_OFFSET: u64 = 0x5851_F42D_4C95_7F2D;
const V_SEED_OFFSET: u64 = 0x1405_7B7E_F767_814F;
const NOISE_SEED_OFFSET: u64 = 0x2545_F491_4F6C_DD1D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub k: usize,
    pub site_dim: usize,
    pub layers_u: usize,
    pub layers_v: usize,
    pub chi_core: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl PlantedSpec {
    /// Qubit sites, the same depth on both sides, no noise.
    pub fn new(k: usize, layers: usize, chi_core: usize, seed: u64) -> Self {
        Self {
            k,
            site_dim: 2,
            layers_u: layers,
            layers_v: layers,
            chi_core,
            noise_level: 0.0,
            seed,
        }
    }

    pub fn site_spec(&self) -> SiteSpec {
        SiteSpec::uniform(self.k, self.site_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.site_dim < 2 {
            return Err(Error::InvalidConfig(format!(
                "planted instance needs k ≥ 1 and site_dim ≥ 2, got k={} site_dim={}",
                self.k, self.site_dim
            )));
        }
        if self.chi_core == 0 {
            return Err(Error::InvalidConfig("chi_core must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::InvalidConfig(format!(
                "noise_level must lie in [0, 1), got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// Haar brickwork circuits around a Gaussian core of bond `chi_core`, plus
/// Gaussian noise of relative Frobenius norm `noise_level` on `W`.
pub fn plant_instance(spec: &PlantedSpec) -> Result<(DenseTensor, FactorizedOperator)> {
    spec.validate()?;
    let sites = spec.site_spec();
    check_guard(sites.dense_len(), dense_guard())?;
    let mut rng = seeded_rng(spec.seed);
    let core = Mpo::random(&sites, spec.chi_core, &mut rng)?;
    let (core, _) = truncate_mpo(&core, &TruncationPolicy::with_chi(spec.chi_core))?;
    let dims = vec![spec.site_dim; spec.k];
    let u = brickwork(
        &CircuitLayout::new(spec.k, spec.layers_u),
        &dims,
        Side::Output,
        GateInit::Haar {
            seed: spec.seed ^ U_SEED_OFFSET,
        },
    )?;
    let v_dag = brickwork(
        &CircuitLayout::new(spec.k, spec.layers_v),
        &dims,
        Side::Input,
        GateInit::Haar {
            seed: spec.seed ^ V_SEED_OFFSET,
        },
    )?;
    let truth = FactorizedOperator::new(u, core, v_dag)?;
    let mut w = truth.to_dense()?;
    if spec.noise_level > 0.0 {
        let mut noise_rng = seeded_rng(spec.seed ^ NOISE_SEED_OFFSET);
        let noise = DenseTensor::random(w.dims(), &mut noise_rng);
        // Solve ‖t·n‖ = η‖W + t·n‖ for t > 0 so the error is relative to the noisy W.
        let eta2 = spec.noise_level * spec.noise_level;
        let (a, b, nn) = (w.norm_sqr(), noise.inner(&w).re, noise.norm_sqr());
        let qa = nn * (1.0 - eta2);
        let qb = -2.0 * eta2 * b;
        let t = (-qb + (qb * qb + 4.0 * qa * eta2 * a).sqrt()) / (2.0 * qa);
        w = w.add(&noise.scale(C64::new(t, 0.0)))?;
    }
    Ok((w, truth))
}
