//! Baselines for the disentangler factorization: the plain MPO of `W` and the
//! polar route `W = U_p · P`, each sized to reach a common target error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disentangler::{disentangle_with_restarts, DisentangleConfig, FactorizedOperator};
use crate::error::{mismatch, Error, Result};
use crate::layer::param_count;
use crate::mpo::{check_guard, dense_guard, mpo_from_matrix, mpo_to_matrix, truncate_mpo, Mpo, SiteSpec};
use crate::tensor::{svd_full, DenseTensor, TruncationPolicy, C64};

/// Smallest singular value for which the polar factors are unique.
pub const POLAR_UNIQUE_CUTOFF: f64 = 1e-12;

/// Deepest brickwork circuit tried when costing `U_p`.
pub const MAX_POLAR_LAYERS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct PolarDecomposition {
    pub u_p: DenseTensor,
    pub p: DenseTensor,
    /// False when `W` is rank deficient and `U_p` is one of many choices.
    pub unique: bool,
}

/// `W = U_p · P` with `U_p = X Y†` and `P = Y Σ Y†` from `W = X Σ Y†`.
pub fn polar_decompose(w: &DenseTensor) -> Result<PolarDecomposition> {
    w.ensure_matrix("polar_decompose")?;
    if w.rows() != w.cols() {
        return Err(mismatch(format!(
            "polar decomposition needs a square matrix, got {:?}",
            w.dims()
        )));
    }
    w.ensure_finite("polar_decompose input")?;
    let (x, s, y_dag) = svd_full(w)?;
    let y = y_dag.adjoint();
    let u_p = x.matmul(&y_dag)?;
    let sigma = DenseTensor::diag(&s.iter().map(|&v| C64::new(v, 0.0)).collect::<Vec<_>>());
    let p = y.matmul(&sigma)?.matmul(&y_dag)?;
    let unique = s.last().is_some_and(|&smin| smin > POLAR_UNIQUE_CUTOFF);
    Ok(PolarDecomposition { u_p, p, unique })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Disentangler,
    Polar,
    PlainMpo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondProfile {
    pub method: BaselineMethod,
    pub target_error: f64,
    /// Relative Frobenius error actually reached by the profiled representation.
    pub achieved_error: f64,
    pub bond_dims: Vec<usize>,
    pub circuit_layers: usize,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Brickwork layers on each side for the disentangler profile.
    pub layers: usize,
    pub restarts: usize,
    pub max_sweeps: usize,
    pub seed: u64,
    /// Starts per depth when costing the `U_p` circuit.
    pub polar_restarts: usize,
    /// Sweep budget per depth when costing the `U_p` circuit.
    pub polar_max_sweeps: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            restarts: 4,
            max_sweeps: 500,
            seed: 0,
            polar_restarts: 1,
            polar_max_sweeps: 200,
        }
    }
}

/// Smallest uniform bond cap whose truncation of `m` reaches `target`
/// against the dense `reference`.
fn minimal_truncation(m: &Mpo, reference: &DenseTensor, norm: f64, target: f64) -> Result<(Mpo, f64)> {
    let max = m.max_bond();
    for chi in 1..=max {
        let (t, _) = truncate_mpo(m, &TruncationPolicy::with_chi(chi))?;
        let err = mpo_to_matrix(&t)?.sub(reference)?.norm() / norm;
        if err <= target || chi == max {
            return Ok((t, err));
        }
    }
    unreachable!("loop returns at chi == max")
}

fn plain_profile(w: &DenseTensor, spec: &SiteSpec, norm: f64, target: f64) -> Result<BondProfile> {
    let (m, _) = mpo_from_matrix(w, spec, &TruncationPolicy::unbounded())?;
    let (t, err) = minimal_truncation(&m, w, norm, target)?;
    Ok(BondProfile {
        method: BaselineMethod::PlainMpo,
        target_error: target,
        achieved_error: err,
        bond_dims: t.bond_dims(),
        circuit_layers: 0,
        param_count: t.param_count(),
    })
}

fn disentangle_config(max_sweeps: usize, seed: u64, layers_u: usize, layers_v: usize, chi: usize) -> DisentangleConfig {
    let mut c = DisentangleConfig::new(layers_u, layers_v, chi);
    c.max_sweeps = max_sweeps;
    c.seed = seed;
    c
}

fn polar_profile(
    w: &DenseTensor,
    spec: &SiteSpec,
    norm: f64,
    target: f64,
    cfg: &BaselineConfig,
) -> Result<BondProfile> {
    let polar = polar_decompose(w)?;
    let (pm, _) = mpo_from_matrix(&polar.p, spec, &TruncationPolicy::unbounded())?;
    let (pt, p_err) = minimal_truncation(&pm, &polar.p, norm, target)?;
    let (um, _) = mpo_from_matrix(&polar.u_p, spec, &TruncationPolicy::unbounded())?;
    // U_p is unitary, so its error adds to P's on the scale of ‖W‖.
    let u_target = (target * target - p_err * p_err).max(0.0).sqrt() * norm / polar.u_p.norm();
    let mut best: Option<(FactorizedOperator, usize)> = None;
    for layers in 0..=MAX_POLAR_LAYERS {
        let mut dc = disentangle_config(cfg.polar_max_sweeps, cfg.seed, layers, 0, 1);
        dc.max_hops = 0;
        let (fac, rep) = disentangle_with_restarts(&um, &dc, cfg.polar_restarts)?;
        let done = rep.final_rel_error <= u_target;
        best = Some((fac, layers));
        if done {
            break;
        }
    }
    let (fac, layers) = best.expect("at least one depth tried");
    let achieved = fac.to_dense()?.matmul(&mpo_to_matrix(&pt)?)?.sub(w)?.norm() / norm;
    Ok(BondProfile {
        method: BaselineMethod::Polar,
        target_error: target,
        achieved_error: achieved,
        bond_dims: pt.bond_dims(),
        circuit_layers: layers,
        param_count: pt.param_count() + param_count(&fac).total,
    })
}

fn disentangler_profile(
    w: &DenseTensor,
    spec: &SiteSpec,
    norm: f64,
    target: f64,
    cfg: &BaselineConfig,
) -> Result<BondProfile> {
    let (m, _) = mpo_from_matrix(w, spec, &TruncationPolicy::unbounded())?;
    let max = m.max_bond();
    for chi in 1..=max {
        let (fac, _) = disentangle_with_restarts(
            &m,
            &disentangle_config(cfg.max_sweeps, cfg.seed, cfg.layers, cfg.layers, chi),
            cfg.restarts,
        )?;
        let err = fac.to_dense()?.sub(w)?.norm() / norm;
        if err <= target || chi == max {
            return Ok(BondProfile {
                method: BaselineMethod::Disentangler,
                target_error: target,
                achieved_error: err,
                bond_dims: fac.core.bond_dims(),
                circuit_layers: fac.u.num_layers() + fac.v_dag.num_layers(),
                param_count: param_count(&fac).total,
            });
        }
    }
    unreachable!("loop returns at chi == max")
}

/// Profiles of the three representations at `target_error`, in the order
/// plain MPO, polar, disentangler. See [`baseline_profiles_with`].
pub fn baseline_profiles(w: &DenseTensor, spec: &SiteSpec, target_error: f64) -> Result<Vec<BondProfile>> {
    baseline_profiles_with(w, spec, target_error, &BaselineConfig::default())
}

/// Sizes each representation to the smallest bond cap (and, for the polar
/// route, the shallowest `U_p` circuit) reaching `target_error`:
///
/// * plain MPO of `W`;
/// * polar: MPO of `P` plus a brickwork circuit for `U_p` found by the
///   disentangler (without swap hops) with a bond-one core, at most
///   [`MAX_POLAR_LAYERS`] deep;
/// * disentangler factorization with `cfg.layers` layers per side.
pub fn baseline_profiles_with(
    w: &DenseTensor,
    spec: &SiteSpec,
    target_error: f64,
    cfg: &BaselineConfig,
) -> Result<Vec<BondProfile>> {
    if !(target_error >= 0.0 && target_error.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "target error must be non-negative, got {target_error}"
        )));
    }
    if cfg.restarts == 0 || cfg.polar_restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be at least 1".into()));
    }
    check_guard(spec.dense_len(), dense_guard())?;
    w.ensure_matrix("baseline input")?;
    if w.rows() != spec.rows() || w.cols() != spec.cols() {
        return Err(mismatch(format!(
            "matrix {:?} does not match site spec {}x{}",
            w.dims(),
            spec.rows(),
            spec.cols()
        )));
    }
    let norm = w.norm();
    if norm == 0.0 {
        return Err(Error::InvalidConfig("baseline of the zero matrix".into()));
    }
    let methods = [
        BaselineMethod::PlainMpo,
        BaselineMethod::Polar,
        BaselineMethod::Disentangler,
    ];
    methods
        .par_iter()
        .map(|m| match m {
            BaselineMethod::PlainMpo => plain_profile(w, spec, norm, target_error),
            BaselineMethod::Polar => polar_profile(w, spec, norm, target_error, cfg),
            BaselineMethod::Disentangler => disentangler_profile(w, spec, norm, target_error, cfg),
        })
        .collect()
}
