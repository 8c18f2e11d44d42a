//! Disentangler optimization: find circuits `U`, `V†` and a residual MPO `M`
//! of bond dimension `chi_new` with `W ≈ U · M · V†`.
//!
//! A short warmup alternates a residual recomputation `M = trunc(U† · W · V)`
//! with Procrustes sweeps over every gate. Each gate update maximizes the
//! real part of the phase-aligned overlap `tr[(U M V†)† W]`. A limited-memory
//! BFGS ascent over all gates jointly, with the core refitted at each trial
//! point, then runs to convergence. Both phases only accept fidelity
//! increases, so the recorded per-sweep fidelity never decreases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::{apply_circuit_dense, apply_circuit_mpo, brickwork, Circuit, CircuitLayout, GateInit, Side};
use crate::error::{mismatch, Error, Result};
use crate::mpo::{
    bond_entropies, check_guard, dense_guard, mpo_overlap, mpo_to_matrix, rss, truncate_mpo, Environments, Mpo,
    SiteSpec,
};
use crate::tensor::{contract, svd_full, DenseTensor, TruncationPolicy, C64};

pub const DEFAULT_FID_TOL: f64 = 1e-9;
pub const DEFAULT_MAX_SWEEPS: usize = 200;

/// Procrustes sweeps run before the quasi-Newton refinement takes over.
const WARMUP_SWEEPS: usize = 5;

/// The refinement stops once an iteration gains less than
/// `fid_tol · REFINE_TOL_FACTOR` in fidelity.
const REFINE_TOL_FACTOR: f64 = 1e-6;

const LBFGS_MEMORY: usize = 64;

/// Swap-flip basin hops attempted after the refinement converges.
pub const DEFAULT_MAX_HOPS: usize = 3;

/// Refinement iterations spent probing each swap-flip candidate.
const HOP_PROBE_ITERS: usize = 20;

/// Seed offset separating the `V†` Haar draw from the `U` draw.
const V_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Identity,
    Haar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleConfig {
    pub layers_u: usize,
    pub layers_v: usize,
    pub chi_new: usize,
    pub max_sweeps: usize,
    pub fid_tol: f64,
    pub seed: u64,
    pub init: InitKind,
    /// Swap-flip basin hops tried after the refinement converges.
    #[serde(default = "default_max_hops")]
    pub max_hops: usize,
}

fn default_max_hops() -> usize {
    DEFAULT_MAX_HOPS
}

impl DisentangleConfig {
    pub fn new(layers_u: usize, layers_v: usize, chi_new: usize) -> Self {
        Self {
            layers_u,
            layers_v,
            chi_new,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            fid_tol: DEFAULT_FID_TOL,
            seed: 0,
            init: InitKind::Identity,
            max_hops: DEFAULT_MAX_HOPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi_new == 0 {
            return Err(Error::InvalidConfig("chi_new must be at least 1".into()));
        }
        if !(self.fid_tol > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fid_tol must be positive, got {}",
                self.fid_tol
            )));
        }
        if self.max_sweeps == 0 {
            return Err(Error::InvalidConfig("max_sweeps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// SHA-256 of the source matrix payload, hex encoded.
    pub source_hash: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedOperator {
    pub u: Circuit,
    pub core: Mpo,
    pub v_dag: Circuit,
    pub site_spec: SiteSpec,
    pub provenance: Provenance,
}

impl FactorizedOperator {
    pub fn new(u: Circuit, core: Mpo, v_dag: Circuit) -> Result<Self> {
        let spec = core.spec().clone();
        if u.side() != Side::Output || v_dag.side() != Side::Input {
            return Err(mismatch("u must be an output-side circuit and v_dag an input-side one"));
        }
        if u.site_dims() != spec.out_dims.as_slice() || v_dag.site_dims() != spec.in_dims.as_slice() {
            return Err(mismatch(format!(
                "circuit site dims {:?}/{:?} do not match core spec {:?}/{:?}",
                u.site_dims(),
                v_dag.site_dims(),
                spec.out_dims,
                spec.in_dims
            )));
        }
        Ok(Self {
            u,
            core,
            v_dag,
            site_spec: spec,
            provenance: Provenance::default(),
        })
    }

    /// Factorization with empty circuits around `core`.
    pub fn plain(core: Mpo) -> Self {
        let spec = core.spec().clone();
        Self {
            u: Circuit::empty(&spec.out_dims, Side::Output),
            v_dag: Circuit::empty(&spec.in_dims, Side::Input),
            core,
            site_spec: spec,
            provenance: Provenance::default(),
        }
    }

    /// `U · M · V†` as an MPO, gates applied without truncation.
    pub fn to_mpo(&self) -> Result<Mpo> {
        let policy = TruncationPolicy::unbounded();
        let (m, _) = apply_circuit_mpo(&self.core, &self.v_dag, false, &policy)?;
        let (m, _) = apply_circuit_mpo(&m, &self.u, false, &policy)?;
        Ok(m)
    }

    /// Dense `U · M · V†`.
    pub fn to_dense(&self) -> Result<DenseTensor> {
        check_guard(self.site_spec.dense_len(), dense_guard())?;
        let m = mpo_to_matrix(&self.core)?;
        let m = apply_circuit_dense(&self.v_dag, &m, false)?;
        apply_circuit_dense(&self.u, &m, false)
    }

    /// Squared Frobenius norm of the represented operator.
    pub fn norm_sqr(&self) -> f64 {
        let n = self.core.norm();
        n * n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub sweep_fidelities: Vec<f64>,
    pub final_rel_error: f64,
    pub entropy_before: Vec<f64>,
    pub entropy_after: Vec<f64>,
    pub sweeps_used: usize,
    pub converged: bool,
    pub restarts: usize,
    pub best_restart: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitRole {
    U,
    VDag,
}

/// `M = trunc_{chi_new}(U† · W · V)`. The returned error combines the gate
/// application bound and the final truncation, both relative to `‖W‖_F`.
pub fn residual_mpo(mpo_old: &Mpo, u: &Circuit, v_dag: &Circuit, chi_new: usize) -> Result<(Mpo, f64)> {
    if chi_new == 0 {
        return Err(Error::InvalidConfig("chi_new must be at least 1".into()));
    }
    let policy = TruncationPolicy::unbounded();
    let (m, e1) = apply_circuit_mpo(mpo_old, v_dag, true, &policy)?;
    let (m, e2) = apply_circuit_mpo(&m, u, true, &policy)?;
    let (m, e3) = truncate_mpo(&m, &TruncationPolicy::with_chi(chi_new))?;
    Ok((m, rss(&[e1, e2, e3])))
}

/// `R[a, b] = Σ P[.., a, ..] · conj(Q[.., b, ..])` over every leg except the
/// `side` legs of sites `(site, site + 1)`.
fn pair_reduced(p: &Mpo, q: &Mpo, site: usize, side: Side) -> Result<DenseTensor> {
    let env = Environments::new(p, q)?;
    pair_reduced_with(&env, p, q, site, side)
}

fn pair_reduced_with(env: &Environments, p: &Mpo, q: &Mpo, site: usize, side: Side) -> Result<DenseTensor> {
    let tp = contract(p.core(site), &[3], p.core(site + 1), &[0])?; // (p, o1, i1, o2, i2, p')
    let tq = contract(q.core(site), &[3], q.core(site + 1), &[0])?.conj();
    let t = contract(&env.left[site], &[0], &tp, &[0])?; // (q, o1, i1, o2, i2, p')
    let t = contract(&t, &[5], &env.right[site + 2], &[0])?; // (q, o1, i1, o2, i2, q')
    let (keep, legs): (usize, [usize; 4]) = match side {
        Side::Output => (1, [0, 2, 4, 5]),
        Side::Input => (2, [0, 1, 3, 5]),
    };
    let r = contract(&t, &legs, &tq, &legs)?; // (a1, a2, b1, b2)
    let d1 = t.dims()[keep];
    let d2 = t.dims()[keep + 2];
    r.into_reshape(&[d1 * d2, d1 * d2])
}

fn unbounded_apply(m: &Mpo, c: &Circuit, adjoint: bool) -> Result<Mpo> {
    Ok(apply_circuit_mpo(m, c, adjoint, &TruncationPolicy::unbounded())?.0)
}

/// Environment of a `U` gate given `W·V` (precomputed).
fn u_environment(w_v: &Mpo, fac: &FactorizedOperator, layer: usize, site: usize) -> Result<DenseTensor> {
    let after = fac.u.restricted(|l, _| l > layer);
    let before = fac.u.restricted(|l, s| l < layer || (l == layer && s != site));
    let p = unbounded_apply(w_v, &after, true)?;
    let q = unbounded_apply(&fac.core, &before, false)?;
    Ok(pair_reduced(&p, &q, site, Side::Output)?.adjoint())
}

/// Environment of a `V†` gate given `U·M` (precomputed).
fn v_environment(w: &Mpo, u_m: &Mpo, fac: &FactorizedOperator, layer: usize, site: usize) -> Result<DenseTensor> {
    let after = fac.v_dag.restricted(|l, _| l > layer);
    let before = fac.v_dag.restricted(|l, s| l < layer || (l == layer && s != site));
    let q = unbounded_apply(u_m, &after, false)?;
    let p = unbounded_apply(w, &before, true)?;
    Ok(pair_reduced(&p, &q, site, Side::Input)?.conj())
}

/// Linearized environment `E` of the gate at `(layer, site)` of `which`:
/// with every other tensor fixed, `Re tr[(U M V†)† W] = Re tr(g · E)`.
pub fn gate_environment(
    mpo_old: &Mpo,
    fac: &FactorizedOperator,
    which: CircuitRole,
    layer: usize,
    site: usize,
) -> Result<DenseTensor> {
    if mpo_old.spec() != &fac.site_spec {
        return Err(mismatch("target and factorization have different site specs"));
    }
    let circuit = match which {
        CircuitRole::U => &fac.u,
        CircuitRole::VDag => &fac.v_dag,
    };
    if circuit.gate(layer, site).is_none() {
        return Err(Error::OutOfRange(format!("no gate at layer {layer}, site {site}")));
    }
    match which {
        CircuitRole::U => {
            let w_v = unbounded_apply(mpo_old, &fac.v_dag, true)?;
            u_environment(&w_v, fac, layer, site)
        }
        CircuitRole::VDag => {
            let u_m = unbounded_apply(&fac.core, &fac.u, false)?;
            v_environment(mpo_old, &u_m, fac, layer, site)
        }
    }
}

/// Unitary maximizing `Re tr(g · env)`: `g = Y · X†` for `env = X Σ Y†`.
/// Returns the gate and the attained maximum `Σ σ_i`.
pub fn procrustes_gate_update(env: &DenseTensor) -> Result<(DenseTensor, f64)> {
    env.ensure_finite("gate environment")?;
    let (x, s, y_dag) = svd_full(env)?;
    if x.dims()[0] != y_dag.dims()[1] || s.len() != x.dims()[0] {
        return Err(mismatch(format!(
            "gate environment must be square, got {:?}",
            env.dims()
        )));
    }
    let g = y_dag.adjoint().matmul(&x.adjoint())?;
    Ok((g, s.iter().sum()))
}

/// `|tr(R† W)|² / (‖W‖² ‖R‖²)` for `R = U M V†`, contracted as MPOs.
pub fn fidelity(fac: &FactorizedOperator, mpo_old: &Mpo) -> Result<f64> {
    if mpo_old.spec() != &fac.site_spec {
        return Err(mismatch("target and factorization have different site specs"));
    }
    let r = fac.to_mpo()?;
    let ov = mpo_overlap(&r, mpo_old)?;
    let denom = mpo_old.norm().powi(2) * fac.norm_sqr();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(ov.norm_sqr() / denom)
}

/// Relative Frobenius error `‖W − U M V†‖ / ‖W‖`, dense when within the
/// guard and from overlaps otherwise.
pub fn relative_error(fac: &FactorizedOperator, mpo_old: &Mpo) -> Result<f64> {
    if mpo_old.spec().dense_len() <= dense_guard() {
        let w = mpo_to_matrix(mpo_old)?;
        return Ok(fac.to_dense()?.rel_diff(&w));
    }
    let r = fac.to_mpo()?;
    let ov = mpo_overlap(&r, mpo_old)?;
    let w2 = mpo_old.norm().powi(2);
    let err2 = (w2 + fac.norm_sqr() - 2.0 * ov.re).max(0.0);
    Ok(if w2 > 0.0 { (err2 / w2).sqrt() } else { err2.sqrt() })
}

fn initial_circuits(spec: &SiteSpec, cfg: &DisentangleConfig) -> Result<(Circuit, Circuit)> {
    let k = spec.num_sites();
    let (init_u, init_v) = match cfg.init {
        InitKind::Identity => (GateInit::Identity, GateInit::Identity),
        InitKind::Haar => (
            GateInit::Haar { seed: cfg.seed },
            GateInit::Haar {
                seed: cfg.seed.wrapping_add(V_SEED_OFFSET),
            },
        ),
    };
    let u = brickwork(
        &CircuitLayout::new(k, cfg.layers_u),
        &spec.out_dims,
        Side::Output,
        init_u,
    )?;
    let v = brickwork(&CircuitLayout::new(k, cfg.layers_v), &spec.in_dims, Side::Input, init_v)?;
    Ok((u, v))
}

/// Phase-aligns `env` so that increasing `Re tr(g·env)` also increases the
/// modulus of the overlap at the current gate `g`.
fn align_phase(env: &DenseTensor, g: &DenseTensor) -> Result<DenseTensor> {
    let t = g.matmul(env)?.trace();
    if t.norm() == 0.0 {
        return Ok(env.clone());
    }
    Ok(env.scale(t.conj() / t.norm()))
}

/// One Procrustes pass over every gate of `U`, then of `V†`.
fn gate_sweep(mpo_old: &Mpo, fac: &mut FactorizedOperator) -> Result<()> {
    if fac.u.num_gates() > 0 {
        let w_v = unbounded_apply(mpo_old, &fac.v_dag, true)?;
        for (layer, site) in fac.u.positions() {
            let env = u_environment(&w_v, fac, layer, site)?;
            let g = &fac.u.gate(layer, site).expect("listed position").matrix;
            let (new_g, _) = procrustes_gate_update(&align_phase(&env, g)?)?;
            fac.u.set_gate_matrix(layer, site, new_g)?;
        }
    }
    if fac.v_dag.num_gates() > 0 {
        let u_m = unbounded_apply(&fac.core, &fac.u, false)?;
        for (layer, site) in fac.v_dag.positions() {
            let env = v_environment(mpo_old, &u_m, fac, layer, site)?;
            let g = &fac.v_dag.gate(layer, site).expect("listed position").matrix;
            let (new_g, _) = procrustes_gate_update(&align_phase(&env, g)?)?;
            fac.v_dag.set_gate_matrix(layer, site, new_g)?;
        }
    }
    Ok(())
}

/// Runs the optimization from the circuits selected by `cfg`. Each warmup
/// sweep and each refinement iteration counts as one sweep. Warmup stops on
/// `|ΔF| < fid_tol`; refinement stops on `|ΔF| < fid_tol · 1e-6`.
pub fn disentangle(mpo_old: &Mpo, cfg: &DisentangleConfig) -> Result<(FactorizedOperator, ConvergenceReport)> {
    cfg.validate()?;
    if !mpo_old.is_finite() {
        return Err(Error::NonFinite("target MPO".into()));
    }
    let spec = mpo_old.spec().clone();
    let (u, v_dag) = initial_circuits(&spec, cfg)?;
    let (core, _) = residual_mpo(mpo_old, &u, &v_dag, cfg.chi_new)?;
    let mut fac = FactorizedOperator::new(u, core, v_dag)?;
    fac.provenance.seed = Some(cfg.seed);
    let mut current = fidelity(&fac, mpo_old)?;
    let mut sweep_fidelities = Vec::new();
    let mut converged = false;

    for _ in 0..cfg.max_sweeps.min(WARMUP_SWEEPS) {
        let (candidate, _) = residual_mpo(mpo_old, &fac.u, &fac.v_dag, cfg.chi_new)?;
        let previous_core = std::mem::replace(&mut fac.core, candidate);
        let f = fidelity(&fac, mpo_old)?;
        if f >= current {
            current = f;
        } else {
            fac.core = previous_core;
        }
        gate_sweep(mpo_old, &mut fac)?;
        let f = fidelity(&fac, mpo_old)?;
        if !f.is_finite() {
            return Err(Error::NonFinite("fidelity".into()));
        }
        let prev = sweep_fidelities.last().copied().unwrap_or(current);
        sweep_fidelities.push(f);
        current = f;
        if (f - prev).abs() < cfg.fid_tol {
            converged = true;
            break;
        }
    }
    let budget = cfg.max_sweeps - sweep_fidelities.len();
    if budget > 0 && !gate_list(&fac).is_empty() {
        converged = refine_gates(
            mpo_old,
            &mut fac,
            cfg.chi_new,
            budget,
            cfg.fid_tol,
            cfg.max_hops,
            &mut sweep_fidelities,
        )?;
    }

    let report = ConvergenceReport {
        sweeps_used: sweep_fidelities.len(),
        sweep_fidelities,
        final_rel_error: relative_error(&fac, mpo_old)?,
        entropy_before: bond_entropies(mpo_old)?,
        entropy_after: bond_entropies(&fac.core)?,
        converged,
        restarts: 1,
        best_restart: 0,
    };
    Ok((fac, report))
}

/// Every one of `restarts` independent runs, executed in parallel and
/// returned in restart order. Run 0 uses `cfg` unchanged; run `r > 0` uses
/// Haar initialization with seed `cfg.seed + r`. Each report carries its
/// own index in `best_restart`.
pub fn disentangle_restarts(
    mpo_old: &Mpo,
    cfg: &DisentangleConfig,
    restarts: usize,
) -> Result<Vec<(FactorizedOperator, ConvergenceReport)>> {
    cfg.validate()?;
    if restarts == 0 {
        return Err(Error::InvalidConfig("restarts must be at least 1".into()));
    }
    (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut c = cfg.clone();
            if r > 0 {
                c.init = InitKind::Haar;
                c.seed = cfg.seed.wrapping_add(r as u64);
            }
            let (fac, mut rep) = disentangle(mpo_old, &c)?;
            rep.restarts = restarts;
            rep.best_restart = r;
            Ok((fac, rep))
        })
        .collect()
}

/// Best of [`disentangle_restarts`]: the highest final fidelity wins, ties
/// to the lower index.
pub fn disentangle_with_restarts(
    mpo_old: &Mpo,
    cfg: &DisentangleConfig,
    restarts: usize,
) -> Result<(FactorizedOperator, ConvergenceReport)> {
    let runs = disentangle_restarts(mpo_old, cfg, restarts)?;
    let mut best: Option<(FactorizedOperator, ConvergenceReport, f64)> = None;
    for (fac, rep) in runs {
        let f = fidelity(&fac, mpo_old)?;
        if best.as_ref().is_none_or(|b| f > b.2) {
            best = Some((fac, rep, f));
        }
    }
    let (fac, rep, _) = best.expect("at least one restart");
    Ok((fac, rep))
}

/// Overlap `tr[(U M V†)† W]` as a complex number.
pub fn overlap(fac: &FactorizedOperator, mpo_old: &Mpo) -> Result<C64> {
    mpo_overlap(&fac.to_mpo()?, mpo_old)
}

/// Gates of `fac` in a fixed order: `U` positions, then `V†` positions.
fn gate_list(fac: &FactorizedOperator) -> Vec<(CircuitRole, usize, usize)> {
    let u = fac.u.positions().into_iter().map(|(l, s)| (CircuitRole::U, l, s));
    let v = fac
        .v_dag
        .positions()
        .into_iter()
        .map(|(l, s)| (CircuitRole::VDag, l, s));
    u.chain(v).collect()
}

fn gate_matrix(fac: &FactorizedOperator, (role, l, s): (CircuitRole, usize, usize)) -> &DenseTensor {
    let c = match role {
        CircuitRole::U => &fac.u,
        CircuitRole::VDag => &fac.v_dag,
    };
    &c.gate(l, s).expect("listed position").matrix
}

fn skew(a: &DenseTensor) -> DenseTensor {
    a.sub(&a.adjoint()).expect("square").scale(C64::new(0.5, 0.0))
}

/// Riemannian gradient of the fidelity at fixed core, one anti-Hermitian
/// generator `X_j` per gate (tangent vector `g_j · X_j`).
fn fidelity_gradient(mpo_old: &Mpo, fac: &FactorizedOperator) -> Result<Vec<DenseTensor>> {
    let ov = overlap(fac, mpo_old)?;
    let denom = mpo_old.norm().powi(2) * fac.norm_sqr();
    let scale = ov * (2.0 / denom);
    let w_v = unbounded_apply(mpo_old, &fac.v_dag, true)?;
    let u_m = unbounded_apply(&fac.core, &fac.u, false)?;
    gate_list(fac)
        .into_iter()
        .map(|pos| {
            let (role, l, s) = pos;
            let env = match role {
                CircuitRole::U => u_environment(&w_v, fac, l, s)?,
                CircuitRole::VDag => v_environment(mpo_old, &u_m, fac, l, s)?,
            };
            let grad = env.scale(scale).adjoint();
            Ok(skew(&gate_matrix(fac, pos).adjoint().matmul(&grad)?))
        })
        .collect()
}

fn dot(a: &[DenseTensor], b: &[DenseTensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.inner(y).re).sum()
}

fn axpy(alpha: f64, x: &[DenseTensor], y: &[DenseTensor]) -> Vec<DenseTensor> {
    x.iter()
        .zip(y)
        .map(|(a, b)| b.add(&a.scale(C64::new(alpha, 0.0))).expect("same shape"))
        .collect()
}

/// Moves every gate along `g ↦ polar(g (I + t X))` and refits the core.
fn retract(
    mpo_old: &Mpo,
    fac: &FactorizedOperator,
    dir: &[DenseTensor],
    t: f64,
    chi: usize,
) -> Result<FactorizedOperator> {
    let mut out = fac.clone();
    for (pos, x) in gate_list(fac).into_iter().zip(dir) {
        let g = gate_matrix(fac, pos);
        let step = DenseTensor::identity(x.dims()[0]).add(&x.scale(C64::new(t, 0.0)))?;
        let g_new = crate::tensor::polar_project(&g.matmul(&step)?)?;
        let (role, l, s) = pos;
        match role {
            CircuitRole::U => out.u.set_gate_matrix(l, s, g_new)?,
            CircuitRole::VDag => out.v_dag.set_gate_matrix(l, s, g_new)?,
        }
    }
    out.core = residual_mpo(mpo_old, &out.u, &out.v_dag, chi)?.0;
    Ok(out)
}

/// Limited-memory BFGS ascent on the fidelity over the product of gate
/// unitaries, the core refitted at every trial point.
fn lbfgs_refine(
    mpo_old: &Mpo,
    fac: &mut FactorizedOperator,
    chi: usize,
    max_iters: usize,
    tol: f64,
    fidelities: &mut Vec<f64>,
) -> Result<bool> {
    let memory = LBFGS_MEMORY;
    if gate_list(fac).is_empty() {
        return Ok(false);
    }
    let mut f = fidelity(fac, mpo_old)?;
    let mut grad = fidelity_gradient(mpo_old, fac)?;
    let mut hist: Vec<(Vec<DenseTensor>, Vec<DenseTensor>, f64)> = Vec::new();
    for _ in 0..max_iters {
        // Two-loop recursion on the ascent problem (minimize -F).
        let mut q: Vec<DenseTensor> = grad.iter().map(|g| g.scale(C64::new(-1.0, 0.0))).collect();
        let mut alphas = Vec::with_capacity(hist.len());
        for (sv, yv, rho) in hist.iter().rev() {
            let a = rho * dot(sv, &q);
            q = axpy(-a, yv, &q);
            alphas.push(a);
        }
        let gamma = hist.last().map(|(sv, yv, _)| dot(sv, yv) / dot(yv, yv)).unwrap_or(1.0);
        let mut r: Vec<DenseTensor> = q.iter().map(|x| x.scale(C64::new(gamma, 0.0))).collect();
        for ((sv, yv, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(yv, &r);
            r = axpy(a - b, sv, &r);
        }
        let mut dir: Vec<DenseTensor> = r.iter().map(|x| x.scale(C64::new(-1.0, 0.0))).collect();
        let mut slope = dot(&grad, &dir);
        if !(slope > 0.0) {
            dir = grad.clone();
            slope = dot(&grad, &grad);
            hist.clear();
        }
        if slope == 0.0 {
            return Ok(true);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let cand = retract(mpo_old, fac, &dir, t, chi)?;
            let fc = fidelity(&cand, mpo_old)?;
            if fc >= f + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, fc)) = accepted else {
            return Ok(true);
        };
        let new_grad = fidelity_gradient(mpo_old, &cand)?;
        let sv: Vec<DenseTensor> = dir.iter().map(|x| x.scale(C64::new(t, 0.0))).collect();
        // Curvature pair for minimizing -F.
        let yv: Vec<DenseTensor> = grad
            .iter()
            .zip(&new_grad)
            .map(|(a, b)| a.sub(b).expect("same shape"))
            .collect();
        let sy = dot(&sv, &yv);
        if sy > 1e-300 {
            hist.push((sv, yv, 1.0 / sy));
            if hist.len() > memory {
                hist.remove(0);
            }
        }
        let delta = fc - f;
        *fac = cand;
        f = fc;
        grad = new_grad;
        fidelities.push(f);
        if delta.abs() < tol {
            return Ok(true);
        }
    }
    Ok(false)
}

/// `g ↦ g · SWAP` (`right`) or `SWAP · g` on a two-site gate.
fn swap_flip(g: &DenseTensor, dims: (usize, usize), right: bool) -> Result<DenseTensor> {
    let (a, b) = dims;
    if a != b {
        return Err(mismatch("swap flip needs equal site dims"));
    }
    let swap = DenseTensor::from_fn(&[a * b, a * b], |i| {
        let (r, c) = (i[0], i[1]);
        if r == (c % b) * a + c / b {
            C64::new(1.0, 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    if right {
        g.matmul(&swap)
    } else {
        swap.matmul(g)
    }
}

fn set_gate(fac: &mut FactorizedOperator, (role, l, s): (CircuitRole, usize, usize), g: DenseTensor) -> Result<()> {
    match role {
        CircuitRole::U => fac.u.set_gate_matrix(l, s, g),
        CircuitRole::VDag => fac.v_dag.set_gate_matrix(l, s, g),
    }
}

/// Quasi-Newton refinement of every gate at bond dimension `chi`, followed
/// by swap-flip basin hops: each gate is tried as `g·SWAP` and `SWAP·g`, the
/// most promising candidate after a short probe is refined fully and kept
/// only if it improves the fidelity by more than `fid_tol`. Accepted
/// iterates are appended to `fidelities`, at most `budget` of them.
pub(crate) fn refine_gates(
    mpo_old: &Mpo,
    fac: &mut FactorizedOperator,
    chi: usize,
    budget: usize,
    fid_tol: f64,
    max_hops: usize,
    fidelities: &mut Vec<f64>,
) -> Result<bool> {
    let gates = gate_list(fac);
    if gates.is_empty() || budget == 0 {
        return Ok(false);
    }
    let tol = fid_tol * REFINE_TOL_FACTOR;
    let start = fidelities.len();
    let mut converged = lbfgs_refine(mpo_old, fac, chi, budget, tol, fidelities)?;
    let mut spent = fidelities.len() - start;
    for _ in 0..max_hops {
        let f = fidelity(fac, mpo_old)?;
        if !converged || spent >= budget || 1.0 - f < fid_tol {
            break;
        }
        let mut candidates = Vec::new();
        for &pos in &gates {
            let dims = match pos.0 {
                CircuitRole::U => fac.u.gate(pos.1, pos.2),
                CircuitRole::VDag => fac.v_dag.gate(pos.1, pos.2),
            }
            .expect("listed position")
            .dims;
            if dims.0 != dims.1 {
                continue;
            }
            for right in [false, true] {
                let mut cand = fac.clone();
                set_gate(&mut cand, pos, swap_flip(gate_matrix(fac, pos), dims, right)?)?;
                cand.core = residual_mpo(mpo_old, &cand.u, &cand.v_dag, chi)?.0;
                lbfgs_refine(mpo_old, &mut cand, chi, HOP_PROBE_ITERS, tol, &mut Vec::new())?;
                let fc = fidelity(&cand, mpo_old)?;
                candidates.push((cand, fc));
            }
        }
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut hopped = false;
        for (mut cand, _) in candidates {
            if spent >= budget {
                break;
            }
            let mut trail = Vec::new();
            let cand_converged = lbfgs_refine(mpo_old, &mut cand, chi, budget - spent, tol, &mut trail)?;
            spent += trail.len().max(1);
            let fc = fidelity(&cand, mpo_old)?;
            if fc > f + fid_tol {
                // An accepted hop, refinement included, is recorded as one sweep.
                *fac = cand;
                fidelities.push(fc);
                converged = cand_converged;
                hopped = true;
                break;
            }
        }
        if !hopped {
            break;
        }
    }
    Ok(converged)
}
