//! Factorized layer runtime: reconstruction, batched application, parameter
//! accounting, growth of circuit depth and bond dimension, and retraining.

use serde::{Deserialize, Serialize};

use crate::circuit::{apply_circuit_mpo, apply_to_columns, Circuit};
use crate::disentangler::{
    gate_environment, overlap, procrustes_gate_update, refine_gates, CircuitRole, FactorizedOperator, DEFAULT_FID_TOL,
    DEFAULT_MAX_HOPS,
};
use crate::error::{mismatch, Error, Result};
use crate::mpo::{check_guard, core_environment_with, dense_guard, mpo_from_matrix, Environments, Mpo};
use crate::tensor::{complex_normal, contract, polar_project, seeded_rng, DenseTensor, TruncationPolicy, C64};

/// Alternating sweeps run by `matrix_fidelity` retraining before the joint
/// quasi-Newton gate refinement takes over.
const RETRAIN_WARMUP: usize = 5;

/// Dense `U · M · V†`.
pub fn reconstruct(fac: &FactorizedOperator) -> Result<DenseTensor> {
    fac.to_dense()
}

/// `U · M · V† · x` for a batch of columns, contracted through `V†`, the
/// core and `U` in turn without forming the operator.
pub fn apply_to_batch(fac: &FactorizedOperator, x: &DenseTensor) -> Result<DenseTensor> {
    x.ensure_matrix("batch")?;
    let cols = fac.site_spec.cols();
    if x.dims()[0] != cols {
        return Err(mismatch(format!(
            "batch has {} rows, layer expects {cols}",
            x.dims()[0]
        )));
    }
    let y = apply_to_columns(&fac.v_dag, x, false)?;
    let y = fac.core.apply_to_columns(&y)?;
    apply_to_columns(&fac.u, &y, false)
}

/// Stored real scalars (complex entries count twice).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub gates: usize,
    pub core: usize,
    pub total: usize,
    pub dense_equiv: usize,
    pub ratio: f64,
}

pub fn param_count(fac: &FactorizedOperator) -> ParamCount {
    let gates = fac.u.param_count() + fac.v_dag.param_count();
    let core = fac.core.param_count();
    let total = gates + core;
    let dense_equiv = 2 * fac.site_spec.rows() * fac.site_spec.cols();
    ParamCount {
        gates,
        core,
        total,
        dense_equiv,
        ratio: total as f64 / dense_equiv as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MatrixFidelity,
    DataMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub add_layers_u: usize,
    pub add_layers_v: usize,
    pub new_chi: usize,
    pub retrain_steps: usize,
    pub step_size: f64,
    pub objective: Objective,
    /// Relative scale of seeded noise added to the core after padding;
    /// zero keeps growth exact.
    pub noise_scale: f64,
    pub seed: u64,
    /// Run a finite-difference gradient check before `data_mse` retraining.
    pub grad_check: bool,
}

impl EnhanceConfig {
    pub fn new(new_chi: usize) -> Self {
        Self {
            add_layers_u: 0,
            add_layers_v: 0,
            new_chi,
            retrain_steps: 50,
            step_size: 0.05,
            objective: Objective::MatrixFidelity,
            noise_scale: 0.0,
            seed: 0,
            grad_check: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.new_chi == 0 {
            return Err(Error::InvalidConfig("new_chi must be at least 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "noise_scale must be non-negative, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

/// Finite-difference agreement of the `data_mse` gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub step: f64,
    pub checked: usize,
    pub core_rel_error: f64,
    pub gate_rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub step_losses: Vec<f64>,
    pub grad_check: Option<GradCheck>,
}

/// What `retrain` fits against.
#[derive(Clone, Copy, Debug)]
pub enum RetrainTarget<'a> {
    /// Target operator for `matrix_fidelity`.
    Operator(&'a Mpo),
    /// Input columns `x` and outputs `y` for `data_mse`.
    Data { x: &'a DenseTensor, y: &'a DenseTensor },
}

/// Appends identity layers to both circuits and zero-pads the core bonds to
/// `new_chi`. Without noise the represented operator is unchanged.
pub fn enhance(fac: &FactorizedOperator, cfg: &EnhanceConfig) -> Result<FactorizedOperator> {
    cfg.validate()?;
    let current = fac.core.max_bond();
    if cfg.new_chi < current {
        return Err(Error::InvalidConfig(format!(
            "new_chi {} is below the current bond dimension {current}",
            cfg.new_chi
        )));
    }
    let mut out = fac.clone();
    out.u.append_identity_layers(cfg.add_layers_u);
    out.v_dag.append_identity_layers(cfg.add_layers_v);
    out.core = fac.core.pad_bonds(cfg.new_chi);
    if cfg.noise_scale > 0.0 {
        let mut rng = seeded_rng(cfg.seed);
        for core in out.core.cores_mut() {
            let rms = (core.norm_sqr() / core.len() as f64).sqrt();
            let amp = cfg.noise_scale * if rms > 0.0 { rms } else { 1.0 };
            for z in core.data_mut() {
                *z += complex_normal(&mut rng) * amp;
            }
        }
    }
    Ok(out)
}

/// `‖W − U M V†‖² / ‖W‖²` from overlaps.
pub fn matrix_loss(fac: &FactorizedOperator, target: &Mpo) -> Result<f64> {
    let w2 = target.norm().powi(2);
    let err2 = w2 + fac.norm_sqr() - 2.0 * overlap(fac, target)?.re;
    // Rounding can push an exact fit below zero; NaN passes through.
    let err2 = if err2 < 0.0 { 0.0 } else { err2 };
    Ok(if w2 > 0.0 { err2 / w2 } else { err2 })
}

/// Mean squared error `‖U M V† x − y‖² / len(y)`.
pub fn data_loss(fac: &FactorizedOperator, x: &DenseTensor, y: &DenseTensor) -> Result<f64> {
    check_batch(fac, x, y)?;
    Ok(apply_to_batch(fac, x)?.sub(y)?.norm_sqr() / y.len() as f64)
}

fn check_batch(fac: &FactorizedOperator, x: &DenseTensor, y: &DenseTensor) -> Result<()> {
    x.ensure_matrix("batch input")?;
    y.ensure_matrix("batch output")?;
    if y.dims() != [fac.site_spec.rows(), x.dims()[1]] {
        return Err(mismatch(format!(
            "batch output {:?} does not match {} rows x {} columns",
            y.dims(),
            fac.site_spec.rows(),
            x.dims()[1]
        )));
    }
    Ok(())
}

/// Euclidean gradients of [`data_loss`], packed as `∂L/∂Re z + i ∂L/∂Im z`
/// per complex parameter. Gate gradients follow `Circuit::positions` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DataGradients {
    pub loss: f64,
    pub cores: Vec<DenseTensor>,
    pub u_gates: Vec<DenseTensor>,
    pub v_gates: Vec<DenseTensor>,
}

/// `R[a, b] = Σ q[.., a, .., n] conj(p[.., b, .., n])` over the row legs
/// outside the pair `(site, site + 1)` and the batch leg.
fn pair_reduce(q: &DenseTensor, p: &DenseTensor, dims: &[usize], site: usize) -> Result<DenseTensor> {
    let pre: usize = dims[..site].iter().product();
    let pair = dims[site] * dims[site + 1];
    let post: usize = dims[site + 2..].iter().product();
    let n = q.dims()[1];
    let q = q.reshape(&[pre, pair, post, n])?;
    let p = p.reshape(&[pre, pair, post, n])?.conj();
    contract(&q, &[0, 2, 3], &p, &[0, 2, 3])
}

fn split_at_gate(c: &Circuit, layer: usize, site: usize) -> (Circuit, Circuit) {
    let before = c.restricted(|l, s| l < layer || (l == layer && s != site));
    let after = c.restricted(|l, _| l > layer);
    (before, after)
}

pub fn data_gradients(fac: &FactorizedOperator, x: &DenseTensor, y: &DenseTensor) -> Result<DataGradients> {
    check_batch(fac, x, y)?;
    let spec = &fac.site_spec;
    check_guard(spec.dense_len(), dense_guard())?;
    let scale = C64::new(2.0 / y.len() as f64, 0.0);
    let a = apply_to_columns(&fac.v_dag, x, false)?;
    let ma = fac.core.apply_to_columns(&a)?;
    let d = apply_to_columns(&fac.u, &ma, false)?.sub(y)?;
    let loss = d.norm_sqr() / y.len() as f64;

    // dL/d conj(M) = (U† d) a† / N, projected onto each core.
    let d_core = apply_to_columns(&fac.u, &d, true)?;
    let z = d_core.matmul(&a.adjoint())?;
    let (z, _) = mpo_from_matrix(&z, spec, &TruncationPolicy::exact())?;
    let env = Environments::new(&z, &fac.core)?;
    let cores = (0..fac.core.num_sites())
        .map(|j| Ok(core_environment_with(&env, &z, j)?.scale(scale)))
        .collect::<Result<Vec<_>>>()?;

    let u_gates = fac
        .u
        .positions()
        .into_iter()
        .map(|(l, s)| {
            let (before, after) = split_at_gate(&fac.u, l, s);
            let p = apply_to_columns(&before, &ma, false)?;
            let q = apply_to_columns(&after, &d, true)?;
            Ok(pair_reduce(&q, &p, &spec.out_dims, s)?.scale(scale))
        })
        .collect::<Result<Vec<_>>>()?;

    let back = fac.core.adjoint().apply_to_columns(&d_core)?;
    let v_gates = fac
        .v_dag
        .positions()
        .into_iter()
        .map(|(l, s)| {
            let (before, after) = split_at_gate(&fac.v_dag, l, s);
            let p = apply_to_columns(&before, x, false)?;
            let q = apply_to_columns(&after, &back, true)?;
            Ok(pair_reduce(&q, &p, &spec.in_dims, s)?.scale(scale))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(DataGradients {
        loss,
        cores,
        u_gates,
        v_gates,
    })
}

/// Compares [`data_gradients`] with central differences of [`data_loss`]
/// over every real parameter. Errors are `‖fd − analytic‖ / ‖analytic‖`.
pub fn gradient_check(fac: &FactorizedOperator, x: &DenseTensor, y: &DenseTensor, step: f64) -> Result<GradCheck> {
    let grads = data_gradients(fac, x, y)?;
    let mut checked = 0;
    let mut core_err = (0.0, 0.0);
    for (j, g) in grads.cores.iter().enumerate() {
        for e in 0..g.len() {
            for dir in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                let eval = |sign: f64| -> Result<f64> {
                    let mut f = fac.clone();
                    f.core.cores_mut()[j].data_mut()[e] += dir * (sign * step);
                    data_loss(&f, x, y)
                };
                let fd = (eval(1.0)? - eval(-1.0)?) / (2.0 * step);
                let an = if dir.re == 1.0 { g.data()[e].re } else { g.data()[e].im };
                core_err.0 += (fd - an).powi(2);
                core_err.1 += an * an;
                checked += 1;
            }
        }
    }
    let mut gate_err = (0.0, 0.0);
    for (role, grads) in [(CircuitRole::U, &grads.u_gates), (CircuitRole::VDag, &grads.v_gates)] {
        let circuit = match role {
            CircuitRole::U => &fac.u,
            CircuitRole::VDag => &fac.v_dag,
        };
        for ((l, s), g) in circuit.positions().into_iter().zip(grads) {
            let g0 = &circuit.gate(l, s).expect("listed position").matrix;
            for e in 0..g.len() {
                for dir in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                    let eval = |sign: f64| -> Result<f64> {
                        let mut m = g0.clone();
                        m.data_mut()[e] += dir * (sign * step);
                        let mut f = fac.clone();
                        match role {
                            CircuitRole::U => f.u.set_gate_matrix(l, s, m)?,
                            CircuitRole::VDag => f.v_dag.set_gate_matrix(l, s, m)?,
                        }
                        data_loss(&f, x, y)
                    };
                    let fd = (eval(1.0)? - eval(-1.0)?) / (2.0 * step);
                    let an = if dir.re == 1.0 { g.data()[e].re } else { g.data()[e].im };
                    gate_err.0 += (fd - an).powi(2);
                    gate_err.1 += an * an;
                    checked += 1;
                }
            }
        }
    }
    let rel = |(num, den): (f64, f64)| if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    Ok(GradCheck {
        step,
        checked,
        core_rel_error: rel(core_err),
        gate_rel_error: rel(gate_err),
    })
}

fn procrustes_sweep(target: &Mpo, fac: &mut FactorizedOperator) -> Result<()> {
    for role in [CircuitRole::U, CircuitRole::VDag] {
        let positions = match role {
            CircuitRole::U => fac.u.positions(),
            CircuitRole::VDag => fac.v_dag.positions(),
        };
        for (l, s) in positions {
            let env = gate_environment(target, fac, role, l, s)?;
            let (g, _) = procrustes_gate_update(&env)?;
            match role {
                CircuitRole::U => fac.u.set_gate_matrix(l, s, g)?,
                CircuitRole::VDag => fac.v_dag.set_gate_matrix(l, s, g)?,
            }
        }
    }
    Ok(())
}

/// Left-to-right sweep of exact local least-squares core updates against
/// `T = U† W V`, keeping the current bond dimensions.
fn core_als_sweep(target: &Mpo, fac: &mut FactorizedOperator) -> Result<()> {
    let policy = TruncationPolicy::exact();
    let (t, _) = apply_circuit_mpo(target, &fac.v_dag, true, &policy)?;
    let (t, _) = apply_circuit_mpo(&t, &fac.u, true, &policy)?;
    for j in 0..fac.core.num_sites() {
        fac.core.canonicalize_mut(j)?;
        let env = Environments::new(&t, &fac.core)?;
        let local = core_environment_with(&env, &t, j)?;
        fac.core.cores_mut()[j] = local;
        fac.core.set_center(Some(j));
    }
    Ok(())
}

fn gradient_step(fac: &mut FactorizedOperator, grads: &DataGradients, step: f64) -> Result<()> {
    let eta = C64::new(-step, 0.0);
    for (core, g) in fac.core.cores_mut().iter_mut().zip(&grads.cores) {
        *core = core.add(&g.scale(eta))?;
    }
    for (circuit, gs) in [(&mut fac.u, &grads.u_gates), (&mut fac.v_dag, &grads.v_gates)] {
        for ((l, s), g) in circuit.positions().into_iter().zip(gs) {
            let cur = &circuit.gate(l, s).expect("listed position").matrix;
            let next = polar_project(&cur.add(&g.scale(eta))?)?;
            circuit.set_gate_matrix(l, s, next)?;
        }
    }
    Ok(())
}

/// Retrains every gate and core tensor of `fac` for up to
/// `cfg.retrain_steps` steps.
///
/// `matrix_fidelity` starts with sweeps of exact Procrustes gate updates and
/// exact core least-squares solves, then refines all gates jointly with the
/// core refitted at its current bond dimension. Every step is accepted only
/// if the loss does not increase. The loss is `‖W − U M V†‖² / ‖W‖²`, which
/// equals `1 − F` whenever the core is a least-squares fit.
///
/// `data_mse` takes gradient steps of size `cfg.step_size` on the mean
/// squared error, with polar retraction of the gates.
pub fn retrain(
    fac: &FactorizedOperator,
    target: RetrainTarget<'_>,
    cfg: &EnhanceConfig,
) -> Result<(FactorizedOperator, LossTrace)> {
    cfg.validate()?;
    let mut out = fac.clone();
    let mut trace = LossTrace::default();
    match (cfg.objective, target) {
        (Objective::MatrixFidelity, RetrainTarget::Operator(w)) => {
            if w.spec() != &fac.site_spec {
                return Err(mismatch("retrain target has a different site spec"));
            }
            let has_gates = out.u.num_gates() + out.v_dag.num_gates() > 0;
            let warmup = if has_gates {
                cfg.retrain_steps.min(RETRAIN_WARMUP)
            } else {
                cfg.retrain_steps
            };
            for step in 0..warmup {
                procrustes_sweep(w, &mut out)?;
                core_als_sweep(w, &mut out)?;
                let loss = matrix_loss(&out, w)?;
                record(&mut trace, step, loss)?;
            }
            if warmup < cfg.retrain_steps {
                let chi = out.core.max_bond();
                let mut fids = Vec::new();
                refine_gates(
                    w,
                    &mut out,
                    chi,
                    cfg.retrain_steps - warmup,
                    DEFAULT_FID_TOL,
                    DEFAULT_MAX_HOPS,
                    &mut fids,
                )?;
                for (i, f) in fids.into_iter().enumerate() {
                    record(&mut trace, warmup + i, 1.0 - f)?;
                }
            }
        }
        (Objective::DataMse, RetrainTarget::Data { x, y }) => {
            let initial = data_loss(fac, x, y)?;
            if !initial.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    trace: Box::new(trace),
                });
            }
            if cfg.grad_check {
                trace.grad_check = Some(gradient_check(fac, x, y, 1e-6)?);
            }
            for step in 0..cfg.retrain_steps {
                let grads = data_gradients(&out, x, y)?;
                if !grads.loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        trace: Box::new(trace),
                    });
                }
                gradient_step(&mut out, &grads, cfg.step_size)?;
                let loss = data_loss(&out, x, y)?;
                record(&mut trace, step, loss)?;
            }
        }
        (Objective::MatrixFidelity, _) => {
            return Err(Error::InvalidConfig(
                "objective matrix_fidelity needs a target operator".into(),
            ));
        }
        (Objective::DataMse, _) => {
            return Err(Error::InvalidConfig("objective data_mse needs an (x, y) batch".into()));
        }
    }
    Ok((out, trace))
}

fn record(trace: &mut LossTrace, step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            trace: Box::new(std::mem::take(trace)),
        });
    }
    trace.step_losses.push(loss);
    Ok(())
}
