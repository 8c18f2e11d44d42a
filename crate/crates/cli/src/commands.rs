//! Command implementations and report types.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use serde_json::json;

use qllm_core::baselines::{baseline_profiles_with, BaselineConfig, BondProfile};
use qllm_core::circuit::{brickwork, Circuit, CircuitLayout, GateInit, Side};
use qllm_core::disentangler::{
    disentangle_with_restarts, relative_error, DisentangleConfig, FactorizedOperator, InitKind, Provenance,
};
use qllm_core::io::manifest::{layer_metrics, load_layer, save_layer, LayerMetrics};
use qllm_core::io::qten::write_qten;
use qllm_core::io::{sha256_hex, to_json, write_json_atomic, SCHEMA_VERSION};
use qllm_core::layer::{
    data_loss, enhance, matrix_loss, param_count, retrain, EnhanceConfig, LossTrace, Objective, ParamCount,
    RetrainTarget,
};
use qllm_core::mpo::{bond_entropies, mpo_from_matrix, truncate_mpo, Mpo, SiteSpec};
use qllm_core::planted::{plant_instance, PlantedSpec};
use qllm_core::sampling::{log_log_slope, shot_noise_study};
use qllm_core::tensor::{complex_normal, seeded_rng, DenseTensor, TruncationPolicy, C64};

use crate::{
    BaselineArgs, CircuitArg, Cli, Command, DisentangleArgs, EnhanceArgs, EvaluateArgs, FactorizeArgs, InitArg,
    MatrixInput, ObjectiveArg, PlantArgs, RetrainArgs, SampleStudyArgs,
};

/// Tolerance for `evaluate`'s stored-vs-recomputed metric comparison.
const METRIC_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: qllm_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core { source, .. } if source.is_numerical() => 2,
            CliError::Core { .. } => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for qllm_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| CliError::Core {
            context: what(),
            source,
        })
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn tool_version() -> String {
    format!("qllm {}", env!("CARGO_PKG_VERSION"))
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn run(cli: &Cli) -> Result<()> {
    let report = match &cli.command {
        Command::Plant(a) => to_value(plant(a)?),
        Command::Factorize(a) => to_value(factorize(a)?),
        Command::Disentangle(a) => to_value(disentangle(a)?),
        Command::Evaluate(a) => to_value(evaluate(a)?),
        Command::Baseline(a) => to_value(baseline(a)?),
        Command::Enhance(a) => to_value(enhance_cmd(a)?),
        Command::Retrain(a) => to_value(retrain_cmd(a)?),
        Command::SampleStudy(a) => to_value(sample_study(a)?),
    };
    match &cli.report {
        Some(path) => write_json_atomic(path, &report).context(|| format!("writing report {}", display(path))),
        None => {
            print!("{}", to_json(&report).context(|| "serializing report".into())?);
            Ok(())
        }
    }
}

fn to_value<T: Serialize>(v: T) -> serde_json::Value {
    serde_json::to_value(v).expect("reports serialize")
}

fn check_finite(flag: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--{flag} must be finite, got {v}")))
    }
}

struct LoadedMatrix {
    w: DenseTensor,
    spec: SiteSpec,
    mpo: Mpo,
    hash: String,
    padded_from: Option<[usize; 2]>,
}

fn next_power(n: usize, d: usize) -> usize {
    let mut p = 1;
    while p < n {
        p *= d;
    }
    p
}

fn read_bytes(path: &Path, flag: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Core {
        context: format!("--{flag} {}", display(path)),
        source: e.into(),
    })
}

fn read_tensor(path: &Path, flag: &str) -> Result<(DenseTensor, String)> {
    let bytes = read_bytes(path, flag)?;
    let t = qllm_core::io::qten::decode(&bytes)
        .context(|| format!("--{flag} {}", display(path)))?
        .0;
    Ok((t, sha256_hex(&bytes)))
}

fn load_matrix(m: &MatrixInput) -> Result<LoadedMatrix> {
    let (mut w, hash) = read_tensor(&m.input, "input")?;
    w.ensure_matrix("input")
        .context(|| format!("--input {}", display(&m.input)))?;
    w.ensure_finite("input")
        .context(|| format!("--input {}", display(&m.input)))?;
    let d = m.site_dim as usize;
    let mut padded_from = None;
    if m.pad {
        let (r, c) = (next_power(w.rows(), d), next_power(w.cols(), d));
        if (r, c) != (w.rows(), w.cols()) {
            padded_from = Some([w.rows(), w.cols()]);
            let src = w.clone();
            w = DenseTensor::from_fn(&[r, c], |idx| {
                if idx[0] < src.rows() && idx[1] < src.cols() {
                    src.at(idx[0], idx[1])
                } else {
                    C64::new(0.0, 0.0)
                }
            });
        }
    }
    let spec = SiteSpec::for_shape(w.rows(), w.cols(), d).map_err(|e| {
        usage(format!(
            "--input {}: {e} (use --pad to zero-pad to a factorizable shape)",
            display(&m.input)
        ))
    })?;
    let (mpo, _) =
        mpo_from_matrix(&w, &spec, &TruncationPolicy::unbounded()).context(|| "building the input MPO".into())?;
    Ok(LoadedMatrix {
        w,
        spec,
        mpo,
        hash,
        padded_from,
    })
}

#[derive(Serialize)]
struct PlantReport {
    schema_version: u32,
    command: &'static str,
    spec: PlantedSpec,
    out: String,
    w_hash: String,
    truth: Option<String>,
    truth_rel_error: f64,
    truth_bond_dims: Vec<usize>,
}

fn plant(a: &PlantArgs) -> Result<PlantReport> {
    check_finite("noise", a.noise)?;
    let spec = PlantedSpec {
        k: a.k as usize,
        site_dim: a.site_dim as usize,
        layers_u: a.layers_u.unwrap_or(a.layers),
        layers_v: a.layers_v.unwrap_or(a.layers),
        chi_core: a.chi as usize,
        noise_level: a.noise,
        seed: a.seed,
    };
    if !(0.0..1.0).contains(&a.noise) {
        return Err(usage(format!("--noise must lie in [0, 1), got {}", a.noise)));
    }
    info!(
        "planting k={} layers=({}, {}) chi={} seed={}",
        spec.k, spec.layers_u, spec.layers_v, spec.chi_core, spec.seed
    );
    let (w, mut truth) = plant_instance(&spec).context(|| "planting instance".into())?;
    write_qten(&a.out, &w).context(|| format!("--out {}", display(&a.out)))?;
    let w_hash = sha256_hex(&fs::read(&a.out).map_err(|e| CliError::Core {
        context: display(&a.out),
        source: e.into(),
    })?);
    let truth_rel_error = truth
        .to_dense()
        .context(|| "reconstructing truth".into())?
        .sub(&w)
        .expect("same shape")
        .norm()
        / w.norm();
    truth.provenance = Provenance {
        source_hash: Some(w_hash.clone()),
        seed: Some(a.seed),
        tool_version: tool_version(),
    };
    if let Some(path) = &a.truth {
        save_layer(&truth, path, to_value(&spec), Some(truth_rel_error))
            .context(|| format!("--truth {}", display(path)))?;
    }
    Ok(PlantReport {
        schema_version: SCHEMA_VERSION,
        command: "plant",
        out: display(&a.out),
        w_hash,
        truth: a.truth.as_deref().map(display),
        truth_rel_error,
        truth_bond_dims: truth.core.bond_dims(),
        spec,
    })
}

#[derive(Serialize)]
struct ConvergenceSummary {
    sweep_fidelities: Vec<f64>,
    sweeps_used: usize,
    converged: bool,
    restarts: usize,
    best_restart: usize,
}

/// Shared by `factorize` and `disentangle`.
#[derive(Serialize)]
struct LayerReport {
    schema_version: u32,
    command: &'static str,
    input_hash: String,
    site_spec: SiteSpec,
    padded_from: Option<[usize; 2]>,
    config: serde_json::Value,
    final_rel_error: f64,
    bond_dims: Vec<usize>,
    param_count: ParamCount,
    entropy_before: Vec<f64>,
    entropy_after: Vec<f64>,
    manifest: Option<String>,
    convergence: Option<ConvergenceSummary>,
}

fn finish_layer(
    command: &'static str,
    input: &LoadedMatrix,
    mut fac: FactorizedOperator,
    config: serde_json::Value,
    seed: Option<u64>,
    out: Option<&PathBuf>,
    convergence: Option<ConvergenceSummary>,
) -> Result<LayerReport> {
    fac.provenance = Provenance {
        source_hash: Some(input.hash.clone()),
        seed,
        tool_version: tool_version(),
    };
    let final_rel_error = relative_error(&fac, &input.mpo).context(|| "computing the final error".into())?;
    if !final_rel_error.is_finite() {
        return Err(CliError::Core {
            context: "final error".into(),
            source: qllm_core::Error::NonFinite("relative error".into()),
        });
    }
    if let Some(path) = out {
        save_layer(&fac, path, config.clone(), Some(final_rel_error)).context(|| format!("--out {}", display(path)))?;
    }
    info!(
        "{command}: relative error {final_rel_error:.3e}, bonds {:?}",
        fac.core.bond_dims()
    );
    Ok(LayerReport {
        schema_version: SCHEMA_VERSION,
        command,
        input_hash: input.hash.clone(),
        site_spec: input.spec.clone(),
        padded_from: input.padded_from,
        config,
        final_rel_error,
        bond_dims: fac.core.bond_dims(),
        param_count: param_count(&fac),
        entropy_before: bond_entropies(&input.mpo).context(|| "input entropies".into())?,
        entropy_after: bond_entropies(&fac.core).context(|| "core entropies".into())?,
        manifest: out.map(|p| display(p)),
        convergence,
    })
}

fn factorize(a: &FactorizeArgs) -> Result<LayerReport> {
    let input = load_matrix(&a.matrix)?;
    let chi = a.chi as usize;
    let (core, _) = truncate_mpo(&input.mpo, &TruncationPolicy::with_chi(chi)).context(|| "truncating".into())?;
    let config = json!({ "chi": chi, "site_dim": a.matrix.site_dim, "pad": a.matrix.pad });
    finish_layer(
        "factorize",
        &input,
        FactorizedOperator::plain(core),
        config,
        None,
        a.out.as_ref(),
        None,
    )
}

fn disentangle(a: &DisentangleArgs) -> Result<LayerReport> {
    check_finite("fid-tol", a.fid_tol)?;
    if a.fid_tol <= 0.0 {
        return Err(usage(format!("--fid-tol must be positive, got {}", a.fid_tol)));
    }
    if a.max_sweeps == 0 {
        return Err(usage("--max-sweeps must be at least 1"));
    }
    let input = load_matrix(&a.matrix)?;
    let mut cfg = DisentangleConfig::new(
        a.layers_u.unwrap_or(a.layers),
        a.layers_v.unwrap_or(a.layers),
        a.chi_new as usize,
    );
    cfg.max_sweeps = a.max_sweeps;
    cfg.fid_tol = a.fid_tol;
    cfg.seed = a.seed;
    cfg.init = match a.init {
        InitArg::Identity => InitKind::Identity,
        InitArg::Haar => InitKind::Haar,
    };
    if input.spec.num_sites() < 2 && cfg.layers_u + cfg.layers_v > 0 {
        return Err(usage(
            "--layers needs at least two sites; use --layers 0 for a single site",
        ));
    }
    info!(
        "disentangling: layers=({}, {}) chi_new={} restarts={}",
        cfg.layers_u, cfg.layers_v, cfg.chi_new, a.restarts
    );
    let (fac, rep) =
        disentangle_with_restarts(&input.mpo, &cfg, a.restarts as usize).context(|| "disentangling".into())?;
    let config = json!({
        "disentangle": cfg,
        "restarts": a.restarts,
        "site_dim": a.matrix.site_dim,
        "pad": a.matrix.pad,
    });
    let convergence = ConvergenceSummary {
        sweep_fidelities: rep.sweep_fidelities,
        sweeps_used: rep.sweeps_used,
        converged: rep.converged,
        restarts: rep.restarts,
        best_restart: rep.best_restart,
    };
    finish_layer(
        "disentangle",
        &input,
        fac,
        config,
        Some(a.seed),
        a.out.as_ref(),
        Some(convergence),
    )
}

#[derive(Serialize)]
struct EvaluateReport {
    schema_version: u32,
    command: &'static str,
    layer: String,
    reference_hash: Option<String>,
    final_rel_error: Option<f64>,
    max_unitarity_residual: f64,
    stored: LayerMetrics,
    recomputed: LayerMetrics,
    max_metric_deviation: f64,
    metrics_consistent: bool,
}

fn metric_deviation(a: &LayerMetrics, b: &LayerMetrics) -> f64 {
    if a.bond_dims != b.bond_dims || a.entropies.len() != b.entropies.len() {
        return f64::INFINITY;
    }
    let (pa, pb) = (a.param_count, b.param_count);
    if (pa.gates, pa.core, pa.total, pa.dense_equiv) != (pb.gates, pb.core, pb.total, pb.dense_equiv) {
        return f64::INFINITY;
    }
    let mut dev = (pa.ratio - pb.ratio).abs();
    for (x, y) in a.entropies.iter().zip(&b.entropies) {
        dev = dev.max((x - y).abs());
    }
    if let (Some(x), Some(y)) = (a.final_rel_error, b.final_rel_error) {
        dev = dev.max((x - y).abs());
    }
    dev
}

fn evaluate(a: &EvaluateArgs) -> Result<EvaluateReport> {
    let (fac, manifest) = load_layer(&a.layer).context(|| format!("--layer {}", display(&a.layer)))?;
    let (final_rel_error, reference_hash) = match &a.reference {
        Some(path) => {
            let (w, hash) = read_tensor(path, "reference")?;
            let r = fac.to_dense().context(|| "reconstructing layer".into())?;
            if r.dims() != w.dims() {
                return Err(usage(format!(
                    "--reference {} has shape {:?}, the layer represents {:?}",
                    display(path),
                    w.dims(),
                    r.dims()
                )));
            }
            (Some(r.rel_diff(&w)), Some(hash))
        }
        None => (manifest.metrics.final_rel_error, None),
    };
    let recomputed = layer_metrics(&fac, final_rel_error).context(|| "recomputing metrics".into())?;
    let dev = metric_deviation(&manifest.metrics, &recomputed);
    info!("evaluate: relative error {final_rel_error:?}, metric deviation {dev:.3e}");
    Ok(EvaluateReport {
        schema_version: SCHEMA_VERSION,
        command: "evaluate",
        layer: display(&a.layer),
        reference_hash,
        final_rel_error,
        max_unitarity_residual: fac.u.max_unitarity_residual().max(fac.v_dag.max_unitarity_residual()),
        stored: manifest.metrics,
        recomputed,
        max_metric_deviation: dev,
        metrics_consistent: dev <= METRIC_TOL,
    })
}

#[derive(Serialize)]
struct BaselineReport {
    schema_version: u32,
    command: &'static str,
    input_hash: String,
    padded_from: Option<[usize; 2]>,
    target_error: f64,
    config: BaselineConfig,
    profiles: Vec<BondProfile>,
}

fn baseline(a: &BaselineArgs) -> Result<BaselineReport> {
    check_finite("target-error", a.target_error)?;
    if a.target_error < 0.0 {
        return Err(usage(format!(
            "--target-error must be non-negative, got {}",
            a.target_error
        )));
    }
    let input = load_matrix(&a.matrix)?;
    let config = BaselineConfig {
        layers: a.layers,
        restarts: a.restarts as usize,
        max_sweeps: a.max_sweeps,
        seed: a.seed,
        ..BaselineConfig::default()
    };
    let profiles =
        baseline_profiles_with(&input.w, &input.spec, a.target_error, &config).context(|| "baseline".into())?;
    for p in &profiles {
        info!(
            "{:?}: bonds {:?}, params {}, error {:.3e}",
            p.method, p.bond_dims, p.param_count, p.achieved_error
        );
    }
    Ok(BaselineReport {
        schema_version: SCHEMA_VERSION,
        command: "baseline",
        input_hash: input.hash,
        padded_from: input.padded_from,
        target_error: a.target_error,
        config,
        profiles,
    })
}

#[derive(Serialize)]
struct EnhanceReport {
    schema_version: u32,
    command: &'static str,
    layer: String,
    config: EnhanceConfig,
    operator_change: f64,
    before: LayerMetrics,
    after: LayerMetrics,
    manifest: String,
}

fn enhance_cmd(a: &EnhanceArgs) -> Result<EnhanceReport> {
    check_finite("noise-scale", a.noise_scale)?;
    let (fac, manifest) = load_layer(&a.layer).context(|| format!("--layer {}", display(&a.layer)))?;
    let new_chi = a.new_chi.map(|c| c as usize).unwrap_or_else(|| fac.core.max_bond());
    if new_chi < fac.core.max_bond() {
        return Err(usage(format!(
            "--new-chi {new_chi} is below the layer's bond dimension {}",
            fac.core.max_bond()
        )));
    }
    let mut cfg = EnhanceConfig::new(new_chi);
    cfg.add_layers_u = a.add_layers_u.unwrap_or(a.add_layers);
    cfg.add_layers_v = a.add_layers_v.unwrap_or(a.add_layers);
    cfg.noise_scale = a.noise_scale;
    cfg.seed = a.seed;
    if (cfg.add_layers_u > 0 || cfg.add_layers_v > 0) && fac.site_spec.num_sites() < 2 {
        return Err(usage("--add-layers needs at least two sites"));
    }
    let mut grown = enhance(&fac, &cfg).context(|| "enhancing".into())?;
    let before = fac.to_dense().context(|| "reconstructing layer".into())?;
    let after = grown.to_dense().context(|| "reconstructing enhanced layer".into())?;
    let operator_change = after.rel_diff(&before);
    grown.provenance.tool_version = tool_version();
    let config = json!({ "source": manifest.config, "enhance": cfg });
    save_layer(&grown, &a.out, config, None).context(|| format!("--out {}", display(&a.out)))?;
    info!(
        "enhance: bonds {:?} -> {:?}, operator change {operator_change:.3e}",
        fac.core.bond_dims(),
        grown.core.bond_dims()
    );
    Ok(EnhanceReport {
        schema_version: SCHEMA_VERSION,
        command: "enhance",
        layer: display(&a.layer),
        operator_change,
        before: layer_metrics(&fac, None).context(|| "metrics".into())?,
        after: layer_metrics(&grown, None).context(|| "metrics".into())?,
        manifest: display(&a.out),
        config: cfg,
    })
}

#[derive(Serialize)]
struct RetrainReport {
    schema_version: u32,
    command: &'static str,
    layer: String,
    config: EnhanceConfig,
    initial_loss: f64,
    final_loss: f64,
    final_rel_error: Option<f64>,
    trace: LossTrace,
    manifest: String,
}

fn retrain_cmd(a: &RetrainArgs) -> Result<RetrainReport> {
    check_finite("step-size", a.step_size)?;
    let (fac, manifest) = load_layer(&a.layer).context(|| format!("--layer {}", display(&a.layer)))?;
    let objective = match (a.objective, &a.target, &a.x, &a.y) {
        (Some(ObjectiveArg::MatrixFidelity) | None, Some(_), None, None) => Objective::MatrixFidelity,
        (Some(ObjectiveArg::DataMse) | None, None, Some(_), Some(_)) => Objective::DataMse,
        (Some(ObjectiveArg::MatrixFidelity), _, _, _) => return Err(usage("matrix_fidelity needs --target only")),
        (Some(ObjectiveArg::DataMse), _, _, _) => return Err(usage("data_mse needs --x and --y only")),
        _ => return Err(usage("give either --target or both --x and --y")),
    };
    let mut cfg = EnhanceConfig::new(fac.core.max_bond());
    cfg.retrain_steps = a.steps;
    cfg.step_size = a.step_size;
    cfg.objective = objective;
    cfg.seed = a.seed;
    cfg.grad_check = a.grad_check;
    let spec = fac.site_spec.clone();
    let (trained, trace, initial_loss, final_loss, final_rel_error) = match objective {
        Objective::MatrixFidelity => {
            let path = a.target.as_ref().expect("checked above");
            let (w, _) = read_tensor(path, "target")?;
            if w.dims() != [spec.rows(), spec.cols()] {
                return Err(usage(format!(
                    "--target {} has shape {:?}, the layer needs {}x{}",
                    display(path),
                    w.dims(),
                    spec.rows(),
                    spec.cols()
                )));
            }
            let (m, _) = mpo_from_matrix(&w, &spec, &TruncationPolicy::unbounded()).context(|| "target MPO".into())?;
            let initial = matrix_loss(&fac, &m).context(|| "initial loss".into())?;
            let (t, trace) = retrain(&fac, RetrainTarget::Operator(&m), &cfg).context(|| "retraining".into())?;
            let fin = matrix_loss(&t, &m).context(|| "final loss".into())?;
            let err = relative_error(&t, &m).context(|| "final error".into())?;
            (t, trace, initial, fin, Some(err))
        }
        Objective::DataMse => {
            let (x, _) = read_tensor(a.x.as_ref().expect("checked above"), "x")?;
            let (y, _) = read_tensor(a.y.as_ref().expect("checked above"), "y")?;
            let initial = data_loss(&fac, &x, &y).context(|| "--x/--y batch".into())?;
            let (t, trace) =
                retrain(&fac, RetrainTarget::Data { x: &x, y: &y }, &cfg).context(|| "retraining".into())?;
            let fin = data_loss(&t, &x, &y).context(|| "final loss".into())?;
            (t, trace, initial, fin, None)
        }
    };
    let mut trained = trained;
    trained.provenance.tool_version = tool_version();
    trained.provenance.seed = Some(a.seed);
    let config = json!({ "source": manifest.config, "retrain": cfg });
    save_layer(&trained, &a.out, config, final_rel_error).context(|| format!("--out {}", display(&a.out)))?;
    info!(
        "retrain: loss {initial_loss:.3e} -> {final_loss:.3e} in {} steps",
        trace.step_losses.len()
    );
    Ok(RetrainReport {
        schema_version: SCHEMA_VERSION,
        command: "retrain",
        layer: display(&a.layer),
        config: cfg,
        initial_loss,
        final_loss,
        final_rel_error,
        trace,
        manifest: display(&a.out),
    })
}

#[derive(Serialize)]
struct SampleStudyReport {
    schema_version: u32,
    command: &'static str,
    circuit_source: serde_json::Value,
    shots_list: Vec<u64>,
    seeds: Vec<u64>,
    /// One row per seed, one entry per shot count.
    l2_errors: Vec<Vec<f64>>,
    median_l2_errors: Vec<f64>,
    log_log_slope: Option<f64>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn sample_study(a: &SampleStudyArgs) -> Result<SampleStudyReport> {
    if a.shots.is_empty() || a.shots.contains(&0) {
        return Err(usage("--shots must list positive shot counts"));
    }
    let (circuit, source): (Circuit, serde_json::Value) = match &a.layer {
        Some(path) => {
            let (fac, _) = load_layer(path).context(|| format!("--layer {}", display(path)))?;
            let (c, name) = match a.circuit {
                CircuitArg::U => (fac.u, "u"),
                CircuitArg::VDag => (fac.v_dag, "v_dag"),
            };
            (c, json!({ "layer": display(path), "circuit": name }))
        }
        None => {
            let k = a.k as usize;
            if k < 2 && a.layers > 0 {
                return Err(usage("--k must be at least 2 for a gated circuit"));
            }
            let c = brickwork(
                &CircuitLayout::new(k, a.layers),
                &vec![2; k],
                Side::Output,
                GateInit::Haar { seed: a.circuit_seed },
            )
            .context(|| "building circuit".into())?;
            (
                c,
                json!({ "random": { "k": k, "layers": a.layers, "circuit_seed": a.circuit_seed } }),
            )
        }
    };
    let x: Vec<C64> = match &a.input {
        Some(path) => read_tensor(path, "input")?.0.into_data(),
        None => {
            let mut rng = seeded_rng(a.seed);
            (0..circuit.dim()).map(|_| complex_normal(&mut rng)).collect()
        }
    };
    if x.len() != circuit.dim() {
        return Err(usage(format!(
            "--input has {} entries, the circuit acts on dimension {}",
            x.len(),
            circuit.dim()
        )));
    }
    let seeds: Vec<u64> = (0..a.seeds).map(|i| a.seed.wrapping_add(i)).collect();
    let l2_errors = seeds
        .iter()
        .map(|&s| {
            Ok(shot_noise_study(&circuit, &x, &a.shots, s)
                .context(|| "shot study".into())?
                .l2_errors)
        })
        .collect::<Result<Vec<_>>>()?;
    let median_l2_errors: Vec<f64> = (0..a.shots.len())
        .map(|j| median(l2_errors.iter().map(|row| row[j]).collect()))
        .collect();
    let xs: Vec<f64> = a.shots.iter().map(|&s| s as f64).collect();
    let slope = (a.shots.len() >= 2 && median_l2_errors.iter().all(|&e| e > 0.0))
        .then(|| log_log_slope(&xs, &median_l2_errors));
    info!("sample-study: medians {median_l2_errors:?}, slope {slope:?}");
    Ok(SampleStudyReport {
        schema_version: SCHEMA_VERSION,
        command: "sample-study",
        circuit_source: source,
        shots_list: a.shots.clone(),
        seeds,
        l2_errors,
        median_l2_errors,
        log_log_slope: slope,
    })
}
