//! Layer manifests: a JSON description of a [`FactorizedOperator`] whose
//! tensors live in sibling QTEN files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::qten::{read_qten, write_qten};
use super::{write_json_atomic, SCHEMA_VERSION};
use crate::circuit::{Circuit, Gate, Parity, Side};
use crate::disentangler::{FactorizedOperator, Provenance};
use crate::error::{Error, Result};
use crate::layer::{param_count, ParamCount};
use crate::mpo::{bond_entropies, Mpo, SiteSpec};

/// Unitarity tolerance applied to gates read back from disk.
pub const LOAD_UNITARITY_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorRole {
    Core { index: usize },
    Gate { side: Side, layer: usize, site: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRef {
    pub role: TensorRole,
    /// Path relative to the manifest's directory.
    pub file: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitMeta {
    pub parity_start: Parity,
    pub num_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub final_rel_error: Option<f64>,
    pub param_count: ParamCount,
    pub bond_dims: Vec<usize>,
    pub entropies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub schema_version: u32,
    pub site_spec: SiteSpec,
    pub u: CircuitMeta,
    pub v_dag: CircuitMeta,
    pub core_center: Option<usize>,
    pub tensors: Vec<TensorRef>,
    pub config: serde_json::Value,
    pub provenance: Provenance,
    pub metrics: LayerMetrics,
}

/// Metrics recomputed from the tensors of `fac`.
pub fn layer_metrics(fac: &FactorizedOperator, final_rel_error: Option<f64>) -> Result<LayerMetrics> {
    Ok(LayerMetrics {
        final_rel_error,
        param_count: param_count(fac),
        bond_dims: fac.core.bond_dims(),
        entropies: bond_entropies(&fac.core)?,
    })
}

fn side_tag(side: Side) -> &'static str {
    match side {
        Side::Output => "u",
        Side::Input => "v_dag",
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes the tensors of `fac` next to `path` and the manifest itself to
/// `path`. Tensor files are named after the manifest's file stem.
pub fn save_layer(
    fac: &FactorizedOperator,
    path: &Path,
    config: serde_json::Value,
    final_rel_error: Option<f64>,
) -> Result<LayerManifest> {
    let dir = manifest_dir(path);
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidConfig(format!("manifest path {} has no file name", path.display())))?;
    let mut tensors = Vec::new();
    for (i, core) in fac.core.cores().iter().enumerate() {
        let file = format!("{stem}.core{i}.qten");
        write_qten(&dir.join(&file), core)?;
        tensors.push(TensorRef {
            role: TensorRole::Core { index: i },
            file,
        });
    }
    for c in [&fac.u, &fac.v_dag] {
        for (l, layer) in c.layers().iter().enumerate() {
            for g in layer {
                let file = format!("{stem}.{}.l{l}.s{}.qten", side_tag(c.side()), g.site);
                write_qten(&dir.join(&file), &g.matrix)?;
                tensors.push(TensorRef {
                    role: TensorRole::Gate {
                        side: c.side(),
                        layer: l,
                        site: g.site,
                    },
                    file,
                });
            }
        }
    }
    let meta = |c: &Circuit| CircuitMeta {
        parity_start: c.parity_start(),
        num_layers: c.num_layers(),
    };
    let manifest = LayerManifest {
        schema_version: SCHEMA_VERSION,
        site_spec: fac.site_spec.clone(),
        u: meta(&fac.u),
        v_dag: meta(&fac.v_dag),
        core_center: fac.core.center(),
        tensors,
        config,
        provenance: fac.provenance.clone(),
        metrics: layer_metrics(fac, final_rel_error)?,
    };
    write_json_atomic(path, &manifest)?;
    Ok(manifest)
}

fn build_circuit(m: &LayerManifest, meta: CircuitMeta, side: Side, gates: &mut [Vec<Gate>]) -> Result<Circuit> {
    let dims = m.site_spec.dims_for(side);
    let layers = gates.iter_mut().map(std::mem::take).collect();
    let c = Circuit::from_layers(dims, meta.parity_start, layers, side)?;
    c.validate(LOAD_UNITARITY_TOL)?;
    Ok(c)
}

/// Reads a manifest and every tensor it references.
pub fn load_layer(path: &Path) -> Result<(FactorizedOperator, LayerManifest)> {
    let manifest: LayerManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Malformed(format!(
            "manifest schema version {} is not {SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    manifest.site_spec.validate()?;
    let dir = manifest_dir(path);
    let k = manifest.site_spec.num_sites();
    let mut cores: Vec<Option<_>> = vec![None; k];
    let mut u_gates = vec![Vec::new(); manifest.u.num_layers];
    let mut v_gates = vec![Vec::new(); manifest.v_dag.num_layers];
    for r in &manifest.tensors {
        let t = read_qten(&dir.join(&r.file))?;
        match r.role {
            TensorRole::Core { index } => {
                let slot = cores
                    .get_mut(index)
                    .ok_or_else(|| Error::Malformed(format!("core index {index} out of range in {}", r.file)))?;
                *slot = Some(t);
            }
            TensorRole::Gate { side, layer, site } => {
                let (dims, layers) = match side {
                    Side::Output => (&manifest.site_spec.out_dims, &mut u_gates),
                    Side::Input => (&manifest.site_spec.in_dims, &mut v_gates),
                };
                if site + 1 >= dims.len() {
                    return Err(Error::Malformed(format!("gate site {site} out of range in {}", r.file)));
                }
                let slot = layers
                    .get_mut(layer)
                    .ok_or_else(|| Error::Malformed(format!("gate layer {layer} out of range in {}", r.file)))?;
                slot.push(Gate::new(site, (dims[site], dims[site + 1]), t)?);
            }
        }
    }
    let cores = cores
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| Error::Malformed(format!("manifest lists no tensor for core {i}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut core = Mpo::new(cores, manifest.site_spec.clone())?;
    if let Some(c) = manifest.core_center {
        if c < k && core.isometry_residual(c) < LOAD_UNITARITY_TOL {
            core.set_center(Some(c));
        }
    }
    for layer in u_gates.iter_mut().chain(v_gates.iter_mut()) {
        layer.sort_by_key(|g| g.site);
    }
    let u = build_circuit(&manifest, manifest.u, Side::Output, &mut u_gates)?;
    let v_dag = build_circuit(&manifest, manifest.v_dag, Side::Input, &mut v_gates)?;
    let mut fac = FactorizedOperator::new(u, core, v_dag)?;
    fac.provenance = manifest.provenance.clone();
    Ok((fac, manifest))
}
