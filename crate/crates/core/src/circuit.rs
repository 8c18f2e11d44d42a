//! Brickwork circuits of two-site unitary gates.
//!
//! A [`Circuit`] represents the unitary `C = L_{n−1} ⋯ L_1 · L_0`, layer 0
//! acting first on a state. Output-side circuits multiply an operator from
//! the left (`C·W`), input-side circuits from the right (`W·C`). Gates on a
//! pair `(s, s+1)` index their matrix as `(a_s · d_{s+1} + a_{s+1})`, the left
//! site being the more significant, matching the global row-major order.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::mpo::{check_guard, dense_guard, rss, Mpo};
use crate::tensor::{contract, haar_unitary, seeded_rng, svd_truncate, DenseTensor, TruncationPolicy, C64, ZERO};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Acts on the physical-out legs (rows); houses `U`.
    Output,
    /// Acts on the physical-in legs (columns); houses `V†`.
    Input,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Output => "output",
            Side::Input => "input",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    fn offset(self) -> usize {
        match self {
            Parity::Even => 0,
            Parity::Odd => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitLayout {
    pub num_sites: usize,
    pub num_layers: usize,
    pub parity_start: Parity,
}

impl CircuitLayout {
    pub fn new(num_sites: usize, num_layers: usize) -> Self {
        Self {
            num_sites,
            num_layers,
            parity_start: Parity::Even,
        }
    }

    /// Left sites of the gates in `layer`.
    pub fn pairs(&self, layer: usize) -> Vec<usize> {
        layer_pairs(self.num_sites, self.parity_start, layer)
    }
}

fn layer_pairs(num_sites: usize, parity: Parity, layer: usize) -> Vec<usize> {
    let start = (parity.offset() + layer) % 2;
    (start..num_sites.saturating_sub(1)).step_by(2).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum GateInit {
    Identity,
    Haar { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gate {
    pub site: usize,
    pub dims: (usize, usize),
    pub matrix: DenseTensor,
}

impl Gate {
    pub fn new(site: usize, dims: (usize, usize), matrix: DenseTensor) -> Result<Self> {
        let n = dims.0 * dims.1;
        if matrix.dims() != [n, n] {
            return Err(mismatch(format!(
                "gate on dims {:?} needs a {n}x{n} matrix, got {:?}",
                dims,
                matrix.dims()
            )));
        }
        Ok(Self { site, dims, matrix })
    }

    pub fn identity(site: usize, dims: (usize, usize)) -> Self {
        Self {
            site,
            dims,
            matrix: DenseTensor::identity(dims.0 * dims.1),
        }
    }

    pub fn unitarity_residual(&self) -> f64 {
        self.matrix.unitarity_residual()
    }

    pub fn param_count(&self) -> usize {
        2 * self.matrix.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    site_dims: Vec<usize>,
    parity_start: Parity,
    layers: Vec<Vec<Gate>>,
    side: Side,
}

/// Builds a brickwork circuit on sites with the given physical dims.
pub fn brickwork(layout: &CircuitLayout, site_dims: &[usize], side: Side, init: GateInit) -> Result<Circuit> {
    if layout.num_sites != site_dims.len() {
        return Err(mismatch(format!(
            "layout has {} sites but {} site dims were given",
            layout.num_sites,
            site_dims.len()
        )));
    }
    if layout.num_sites < 2 && layout.num_layers > 0 {
        return Err(Error::InvalidConfig("a gated circuit needs at least 2 sites".into()));
    }
    let mut rng = match init {
        GateInit::Haar { seed } => Some(seeded_rng(seed)),
        GateInit::Identity => None,
    };
    let layers = (0..layout.num_layers)
        .map(|l| {
            layout
                .pairs(l)
                .into_iter()
                .map(|s| {
                    let dims = (site_dims[s], site_dims[s + 1]);
                    match rng.as_mut() {
                        Some(r) => Gate {
                            site: s,
                            dims,
                            matrix: haar_unitary(dims.0 * dims.1, r),
                        },
                        None => Gate::identity(s, dims),
                    }
                })
                .collect()
        })
        .collect();
    Ok(Circuit {
        site_dims: site_dims.to_vec(),
        parity_start: layout.parity_start,
        layers,
        side,
    })
}

impl Circuit {
    pub fn empty(site_dims: &[usize], side: Side) -> Self {
        Self {
            site_dims: site_dims.to_vec(),
            parity_start: Parity::Even,
            layers: Vec::new(),
            side,
        }
    }

    /// Rebuilds a circuit from explicit layers, validating placement.
    pub fn from_layers(site_dims: &[usize], parity_start: Parity, layers: Vec<Vec<Gate>>, side: Side) -> Result<Self> {
        let c = Self {
            site_dims: site_dims.to_vec(),
            parity_start,
            layers,
            side,
        };
        c.validate_layout()?;
        Ok(c)
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn num_sites(&self) -> usize {
        self.site_dims.len()
    }

    pub fn site_dims(&self) -> &[usize] {
        &self.site_dims
    }

    pub fn parity_start(&self) -> Parity {
        self.parity_start
    }

    pub fn layout(&self) -> CircuitLayout {
        CircuitLayout {
            num_sites: self.num_sites(),
            num_layers: self.layers.len(),
            parity_start: self.parity_start,
        }
    }

    pub fn layers(&self) -> &[Vec<Gate>] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_gates(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    /// Dimension of the space the circuit acts on.
    pub fn dim(&self) -> usize {
        self.site_dims.iter().product()
    }

    /// `(layer, site)` of every gate in application order of layer 0 first.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, gates)| gates.iter().map(move |g| (l, g.site)))
            .collect()
    }

    pub fn gate(&self, layer: usize, site: usize) -> Option<&Gate> {
        self.layers.get(layer)?.iter().find(|g| g.site == site)
    }

    pub fn set_gate_matrix(&mut self, layer: usize, site: usize, matrix: DenseTensor) -> Result<()> {
        let gate = self
            .layers
            .get_mut(layer)
            .and_then(|gs| gs.iter_mut().find(|g| g.site == site))
            .ok_or_else(|| Error::OutOfRange(format!("no gate at layer {layer}, site {site}")))?;
        let n = gate.dims.0 * gate.dims.1;
        if matrix.dims() != [n, n] {
            return Err(mismatch(format!("gate matrix {:?}, expected {n}x{n}", matrix.dims())));
        }
        gate.matrix = matrix;
        Ok(())
    }

    /// Appends identity-initialized brickwork layers continuing the parity
    /// alternation. The represented unitary is unchanged.
    pub fn append_identity_layers(&mut self, count: usize) {
        for _ in 0..count {
            let l = self.layers.len();
            let gates = layer_pairs(self.num_sites(), self.parity_start, l)
                .into_iter()
                .map(|s| Gate::identity(s, (self.site_dims[s], self.site_dims[s + 1])))
                .collect();
            self.layers.push(gates);
        }
    }

    /// Copy keeping only the gates for which `keep(layer, site)` holds. Layer
    /// indices are preserved (dropped gates leave identity in their place).
    pub fn restricted(&self, keep: impl Fn(usize, usize) -> bool) -> Self {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(l, gs)| gs.iter().filter(|g| keep(l, g.site)).cloned().collect())
            .collect();
        Self { layers, ..self.clone() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flatten().map(Gate::param_count).sum()
    }

    pub fn max_unitarity_residual(&self) -> f64 {
        self.layers
            .iter()
            .flatten()
            .map(Gate::unitarity_residual)
            .fold(0.0, f64::max)
    }

    fn validate_layout(&self) -> Result<()> {
        for (l, gates) in self.layers.iter().enumerate() {
            let mut used = vec![false; self.num_sites()];
            for g in gates {
                if g.site + 1 >= self.num_sites() {
                    return Err(Error::OutOfRange(format!("gate at site {} in layer {l}", g.site)));
                }
                if used[g.site] || used[g.site + 1] {
                    return Err(mismatch(format!("layer {l} has overlapping gates at site {}", g.site)));
                }
                used[g.site] = true;
                used[g.site + 1] = true;
                if g.dims != (self.site_dims[g.site], self.site_dims[g.site + 1]) {
                    return Err(mismatch(format!("gate dims {:?} at site {}", g.dims, g.site)));
                }
                let n = g.dims.0 * g.dims.1;
                if g.matrix.dims() != [n, n] {
                    return Err(mismatch(format!(
                        "gate matrix {:?} at site {}",
                        g.matrix.dims(),
                        g.site
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks layout and unitarity of every gate to `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        self.validate_layout()?;
        let worst = self.max_unitarity_residual();
        if worst > tol {
            return Err(Error::InvalidConfig(format!(
                "gate unitarity residual {worst:e} exceeds {tol:e}"
            )));
        }
        Ok(())
    }

    /// Gate matrices in the order they multiply onto an operator from
    /// `side`. For left multiplication by `C` layer 0 comes first; for right
    /// multiplication the last layer is adjacent to the operator and comes
    /// first. `adjoint` swaps to `C†` (reversed order, conjugated gates).
    pub(crate) fn ops(&self, side: Side, adjoint: bool) -> Vec<(usize, DenseTensor)> {
        let forward = matches!((side, adjoint), (Side::Output, false) | (Side::Input, true));
        let mut order: Vec<&Vec<Gate>> = self.layers.iter().collect();
        if !forward {
            order.reverse();
        }
        order
            .into_iter()
            .flat_map(|gs| gs.iter())
            .map(|g| (g.site, if adjoint { g.matrix.adjoint() } else { g.matrix.clone() }))
            .collect()
    }
}

/// Left-multiplies the rows of `x` (row index over `site_dims`) by `g` on
/// sites `(site, site + 1)`.
fn apply_pair_rows(x: &DenseTensor, site_dims: &[usize], site: usize, g: &DenseTensor) -> DenseTensor {
    let (d1, d2) = (site_dims[site], site_dims[site + 1]);
    let dd = d1 * d2;
    let a: usize = site_dims[..site].iter().product();
    let b: usize = site_dims[site + 2..].iter().product::<usize>() * x.dims()[1];
    let src = x.data();
    let mut out = vec![ZERO; src.len()];
    let gd = g.data();
    let mut buf = vec![ZERO; dd];
    for ia in 0..a {
        for ib in 0..b {
            for p in 0..dd {
                buf[p] = src[(ia * dd + p) * b + ib];
            }
            for q in 0..dd {
                let row = &gd[q * dd..(q + 1) * dd];
                let mut acc = ZERO;
                for p in 0..dd {
                    acc += row[p] * buf[p];
                }
                out[(ia * dd + q) * b + ib] = acc;
            }
        }
    }
    DenseTensor::new(x.dims().to_vec(), out).expect("same shape")
}

/// Right-multiplies `w` (column index over `site_dims`) by `g` on sites
/// `(site, site + 1)`.
fn apply_pair_cols(w: &DenseTensor, site_dims: &[usize], site: usize, g: &DenseTensor) -> DenseTensor {
    let (d1, d2) = (site_dims[site], site_dims[site + 1]);
    let dd = d1 * d2;
    let rows = w.dims()[0];
    let a: usize = rows * site_dims[..site].iter().product::<usize>();
    let b: usize = site_dims[site + 2..].iter().product();
    let src = w.data();
    let mut out = vec![ZERO; src.len()];
    let gd = g.data();
    let mut buf = vec![ZERO; dd];
    for ia in 0..a {
        for ib in 0..b {
            for p in 0..dd {
                buf[p] = src[(ia * dd + p) * b + ib];
            }
            for q in 0..dd {
                let mut acc = ZERO;
                for p in 0..dd {
                    acc += buf[p] * gd[p * dd + q];
                }
                out[(ia * dd + q) * b + ib] = acc;
            }
        }
    }
    DenseTensor::new(w.dims().to_vec(), out).expect("same shape")
}

/// Exact dense product of the circuit with `w`: `C·w` (or `C†·w`) for an
/// output-side circuit, `w·C` (or `w·C†`) for an input-side one.
pub fn apply_circuit_dense(c: &Circuit, w: &DenseTensor, adjoint: bool) -> Result<DenseTensor> {
    w.ensure_matrix("apply_circuit_dense")?;
    check_guard(w.len() as u128, dense_guard())?;
    let axis = match c.side {
        Side::Output => 0,
        Side::Input => 1,
    };
    if w.dims()[axis] != c.dim() {
        return Err(mismatch(format!(
            "{} circuit on dim {} applied to a {:?} matrix",
            c.side.name(),
            c.dim(),
            w.dims()
        )));
    }
    let mut out = w.clone();
    for (site, g) in c.ops(c.side, adjoint) {
        out = match c.side {
            Side::Output => apply_pair_rows(&out, &c.site_dims, site, &g),
            Side::Input => apply_pair_cols(&out, &c.site_dims, site, &g),
        };
    }
    Ok(out)
}

/// `C·x` (or `C†·x`) for a batch of column vectors, whatever the circuit's side.
pub fn apply_to_columns(c: &Circuit, x: &DenseTensor, adjoint: bool) -> Result<DenseTensor> {
    x.ensure_matrix("apply_to_columns")?;
    if x.dims()[0] != c.dim() {
        return Err(mismatch(format!(
            "circuit on dim {} applied to {} rows",
            c.dim(),
            x.dims()[0]
        )));
    }
    let mut out = x.clone();
    for (site, g) in c.ops(Side::Output, adjoint) {
        out = apply_pair_rows(&out, &c.site_dims, site, &g);
    }
    Ok(out)
}

/// Contracts one gate into an MPO (TEBD step) and re-splits the pair under
/// `policy`. The gate matrix multiplies from the left on the out legs
/// (`Output`) or from the right on the in legs (`Input`). Returns the new MPO
/// (center at `gate.site + 1`) and the relative truncation error of the split.
pub fn apply_gate_mpo(m: &Mpo, gate: &Gate, side: Side, policy: &TruncationPolicy) -> Result<(Mpo, f64)> {
    apply_pair_mpo(m, gate.site, &gate.matrix, side, policy)
}

pub(crate) fn apply_pair_mpo(
    m: &Mpo,
    site: usize,
    g: &DenseTensor,
    side: Side,
    policy: &TruncationPolicy,
) -> Result<(Mpo, f64)> {
    let k = m.num_sites();
    if site + 1 >= k {
        return Err(Error::OutOfRange(format!("gate at site {site} on {k} sites")));
    }
    let dims = m.spec().dims_for(side);
    let (d1, d2) = (dims[site], dims[site + 1]);
    if g.dims() != [d1 * d2, d1 * d2] {
        return Err(mismatch(format!(
            "gate {:?} on {} legs of dims ({d1}, {d2})",
            g.dims(),
            side.name()
        )));
    }
    let mut out = m.clone();
    out.canonicalize_mut(site)?;
    let theta = contract(out.core(site), &[3], out.core(site + 1), &[0])?; // (l, o1, i1, o2, i2, r)
    let g4 = g.reshape(&[d1, d2, d1, d2])?;
    let theta = match side {
        Side::Output => contract(&g4, &[2, 3], &theta, &[1, 3])?.permute(&[2, 0, 3, 1, 4, 5]),
        Side::Input => contract(&theta, &[2, 4], &g4, &[0, 1])?.permute(&[0, 1, 4, 2, 5, 3]),
    };
    let t = theta.dims().to_vec();
    let mat = theta.into_reshape(&[t[0] * t[1] * t[2], t[3] * t[4] * t[5]])?;
    let svd = svd_truncate(&mat, policy)?;
    let chi = svd.rank();
    let left = svd.left_factor.clone().into_reshape(&[t[0], t[1], t[2], chi])?;
    let right = svd.s_times_right().into_reshape(&[chi, t[3], t[4], t[5]])?;
    {
        let cores = out.cores_mut();
        cores[site] = left;
        cores[site + 1] = right;
    }
    out.set_center(Some(site + 1));
    Ok((out, svd.trunc_error))
}

/// Applies every gate of `c` (or of `C†`) to the MPO on the circuit's side,
/// truncating under `policy` after each gate. Returns the MPO and the
/// root-sum-square of the per-gate errors.
pub fn apply_circuit_mpo(m: &Mpo, c: &Circuit, adjoint: bool, policy: &TruncationPolicy) -> Result<(Mpo, f64)> {
    if c.site_dims != m.spec().dims_for(c.side) {
        return Err(mismatch(format!(
            "{} circuit site dims {:?} vs MPO {:?}",
            c.side.name(),
            c.site_dims,
            m.spec().dims_for(c.side)
        )));
    }
    let mut out = m.clone();
    let mut errors = Vec::new();
    for (site, g) in c.ops(c.side, adjoint) {
        let (next, err) = apply_pair_mpo(&out, site, &g, c.side, policy)?;
        out = next;
        errors.push(err);
    }
    Ok((out, rss(&errors)))
}

/// Two-qubit CNOT with the control on the left site.
pub fn cnot() -> DenseTensor {
    let one = C64::new(1.0, 0.0);
    let mut g = DenseTensor::zeros(&[4, 4]);
    g.set(&[0, 0], one);
    g.set(&[1, 1], one);
    g.set(&[2, 3], one);
    g.set(&[3, 2], one);
    g
}
