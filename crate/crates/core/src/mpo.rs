//! Matrix product operators.
//!
//! An [`Mpo`] is a chain of rank-4 cores with leg order
//! `(left_bond, phys_out, phys_in, right_bond)`. Row index `r` of the
//! represented matrix factorizes over the per-site output dims (site 0 most
//! significant) and column index `c` over the input dims.
//!
//! ```text
//!        o_0       o_1             o_{k-1}
//!         |         |                 |
//!   1 -- C_0 ----- C_1 -- ... -- C_{k-1} -- 1
//!         |         |                 |
//!        i_0       i_1             i_{k-1}
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::tensor::{contract, lq_thin, qr_thin, reshape_split, svd_truncate, DenseTensor, TruncationPolicy, C64, ONE};

/// Default element-count ceiling for any densified operator or state.
pub const DEFAULT_DENSE_GUARD: u128 = 1 << 26;

/// Environment variable that overrides [`DEFAULT_DENSE_GUARD`].
pub const DENSE_GUARD_ENV: &str = "QLLM_DENSE_GUARD";

/// Current dense-size guard, honouring `QLLM_DENSE_GUARD` when it parses.
pub fn dense_guard() -> u128 {
    std::env::var(DENSE_GUARD_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<u128>().ok())
        .unwrap_or(DEFAULT_DENSE_GUARD)
}

pub(crate) fn check_guard(requested: u128, guard: u128) -> Result<()> {
    if requested > guard {
        Err(Error::GuardExceeded { requested, guard })
    } else {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub out_dims: Vec<usize>,
    pub in_dims: Vec<usize>,
}

impl SiteSpec {
    pub fn new(out_dims: Vec<usize>, in_dims: Vec<usize>) -> Result<Self> {
        let spec = Self { out_dims, in_dims };
        spec.validate()?;
        Ok(spec)
    }

    /// `k` sites of dimension `d` on both sides.
    pub fn uniform(k: usize, d: usize) -> Self {
        Self {
            out_dims: vec![d; k],
            in_dims: vec![d; k],
        }
    }

    /// Site grouping for a `rows × cols` matrix when both are powers of
    /// `site_dim`. The shorter side is padded with trailing dimension-1 sites.
    pub fn for_shape(rows: usize, cols: usize, site_dim: usize) -> Result<Self> {
        if site_dim < 2 {
            return Err(Error::InvalidConfig("site dimension must be at least 2".into()));
        }
        let a = exact_log(rows, site_dim)
            .ok_or_else(|| mismatch(format!("{rows} rows is not a power of site dimension {site_dim}")))?;
        let b = exact_log(cols, site_dim)
            .ok_or_else(|| mismatch(format!("{cols} columns is not a power of site dimension {site_dim}")))?;
        let k = a.max(b).max(1);
        let mut out_dims = vec![site_dim; a];
        out_dims.resize(k, 1);
        let mut in_dims = vec![site_dim; b];
        in_dims.resize(k, 1);
        Self::new(out_dims, in_dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dims.is_empty() || self.out_dims.len() != self.in_dims.len() {
            return Err(mismatch(format!(
                "site spec needs equal, non-zero numbers of output and input dims, got {} and {}",
                self.out_dims.len(),
                self.in_dims.len()
            )));
        }
        if self.out_dims.iter().chain(&self.in_dims).any(|&d| d == 0) {
            return Err(mismatch("site dims must be positive"));
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.out_dims.len()
    }

    pub fn rows(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn cols(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn dense_len(&self) -> u128 {
        self.rows() as u128 * self.cols() as u128
    }

    /// `o_i · i_i` for every site.
    pub fn local_dims(&self) -> Vec<usize> {
        self.out_dims.iter().zip(&self.in_dims).map(|(o, i)| o * i).collect()
    }

    /// Largest bond dimension each internal bond can carry without redundancy.
    pub fn max_bond_dims(&self) -> Vec<usize> {
        let local = self.local_dims();
        let k = local.len();
        (0..k.saturating_sub(1))
            .map(|b| {
                let left = local[..=b].iter().fold(1u128, |acc, &d| acc.saturating_mul(d as u128));
                let right = local[b + 1..]
                    .iter()
                    .fold(1u128, |acc, &d| acc.saturating_mul(d as u128));
                left.min(right).min(usize::MAX as u128) as usize
            })
            .collect()
    }

    pub fn dims_for(&self, side: crate::circuit::Side) -> &[usize] {
        match side {
            crate::circuit::Side::Output => &self.out_dims,
            crate::circuit::Side::Input => &self.in_dims,
        }
    }
}

fn exact_log(n: usize, base: usize) -> Option<usize> {
    let mut k = 0;
    let mut v = 1usize;
    while v < n {
        v = v.checked_mul(base)?;
        k += 1;
    }
    (v == n).then_some(k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mpo {
    cores: Vec<DenseTensor>,
    spec: SiteSpec,
    center: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub bond_index: usize,
    pub singular_values: Vec<f64>,
    pub entropy_s1: f64,
    pub entropy_s2: f64,
    pub norm: f64,
}

impl SpectrumReport {
    pub fn from_singular_values(bond_index: usize, singular_values: Vec<f64>) -> Self {
        let total: f64 = singular_values.iter().map(|s| s * s).sum();
        let (mut s1, mut purity) = (0.0, 0.0);
        if total > 0.0 {
            for s in &singular_values {
                let p = s * s / total;
                if p > 0.0 {
                    s1 -= p * p.ln();
                }
                purity += p * p;
            }
        }
        let s2 = if purity > 0.0 { -purity.ln() } else { 0.0 };
        Self {
            bond_index,
            singular_values,
            entropy_s1: s1.max(0.0),
            entropy_s2: s2.max(0.0),
            norm: total.sqrt(),
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        self.singular_values.iter().map(|s| s * s / total).collect()
    }
}

impl Mpo {
    /// Builds an MPO after checking leg shapes against `spec`. No canonical
    /// center is assumed.
    pub fn new(cores: Vec<DenseTensor>, spec: SiteSpec) -> Result<Self> {
        spec.validate()?;
        if cores.len() != spec.num_sites() {
            return Err(mismatch(format!(
                "{} cores for {} sites",
                cores.len(),
                spec.num_sites()
            )));
        }
        for (i, c) in cores.iter().enumerate() {
            if c.rank() != 4 {
                return Err(mismatch(format!("core {i} has rank {}", c.rank())));
            }
            let d = c.dims();
            if d[1] != spec.out_dims[i] || d[2] != spec.in_dims[i] {
                return Err(mismatch(format!(
                    "core {i} physical dims ({}, {}) differ from spec ({}, {})",
                    d[1], d[2], spec.out_dims[i], spec.in_dims[i]
                )));
            }
            if i == 0 && d[0] != 1 {
                return Err(mismatch("left boundary bond must have dim 1"));
            }
            if i + 1 == cores.len() && d[3] != 1 {
                return Err(mismatch("right boundary bond must have dim 1"));
            }
            if i + 1 < cores.len() && d[3] != cores[i + 1].dims()[0] {
                return Err(mismatch(format!(
                    "bond {i}: right dim {} vs next left dim {}",
                    d[3],
                    cores[i + 1].dims()[0]
                )));
            }
        }
        Ok(Self {
            cores,
            spec,
            center: None,
        })
    }

    /// Identity operator; requires matching output and input dims per site.
    pub fn identity(spec: &SiteSpec) -> Result<Self> {
        spec.validate()?;
        if spec.out_dims != spec.in_dims {
            return Err(mismatch("identity MPO needs out_dims == in_dims"));
        }
        let cores = spec
            .out_dims
            .iter()
            .map(|&d| {
                DenseTensor::from_fn(
                    &[1, d, d, 1],
                    |idx| if idx[1] == idx[2] { ONE } else { C64::new(0.0, 0.0) },
                )
            })
            .collect();
        Ok(Self {
            cores,
            spec: spec.clone(),
            center: Some(0),
        })
    }

    /// Random Gaussian cores with bond dims `min(chi, max_bond)`.
    pub fn random<R: Rng + ?Sized>(spec: &SiteSpec, chi: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let maxb = spec.max_bond_dims();
        let k = spec.num_sites();
        let bond = |b: isize| -> usize {
            if b < 0 || b as usize >= k - 1 {
                1
            } else {
                chi.max(1).min(maxb[b as usize])
            }
        };
        let cores = (0..k)
            .map(|i| {
                let l = bond(i as isize - 1);
                let r = bond(i as isize);
                DenseTensor::random(&[l, spec.out_dims[i], spec.in_dims[i], r], rng)
            })
            .collect();
        Ok(Self {
            cores,
            spec: spec.clone(),
            center: None,
        })
    }

    pub fn spec(&self) -> &SiteSpec {
        &self.spec
    }

    pub fn cores(&self) -> &[DenseTensor] {
        &self.cores
    }

    pub fn core(&self, i: usize) -> &DenseTensor {
        &self.cores[i]
    }

    /// Replaces one core; the canonical center is dropped.
    pub fn set_core(&mut self, i: usize, core: DenseTensor) -> Result<()> {
        let old = self.cores[i].dims();
        if core.dims() != old {
            return Err(mismatch(format!("core {i}: new dims {:?} vs {:?}", core.dims(), old)));
        }
        self.cores[i] = core;
        self.center = None;
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.cores.len()
    }

    pub fn center(&self) -> Option<usize> {
        self.center
    }

    /// Internal bond dims, length `k − 1`.
    pub fn bond_dims(&self) -> Vec<usize> {
        self.cores[..self.cores.len() - 1].iter().map(|c| c.dims()[3]).collect()
    }

    pub fn max_bond(&self) -> usize {
        self.bond_dims().into_iter().max().unwrap_or(1)
    }

    /// Number of stored real scalars (two per complex entry).
    pub fn param_count(&self) -> usize {
        2 * self.cores.iter().map(|c| c.len()).sum::<usize>()
    }

    pub fn norm(&self) -> f64 {
        mpo_overlap(self, self).map(|z| z.re.max(0.0).sqrt()).unwrap_or(0.0)
    }

    /// Multiplies the operator by `factor` (applied to the center core, or
    /// core 0 when there is none).
    pub fn scaled(&self, factor: C64) -> Self {
        let mut out = self.clone();
        let i = self.center.unwrap_or(0);
        out.cores[i].scale_mut(factor);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.cores.iter().all(|c| c.is_finite())
    }

    /// Residuals of the isometry conditions around `center`:
    /// `max ‖A†A − I‖_F` over left cores and `max ‖BB† − I‖_F` over right cores.
    pub fn isometry_residual(&self, center: usize) -> f64 {
        let mut worst = 0.0f64;
        for (i, c) in self.cores.iter().enumerate() {
            let d = c.dims();
            if i < center {
                let m = c.reshape(&[d[0] * d[1] * d[2], d[3]]).expect("same size");
                let g = m.adjoint().matmul(&m).expect("square");
                worst = worst.max(g.sub(&DenseTensor::identity(d[3])).expect("same").norm());
            } else if i > center {
                let m = c.reshape(&[d[0], d[1] * d[2] * d[3]]).expect("same size");
                let g = m.matmul(&m.adjoint()).expect("square");
                worst = worst.max(g.sub(&DenseTensor::identity(d[0])).expect("same").norm());
            }
        }
        worst
    }

    fn left_orthogonalize(&mut self, i: usize) -> Result<()> {
        let d = self.cores[i].dims().to_vec();
        let m = self.cores[i].reshape(&[d[0] * d[1] * d[2], d[3]])?;
        let (q, r) = qr_thin(&m)?;
        let nb = q.dims()[1];
        self.cores[i] = q.into_reshape(&[d[0], d[1], d[2], nb])?;
        self.cores[i + 1] = contract(&r, &[1], &self.cores[i + 1], &[0])?;
        Ok(())
    }

    fn right_orthogonalize(&mut self, i: usize) -> Result<()> {
        let d = self.cores[i].dims().to_vec();
        let m = self.cores[i].reshape(&[d[0], d[1] * d[2] * d[3]])?;
        let (l, q) = lq_thin(&m)?;
        let nb = q.dims()[0];
        self.cores[i] = q.into_reshape(&[nb, d[1], d[2], d[3]])?;
        self.cores[i - 1] = contract(&self.cores[i - 1], &[3], &l, &[0])?;
        Ok(())
    }

    /// In-place version of [`canonicalize`].
    pub fn canonicalize_mut(&mut self, center: usize) -> Result<()> {
        let k = self.num_sites();
        if center >= k {
            return Err(Error::OutOfRange(format!("center {center} for {k} sites")));
        }
        match self.center {
            Some(c) if c == center => {}
            Some(c) if c < center => {
                for i in c..center {
                    self.left_orthogonalize(i)?;
                }
            }
            Some(c) => {
                for i in (center + 1..=c).rev() {
                    self.right_orthogonalize(i)?;
                }
            }
            None => {
                for i in 0..center {
                    self.left_orthogonalize(i)?;
                }
                for i in (center + 1..k).rev() {
                    self.right_orthogonalize(i)?;
                }
            }
        }
        self.center = Some(center);
        Ok(())
    }

    /// Contracts an MPO into a batch of column vectors `x` (`cols × n`)
    /// without forming the dense operator.
    pub fn apply_to_columns(&self, x: &DenseTensor) -> Result<DenseTensor> {
        x.ensure_matrix("apply_to_columns")?;
        let cols = self.spec.cols();
        if x.dims()[0] != cols {
            return Err(mismatch(format!(
                "batch has {} rows but the operator has {} columns",
                x.dims()[0],
                cols
            )));
        }
        let n = x.dims()[1];
        // state layout: (done_out, bond, remaining_in, n)
        let mut state = x.reshape(&[1, 1, cols, n])?;
        let mut done = 1usize;
        let mut remaining = cols;
        for (i, core) in self.cores.iter().enumerate() {
            let d = core.dims();
            let di = self.spec.in_dims[i];
            remaining /= di;
            let t = state.into_reshape(&[done, d[0], di, remaining * n])?;
            // (done, rest) x (o, r)
            let c = contract(&t, &[1, 2], core, &[0, 2])?;
            // c dims: (done, remaining*n, o, r) -> (done, o, r, remaining*n)
            let p = c.permute(&[0, 2, 3, 1]);
            done *= d[1];
            state = p.into_reshape(&[done, d[3], remaining, n])?;
        }
        state.into_reshape(&[done, n])
    }

    /// Zero-pads every internal bond up to `min(chi, max_bond)`; bonds already
    /// larger are left alone. The represented operator is unchanged.
    pub fn pad_bonds(&self, chi: usize) -> Self {
        let maxb = self.spec.max_bond_dims();
        let target: Vec<usize> = self
            .bond_dims()
            .iter()
            .zip(&maxb)
            .map(|(&b, &m)| b.max(chi.min(m)))
            .collect();
        let k = self.num_sites();
        let cores = self
            .cores
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let d = c.dims();
                let l = if i == 0 { 1 } else { target[i - 1] };
                let r = if i + 1 == k { 1 } else { target[i] };
                if l == d[0] && r == d[3] {
                    return c.clone();
                }
                DenseTensor::from_fn(&[l, d[1], d[2], r], |idx| {
                    if idx[0] < d[0] && idx[3] < d[3] {
                        c.get(idx)
                    } else {
                        C64::new(0.0, 0.0)
                    }
                })
            })
            .collect();
        let unchanged = target == self.bond_dims();
        Self {
            cores,
            spec: self.spec.clone(),
            center: if unchanged { self.center } else { None },
        }
    }

    /// The adjoint operator `M†`: cores conjugated with out and in legs swapped.
    pub fn adjoint(&self) -> Self {
        let cores = self.cores.iter().map(|c| c.permute(&[0, 2, 1, 3]).conj()).collect();
        let spec = SiteSpec {
            out_dims: self.spec.in_dims.clone(),
            in_dims: self.spec.out_dims.clone(),
        };
        Self {
            cores,
            spec,
            center: self.center,
        }
    }

    pub(crate) fn cores_mut(&mut self) -> &mut Vec<DenseTensor> {
        self.center = None;
        &mut self.cores
    }

    pub(crate) fn set_center(&mut self, center: Option<usize>) {
        self.center = center;
    }
}

/// Sequential left-to-right SVD decomposition of `w` into an MPO with site
/// `i` carrying `(out_i, in_i)`. Returns the MPO in right-canonical form
/// (center 0) and the root-sum-square of the per-bond truncation errors.
pub fn mpo_from_matrix(w: &DenseTensor, spec: &SiteSpec, policy: &TruncationPolicy) -> Result<(Mpo, f64)> {
    spec.validate()?;
    policy.validate()?;
    w.ensure_finite("mpo_from_matrix input")?;
    let k = spec.num_sites();
    let split = reshape_split(w, &spec.out_dims, &spec.in_dims)?;
    let perm: Vec<usize> = (0..k).flat_map(|i| [i, k + i]).collect();
    let interleaved = split.permute(&perm);

    let mut cores = Vec::with_capacity(k);
    let mut errors = Vec::with_capacity(k.saturating_sub(1));
    let mut remainder = interleaved;
    let mut left = 1usize;
    let mut rest: usize = spec.local_dims().iter().product();
    for i in 0..k - 1 {
        let (o, n) = (spec.out_dims[i], spec.in_dims[i]);
        rest /= o * n;
        let mat = remainder.into_reshape(&[left * o * n, rest])?;
        let svd = svd_truncate(&mat, policy)?;
        errors.push(svd.trunc_error);
        let chi = svd.rank();
        cores.push(svd.left_factor.clone().into_reshape(&[left, o, n, chi])?);
        remainder = svd.s_times_right();
        left = chi;
    }
    cores.push(remainder.into_reshape(&[left, spec.out_dims[k - 1], spec.in_dims[k - 1], 1])?);
    let mut mpo = Mpo {
        cores,
        spec: spec.clone(),
        center: Some(k - 1),
    };
    mpo.canonicalize_mut(0)?;
    Ok((mpo, rss(&errors)))
}

pub(crate) fn rss(errors: &[f64]) -> f64 {
    errors.iter().map(|e| e * e).sum::<f64>().sqrt()
}

/// Dense matrix of an MPO, subject to the environment-configured guard.
pub fn mpo_to_matrix(m: &Mpo) -> Result<DenseTensor> {
    mpo_to_matrix_guarded(m, dense_guard())
}

pub fn mpo_to_matrix_guarded(m: &Mpo, guard: u128) -> Result<DenseTensor> {
    check_guard(m.spec.dense_len(), guard)?;
    let k = m.num_sites();
    let mut acc = m.cores[0].clone();
    for core in &m.cores[1..] {
        let last = acc.rank() - 1;
        acc = contract(&acc, &[last], core, &[0])?;
    }
    // dims: [1, o0, i0, o1, i1, ..., 1]
    let phys: Vec<usize> = acc.dims()[1..acc.rank() - 1].to_vec();
    let t = acc.into_reshape(&phys)?;
    let perm: Vec<usize> = (0..k).map(|i| 2 * i).chain((0..k).map(|i| 2 * i + 1)).collect();
    t.permute(&perm).into_reshape(&[m.spec.rows(), m.spec.cols()])
}

/// Moves the orthogonality center to `center` without changing the operator.
pub fn canonicalize(m: &Mpo, center: usize) -> Result<Mpo> {
    let mut out = m.clone();
    out.canonicalize_mut(center)?;
    Ok(out)
}

/// Right-to-left SVD truncation sweep in canonical form. Returns the
/// truncated MPO (center 0) and the root-sum-square of per-bond relative
/// errors.
pub fn truncate_mpo(m: &Mpo, policy: &TruncationPolicy) -> Result<(Mpo, f64)> {
    policy.validate()?;
    let k = m.num_sites();
    let mut out = m.clone();
    out.canonicalize_mut(k - 1)?;
    let mut errors = Vec::with_capacity(k.saturating_sub(1));
    for i in (1..k).rev() {
        let d = out.cores[i].dims().to_vec();
        let mat = out.cores[i].reshape(&[d[0], d[1] * d[2] * d[3]])?;
        let svd = svd_truncate(&mat, policy)?;
        errors.push(svd.trunc_error);
        let chi = svd.rank();
        out.cores[i] = svd.right_factor.clone().into_reshape(&[chi, d[1], d[2], d[3]])?;
        let us = svd.left_times_s();
        out.cores[i - 1] = contract(&out.cores[i - 1], &[3], &us, &[0])?;
    }
    out.center = Some(0);
    Ok((out, rss(&errors)))
}

/// Schmidt spectrum of the vectorized operator across `bond` (between sites
/// `bond` and `bond + 1`).
pub fn operator_entanglement(m: &Mpo, bond: usize) -> Result<SpectrumReport> {
    let k = m.num_sites();
    if k < 2 || bond >= k - 1 {
        return Err(Error::OutOfRange(format!("bond {bond} for {k} sites")));
    }
    let c = canonicalize(m, bond)?;
    let d = c.cores[bond].dims().to_vec();
    let mat = c.cores[bond].reshape(&[d[0] * d[1] * d[2], d[3]])?;
    let svd = svd_truncate(&mat, &TruncationPolicy::exact())?;
    Ok(SpectrumReport::from_singular_values(bond, svd.singular_values))
}

/// Spectra of every internal bond.
pub fn all_bond_spectra(m: &Mpo) -> Result<Vec<SpectrumReport>> {
    (0..m.num_sites().saturating_sub(1))
        .map(|b| operator_entanglement(m, b))
        .collect()
}

/// Von Neumann entropies of every internal bond.
pub fn bond_entropies(m: &Mpo) -> Result<Vec<f64>> {
    Ok(all_bond_spectra(m)?.into_iter().map(|s| s.entropy_s1).collect())
}

/// `tr(A†B)` by transfer-matrix contraction.
pub fn mpo_overlap(a: &Mpo, b: &Mpo) -> Result<C64> {
    if a.spec != b.spec {
        return Err(mismatch("overlap of MPOs with different site specs"));
    }
    let mut env = DenseTensor::identity(1);
    for i in 0..a.num_sites() {
        env = transfer(&env, b.core(i), a.core(i))?;
    }
    Ok(env.data()[0])
}

/// One step of the `(P, conj Q)` transfer: `E'[p', q'] = Σ E[p, q] P[p,o,i,p'] conj(Q[q,o,i,q'])`.
pub(crate) fn transfer(env: &DenseTensor, p: &DenseTensor, q: &DenseTensor) -> Result<DenseTensor> {
    let t = contract(env, &[0], p, &[0])?; // (q, o, i, p')
    contract(&t, &[0, 1, 2], &q.conj(), &[0, 1, 2]) // (p', q')
}

/// Left and right transfer environments of the pair `(P, conj Q)`.
///
/// `left[j]` covers sites `< j` and `right[j]` covers sites `>= j`, so
/// `left[0]` and `right[k]` are `[[1]]`.
pub(crate) struct Environments {
    pub left: Vec<DenseTensor>,
    pub right: Vec<DenseTensor>,
}

impl Environments {
    pub fn new(p: &Mpo, q: &Mpo) -> Result<Self> {
        if p.spec != q.spec {
            return Err(mismatch("environments of MPOs with different site specs"));
        }
        let k = p.num_sites();
        let mut left = Vec::with_capacity(k + 1);
        left.push(DenseTensor::identity(1));
        for i in 0..k {
            let next = transfer(&left[i], p.core(i), q.core(i))?;
            left.push(next);
        }
        let mut right = vec![DenseTensor::identity(1); k + 1];
        for i in (0..k).rev() {
            // R[p, q] = Σ P[p,o,i,p'] conj(Q[q,o,i,q']) R'[p', q']
            let t = contract(p.core(i), &[3], &right[i + 1], &[0])?; // (p, o, i, q')
            right[i] = contract(&t, &[1, 2, 3], &q.core(i).conj(), &[1, 2, 3])?;
            // (p, q)
        }
        Ok(Self { left, right })
    }
}

/// `Σ_{all but site i of Q} P · conj(Q)`, shaped like `Q`'s core `i`.
///
/// For `Q` in mixed-canonical form centred at `i` this is the core that
/// maximizes `Re tr(Q†P)` at fixed norm; it is also the gradient of
/// `Re tr(Q†P)` with respect to `Q`'s core `i` under the `∂/∂Re + i∂/∂Im`
/// convention.
pub fn core_environment(p: &Mpo, q: &Mpo, site: usize) -> Result<DenseTensor> {
    let env = Environments::new(p, q)?;
    core_environment_with(&env, p, site)
}

pub(crate) fn core_environment_with(env: &Environments, p: &Mpo, site: usize) -> Result<DenseTensor> {
    let t = contract(&env.left[site], &[0], p.core(site), &[0])?; // (q, o, i, p')
    contract(&t, &[3], &env.right[site + 1], &[0]) // (q, o, i, q')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn kron_all(ms: &[DenseTensor]) -> DenseTensor {
        ms[1..].iter().fold(ms[0].clone(), |acc, m| acc.kron(m))
    }

    #[test]
    fn identity_decomposes_with_unit_bonds() {
        for k in 1..=6 {
            let n = 1 << k;
            let spec = SiteSpec::uniform(k, 2);
            let (m, err) = mpo_from_matrix(&DenseTensor::identity(n), &spec, &TruncationPolicy::unbounded()).unwrap();
            assert!(m.bond_dims().iter().all(|&b| b == 1), "k={k}: {:?}", m.bond_dims());
            assert!(err < 1e-12);
            let back = mpo_to_matrix(&m).unwrap();
            assert!(back.max_abs_diff(&DenseTensor::identity(n)) <= 1e-12);
        }
    }

    #[test]
    fn kronecker_product_has_bond_one() {
        let mut rng = seeded_rng(21);
        let a = DenseTensor::random(&[2, 2], &mut rng);
        let b = DenseTensor::random(&[2, 2], &mut rng);
        let w = a.kron(&b);
        let (m, _) = mpo_from_matrix(&w, &SiteSpec::uniform(2, 2), &TruncationPolicy::unbounded()).unwrap();
        assert_eq!(m.bond_dims(), vec![1]);
        assert!(mpo_to_matrix(&m).unwrap().rel_diff(&w) <= 1e-12);
    }

    #[test]
    fn random_matrix_round_trips_with_full_profile() {
        let mut rng = seeded_rng(22);
        let w = DenseTensor::random(&[16, 16], &mut rng);
        let (m, err) = mpo_from_matrix(&w, &SiteSpec::uniform(4, 2), &TruncationPolicy::unbounded()).unwrap();
        assert_eq!(m.bond_dims(), vec![4, 16, 4]);
        assert!(err < 1e-12);
        assert_eq!(m.center(), Some(0));
        assert!(m.isometry_residual(0) < 1e-10);
        assert!(mpo_to_matrix(&m).unwrap().rel_diff(&w) <= 1e-10);

        let w32 = DenseTensor::random(&[32, 32], &mut rng);
        let (m32, _) = mpo_from_matrix(&w32, &SiteSpec::uniform(5, 2), &TruncationPolicy::unbounded()).unwrap();
        assert!(mpo_to_matrix(&m32).unwrap().rel_diff(&w32) <= 1e-10);
    }

    #[test]
    fn rectangular_and_mixed_site_dims() {
        let mut rng = seeded_rng(23);
        let w = DenseTensor::random(&[8, 32], &mut rng);
        let spec = SiteSpec::for_shape(8, 32, 2).unwrap();
        assert_eq!(spec.out_dims, vec![2, 2, 2, 1, 1]);
        let (m, _) = mpo_from_matrix(&w, &spec, &TruncationPolicy::unbounded()).unwrap();
        assert!(mpo_to_matrix(&m).unwrap().rel_diff(&w) <= 1e-10);

        let spec3 = SiteSpec::new(vec![3, 2], vec![2, 3]).unwrap();
        let w3 = DenseTensor::random(&[6, 6], &mut rng);
        let (m3, _) = mpo_from_matrix(&w3, &spec3, &TruncationPolicy::unbounded()).unwrap();
        assert!(mpo_to_matrix(&m3).unwrap().rel_diff(&w3) <= 1e-10);
        assert!(SiteSpec::for_shape(12, 8, 2).is_err());
    }

    #[test]
    fn spec_mismatch_is_an_error() {
        let w = DenseTensor::identity(8);
        assert!(mpo_from_matrix(&w, &SiteSpec::uniform(2, 2), &TruncationPolicy::unbounded()).is_err());
    }

    #[test]
    fn guard_is_enforced() {
        let spec = SiteSpec::uniform(14, 2);
        let m = Mpo::identity(&spec).unwrap();
        assert!(matches!(
            mpo_to_matrix_guarded(&m, 1 << 26),
            Err(Error::GuardExceeded { .. })
        ));
    }

    #[test]
    fn canonicalize_preserves_operator() {
        let mut rng = seeded_rng(24);
        let spec = SiteSpec::uniform(4, 2);
        let m = Mpo::random(&spec, 3, &mut rng).unwrap();
        let dense = mpo_to_matrix(&m).unwrap();
        let c2 = canonicalize(&m, 2).unwrap();
        assert!(c2.isometry_residual(2) < 1e-10);
        assert!(mpo_to_matrix(&c2).unwrap().rel_diff(&dense) < 1e-10);
        let again = canonicalize(&c2, 2).unwrap();
        assert!(mpo_to_matrix(&again).unwrap().rel_diff(&dense) < 1e-10);

        let mut sweep = canonicalize(&m, 0).unwrap();
        for c in 0..4 {
            sweep = canonicalize(&sweep, c).unwrap();
            assert!(sweep.isometry_residual(c) < 1e-10);
            assert!(mpo_to_matrix(&sweep).unwrap().rel_diff(&dense) < 1e-10);
        }
        assert!(canonicalize(&m, 4).is_err());
    }

    #[test]
    fn loose_truncation_is_lossless() {
        let mut rng = seeded_rng(25);
        let w = DenseTensor::random(&[16, 16], &mut rng);
        let (m, _) = mpo_from_matrix(&w, &SiteSpec::uniform(4, 2), &TruncationPolicy::unbounded()).unwrap();
        let (t, err) = truncate_mpo(&m, &TruncationPolicy::with_chi(64)).unwrap();
        assert!(err < 1e-12);
        assert_eq!(t.bond_dims(), m.bond_dims());
        assert!(mpo_to_matrix(&t).unwrap().rel_diff(&w) < 1e-12);
    }

    #[test]
    fn truncation_bound_brackets_dense_error() {
        let mut rng = seeded_rng(26);
        let w = DenseTensor::random(&[16, 16], &mut rng);
        let (m, _) = mpo_from_matrix(&w, &SiteSpec::uniform(4, 2), &TruncationPolicy::unbounded()).unwrap();
        let (t, bound) = truncate_mpo(&m, &TruncationPolicy::with_chi(2)).unwrap();
        assert!(t.bond_dims().iter().all(|&b| b <= 2));
        let actual = mpo_to_matrix(&t).unwrap().rel_diff(&w);
        assert!(actual <= bound + 1e-10, "actual {actual} bound {bound}");
        assert!(actual >= bound / 4.0, "actual {actual} bound {bound}");
    }

    #[test]
    fn planted_low_bond_operator_is_recovered_after_inflation() {
        let mut rng = seeded_rng(27);
        let spec = SiteSpec::uniform(4, 2);
        let planted = Mpo::random(&spec, 2, &mut rng).unwrap();
        let inflated = planted.pad_bonds(8);
        assert!(inflated.max_bond() > 2);
        let (t, err) = truncate_mpo(&inflated, &TruncationPolicy::with_chi(2)).unwrap();
        assert!(err <= 1e-10);
        let d0 = mpo_to_matrix(&planted).unwrap();
        assert!(mpo_to_matrix(&t).unwrap().rel_diff(&d0) <= 1e-10);
    }

    #[test]
    fn entanglement_of_identity_and_swap() {
        let id = Mpo::identity(&SiteSpec::uniform(3, 2)).unwrap();
        let r = operator_entanglement(&id, 1).unwrap();
        assert_eq!(r.singular_values.len(), 1);
        assert!(r.entropy_s1.abs() < 1e-12);

        let mut swap = DenseTensor::zeros(&[4, 4]);
        for a in 0..2 {
            for b in 0..2 {
                swap.set(&[b * 2 + a, a * 2 + b], ONE);
            }
        }
        let (m, _) = mpo_from_matrix(&swap, &SiteSpec::uniform(2, 2), &TruncationPolicy::unbounded()).unwrap();
        let r = operator_entanglement(&m, 0).unwrap();
        let p = r.probabilities();
        assert_eq!(p.len(), 4);
        for pi in p {
            assert!((pi - 0.25).abs() < 1e-12);
        }
        assert!((r.entropy_s1 - 4f64.ln()).abs() < 1e-12);
        assert!((r.entropy_s2 - 4f64.ln()).abs() < 1e-12);
        assert!(operator_entanglement(&m, 1).is_err());
    }

    #[test]
    fn entropies_are_gauge_invariant_and_ordered() {
        let mut rng = seeded_rng(28);
        let spec = SiteSpec::uniform(4, 2);
        let m = Mpo::random(&spec, 3, &mut rng).unwrap();
        for b in 0..3 {
            let r1 = operator_entanglement(&m, b).unwrap();
            let r2 = operator_entanglement(&canonicalize(&m, 3 - b).unwrap(), b).unwrap();
            assert!((r1.entropy_s1 - r2.entropy_s1).abs() < 1e-10);
            assert!(r1.entropy_s2 <= r1.entropy_s1 + 1e-10);
            assert!(r1.entropy_s1 <= (r1.singular_values.len() as f64).ln() + 1e-10);
            let psum: f64 = r1.probabilities().iter().sum();
            assert!((psum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn overlap_matches_dense_trace() {
        let mut rng = seeded_rng(29);
        let spec = SiteSpec::uniform(3, 2);
        let a = Mpo::random(&spec, 3, &mut rng).unwrap();
        let b = Mpo::random(&spec, 3, &mut rng).unwrap();
        let da = mpo_to_matrix(&a).unwrap();
        let db = mpo_to_matrix(&b).unwrap();
        let expect = da.inner(&db);
        let got = mpo_overlap(&a, &b).unwrap();
        assert!((got - expect).norm() <= 1e-10 * expect.norm());
        let self_ov = mpo_overlap(&a, &a).unwrap();
        assert!(self_ov.im.abs() < 1e-10 * self_ov.re && self_ov.re > 0.0);
        assert!((self_ov.re - da.norm_sqr()).abs() < 1e-10 * da.norm_sqr());

        let id = Mpo::identity(&SiteSpec::uniform(5, 2)).unwrap();
        assert!((mpo_overlap(&id, &id).unwrap() - C64::new(32.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn core_environment_is_the_local_optimum() {
        let mut rng = seeded_rng(30);
        let spec = SiteSpec::uniform(3, 2);
        let target = Mpo::random(&spec, 4, &mut rng).unwrap();
        let m = canonicalize(&Mpo::random(&spec, 2, &mut rng).unwrap(), 1).unwrap();
        let env = core_environment(&target, &m, 1).unwrap();
        let mut upd = m.clone();
        upd.set_core(1, env.clone()).unwrap();
        // in mixed-canonical form the local optimum reproduces the projected overlap
        let ov = mpo_overlap(&upd, &target).unwrap();
        assert!((ov.re - env.norm_sqr()).abs() < 1e-10 * env.norm_sqr());
        assert!((upd.norm() - env.norm()).abs() < 1e-10 * env.norm());
    }

    #[test]
    fn apply_to_columns_matches_dense_product() {
        let mut rng = seeded_rng(31);
        let spec = SiteSpec::new(vec![2, 3, 2], vec![3, 2, 2]).unwrap();
        let m = Mpo::random(&spec, 3, &mut rng).unwrap();
        let x = DenseTensor::random(&[12, 5], &mut rng);
        let dense = mpo_to_matrix(&m).unwrap();
        let expect = dense.matmul(&x).unwrap();
        assert!(m.apply_to_columns(&x).unwrap().rel_diff(&expect) < 1e-12);
        let ops = [DenseTensor::identity(2), DenseTensor::identity(3)];
        assert_eq!(kron_all(&ops).dims(), &[6, 6]);
    }

    #[test]
    fn padding_keeps_operator() {
        let mut rng = seeded_rng(32);
        let spec = SiteSpec::uniform(4, 2);
        let m = Mpo::random(&spec, 2, &mut rng).unwrap();
        let p = m.pad_bonds(4);
        assert_eq!(p.bond_dims(), vec![4, 4, 4]);
        assert!(mpo_to_matrix(&p).unwrap().rel_diff(&mpo_to_matrix(&m).unwrap()) < 1e-14);
    }
}
