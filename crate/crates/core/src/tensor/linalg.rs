//! Factorizations on rank-2 [`DenseTensor`]s: truncated SVD with a fixed
//! phase convention, QR/LQ, nearest-unitary projection and Haar sampling.
//!
//! The raw decompositions come from LAPACK; everything that downstream
//! code relies on (ordering, phase gauge, truncation accounting) is applied
//! here.

use ndarray::s;
use ndarray_linalg::{JobSvd, QR, SVD, SVDDC};
use rand::Rng;

use super::{DenseTensor, C64};
use crate::error::{Error, Result};

/// Relative cutoff used by [`TruncationPolicy::unbounded`]: singular values at
/// or below `1e-13 · s_1` are treated as numerical zeros.
pub const DEFAULT_REL_CUTOFF: f64 = 1e-13;

const PHASE_TIE_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TruncationPolicy {
    /// `None` means unbounded.
    pub chi_max: Option<usize>,
    pub rel_cutoff: f64,
}

impl TruncationPolicy {
    /// No bond cap; only numerical zeros are dropped.
    pub fn unbounded() -> Self {
        Self {
            chi_max: None,
            rel_cutoff: DEFAULT_REL_CUTOFF,
        }
    }

    /// Keeps every singular value, zeros included.
    pub fn exact() -> Self {
        Self {
            chi_max: None,
            rel_cutoff: 0.0,
        }
    }

    pub fn with_chi(chi: usize) -> Self {
        Self {
            chi_max: Some(chi),
            rel_cutoff: DEFAULT_REL_CUTOFF,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi_max == Some(0) {
            return Err(Error::InvalidConfig("chi_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rel_cutoff) {
            return Err(Error::InvalidConfig(format!(
                "rel_cutoff must lie in [0, 1), got {}",
                self.rel_cutoff
            )));
        }
        Ok(())
    }

    /// Number of singular values kept out of the non-increasing `s`.
    pub fn kept_rank(&self, s: &[f64]) -> usize {
        if s.is_empty() {
            return 0;
        }
        let s1 = s[0];
        if s1 <= 0.0 {
            return 1;
        }
        let above = s.iter().take_while(|&&x| x / s1 > self.rel_cutoff).count().max(1);
        match self.chi_max {
            Some(chi) => above.min(chi),
            None => above,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// `m × r` isometry (orthonormal columns).
    pub left_factor: DenseTensor,
    pub singular_values: Vec<f64>,
    /// `r × n` co-isometry (orthonormal rows).
    pub right_factor: DenseTensor,
    /// `sqrt(Σ_discarded s² / Σ_all s²)`.
    pub trunc_error: f64,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `left · diag(s) · right`.
    pub fn reconstruct(&self) -> DenseTensor {
        let mut us = self.left_factor.clone();
        let r = self.rank();
        for row in us.data_mut().chunks_mut(r) {
            for (z, &s) in row.iter_mut().zip(&self.singular_values) {
                *z *= s;
            }
        }
        us.matmul(&self.right_factor).expect("consistent factor shapes")
    }

    /// `diag(s) · right`, the factor absorbed into the next site in a
    /// left-to-right sweep.
    pub fn s_times_right(&self) -> DenseTensor {
        let mut sv = self.right_factor.clone();
        let n = sv.dims()[1];
        for (row, &s) in sv.data_mut().chunks_mut(n).zip(&self.singular_values) {
            row.iter_mut().for_each(|z| *z *= s);
        }
        sv
    }

    /// `left · diag(s)`.
    pub fn left_times_s(&self) -> DenseTensor {
        let mut us = self.left_factor.clone();
        let r = self.rank();
        for row in us.data_mut().chunks_mut(r) {
            for (z, &s) in row.iter_mut().zip(&self.singular_values) {
                *z *= s;
            }
        }
        us
    }
}

/// Full thin SVD `(U, s, V†)` with singular values non-increasing and the
/// phase convention applied: in every left singular vector the entry of
/// largest magnitude (lowest index on ties) is real and positive.
pub fn svd_full(matrix: &DenseTensor) -> Result<(DenseTensor, Vec<f64>, DenseTensor)> {
    matrix.ensure_matrix("svd")?;
    matrix.ensure_finite("svd input")?;
    let (m, n) = (matrix.dims()[0], matrix.dims()[1]);
    let a = matrix.as_array().to_owned();
    let (u, s, vt) = match a.svddc(JobSvd::Some) {
        Ok((Some(u), s, Some(vt))) => (u, s, vt),
        _ => {
            // Divide-and-conquer occasionally fails to converge; fall back
            // to the QR-iteration driver before giving up.
            let (u, s, vt) = a.svd(true, true).map_err(|_| Error::SvdFailed { rows: m, cols: n })?;
            let (u, vt) = u.zip(vt).ok_or(Error::SvdFailed { rows: m, cols: n })?;
            let r = s.len();
            (u.slice(s![.., ..r]).to_owned(), s, vt.slice(s![..r, ..]).to_owned())
        }
    };
    let r = s.len();
    let s: Vec<f64> = s.to_vec();
    if s.iter().any(|x| !x.is_finite()) {
        return Err(Error::SvdFailed { rows: m, cols: n });
    }
    let mut left = DenseTensor::from_array(u);
    let mut right = DenseTensor::from_array(vt);
    for j in 0..r {
        let mut best = 0usize;
        let mut best_mag = -1.0f64;
        for i in 0..m {
            let mag = left.at(i, j).norm();
            if mag > best_mag * (1.0 + PHASE_TIE_TOL) + f64::MIN_POSITIVE {
                best = i;
                best_mag = mag;
            }
        }
        let pivot = left.at(best, j);
        if pivot.norm() == 0.0 {
            continue;
        }
        let phase = pivot / pivot.norm();
        let inv = phase.conj();
        {
            let data = left.data_mut();
            for i in 0..m {
                data[i * r + j] *= inv;
            }
            data[best * r + j] = C64::new(data[best * r + j].norm(), 0.0);
        }
        let data = right.data_mut();
        for z in &mut data[j * n..(j + 1) * n] {
            *z *= phase;
        }
    }
    Ok((left, s, right))
}

/// SVD truncated according to `policy`.
pub fn svd_truncate(matrix: &DenseTensor, policy: &TruncationPolicy) -> Result<SvdResult> {
    policy.validate()?;
    let (u, s, vt) = svd_full(matrix)?;
    let (m, n) = (matrix.dims()[0], matrix.dims()[1]);
    let r = s.len();
    let keep = policy.kept_rank(&s);
    let total: f64 = s.iter().map(|x| x * x).sum();
    let dropped: f64 = s[keep..].iter().map(|x| x * x).sum();
    let trunc_error = if total > 0.0 { (dropped / total).sqrt() } else { 0.0 };

    let left = if keep == r {
        u
    } else {
        DenseTensor::from_fn(&[m, keep], |idx| u.at(idx[0], idx[1]))
    };
    let right = if keep == r {
        vt
    } else {
        DenseTensor::new(vec![keep, n], vt.data()[..keep * n].to_vec())?
    };
    Ok(SvdResult {
        left_factor: left,
        singular_values: s[..keep].to_vec(),
        right_factor: right,
        trunc_error,
    })
}

/// Nearest unitary in Frobenius norm, `X·Y†` for `A = X·Σ·Y†`.
pub fn polar_project(matrix: &DenseTensor) -> Result<DenseTensor> {
    matrix.ensure_matrix("polar_project")?;
    if matrix.dims()[0] != matrix.dims()[1] {
        return Err(Error::DimensionMismatch(format!(
            "polar_project needs a square matrix, got {:?}",
            matrix.dims()
        )));
    }
    let (u, s, vt) = svd_full(matrix)?;
    let smin = s.last().copied().unwrap_or(0.0);
    if smin <= 1e-12 {
        return Err(Error::RankDeficient(smin));
    }
    u.matmul(&vt)
}

/// Thin QR: `A = Q·R` with `Q` of orthonormal columns, `min(m, n)` of them,
/// and the diagonal of `R` real and non-negative. With that gauge an input
/// that already has orthonormal columns comes back unchanged.
pub fn qr_thin(matrix: &DenseTensor) -> Result<(DenseTensor, DenseTensor)> {
    matrix.ensure_matrix("qr")?;
    matrix.ensure_finite("qr input")?;
    let (m, n) = (matrix.dims()[0], matrix.dims()[1]);
    let k = m.min(n);
    let (q, r) = matrix
        .as_array()
        .qr()
        .map_err(|e| Error::FactorizationFailed(format!("QR ({e})")))?;
    let mut q = q.slice(s![.., ..k]).to_owned();
    let mut r = r.slice(s![..k, ..]).to_owned();
    for j in 0..k {
        let d = r[(j, j)];
        if d.norm() == 0.0 {
            continue;
        }
        let phase = d / d.norm();
        q.column_mut(j).mapv_inplace(|z| z * phase);
        let inv = phase.conj();
        r.row_mut(j).mapv_inplace(|z| z * inv);
        r[(j, j)] = C64::new(r[(j, j)].re, 0.0);
    }
    Ok((DenseTensor::from_array(q), DenseTensor::from_array(r)))
}

/// Thin LQ: `A = L·Q` with `Q` of orthonormal rows.
pub fn lq_thin(matrix: &DenseTensor) -> Result<(DenseTensor, DenseTensor)> {
    let (q, r) = qr_thin(&matrix.adjoint())?;
    Ok((r.adjoint(), q.adjoint()))
}

/// Haar-random `n × n` unitary: QR of a complex Gaussian matrix with the
/// phases of `R`'s diagonal moved into `Q`.
pub fn haar_unitary<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DenseTensor {
    let g = DenseTensor::random(&[n, n], rng);
    qr_thin(&g).expect("finite Gaussian matrix").0
}
