//! Dense complex tensors in row-major order.
//!
//! Every other module in the crate is built on [`DenseTensor`]. Leg ordering
//! conventions are global: elements are stored row-major (last index fastest)
//! and [`contract`] places the free legs of its first operand before the free
//! legs of its second operand, each in their original order.

mod linalg;

pub use linalg::{
    haar_unitary, lq_thin, polar_project, qr_thin, svd_full, svd_truncate, SvdResult, TruncationPolicy,
    DEFAULT_REL_CUTOFF,
};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{mismatch, Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

/// Seeded generator used for every random draw in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Complex normal sample with unit variance (real and imaginary parts each 1/2).
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<C64>,
}

pub(crate) fn row_major_strides(dims: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * dims[i + 1];
    }
    strides
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(mismatch("tensor must have at least one leg"));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(mismatch(format!("zero-sized leg in {dims:?}")));
    }
    Ok(())
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(mismatch(format!(
                "data length {} does not match dims {:?} (product {})",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![ZERO; n],
        }
    }

    pub fn from_real(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = ONE;
        }
        t
    }

    pub fn scalar(value: C64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn diag(values: &[C64]) -> Self {
        let n = values.len();
        let mut t = Self::zeros(&[n, n]);
        for (i, v) in values.iter().enumerate() {
            t.data[i * n + i] = *v;
        }
        t
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> C64) -> Self {
        let n: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for ax in (0..dims.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < dims[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    /// Entries drawn i.i.d. from the unit-variance complex normal distribution.
    pub fn random<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(|_| complex_normal(rng)).collect(),
        }
    }

    pub fn random_real<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let n: usize = dims.iter().product();
        let data = (0..n)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                C64::new(x, 0.0)
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn ensure_matrix(&self, what: &str) -> Result<()> {
        if self.rank() == 2 {
            Ok(())
        } else {
            Err(mismatch(format!(
                "{what}: expected rank-2 tensor, got dims {:?}",
                self.dims
            )))
        }
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: C64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Matrix element accessor for rank-2 tensors.
    pub fn at(&self, r: usize, c: usize) -> C64 {
        self.data[r * self.dims[1] + c]
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        self.clone().into_reshape(dims)
    }

    pub fn into_reshape(self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(mismatch(format!("cannot reshape {:?} into {:?}", self.dims, dims)));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    /// Reorders legs: leg `j` of the result is leg `perm[j]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.rank(), "permutation length must equal tensor rank");
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return self.clone();
        }
        let src_strides = row_major_strides(&self.dims);
        let new_dims: Vec<usize> = perm.iter().map(|&p| self.dims[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let n = self.data.len();
        let rank = new_dims.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        let last = rank - 1;
        let inner_dim = new_dims[last];
        let inner_stride = strides[last];
        for _ in 0..n / inner_dim {
            let mut s = src;
            for _ in 0..inner_dim {
                data.push(self.data[s]);
                s += inner_stride;
            }
            // advance the outer multi-index
            for ax in (0..last).rev() {
                idx[ax] += 1;
                src += strides[ax];
                if idx[ax] < new_dims[ax] {
                    break;
                }
                src -= strides[ax] * new_dims[ax];
                idx[ax] = 0;
            }
        }
        Self { dims: new_dims, data }
    }

    pub fn conj(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Self {
        self.permute(&[1, 0])
    }

    /// Conjugate transpose of a rank-2 tensor.
    pub fn adjoint(&self) -> Self {
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut data = vec![ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j].conj();
            }
        }
        Self { dims: vec![c, r], data }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.dims[1] != other.dims[0] {
            return Err(mismatch(format!("matmul of {:?} and {:?}", self.dims, other.dims)));
        }
        let (m, k, n) = (self.dims[0], self.dims[1], other.dims[1]);
        let mut out = vec![ZERO; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self {
            dims: vec![m, n],
            data: out,
        })
    }

    pub fn scale(&self, factor: C64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn scale_mut(&mut self, factor: C64) {
        self.data.iter_mut().for_each(|z| *z *= factor);
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(C64, C64) -> C64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(mismatch(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Frobenius inner product `Σ conj(self) · other`.
    pub fn inner(&self, other: &Self) -> C64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn trace(&self) -> C64 {
        let n = self.dims[0].min(self.dims[1]);
        (0..n).map(|i| self.at(i, i)).sum()
    }

    /// `‖self − other‖_F / ‖other‖_F`; absolute difference when `other` is zero.
    pub fn rel_diff(&self, other: &Self) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let n = other.norm();
        if n > 0.0 {
            diff / n
        } else {
            diff
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `‖g†g − I‖_F` for a square matrix.
    pub fn unitarity_residual(&self) -> f64 {
        let n = self.dims[1];
        let gram = self.adjoint().matmul(self).expect("square matrix");
        gram.sub(&Self::identity(n)).expect("same shape").norm()
    }

    /// Kronecker product of two matrices.
    pub fn kron(&self, other: &Self) -> Self {
        let (ar, ac) = (self.dims[0], self.dims[1]);
        let (br, bc) = (other.dims[0], other.dims[1]);
        Self::from_fn(&[ar * br, ac * bc], |idx| {
            let (r, c) = (idx[0], idx[1]);
            self.at(r / br, c / bc) * other.at(r % br, c % bc)
        })
    }

    pub(crate) fn as_array(&self) -> ArrayView2<'_, C64> {
        ArrayView2::from_shape((self.dims[0], self.dims[1]), &self.data).expect("rank-2 tensor")
    }

    pub(crate) fn from_array(m: Array2<C64>) -> Self {
        let dims = vec![m.nrows(), m.ncols()];
        let data = if m.is_standard_layout() {
            m.into_raw_vec_and_offset().0
        } else {
            m.iter().copied().collect()
        };
        Self { dims, data }
    }
}

pub(crate) fn matmul_into(a: &[C64], b: &[C64], out: &mut [C64], m: usize, k: usize, n: usize) {
    let a = ArrayView2::from_shape((m, k), a).expect("lhs shape");
    let b = ArrayView2::from_shape((k, n), b).expect("rhs shape");
    let mut c = ArrayViewMut2::from_shape((m, n), out).expect("output shape");
    general_mat_mul(ONE, &a, &b, ONE, &mut c);
}

/// Views a matrix with one leg per site index: rows split over `out_site_dims`,
/// columns over `in_site_dims`.
pub fn reshape_split(matrix: &DenseTensor, out_site_dims: &[usize], in_site_dims: &[usize]) -> Result<DenseTensor> {
    matrix.ensure_matrix("reshape_split")?;
    let rows: usize = out_site_dims.iter().product();
    let cols: usize = in_site_dims.iter().product();
    if rows != matrix.dims[0] || cols != matrix.dims[1] {
        return Err(mismatch(format!(
            "site dims {:?} x {:?} (products {} x {}) do not match a {} x {} matrix",
            out_site_dims, in_site_dims, rows, cols, matrix.dims[0], matrix.dims[1]
        )));
    }
    let dims: Vec<usize> = out_site_dims.iter().chain(in_site_dims).copied().collect();
    matrix.reshape(&dims)
}

/// Inverse of [`reshape_split`]: fuses the first `row_legs` legs into rows and
/// the remaining legs into columns.
pub fn regroup(tensor: &DenseTensor, row_legs: usize) -> Result<DenseTensor> {
    if row_legs == 0 || row_legs >= tensor.rank() {
        return Err(mismatch(format!(
            "cannot regroup rank-{} tensor with {} row legs",
            tensor.rank(),
            row_legs
        )));
    }
    let rows: usize = tensor.dims[..row_legs].iter().product();
    let cols: usize = tensor.dims[row_legs..].iter().product();
    tensor.reshape(&[rows, cols])
}

/// Sums over the paired legs `legs_a[i]` ↔ `legs_b[i]`. Free legs of `a` come
/// first, then free legs of `b`. A full contraction yields a `[1]` tensor.
pub fn contract(a: &DenseTensor, legs_a: &[usize], b: &DenseTensor, legs_b: &[usize]) -> Result<DenseTensor> {
    if legs_a.len() != legs_b.len() {
        return Err(mismatch(format!(
            "contracting {} legs against {}",
            legs_a.len(),
            legs_b.len()
        )));
    }
    validate_legs(a, legs_a, "first")?;
    validate_legs(b, legs_b, "second")?;
    for (&la, &lb) in legs_a.iter().zip(legs_b) {
        if a.dims[la] != b.dims[lb] {
            return Err(mismatch(format!(
                "paired legs {la} (dim {}) and {lb} (dim {}) differ",
                a.dims[la], b.dims[lb]
            )));
        }
    }
    let free_a: Vec<usize> = (0..a.rank()).filter(|l| !legs_a.contains(l)).collect();
    let free_b: Vec<usize> = (0..b.rank()).filter(|l| !legs_b.contains(l)).collect();
    let perm_a: Vec<usize> = free_a.iter().chain(legs_a).copied().collect();
    let perm_b: Vec<usize> = legs_b.iter().chain(&free_b).copied().collect();
    let m: usize = free_a.iter().map(|&l| a.dims[l]).product();
    let k: usize = legs_a.iter().map(|&l| a.dims[l]).product();
    let n: usize = free_b.iter().map(|&l| b.dims[l]).product();
    let pa = a.permute(&perm_a);
    let pb = b.permute(&perm_b);
    let mut out = vec![ZERO; m * n];
    matmul_into(&pa.data, &pb.data, &mut out, m, k, n);
    let mut dims: Vec<usize> = free_a.iter().map(|&l| a.dims[l]).collect();
    dims.extend(free_b.iter().map(|&l| b.dims[l]));
    if dims.is_empty() {
        dims.push(1);
    }
    Ok(DenseTensor { dims, data: out })
}

fn validate_legs(t: &DenseTensor, legs: &[usize], which: &str) -> Result<()> {
    for (i, &l) in legs.iter().enumerate() {
        if l >= t.rank() {
            return Err(mismatch(format!(
                "{which} operand has rank {} but leg {l} was requested",
                t.rank()
            )));
        }
        if legs[..i].contains(&l) {
            return Err(mismatch(format!("{which} operand repeats leg {l}")));
        }
    }
    Ok(())
}
