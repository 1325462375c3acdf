//! Linear algebra in R^{n+1,1} and its complexification.
//!
//! The metric is `diag(+1, ..., +1, -1)` with the last coordinate timelike.
//! Complex vectors use the complex-*bilinear* extension of the inner product
//! (never the Hermitian one): isotropy of `f^{1,0}` and of `U` is a bilinear
//! statement. Euclidean (Hermitian) structure on coordinates is only used as
//! an auxiliary tool for ranks and residual norms.

use std::cmp::Ordering;
use std::fmt;

use nalgebra::{ComplexField, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

pub use nalgebra::Complex;
pub type C64 = Complex<f64>;

/// Default relative rank / intersection tolerance.
pub const DEFAULT_TOL: f64 = 1e-9;

/// Scalars we work over: `f64` and `Complex<f64>`.
pub trait Scalar: ComplexField<RealField = f64> + Copy {}
impl Scalar for f64 {}
impl Scalar for C64 {}

/// Sign of the metric on coordinate `i` of an ambient space of dimension `dim`.
#[inline]
pub fn metric_sign(i: usize, dim: usize) -> f64 {
    if i + 1 == dim {
        -1.0
    } else {
        1.0
    }
}

/// The metric matrix `η`.
pub fn metric<T: Scalar>(dim: usize) -> DMatrix<T> {
    DMatrix::from_fn(dim, dim, |i, j| {
        if i == j {
            T::from_real(metric_sign(i, dim))
        } else {
            T::zero()
        }
    })
}

/// Multiplies `m` on the left by `η` (flips the sign of the last row).
pub fn eta_left<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let mut out = m.clone();
    let last = out.nrows() - 1;
    for j in 0..out.ncols() {
        out[(last, j)] = -out[(last, j)];
    }
    out
}

/// Unchecked bilinear inner product of two coordinate vectors.
#[inline]
pub fn bilinear<T: Scalar>(u: &DVector<T>, v: &DVector<T>) -> T {
    let n = u.len();
    let mut acc = T::zero();
    for i in 0..n - 1 {
        acc += u[i] * v[i];
    }
    acc - u[n - 1] * v[n - 1]
}

/// Gram matrix `Bᵀ η B` of the columns of `b` (bilinear, no conjugation).
pub fn gram_matrix<T: Scalar>(b: &DMatrix<T>) -> DMatrix<T> {
    b.transpose() * eta_left(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinkowskiVector<T: Scalar = f64> {
    coords: DVector<T>,
}

impl<T: Scalar> MinkowskiVector<T> {
    pub fn new(coords: DVector<T>) -> Result<Self> {
        if coords.len() < 5 {
            return Err(Error::AmbientTooSmall(coords.len()));
        }
        Ok(Self { coords })
    }

    pub fn from_slice(coords: &[T]) -> Result<Self> {
        Self::new(DVector::from_column_slice(coords))
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &DVector<T> {
        &self.coords
    }

    pub fn into_inner(self) -> DVector<T> {
        self.coords
    }

    pub fn euclid_norm(&self) -> f64 {
        self.coords.norm()
    }

    /// Lightcone test: nonzero and `|(v,v)| / |v|² < tol`.
    pub fn is_null(&self, tol: f64) -> bool {
        let n2 = self.coords.norm_squared();
        n2 > 0.0 && bilinear(&self.coords, &self.coords).modulus() / n2 < tol
    }
}

impl MinkowskiVector<C64> {
    pub fn conj(&self) -> Self {
        Self {
            coords: self.coords.map(|z| z.conj()),
        }
    }

    pub fn complexify(v: &MinkowskiVector<f64>) -> Self {
        Self {
            coords: v.coords.map(|x| C64::new(x, 0.0)),
        }
    }

    pub fn real_part(&self) -> MinkowskiVector<f64> {
        MinkowskiVector {
            coords: self.coords.map(|z| z.re),
        }
    }

    pub fn imag_part(&self) -> MinkowskiVector<f64> {
        MinkowskiVector {
            coords: self.coords.map(|z| z.im),
        }
    }
}

/// The signature-(n+1,1) inner product, bilinear on complex inputs.
pub fn inner<T: Scalar>(u: &MinkowskiVector<T>, v: &MinkowskiVector<T>) -> Result<T> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            found: v.dim(),
        });
    }
    Ok(bilinear(&u.coords, &v.coords))
}

/// Eigenvalue sign counts of a Gram form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Signature {
    pub positive: usize,
    pub negative: usize,
    pub null: usize,
}

impl Signature {
    pub const fn new(positive: usize, negative: usize, null: usize) -> Self {
        Self {
            positive,
            negative,
            null,
        }
    }

    pub fn dim(&self) -> usize {
        self.positive + self.negative + self.null
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.positive, self.negative, self.null)
    }
}

/// Ordered spanning set of a subspace together with its Gram matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceBasis<T: Scalar = f64> {
    vectors: DMatrix<T>,
    gram: DMatrix<T>,
    tol: f64,
}

impl<T: Scalar> SubspaceBasis<T> {
    pub fn new(vectors: &[MinkowskiVector<T>], tol: f64) -> Result<Self> {
        let dim = vectors.first().map(|v| v.dim()).unwrap_or(0);
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.dim(),
            });
        }
        let cols: Vec<DVector<T>> = vectors.iter().map(|v| v.coords.clone()).collect();
        Self::from_columns(DMatrix::from_columns(&cols), tol)
    }

    /// Builds a basis from the columns of `vectors`, rejecting dependent sets.
    pub fn from_columns(vectors: DMatrix<T>, tol: f64) -> Result<Self> {
        if vectors.nrows() < 5 {
            return Err(Error::AmbientTooSmall(vectors.nrows()));
        }
        if vectors.ncols() > 0 {
            let sv = singular_values(&vectors);
            let max = sv[0];
            let min = sv[sv.len() - 1];
            if max == 0.0 || min <= tol * max {
                let ratio = if max == 0.0 { 0.0 } else { min / max };
                return Err(Error::LinearlyDependent { ratio });
            }
        }
        let gram = gram_matrix(&vectors);
        Ok(Self {
            vectors,
            gram,
            tol,
        })
    }

    /// The zero subspace of an ambient space of dimension `ambient`.
    pub fn zero(ambient: usize, tol: f64) -> Self {
        Self {
            vectors: DMatrix::zeros(ambient, 0),
            gram: DMatrix::zeros(0, 0),
            tol,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn ambient_dim(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn columns(&self) -> &DMatrix<T> {
        &self.vectors
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn vector(&self, i: usize) -> MinkowskiVector<T> {
        MinkowskiVector {
            coords: self.vectors.column(i).into_owned(),
        }
    }

    /// Euclidean (Hermitian) orthonormal basis of the same span.
    pub fn orthonormal(&self) -> DMatrix<T> {
        orthonormalize(&self.vectors)
    }

    /// Euclidean distance of `v / |v|` from the span: the sine of the angle
    /// between `v` and the subspace.
    pub fn containment_residual(&self, v: &DVector<T>) -> f64 {
        let n = v.norm();
        if n == 0.0 {
            return 0.0;
        }
        let q = self.orthonormal();
        let proj = &q * (q.adjoint() * v);
        (v - proj).norm() / n
    }

    /// Metric orthogonal complement `S^⊥ = {x : (x, s) = 0 ∀ s ∈ S}`.
    pub fn complement(&self) -> SubspaceBasis<T> {
        // (B^T η x = 0) <=> x is Hermitian-orthogonal to conj(η B).
        let eb = eta_left(&self.vectors).map(|z| z.conjugate());
        let cols = euclid_complement(&eb);
        SubspaceBasis {
            gram: gram_matrix(&cols),
            vectors: cols,
            tol: self.tol,
        }
    }
}

impl SubspaceBasis<C64> {
    pub fn conj(&self) -> Self {
        Self {
            vectors: self.vectors.map(|z| z.conj()),
            gram: self.gram.map(|z| z.conj()),
            tol: self.tol,
        }
    }

    pub fn complexify(s: &SubspaceBasis<f64>) -> Self {
        Self {
            vectors: s.vectors.map(|x| C64::new(x, 0.0)),
            gram: s.gram.map(|x| C64::new(x, 0.0)),
            tol: s.tol,
        }
    }
}

/// Orthonormal basis (Hermitian inner product on coordinates) of the column span.
pub fn orthonormalize<T: Scalar>(cols: &DMatrix<T>) -> DMatrix<T> {
    if cols.ncols() == 0 {
        return cols.clone();
    }
    cols.clone().qr().q()
}

/// Thin singular value decomposition `A = U Σ Vᴴ`, singular values decreasing.
#[derive(Clone, Debug)]
pub struct Svd<T: Scalar> {
    pub singular_values: Vec<f64>,
    pub u: DMatrix<T>,
    pub v: DMatrix<T>,
}

/// One-sided Jacobi SVD.
///
/// nalgebra's bidiagonalization SVD returns inaccurate factors for square,
/// rank-deficient inputs with repeated singular values, and such inputs
/// (projectors, images of `V^⊥`) are routine here. Jacobi rotations are
/// accurate to working precision on them.
pub fn svd<T: Scalar>(a: &DMatrix<T>) -> Svd<T> {
    let (m, k) = a.shape();
    if m < k {
        let t = svd(&a.adjoint());
        return Svd {
            singular_values: t.singular_values,
            u: t.v,
            v: t.u,
        };
    }
    let mut w = a.clone();
    let mut v = DMatrix::<T>::identity(k, k);
    for _ in 0..64 {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dotc(&w.column(q));
                let g = gamma.modulus();
                if g == 0.0 || g <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Rotating column q by the conjugate phase makes the inner product real.
                let phase = (gamma / T::from_real(g)).conjugate();
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, phase, c, s);
                rotate(&mut v, p, q, phase, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..k).map(|j| w.column(j).norm()).collect();
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut u = DMatrix::<T>::zeros(m, k);
    let mut vs = DMatrix::<T>::zeros(k, k);
    for (dst, &src) in idx.iter().enumerate() {
        if norms[src] > 0.0 {
            u.set_column(dst, &(w.column(src) / T::from_real(norms[src])));
        }
        vs.set_column(dst, &v.column(src));
    }
    Svd {
        singular_values: idx.iter().map(|&i| norms[i]).collect(),
        u,
        v: vs,
    }
}

fn rotate<T: Scalar>(m: &mut DMatrix<T>, p: usize, q: usize, phase: T, c: f64, s: f64) {
    let (c, s) = (T::from_real(c), T::from_real(s));
    for r in 0..m.nrows() {
        let x = m[(r, p)];
        let y = m[(r, q)] * phase;
        m[(r, p)] = x * c - y * s;
        m[(r, q)] = x * s + y * c;
    }
}

/// Singular values in decreasing order.
pub fn singular_values<T: Scalar>(a: &DMatrix<T>) -> Vec<f64> {
    svd(a).singular_values
}

/// Orthonormal basis of the Euclidean orthogonal complement of the column span.
pub fn euclid_complement<T: Scalar>(cols: &DMatrix<T>) -> DMatrix<T> {
    let m = cols.nrows();
    let q = orthonormalize(cols);
    let p = DMatrix::<T>::identity(m, m) - &q * q.adjoint();
    // p is a Hermitian projector; its eigenvalue-1 eigenvectors span the complement.
    let eig = p.symmetric_eigen();
    let keep: Vec<DVector<T>> = (0..m)
        .filter(|&i| eig.eigenvalues[i] > 0.5)
        .map(|i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if keep.is_empty() {
        DMatrix::zeros(m, 0)
    } else {
        DMatrix::from_columns(&keep)
    }
}

/// Hermitian orthogonal projector onto the column span.
pub fn euclid_projector<T: Scalar>(cols: &DMatrix<T>) -> DMatrix<T> {
    let q = orthonormalize(cols);
    &q * q.adjoint()
}

/// Sine of the Euclidean angle between the lines spanned by `a` and `b`.
pub fn line_distance<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let bh = b / T::from_real(nb);
    let c = bh.dotc(a);
    let r = a - bh * c;
    (r.norm() / na).min(1.0)
}

/// Counts of positive and negative Gram eigenvalues; the rest are zero to `zero_threshold`.
///
/// The Gram form is evaluated on a Euclidean-orthonormal basis of `s`, so the
/// threshold is dimensionless and the result does not depend on the basis.
pub fn signature_of(s: &SubspaceBasis<f64>, zero_threshold: f64) -> Signature {
    if s.dim() == 0 {
        return Signature::new(0, 0, 0);
    }
    let q = s.orthonormal();
    let g = gram_matrix(&q);
    let eig = SymmetricEigen::new(g).eigenvalues;
    let mut sig = Signature::new(0, 0, 0);
    for &l in eig.iter() {
        if l > zero_threshold {
            sig.positive += 1;
        } else if l < -zero_threshold {
            sig.negative += 1;
        } else {
            sig.null += 1;
        }
    }
    sig
}

/// Metric orthogonal projector `π_S = B G⁻¹ Bᵀ η` onto a nondegenerate subspace.
pub fn projector<T: Scalar>(s: &SubspaceBasis<T>) -> Result<DMatrix<T>> {
    let m = s.ambient_dim();
    if s.dim() == 0 {
        return Ok(DMatrix::zeros(m, m));
    }
    let q = s.orthonormal();
    let g = gram_matrix(&q);
    let sv = singular_values(&g);
    let (max, min) = (sv[0], sv[sv.len() - 1]);
    let condition = if min == 0.0 { f64::INFINITY } else { max / min };
    if !(min > s.tol() * max) {
        return Err(Error::Degenerate { condition });
    }
    let ginv = g.try_inverse().ok_or(Error::Degenerate { condition })?;
    Ok(&q * ginv * eta_left(&q).transpose())
}

/// Basis of `A ∩ B`.
///
/// Principal sines between `A` and `B` are the singular values of
/// `(I − Q_B Q_Bᴴ) Q_A`; directions with sine below `tol` span the
/// intersection.
pub fn intersect<T: Scalar>(
    a: &SubspaceBasis<T>,
    b: &SubspaceBasis<T>,
    tol: f64,
) -> Result<SubspaceBasis<T>> {
    if a.ambient_dim() != b.ambient_dim() {
        return Err(Error::DimensionMismatch {
            expected: a.ambient_dim(),
            found: b.ambient_dim(),
        });
    }
    let m = a.ambient_dim();
    if a.dim() == 0 || b.dim() == 0 {
        return Ok(SubspaceBasis::zero(m, tol));
    }
    let (dirs, sines) = principal_directions(a.columns(), b.columns());
    let keep: Vec<DVector<T>> = dirs
        .into_iter()
        .zip(sines)
        .filter(|(_, s)| *s < tol)
        .map(|(d, _)| d)
        .collect();
    if keep.is_empty() {
        return Ok(SubspaceBasis::zero(m, tol));
    }
    let cols = orthonormalize(&DMatrix::from_columns(&keep));
    Ok(SubspaceBasis {
        gram: gram_matrix(&cols),
        vectors: cols,
        tol,
    })
}

/// Unit directions of `span(a)` with their principal sines relative to
/// `span(b)`, sorted by increasing sine.
pub fn principal_directions<T: Scalar>(
    a: &DMatrix<T>,
    b: &DMatrix<T>,
) -> (Vec<DVector<T>>, Vec<f64>) {
    let m = a.nrows();
    let qa = orthonormalize(a);
    let qb = orthonormalize(b);
    let ka = qa.ncols();
    let resid = (DMatrix::<T>::identity(m, m) - &qb * qb.adjoint()) * &qa;
    let dec = svd(&resid);
    let mut pairs: Vec<(DVector<T>, f64)> = (0..ka)
        .map(|i| (&qa * dec.v.column(i), dec.singular_values[i]))
        .collect();
    pairs.sort_by(|x, y| x.1.partial_cmp(&y.1).unwrap_or(Ordering::Equal));
    pairs.into_iter().unzip()
}

/// The two null lines of a real (1,1)-plane, in canonical order.
///
/// Each line is represented by a Euclidean-unit vector whose first nonzero
/// coordinate is positive; the pair is sorted lexicographically.
pub fn null_lines_in_plane(
    p: &SubspaceBasis<f64>,
) -> Result<(SubspaceBasis<f64>, SubspaceBasis<f64>)> {
    let sig = signature_of(p, p.tol());
    let expected = Signature::new(1, 1, 0);
    if sig != expected {
        return Err(Error::SignatureMismatch {
            expected,
            found: sig,
        });
    }
    let q = p.orthonormal();
    let eig = SymmetricEigen::new(gram_matrix(&q));
    let (ip, ineg) = if eig.eigenvalues[0] > 0.0 {
        (0, 1)
    } else {
        (1, 0)
    };
    let ep = &q * eig.eigenvectors.column(ip) / eig.eigenvalues[ip].sqrt();
    let en = &q * eig.eigenvectors.column(ineg) / (-eig.eigenvalues[ineg]).sqrt();
    let mut lines = [canonical_direction(&ep + &en), canonical_direction(&ep - &en)];
    lines.sort_by(|a, b| lex_cmp(a, b));
    let [l0, l1] = lines;
    Ok((
        SubspaceBasis::from_columns(DMatrix::from_columns(&[l0]), p.tol())?,
        SubspaceBasis::from_columns(DMatrix::from_columns(&[l1]), p.tol())?,
    ))
}

/// Euclidean-normalized representative with nonnegative first nonzero coordinate.
pub fn canonical_direction(v: DVector<f64>) -> DVector<f64> {
    let n = v.norm();
    let mut w = if n > 0.0 { v / n } else { v };
    if let Some(first) = w.iter().copied().find(|x| x.abs() > 1e-12) {
        if first < 0.0 {
            w.neg_mut();
        }
    }
    w
}

fn lex_cmp(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) | None => continue,
            Some(o) => return o,
        }
    }
    Ordering::Equal
}

/// Isotropy test: the largest `|gram[i][j]| / (|v_i| |v_j|)` and whether it is below `tol`.
pub fn is_isotropic<T: Scalar>(s: &SubspaceBasis<T>, tol: f64) -> (bool, f64) {
    let cols = s.columns();
    let norms: Vec<f64> = cols.column_iter().map(|c| c.norm()).collect();
    let mut worst = 0.0f64;
    for i in 0..s.dim() {
        for j in 0..s.dim() {
            let d = norms[i] * norms[j];
            if d > 0.0 {
                worst = worst.max(s.gram()[(i, j)].modulus() / d);
            }
        }
    }
    (worst < tol, worst)
}


#[cfg(test)]
mod svd_tests {
    use super::*;

    #[test]
    fn jacobi_svd_recomposes_projectors_and_complex_matrices() {
        let mut p = DMatrix::<f64>::zeros(6, 6);
        let q = orthonormalize(&DMatrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) as f64).sin()));
        p += &q * q.transpose();
        let d = svd(&p);
        let rec = &d.u * DMatrix::from_diagonal(&DVector::from_vec(d.singular_values.clone())) * d.v.adjoint();
        assert!((rec - &p).norm() < 1e-13);
        assert!((d.singular_values[2] - 1.0).abs() < 1e-13 && d.singular_values[3] < 1e-13);

        let z = DMatrix::from_fn(4, 7, |i, j| C64::new((i as f64 + 0.3 * j as f64).cos(), (i * j) as f64 * 0.1));
        let d = svd(&z);
        assert_eq!(d.singular_values.len(), 4);
        let sig = DMatrix::from_diagonal(&DVector::from_vec(d.singular_values.iter().map(|&x| C64::new(x, 0.0)).collect()));
        assert!((&d.u * sig * d.v.adjoint() - &z).norm() < 1e-12);
        assert!(d.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }
}
