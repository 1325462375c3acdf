//! The central sphere congruence `V` of a lifted chart and its differential invariants.
//!
//! `V = span{σ, σ_u, σ_v, Δσ}` is stored as a field of metric projectors `π`.
//! From it:
//!
//! * `N_X = π^⊥ (∂_X π) π − π (∂_X π) π^⊥` (the second fundamental form of `V`),
//! * `D_X s = π ∂_X(π s) + π^⊥ ∂_X(π^⊥ s)` (the induced connection),
//! * `(D_X T) s = D_X(T s) − T (D_X s)` on operator fields,
//! * `τ = D_u N_u + D_v N_v` (coordinate trace; a positive multiple of `∗d^D∗N`),
//! * `N^{1,0} = ½(N_u − i N_v)`.
//!
//! All derivatives are central finite differences on the sample grid.
//! Residuals are normalized by `s = |N_u|² + |N_v|²` (Frobenius) raised to
//! the power that makes them dimensionless; where `s` vanishes they are zero.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{crop, derivative, map_field, zip_field, Axis, Domain, FdOrder, Field, Grid, Summary};
use crate::minkowski::{
    euclid_complement, euclid_projector, projector, singular_values, svd, signature_of, Scalar,
    Signature, SubspaceBasis, C64, DEFAULT_TOL,
};
use crate::surfaces::{immersion_of_jet, ComplexDerivative, LiftedChart};

/// Below this value of `|N_u|² + |N_v|²` the congruence is treated as constant.
pub const NULL_SCALE: f64 = 1e-20;

/// Derivative nesting depth covered by the ghost margin of a chart analysis.
pub const GHOST_LEVELS: usize = 4;

/// Smallest immersion residual accepted when building a congruence.
pub const MIN_IMMERSION: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AnalysisConfig {
    pub fd_order: FdOrder,
    /// Relative tolerance of the pointwise linear algebra (ranks of bases, degeneracy).
    pub tol: f64,
    /// Relative singular-value threshold for ranks of `U` and `N^{1,0}|V^⊥`.
    pub rank_tol: f64,
    /// Bound on the normalized residuals that the reconstruction hypotheses require.
    pub hypothesis_tol: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            fd_order: FdOrder::Second,
            tol: DEFAULT_TOL,
            rank_tol: 2e-2,
            hypothesis_tol: 2e-2,
        }
    }
}

/// Why a grid point carries no value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskReason {
    /// Finite-difference stencil leaves a non-periodic domain.
    Stencil,
    NotImmersed,
    /// Gram matrix of the `V` basis too ill-conditioned (umbilic-type collapse).
    Degenerate,
    /// `V` is not a (3,1)-plane.
    Signature,
    /// A singular value of the `U` generators lies within the guard band.
    Indeterminate,
    /// `U` has more than two dimensions.
    RankExceeded,
    /// `U ∩ Ū` is not a line.
    Intersection,
    /// `(U ⊕ Ū)^⊥ ∩ V` is not a (1,1)-plane, or `U ∩ Ū ≠ 0` in the rank-1 branch.
    DualPlane,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorRole {
    Projector,
    Nu,
    Nv,
    N10,
    Tension,
}

/// Grid of endomorphisms of the ambient space.
#[derive(Clone, Debug)]
pub struct OperatorField<T: Scalar> {
    pub role: OperatorRole,
    pub values: Field<DMatrix<T>>,
}

impl<T: Scalar> OperatorField<T> {
    pub fn get(&self, k: usize) -> Option<&DMatrix<T>> {
        self.values[k].as_ref()
    }
}

/// The conformal Gauss map as a projector field.
#[derive(Clone, Debug)]
pub struct CongruenceField {
    name: String,
    grid: Grid,
    dim: usize,
    fd_order: FdOrder,
    chart: Option<LiftedChart>,
    pi: OperatorField<f64>,
    basis_v: Field<SubspaceBasis<f64>>,
    perp: Field<DMatrix<f64>>,
    mask: Vec<Option<MaskReason>>,
}

/// Builds `V = span{σ, σ_u, σ_v, σ_uu + σ_vv}` at every grid point.
///
/// Points where the span is not a (3,1)-plane are masked with the reason.
pub fn build_congruence(chart: &LiftedChart, fd_order: FdOrder) -> CongruenceField {
    build_with_tol(chart, fd_order, DEFAULT_TOL)
}

pub fn build_with_tol(chart: &LiftedChart, fd_order: FdOrder, tol: f64) -> CongruenceField {
    let grid = *chart.grid();
    let dim = chart.ambient_dim();
    let per_point: Vec<std::result::Result<SubspaceBasis<f64>, MaskReason>> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = grid.ij(k);
            let jet = chart.jet(i, j);
            if immersion_of_jet(&jet) < MIN_IMMERSION {
                return Err(MaskReason::NotImmersed);
            }
            let lap = jet.laplacian();
            let cols = DMatrix::from_columns(&[jet.sigma, jet.su, jet.sv, lap]);
            SubspaceBasis::from_columns(cols, tol).map_err(|_| MaskReason::Degenerate)
        })
        .collect();
    assemble(chart.name().to_string(), grid, dim, fd_order, Some(chart.clone()), per_point, tol)
}

impl CongruenceField {
    /// A congruence given directly by a basis of `V(u, v)` (columns), with no
    /// generating surface. Used for synthetic congruences.
    pub fn from_basis_fn(
        name: impl Into<String>,
        domain: Domain,
        nu: usize,
        nv: usize,
        fd_order: FdOrder,
        basis: impl Fn(f64, f64) -> DMatrix<f64> + Sync,
    ) -> Result<Self> {
        let grid = Grid::new(domain, nu, nv);
        let dim = basis(domain.u.0, domain.v.0).nrows();
        if dim < 5 {
            return Err(Error::AmbientTooSmall(dim));
        }
        let per_point = (0..grid.len())
            .into_par_iter()
            .map(|k| {
                let (i, j) = grid.ij(k);
                let (u, v) = grid.coords(i, j);
                SubspaceBasis::from_columns(basis(u, v), DEFAULT_TOL).map_err(|_| MaskReason::Degenerate)
            })
            .collect();
        Ok(assemble(name.into(), grid, dim, fd_order, None, per_point, DEFAULT_TOL))
    }

    /// Negative control: `V = R(u,v) V₀` with `V₀ = span{e₁, e₂, e₃, e_{n+2}}`
    /// in `R^{5,1}` and `R` rotating the planes `(e₁, e₄)` at rate `a` and
    /// `(e₂, e₅)` at rate `b`. Every fibre is a (3,1)-plane, but `V` is not the
    /// conformal Gauss map of any surface: `(N^{1,0})²` does not vanish on `V^⊥`.
    pub fn rotating_plane(a: f64, b: f64, nu: usize, nv: usize, fd_order: FdOrder) -> Result<Self> {
        let domain = Domain {
            u: (0.0, std::f64::consts::TAU),
            v: (0.0, std::f64::consts::TAU),
            periodic: [true, true],
        };
        Self::from_basis_fn("rotating_plane", domain, nu, nv, fd_order, move |u, v| {
            let (s1, c1) = (a * u).sin_cos();
            let (s2, c2) = (b * v).sin_cos();
            let mut m = DMatrix::zeros(6, 4);
            // R e₁ = cos e₁ + sin e₄, R e₂ = cos e₂ + sin e₅
            m[(0, 0)] = c1;
            m[(3, 0)] = s1;
            m[(1, 1)] = c2;
            m[(4, 1)] = s2;
            m[(2, 2)] = 1.0;
            m[(5, 3)] = 1.0;
            m
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fd_order(&self) -> FdOrder {
        self.fd_order
    }

    pub fn chart(&self) -> Option<&LiftedChart> {
        self.chart.as_ref()
    }

    pub fn projectors(&self) -> &OperatorField<f64> {
        &self.pi
    }

    pub fn basis_v(&self, k: usize) -> Option<&SubspaceBasis<f64>> {
        self.basis_v[k].as_ref()
    }

    /// Euclidean-orthonormal basis of `V^⊥` (columns).
    pub fn perp_basis(&self, k: usize) -> Option<&DMatrix<f64>> {
        self.perp[k].as_ref()
    }

    /// Construction mask reason, if the point was rejected.
    pub fn mask(&self, k: usize) -> Option<MaskReason> {
        self.mask[k]
    }

    /// Identity field on valid points.
    fn identity_field(&self) -> Field<DMatrix<f64>> {
        map_field(&self.pi.values, |_| DMatrix::identity(self.dim, self.dim))
    }
}

fn assemble(
    name: String,
    grid: Grid,
    dim: usize,
    fd_order: FdOrder,
    chart: Option<LiftedChart>,
    per_point: Vec<std::result::Result<SubspaceBasis<f64>, MaskReason>>,
    tol: f64,
) -> CongruenceField {
    let target = Signature::new(3, 1, 0);
    let built: Vec<std::result::Result<(SubspaceBasis<f64>, DMatrix<f64>, DMatrix<f64>), MaskReason>> = per_point
        .into_par_iter()
        .map(|r| {
            let b = r?;
            if signature_of(&b, tol) != target {
                return Err(MaskReason::Signature);
            }
            let p = projector(&b).map_err(|_| MaskReason::Degenerate)?;
            // V^⊥ is the Euclidean complement of ηV
            let perp = euclid_complement(&crate::minkowski::eta_left(b.columns()));
            debug_assert_eq!(perp.ncols(), dim - 4);
            Ok((b, p, perp))
        })
        .collect();
    let mut pi = Vec::with_capacity(grid.len());
    let mut basis_v = Vec::with_capacity(grid.len());
    let mut perp = Vec::with_capacity(grid.len());
    let mut mask = Vec::with_capacity(grid.len());
    for r in built {
        match r {
            Ok((b, p, q)) => {
                basis_v.push(Some(b));
                pi.push(Some(p));
                perp.push(Some(q));
                mask.push(None);
            }
            Err(reason) => {
                basis_v.push(None);
                pi.push(None);
                perp.push(None);
                mask.push(Some(reason));
            }
        }
    }
    CongruenceField {
        name,
        grid,
        dim,
        fd_order,
        chart,
        pi: OperatorField {
            role: OperatorRole::Projector,
            values: pi,
        },
        basis_v,
        perp,
        mask,
    }
}

#[inline]
fn lift<T: Scalar>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::from_real)
}

/// `D_X s = π ∂_X(π s) + π^⊥ ∂_X(π^⊥ s)` applied columnwise to a field of sections.
pub fn compute_d_section<T: Scalar>(
    f: &CongruenceField,
    s: &[Option<DMatrix<T>>],
    axis: Axis,
) -> Field<DMatrix<T>> {
    let ps = zip_field(&f.pi.values, s, |p, s| lift::<T>(p) * s);
    let qs = zip_field(&f.pi.values, s, |p, s| s - lift::<T>(p) * s);
    let dps = derivative(&f.grid, &ps, axis, f.fd_order);
    let dqs = derivative(&f.grid, &qs, axis, f.fd_order);
    (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            let p = lift::<T>(f.pi.values[k].as_ref()?);
            let dp = dps[k].as_ref()?;
            let dq = dqs[k].as_ref()?;
            Some(&p * dp + dq - &p * dq)
        })
        .collect()
}

/// `D_X` of an operator field: `(D_X T) s = D_X(T s) − T(D_X s)`, evaluated
/// on the constant frame.
pub fn compute_d_operator<T: Scalar>(
    f: &CongruenceField,
    t: &[Option<DMatrix<T>>],
    axis: Axis,
) -> Field<DMatrix<T>> {
    let conn: Field<DMatrix<T>> = map_field(&compute_d_section(f, &f.identity_field(), axis), lift::<T>);
    let dt = compute_d_section(f, t, axis);
    (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            let dt = dt[k].as_ref()?;
            let tk = t[k].as_ref()?;
            let c = conn[k].as_ref()?;
            Some(dt - tk * c)
        })
        .collect()
}

/// `N_u`, `N_v`.
pub fn compute_n(f: &CongruenceField) -> (OperatorField<f64>, OperatorField<f64>) {
    let one = |axis: Axis, role| {
        let dp = derivative(&f.grid, &f.pi.values, axis, f.fd_order);
        let values = zip_field(&f.pi.values, &dp, |p, dp| {
            let q = DMatrix::identity(p.nrows(), p.ncols()) - p;
            &q * dp * p - p * dp * &q
        });
        OperatorField { role, values }
    };
    (one(Axis::U, OperatorRole::Nu), one(Axis::V, OperatorRole::Nv))
}

/// `N^{1,0} = ½(N_u − i N_v)`; its conjugate is `N^{0,1}`.
pub fn compute_n10(nu: &OperatorField<f64>, nv: &OperatorField<f64>) -> OperatorField<C64> {
    OperatorField {
        role: OperatorRole::N10,
        values: zip_field(&nu.values, &nv.values, |a, b| {
            DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| C64::new(0.5 * a[(i, j)], -0.5 * b[(i, j)]))
        }),
    }
}

/// `τ = D_u N_u + D_v N_v`.
pub fn compute_tension(
    f: &CongruenceField,
    nu: &OperatorField<f64>,
    nv: &OperatorField<f64>,
) -> OperatorField<f64> {
    let du = compute_d_operator(f, &nu.values, Axis::U);
    let dv = compute_d_operator(f, &nv.values, Axis::V);
    OperatorField {
        role: OperatorRole::Tension,
        values: zip_field(&du, &dv, |a, b| a + b),
    }
}

/// `|N_u|² + |N_v|²` (Frobenius).
pub fn scale_field(nu: &OperatorField<f64>, nv: &OperatorField<f64>) -> Field<f64> {
    zip_field(&nu.values, &nv.values, |a, b| a.norm_squared() + b.norm_squared())
}

/// Which residual a scalar field measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualKind {
    /// `|R^D(∂u,∂v) + [N_u, N_v]| / s`.
    Eq2,
    /// `|D_u N_v − D_v N_u| / s`.
    Eq3,
    /// `|(N^{1,0})² |_{V^⊥}| / |N^{1,0}|²`.
    StrongConformality,
    /// Part of `N_Z V^⊥` outside `f^{0,1}`, relative to `|N_Z|_{V^⊥}|`.
    Eq5,
    /// Part of `τ V^⊥` outside `f`, over `s`.
    Eq6,
    /// `(|N_u τ|_{V^⊥}| + |N_v τ|_{V^⊥}|) / s^{3/2}`.
    Eq8,
    /// `|τ² |_{V^⊥}| / s²`.
    Eq9,
    /// Part of `D_Z̄(N_Z π^⊥ e_k)` outside `U`, over `s |π^⊥|`.
    Lemma6,
    /// `|τ| / s`.
    Tension,
}

impl ResidualKind {
    pub const ALL: [ResidualKind; 9] = [
        ResidualKind::Eq2,
        ResidualKind::Eq3,
        ResidualKind::StrongConformality,
        ResidualKind::Eq5,
        ResidualKind::Eq6,
        ResidualKind::Eq8,
        ResidualKind::Eq9,
        ResidualKind::Lemma6,
        ResidualKind::Tension,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            ResidualKind::Eq2 => "eq2",
            ResidualKind::Eq3 => "eq3",
            ResidualKind::StrongConformality => "strong_conformality",
            ResidualKind::Eq5 => "eq5",
            ResidualKind::Eq6 => "eq6",
            ResidualKind::Eq8 => "eq8",
            ResidualKind::Eq9 => "eq9",
            ResidualKind::Lemma6 => "lemma6",
            ResidualKind::Tension => "tension",
        }
    }
}

/// Per-point residual fields.
#[derive(Clone, Debug, Default)]
pub struct ResidualReport {
    pub fields: BTreeMap<ResidualKind, Field<f64>>,
}

impl ResidualReport {
    pub fn get(&self, kind: ResidualKind) -> Option<&Field<f64>> {
        self.fields.get(&kind)
    }

    pub fn summary(&self, kind: ResidualKind) -> Option<Summary> {
        self.fields.get(&kind).map(|f| Summary::of(f))
    }

    pub fn summaries(&self) -> BTreeMap<ResidualKind, Summary> {
        self.fields.iter().map(|(k, f)| (*k, Summary::of(f))).collect()
    }

    pub fn merge(&mut self, other: ResidualReport) {
        self.fields.extend(other.fields);
    }
}

fn normalized(num: f64, den: f64) -> f64 {
    if den <= NULL_SCALE {
        0.0
    } else {
        num / den
    }
}

/// Residuals of the structure equations `R^D + ½[N∧N] = 0` and `d^D N = 0`.
pub fn structure_residuals(
    f: &CongruenceField,
    nu: &OperatorField<f64>,
    nv: &OperatorField<f64>,
) -> ResidualReport {
    let id = f.identity_field();
    let conn_u = compute_d_section(f, &id, Axis::U);
    let conn_v = compute_d_section(f, &id, Axis::V);
    let du_dv = compute_d_section(f, &conn_v, Axis::U);
    let dv_du = compute_d_section(f, &conn_u, Axis::V);
    let du_nv = compute_d_operator(f, &nv.values, Axis::U);
    let dv_nu = compute_d_operator(f, &nu.values, Axis::V);
    let scale = scale_field(nu, nv);
    let eq2 = (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            let r = du_dv[k].as_ref()? - dv_du[k].as_ref()?;
            let (a, b) = (nu.get(k)?, nv.get(k)?);
            let total = r + a * b - b * a;
            Some(normalized(total.norm(), scale[k]?))
        })
        .collect();
    let eq3 = (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            let d = du_nv[k].as_ref()? - dv_nu[k].as_ref()?;
            Some(normalized(d.norm(), scale[k]?))
        })
        .collect();
    let mut rep = ResidualReport::default();
    rep.fields.insert(ResidualKind::Eq2, eq2);
    rep.fields.insert(ResidualKind::Eq3, eq3);
    rep
}

/// `|(N^{1,0})²|_{V^⊥}| / |N^{1,0}|²`; zero where `N^{1,0}` vanishes.
pub fn strong_conformality_residual(f: &CongruenceField, n10: &OperatorField<C64>) -> Field<f64> {
    (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            let n = n10.get(k)?;
            if 4.0 * n.norm_squared() <= NULL_SCALE {
                return Some(0.0);
            }
            let b = lift::<C64>(f.perp_basis(k)?);
            Some(normalized((n * n * b).norm(), n.norm_squared()))
        })
        .collect()
}

/// Columns `N^{1,0} B / √s` and `τ B / s` whose span is `U = N_Z V^⊥ + τ V^⊥`.
pub fn u_generators(n10: &DMatrix<C64>, tau: &DMatrix<f64>, perp: &DMatrix<f64>, scale: f64) -> DMatrix<C64> {
    let b = lift::<C64>(perp);
    let a = n10 * &b / C64::new(scale.sqrt(), 0.0);
    let t = lift::<C64>(tau) * &b / C64::new(scale, 0.0);
    let mut g = DMatrix::zeros(n10.nrows(), a.ncols() + t.ncols());
    g.columns_mut(0, a.ncols()).copy_from(&a);
    g.columns_mut(a.ncols(), t.ncols()).copy_from(&t);
    g
}

/// Singular values of `g` relative to the largest, in decreasing order, and
/// the corresponding left singular vectors.
pub fn relative_spectrum<T: Scalar>(g: &DMatrix<T>) -> (Vec<f64>, DMatrix<T>) {
    let dec = svd(g);
    let max = dec.singular_values.first().copied().unwrap_or(0.0);
    let rel = dec
        .singular_values
        .iter()
        .map(|&s| if max > 0.0 { s / max } else { 0.0 })
        .collect();
    (rel, dec.u)
}

/// Width factor of the indeterminate band around a rank threshold.
pub const GUARD_BAND: f64 = 3.0;

/// Rank by relative threshold together with a guard-band verdict: `None`
/// when some relative singular value lies in `[tol/GUARD_BAND, tol·GUARD_BAND]`.
pub fn banded_rank(rel: &[f64], tol: f64) -> Option<usize> {
    if rel.iter().any(|&s| s >= tol / GUARD_BAND && s <= tol * GUARD_BAND) {
        return None;
    }
    Some(rel.iter().filter(|&&s| s > tol).count())
}

/// Orthonormal basis of `U` at one point, truncated at `rank_tol` (no guard band).
fn u_basis(n10: &DMatrix<C64>, tau: &DMatrix<f64>, perp: &DMatrix<f64>, scale: f64, rank_tol: f64) -> DMatrix<C64> {
    let (rel, basis) = relative_spectrum(&u_generators(n10, tau, perp, scale));
    let r = rel.iter().filter(|&&s| s > rank_tol).count();
    basis.columns(0, r).into_owned()
}

/// `D_Z̄ = ½(D_u + i D_v)` on a complex section field.
pub fn compute_dzbar(f: &CongruenceField, s: &[Option<DMatrix<C64>>]) -> Field<DMatrix<C64>> {
    let du = compute_d_section(f, s, Axis::U);
    let dv = compute_d_section(f, s, Axis::V);
    zip_field(&du, &dv, |a, b| (a + b * C64::new(0.0, 1.0)) * C64::new(0.5, 0.0))
}

/// Residuals of the containment statements `N_Z V^⊥ ⊆ f^{0,1}`, `τV^⊥ ⊆ f`,
/// `N∘τ|_{V^⊥} = 0`, `τ²|_{V^⊥} = 0` and `D_Z̄ N_Z ν ∈ U`.
///
/// The first two need the generating chart and are omitted without one.
pub fn containment_residuals(
    f: &CongruenceField,
    nu: &OperatorField<f64>,
    nv: &OperatorField<f64>,
    n10: &OperatorField<C64>,
    tau: &OperatorField<f64>,
    rank_tol: f64,
) -> ResidualReport {
    let scale = scale_field(nu, nv);
    let n = f.grid.len();
    let mut rep = ResidualReport::default();

    if let Some(chart) = f.chart() {
        let eq5 = (0..n)
            .into_par_iter()
            .map(|k| {
                let (i, j) = f.grid.ij(k);
                let n10k = n10.get(k)?;
                if scale[k]? <= NULL_SCALE {
                    return Some(0.0);
                }
                let b = lift::<C64>(f.perp_basis(k)?);
                let img = n10k * b;
                let cd = ComplexDerivative::from_jet(&chart.jet(i, j));
                let sigma = lift::<C64>(&DMatrix::from_column_slice(f.dim, 1, chart.sigma(i, j).as_slice()));
                let f01 = DMatrix::from_columns(&[sigma.column(0).into_owned(), cd.dzbar_sigma]);
                let out = &img - euclid_projector(&f01) * &img;
                Some(normalized(out.norm(), img.norm()))
            })
            .collect();
        let eq6 = (0..n)
            .into_par_iter()
            .map(|k| {
                let (i, j) = f.grid.ij(k);
                let t = tau.get(k)?;
                let b = f.perp_basis(k)?;
                let s = chart.sigma(i, j);
                let sh = &s / s.norm();
                let img = t * b;
                let out = &img - &sh * (sh.transpose() * &img);
                Some(normalized(out.norm(), scale[k]?))
            })
            .collect();
        rep.fields.insert(ResidualKind::Eq5, eq5);
        rep.fields.insert(ResidualKind::Eq6, eq6);
    }

    let eq8 = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = tau.get(k)?;
            let b = f.perp_basis(k)?;
            let tb = t * b;
            let num = (nu.get(k)? * &tb).norm() + (nv.get(k)? * &tb).norm();
            Some(normalized(num, scale[k]?.powf(1.5)))
        })
        .collect();
    let eq9 = (0..n)
        .into_par_iter()
        .map(|k| {
            let t = tau.get(k)?;
            let b = f.perp_basis(k)?;
            Some(normalized((t * t * b).norm(), scale[k]?.powi(2)))
        })
        .collect();
    let tension = (0..n)
        .into_par_iter()
        .map(|k| Some(normalized(tau.get(k)?.norm(), scale[k]?)))
        .collect();

    // w_k = N_Z π^⊥ e_k: smooth sections of N_Z V^⊥ spanning it.
    let w: Field<DMatrix<C64>> = zip_field(&n10.values, &f.pi.values, |n, p| {
        n * lift::<C64>(&(DMatrix::identity(p.nrows(), p.ncols()) - p))
    });
    let dw = compute_dzbar(f, &w);
    let lemma6 = (0..n)
        .into_par_iter()
        .map(|k| {
            let s = scale[k]?;
            let d = dw[k].as_ref()?;
            let (n10k, t) = (n10.get(k)?, tau.get(k)?);
            if s <= NULL_SCALE {
                return Some(0.0);
            }
            let basis = u_basis(n10k, t, f.perp_basis(k)?, s, rank_tol);
            let out = if basis.ncols() == 0 { d.clone() } else { d - &basis * (basis.adjoint() * d) };
            let p = f.pi.get(k)?;
            let qn = (DMatrix::identity(p.nrows(), p.ncols()) - p).norm();
            Some(normalized(out.norm(), s * qn))
        })
        .collect();

    rep.fields.insert(ResidualKind::Eq8, eq8);
    rep.fields.insert(ResidualKind::Eq9, eq9);
    rep.fields.insert(ResidualKind::Tension, tension);
    rep.fields.insert(ResidualKind::Lemma6, lemma6);
    rep
}

/// Points where `N_Z V^⊥ = N_Z̄ V^⊥ ≠ {0}` to tolerance.
pub fn detect_set_a(
    f: &CongruenceField,
    nu: &OperatorField<f64>,
    nv: &OperatorField<f64>,
    tol: f64,
) -> Field<bool> {
    let n10 = compute_n10(nu, nv);
    let scale = scale_field(nu, nv);
    (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            if scale[k]? <= NULL_SCALE {
                return Some(false);
            }
            Some(n10_spans_coincide(n10.get(k)?, f.perp_basis(k)?, tol))
        })
        .collect()
}

fn n10_spans_coincide(n10: &DMatrix<C64>, perp: &DMatrix<f64>, tol: f64) -> bool {
    let img = n10 * lift::<C64>(perp);
    let (rel, basis) = relative_spectrum(&img);
    let r = rel.iter().filter(|&&s| s > tol).count();
    if r == 0 {
        return false;
    }
    let a = basis.columns(0, r).into_owned();
    let b = a.map(|z| z.conj());
    let resid = &b - &a * (a.adjoint() * &b);
    // largest principal sine of span(Ū) against span(U)
    singular_values(&resid)[0] < tol
}

/// Rank of `N^{1,0}|_{V^⊥}` by relative threshold (0 where `N` vanishes).
pub fn n10_rank(f: &CongruenceField, n10: &OperatorField<C64>, scale: &[Option<f64>], tol: f64) -> Field<usize> {
    (0..f.grid.len())
        .into_par_iter()
        .map(|k| {
            if scale[k]? <= NULL_SCALE {
                return Some(0);
            }
            let img = n10.get(k)? * lift::<C64>(f.perp_basis(k)?);
            let (rel, _) = relative_spectrum(&img);
            Some(rel.iter().filter(|&&s| s > tol).count())
        })
        .collect()
}

/// Everything derived from one congruence field.
#[derive(Clone, Debug)]
pub struct CongruenceAnalysis {
    pub config: AnalysisConfig,
    pub field: CongruenceField,
    pub nu: OperatorField<f64>,
    pub nv: OperatorField<f64>,
    pub n10: OperatorField<C64>,
    pub tau: OperatorField<f64>,
    pub scale: Field<f64>,
    pub residuals: ResidualReport,
    pub set_a: Field<bool>,
    pub n10_rank: Field<usize>,
}

impl CongruenceAnalysis {
    /// Analysis of a chart. On non-periodic axes the chart is sampled on a
    /// margin of ghost points so that central stencils reach every grid
    /// point at every nesting level; results are cropped to the chart's grid.
    pub fn of_chart(chart: &LiftedChart, config: AnalysisConfig) -> Self {
        let (ext, off) = chart.with_margin(GHOST_LEVELS * config.fd_order.radius());
        if off == [0, 0] {
            return Self::of_field(build_with_tol(chart, config.fd_order, config.tol), config);
        }
        let big = Self::of_field(build_with_tol(&ext, config.fd_order, config.tol), config);
        big.cropped(chart, off)
    }

    fn cropped(self, chart: &LiftedChart, off: [usize; 2]) -> Self {
        let (outer, inner) = (*self.field.grid(), *chart.grid());
        let c = |f: &[Option<DMatrix<f64>>]| crop(&outer, &inner, off, f);
        let mask: Vec<Option<Option<MaskReason>>> = self.field.mask.iter().map(|m| Some(*m)).collect();
        let field = CongruenceField {
            name: self.field.name.clone(),
            grid: inner,
            dim: self.field.dim,
            fd_order: self.field.fd_order,
            chart: Some(chart.clone()),
            pi: OperatorField {
                role: OperatorRole::Projector,
                values: c(&self.field.pi.values),
            },
            basis_v: crop(&outer, &inner, off, &self.field.basis_v),
            perp: c(&self.field.perp),
            mask: crop(&outer, &inner, off, &mask).into_iter().map(|m| m.flatten()).collect(),
        };
        let op = |o: &OperatorField<f64>| OperatorField {
            role: o.role,
            values: c(&o.values),
        };
        Self {
            config: self.config,
            nu: op(&self.nu),
            nv: op(&self.nv),
            n10: OperatorField {
                role: OperatorRole::N10,
                values: crop(&outer, &inner, off, &self.n10.values),
            },
            tau: op(&self.tau),
            scale: crop(&outer, &inner, off, &self.scale),
            residuals: ResidualReport {
                fields: self
                    .residuals
                    .fields
                    .iter()
                    .map(|(k, f)| (*k, crop(&outer, &inner, off, f)))
                    .collect(),
            },
            set_a: crop(&outer, &inner, off, &self.set_a),
            n10_rank: crop(&outer, &inner, off, &self.n10_rank),
            field,
        }
    }

    pub fn of_field(field: CongruenceField, config: AnalysisConfig) -> Self {
        let (nu, nv) = compute_n(&field);
        let n10 = compute_n10(&nu, &nv);
        let tau = compute_tension(&field, &nu, &nv);
        let scale = scale_field(&nu, &nv);
        let mut residuals = structure_residuals(&field, &nu, &nv);
        residuals
            .fields
            .insert(ResidualKind::StrongConformality, strong_conformality_residual(&field, &n10));
        residuals.merge(containment_residuals(&field, &nu, &nv, &n10, &tau, config.rank_tol));
        let set_a = detect_set_a(&field, &nu, &nv, config.rank_tol);
        let n10_rank = n10_rank(&field, &n10, &scale, config.rank_tol);
        Self {
            config,
            field,
            nu,
            nv,
            n10,
            tau,
            scale,
            residuals,
            set_a,
            n10_rank,
        }
    }

    pub fn grid(&self) -> &Grid {
        self.field.grid()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minkowski::{inner, MinkowskiVector};
    use crate::surfaces::{make_chart, Family};
    use std::f64::consts::SQRT_2;

    fn analysis(f: Family, n: usize, order: FdOrder) -> CongruenceAnalysis {
        let chart = make_chart(f, n, n).unwrap();
        CongruenceAnalysis::of_chart(
            &chart,
            AnalysisConfig {
                fd_order: order,
                ..Default::default()
            },
        )
    }

    fn max_of(field: &[Option<f64>]) -> f64 {
        Summary::of(field).max
    }

    #[test]
    fn clifford_gram_signature_from_hand_computed_gram() {
        // Gram of {σ, σ_u, σ_v, Δσ} at (0,0):
        // σ = (1,0,1,0,√2)/√2, σ_u = e₂, σ_v = e₄, Δσ = (−√2, 0, −√2, 0, 0);
        // (σ,Δσ) = −2, (Δσ,Δσ) = 4, (σ_u,σ_u) = (σ_v,σ_v) = 1, rest 0.
        // Eigenvalues 1, 1, 2 ± √8 → (3,1,0).
        let lam = [1.0, 1.0, 2.0 + 8f64.sqrt(), 2.0 - 8f64.sqrt()];
        let hand = Signature::new(
            lam.iter().filter(|&&l| l > 0.0).count(),
            lam.iter().filter(|&&l| l < 0.0).count(),
            0,
        );
        let chart = make_chart(Family::Clifford, 16, 16).unwrap();
        let f = build_congruence(&chart, FdOrder::Second);
        let b = f.basis_v(0).unwrap();
        let g = b.gram();
        assert!((g[(0, 3)] + 2.0).abs() < 1e-12);
        assert!((g[(3, 3)] - 4.0).abs() < 1e-12);
        assert_eq!(signature_of(b, 1e-9), hand);
    }

    #[test]
    fn projector_laws_and_containment() {
        for fam in [Family::Clifford, Family::Torus { r: 0.6 }, Family::Enneper] {
            let chart = make_chart(fam, 16, 16).unwrap();
            let f = build_congruence(&chart, FdOrder::Second);
            for k in [0, 37, 200] {
                let p = f.projectors().get(k).unwrap();
                assert!((p * p - p).norm() < 1e-10);
                // self-adjointness: η π is symmetric
                let ep = crate::minkowski::eta_left(p);
                assert!((&ep - ep.transpose()).norm() < 1e-10);
                let (i, j) = f.grid().ij(k);
                let jet = chart.jet(i, j);
                for v in [&jet.sigma, &jet.su, &jet.sv, &jet.laplacian()] {
                    assert!((p * v - v).norm() < 1e-10 * v.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn clifford_fibre_contains_sigma_and_annihilates_normal() {
        // Minimal in S³: the central sphere is the great sphere (ν, 0)^⊥.
        let chart = make_chart(Family::Clifford, 16, 16).unwrap();
        let f = build_congruence(&chart, FdOrder::Second);
        let p = f.projectors().get(0).unwrap();
        let s = chart.sigma(0, 0);
        assert!((p * &s - &s).norm() < 1e-12);
        let mut normal = chart.polar_lift(0, 0).unwrap().into_inner();
        normal[4] = 0.0;
        assert!((p * &normal).norm() < 1e-12);
        let dual = chart.dual_lift(0, 0).unwrap().into_inner();
        assert!((p * &dual - &dual).norm() < 1e-12);
    }

    #[test]
    fn round_sphere_congruence_is_constant_equatorial_plane() {
        let chart = make_chart(Family::RoundSphere, 16, 16).unwrap();
        let f = build_congruence(&chart, FdOrder::Second);
        let mut want = DMatrix::zeros(5, 5);
        for i in [0, 1, 2, 4] {
            want[(i, i)] = 1.0;
        }
        for k in 0..f.grid().len() {
            assert!((f.projectors().get(k).unwrap() - &want).norm() < 1e-12);
        }
        let a = CongruenceAnalysis::of_field(f, AnalysisConfig::default());
        for k in 0..a.grid().len() {
            if let Some(n) = a.nu.get(k) {
                assert!(n.norm() < 1e-10);
            }
        }
        for kind in ResidualKind::ALL {
            assert_eq!(max_of(a.residuals.get(kind).unwrap()), 0.0, "{kind:?}");
        }
        assert!(a.set_a.iter().flatten().all(|x| !x));
    }

    #[test]
    fn clifford_symmetry_under_torus_rotation() {
        let n = 16;
        let chart = make_chart(Family::Clifford, n, n).unwrap();
        let f = build_congruence(&chart, FdOrder::Second);
        let shift = 3;
        let angle = SQRT_2 * shift as f64 * f.grid().hu;
        let mut r = DMatrix::identity(5, 5);
        r[(0, 0)] = angle.cos();
        r[(0, 1)] = -angle.sin();
        r[(1, 0)] = angle.sin();
        r[(1, 1)] = angle.cos();
        for j in [0, 5, 11] {
            let p0 = f.projectors().get(f.grid().index(2, j)).unwrap();
            let p1 = f.projectors().get(f.grid().index(2 + shift, j)).unwrap();
            assert!((p1 - &r * p0 * r.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn n_is_skew_and_permuting() {
        let a = analysis(Family::Torus { r: 0.6 }, 16, FdOrder::Second);
        for k in 0..a.grid().len() {
            let p = a.field.projectors().get(k).unwrap();
            let q = DMatrix::identity(5, 5) - p;
            for n in [a.nu.get(k).unwrap(), a.nv.get(k).unwrap()] {
                let en = crate::minkowski::eta_left(n);
                assert!((&en + en.transpose()).norm() < 1e-10);
                assert!((p * n * p).norm() < 1e-10);
                assert!((&q * n * &q).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn tension_skewness_is_truncation_error() {
        // D is metric only up to truncation error, hence so is the skewness of τ.
        let skew = |n: usize| {
            let a = analysis(Family::Torus { r: 0.6 }, n, FdOrder::Second);
            (0..a.grid().len())
                .map(|k| {
                    let t = a.tau.get(k).unwrap();
                    let et = crate::minkowski::eta_left(t);
                    (&et + et.transpose()).norm() / t.norm()
                })
                .fold(0.0f64, f64::max)
        };
        let rate = (skew(16) / skew(32)).log2();
        assert!((rate - 2.0).abs() < 0.3, "rate {rate}");
    }

    #[test]
    fn clifford_n_norm_is_homogeneous() {
        let a = analysis(Family::Clifford, 24, FdOrder::Second);
        let s: Vec<f64> = a.scale.iter().flatten().copied().collect();
        let (lo, hi) = s.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
        assert!((hi - lo) / hi < 1e-10);
    }

    #[test]
    fn split_reproduces_flat_derivative() {
        // |∂_X s − D_X s − N_X s| → 0 at second order for s = (sin u, cos v, ...)
        let err = |n: usize| {
            let a = analysis(Family::Torus { r: 0.6 }, n, FdOrder::Second);
            let g = *a.grid();
            let s: Field<DMatrix<f64>> = (0..g.len())
                .map(|k| {
                    let (i, j) = g.ij(k);
                    let (u, v) = g.coords(i, j);
                    Some(DMatrix::from_column_slice(
                        5,
                        1,
                        &[(u / 0.6).sin(), (v / 0.8).cos(), 1.0, (u / 0.6 + v / 0.8).sin(), 0.5],
                    ))
                })
                .collect();
            let ds = derivative(&g, &s, Axis::U, FdOrder::Second);
            let dd = compute_d_section(&a.field, &s, Axis::U);
            let mut worst = 0.0f64;
            for k in 0..g.len() {
                let r = ds[k].as_ref().unwrap() - dd[k].as_ref().unwrap() - a.nu.get(k).unwrap() * s[k].as_ref().unwrap();
                worst = worst.max(r.norm());
            }
            worst
        };
        let rate = (err(32) / err(64)).log2();
        assert!((rate - 2.0).abs() < 0.3, "rate {rate}");
    }

    #[test]
    fn d_is_metric() {
        // ∂_X (s,t) − (D_X s, t) − (s, D_X t) → 0 at second order
        let err = |n: usize| {
            let a = analysis(Family::Catenoid, n, FdOrder::Second);
            let g = *a.grid();
            let sec = |c: f64| -> Field<DMatrix<f64>> {
                (0..g.len())
                    .map(|k| {
                        let (i, j) = g.ij(k);
                        let (u, v) = g.coords(i, j);
                        Some(DMatrix::from_column_slice(
                            5,
                            1,
                            &[(u + c).sin(), v * c, (u * c).cos(), 1.0 + v * v, c],
                        ))
                    })
                    .collect()
            };
            let (s, t) = (sec(0.3), sec(1.7));
            let st: Field<f64> = zip_field(&s, &t, |a, b| {
                crate::minkowski::bilinear(&a.column(0).into_owned(), &b.column(0).into_owned())
            });
            let dst = derivative(&g, &st, Axis::V, FdOrder::Second);
            let ds = compute_d_section(&a.field, &s, Axis::V);
            let dt = compute_d_section(&a.field, &t, Axis::V);
            let mut worst = 0.0f64;
            for k in 0..g.len() {
                if let (Some(d), Some(a1), Some(b1)) = (dst[k], ds[k].as_ref(), dt[k].as_ref()) {
                    let ip = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
                        crate::minkowski::bilinear(&x.column(0).into_owned(), &y.column(0).into_owned())
                    };
                    let r = d - ip(a1, t[k].as_ref().unwrap()) - ip(s[k].as_ref().unwrap(), b1);
                    worst = worst.max(r.abs());
                }
            }
            worst
        };
        let rate = (err(32) / err(64)).log2();
        assert!((rate - 2.0).abs() < 0.35, "rate {rate}");
    }

    #[test]
    fn dzbar_sigma_stays_in_f01() {
        let a = analysis(Family::Clifford, 32, FdOrder::Second);
        let chart = a.field.chart().unwrap().clone();
        let g = *a.grid();
        let s: Field<DMatrix<C64>> = (0..g.len())
            .map(|k| {
                let (i, j) = g.ij(k);
                Some(lift::<C64>(&DMatrix::from_column_slice(5, 1, chart.sigma(i, j).as_slice())))
            })
            .collect();
        let d = compute_dzbar(&a.field, &s);
        for k in [0, 100, 555] {
            let (i, j) = g.ij(k);
            let cd = chart.complex_derivative(i, j);
            let f01 = DMatrix::from_columns(&[s[k].as_ref().unwrap().column(0).into_owned(), cd.dzbar_sigma]);
            let v = d[k].as_ref().unwrap();
            let out = v - euclid_projector(&f01) * v;
            assert!(out.norm() / v.norm() < 1e-2);
        }
    }

    #[test]
    fn n10_kills_f01() {
        let a = analysis(Family::Torus { r: 0.6 }, 32, FdOrder::Second);
        let chart = a.field.chart().unwrap();
        for k in [0, 300, 1000] {
            let (i, j) = a.grid().ij(k);
            let n = a.n10.get(k).unwrap();
            let s = lift::<C64>(&DMatrix::from_column_slice(5, 1, chart.sigma(i, j).as_slice()));
            let cd = chart.complex_derivative(i, j);
            assert!((n * &s).norm() / s.norm() < 1e-10);
            assert!((n * &cd.dzbar_sigma).norm() / (n.norm() * cd.dzbar_sigma.norm()) < 1e-2);
        }
    }

    #[test]
    fn tension_separates_clifford_from_torus() {
        let c32 = max_of(analysis(Family::Clifford, 32, FdOrder::Second).residuals.get(ResidualKind::Tension).unwrap());
        let c64 = max_of(analysis(Family::Clifford, 64, FdOrder::Second).residuals.get(ResidualKind::Tension).unwrap());
        assert!(((c32 / c64).log2() - 2.0).abs() < 0.3);
        let t32 = max_of(analysis(Family::Torus { r: 0.6 }, 32, FdOrder::Second).residuals.get(ResidualKind::Tension).unwrap());
        assert!(t32 > 0.1);
    }

    #[test]
    fn rotating_plane_fails_strong_conformality() {
        // Oracle: N_u = a J₁₄, N_v = b J₂₅ at u = v = 0, hence
        // (N^{1,0})² = ¼(−a² P₁₄ + b² P₂₅) and the residual is
        // √(a⁴ + b⁴) / (2(a² + b²)).
        let (a, b) = (1.0f64, 2.0f64);
        let expected = (a.powi(4) + b.powi(4)).sqrt() / (2.0 * (a * a + b * b));
        let f = CongruenceField::rotating_plane(a, b, 64, 64, FdOrder::Fourth).unwrap();
        let an = CongruenceAnalysis::of_field(f, AnalysisConfig { fd_order: FdOrder::Fourth, ..Default::default() });
        let sc = an.residuals.get(ResidualKind::StrongConformality).unwrap();
        let v = sc[0].unwrap();
        assert!((v - expected).abs() < 1e-3, "{v} vs {expected}");
        assert!(max_of(sc) > 1e-2);
        assert!(an.residuals.get(ResidualKind::Eq5).is_none());
    }

    #[test]
    fn set_a_is_empty_on_builtins() {
        for fam in [Family::Clifford, Family::Torus { r: 0.6 }, Family::RoundSphere] {
            let a = analysis(fam, 24, FdOrder::Second);
            assert!(a.set_a.iter().flatten().all(|x| !x), "{fam}");
        }
    }

    #[test]
    fn n10_rank_matches_codimension() {
        let c = analysis(Family::Clifford, 24, FdOrder::Second);
        assert!(c.n10_rank.iter().flatten().all(|&r| r == 1));
        let t = analysis(Family::FlatTorus { a: 0.55 }, 32, FdOrder::Second);
        assert!(t.n10_rank.iter().flatten().all(|&r| r == 2));
    }

    #[test]
    fn sigma_null_in_v() {
        let chart = make_chart(Family::Enneper, 16, 16).unwrap();
        let f = build_congruence(&chart, FdOrder::Second);
        let b = f.basis_v(40).unwrap();
        let s = MinkowskiVector::new(b.columns().column(0).into_owned()).unwrap();
        assert!(inner(&s, &s).unwrap().abs() < 1e-12);
    }
}
