//! Recovering the surface (and its dual) from the congruence alone.
//!
//! Inputs are the projector field, `N` and `τ` of a [`CongruenceAnalysis`];
//! the generating chart is never consulted here. With
//! `U = N_Z V^⊥ + τ V^⊥` there are three branches:
//!
//! * rank 2: `f = U ∩ Ū` is the unique real null line in `V`;
//! * rank 1: `U = N_Z V^⊥`, and `(U ⊕ Ū)^⊥ ∩ V` is a (1,1)-plane whose two
//!   null lines are a dual pair;
//! * rank 0: `V` is constant and every null line of it qualifies.
//!
//! [`roundtrip_error`] compares the result with the chart afterwards.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::congruence::{
    banded_rank, compute_dzbar, relative_spectrum, u_generators, CongruenceAnalysis, MaskReason,
    ResidualKind, GUARD_BAND, NULL_SCALE,
};
use crate::error::{Error, Result};
use crate::grid::{derivative, Axis, Field, Summary};
use crate::minkowski::{
    bilinear, canonical_direction, euclid_complement, eta_left, line_distance, null_lines_in_plane,
    principal_directions, svd, SubspaceBasis, C64,
};
use crate::surfaces::{immersion_of_jet, Jet, LiftedChart};

/// Largest deviation of `π_V` from its value at the first valid point that
/// still counts as constant.
pub const CONSTANCY_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Rank0Constant,
    Rank1DualPair,
    Rank2Unique,
}

/// Outcome of one hypothesis of the reconstruction theorem over the grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub name: &'static str,
    pub worst: f64,
    pub at: (usize, usize),
    pub threshold: f64,
    pub passed: bool,
}

/// Evaluates strong conformality, `N ∘ τ|_{V^⊥} = 0` and emptiness of the set A.
pub fn check_hypotheses(an: &CongruenceAnalysis) -> Vec<HypothesisCheck> {
    let grid = an.grid();
    let thr = an.config.hypothesis_tol;
    let worst = |kind: ResidualKind| {
        let field = an.residuals.get(kind).expect("residual computed");
        let (k, v) = field
            .iter()
            .enumerate()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .fold((0, 0.0f64), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
        (grid.ij(k), v)
    };
    let (at1, w1) = worst(ResidualKind::StrongConformality);
    let (at2, w2) = worst(ResidualKind::Eq8);
    let a_points: Vec<usize> = an
        .set_a
        .iter()
        .enumerate()
        .filter(|(_, a)| **a == Some(true))
        .map(|(k, _)| k)
        .collect();
    vec![
        HypothesisCheck {
            name: "strong_conformality",
            worst: w1,
            at: at1,
            threshold: thr,
            passed: w1 < thr,
        },
        HypothesisCheck {
            name: "n_tau_vanishes",
            worst: w2,
            at: at2,
            threshold: thr,
            passed: w2 < thr,
        },
        HypothesisCheck {
            name: "set_a_empty",
            worst: a_points.len() as f64,
            at: a_points.first().map(|&k| grid.ij(k)).unwrap_or((0, 0)),
            threshold: 0.0,
            passed: a_points.is_empty(),
        },
    ]
}

fn first_violation(checks: &[HypothesisCheck]) -> Option<Error> {
    checks.iter().find(|c| !c.passed).map(|c| Error::Hypothesis {
        hypothesis: c.name,
        i: c.at.0,
        j: c.at.1,
        value: c.worst,
        threshold: c.threshold,
    })
}

/// Pointwise rank of `U` with an orthonormal basis of it.
#[derive(Clone, Debug)]
pub struct RankClassification {
    pub rank_tol: f64,
    pub rank: Field<usize>,
    /// Orthonormal (Hermitian) basis of `U`, `rank` columns.
    pub basis_u: Field<DMatrix<C64>>,
    /// Relative singular values of the generators of `U`.
    pub spectrum: Field<Vec<f64>>,
    pub mask: Vec<Option<MaskReason>>,
}

impl RankClassification {
    pub fn len(&self) -> usize {
        self.rank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rank.is_empty()
    }

    /// Counts per rank (`rank_0`, ...) and per mask reason (`masked_<reason>`);
    /// the counts sum to the number of grid points.
    pub fn histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for (r, m) in self.rank.iter().zip(&self.mask) {
            let key = match (r, m) {
                (Some(r), _) => format!("rank_{r}"),
                (None, Some(m)) => format!("masked_{}", mask_key(*m)),
                (None, None) => "masked_unknown".to_string(),
            };
            *h.entry(key).or_insert(0) += 1;
        }
        h
    }

    /// Fraction of all grid points classified with rank `r`.
    pub fn fraction(&self, r: usize) -> f64 {
        self.rank.iter().filter(|x| **x == Some(r)).count() as f64 / self.len() as f64
    }

    /// Fraction of classified (unmasked) points with rank `r`.
    pub fn unmasked_fraction(&self, r: usize) -> f64 {
        let n = self.rank.iter().flatten().count();
        if n == 0 {
            return 0.0;
        }
        self.rank.iter().filter(|x| **x == Some(r)).count() as f64 / n as f64
    }
}

pub fn mask_key(m: MaskReason) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{m:?}"))
}

/// Classifies `rank U` after checking the theorem's hypotheses.
pub fn classify_rank_u(an: &CongruenceAnalysis) -> Result<RankClassification> {
    if let Some(e) = first_violation(&check_hypotheses(an)) {
        return Err(e);
    }
    Ok(classify_unchecked(an))
}

/// Classification without the hypothesis gate (for reports on failing data).
pub fn classify_unchecked(an: &CongruenceAnalysis) -> RankClassification {
    let f = &an.field;
    let tol = an.config.rank_tol;
    let per_point: Vec<std::result::Result<(usize, DMatrix<C64>, Vec<f64>), MaskReason>> = (0..f.grid().len())
        .into_par_iter()
        .map(|k| {
            if let Some(m) = f.mask(k) {
                return Err(m);
            }
            let (n10, tau, s) = match (an.n10.get(k), an.tau.get(k), an.scale[k]) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(MaskReason::Stencil),
            };
            let perp = f.perp_basis(k).expect("valid point");
            if s <= NULL_SCALE {
                return Ok((0, DMatrix::zeros(f.dim(), 0), vec![]));
            }
            let (rel, basis) = relative_spectrum(&u_generators(n10, tau, perp, s));
            let r = banded_rank(&rel, tol).ok_or(MaskReason::Indeterminate)?;
            if r > 2 {
                return Err(MaskReason::RankExceeded);
            }
            let basis = if r == 1 {
                // τ is discarded in the rank-1 branch: U = N_Z V^⊥.
                let img = n10 * perp.map(|x| C64::new(x, 0.0));
                relative_spectrum(&img).1.columns(0, 1).into_owned()
            } else {
                basis.columns(0, r).into_owned()
            };
            Ok((r, basis, rel))
        })
        .collect();
    let mut out = RankClassification {
        rank_tol: tol,
        rank: Vec::with_capacity(per_point.len()),
        basis_u: Vec::with_capacity(per_point.len()),
        spectrum: Vec::with_capacity(per_point.len()),
        mask: Vec::with_capacity(per_point.len()),
    };
    for p in per_point {
        match p {
            Ok((r, b, s)) => {
                out.rank.push(Some(r));
                out.basis_u.push(Some(b));
                out.spectrum.push(Some(s));
                out.mask.push(None);
            }
            Err(m) => {
                out.rank.push(None);
                out.basis_u.push(None);
                out.spectrum.push(None);
                out.mask.push(Some(m));
            }
        }
    }
    out
}

/// Largest normalized complex-bilinear Gram entry of a basis of `U`.
pub fn isotropy_residual(basis: &DMatrix<C64>) -> f64 {
    let mut worst = 0.0f64;
    for a in 0..basis.ncols() {
        for b in 0..basis.ncols() {
            let (x, y) = (basis.column(a).into_owned(), basis.column(b).into_owned());
            let g = bilinear(&x, &y).norm();
            worst = worst.max(g / (x.norm() * y.norm()));
        }
    }
    worst
}

/// Recovered null lines, per grid point.
#[derive(Clone, Debug, Default)]
pub struct ReconstructionResult {
    pub branch: Vec<Option<Branch>>,
    /// Euclidean-unit representatives, one per recovered line. Rank-1 points
    /// carry the pair in a labeling that is continuous across the grid.
    pub lines: Vec<Vec<DVector<f64>>>,
    pub mask: Vec<Option<MaskReason>>,
    /// Set when `V` is constant (rank 0 everywhere).
    pub infinitely_many: bool,
    pub constant_projector: Option<DMatrix<f64>>,
    pub constancy_deviation: Option<f64>,
    /// Two null lines of the constant plane, as witnesses of the rank-0 branch.
    pub witnesses: Vec<DVector<f64>>,
    /// Part of `D_Z̄` of the generating sections of `U` that leaves `U` (rank-2 points).
    pub stability: Field<f64>,
    /// Immersion residual of each recovered line field, by label.
    pub immersion: Vec<Field<f64>>,
}

impl ReconstructionResult {
    fn empty(n: usize) -> Self {
        Self {
            branch: vec![None; n],
            lines: vec![vec![]; n],
            mask: vec![None; n],
            stability: vec![None; n],
            ..Default::default()
        }
    }

    /// Number of points per branch.
    pub fn branch_counts(&self) -> BTreeMap<Branch, usize> {
        let mut h = BTreeMap::new();
        for b in self.branch.iter().flatten() {
            *h.entry(*b).or_insert(0) += 1;
        }
        h
    }

    /// The branch taken by the majority of classified points.
    pub fn dominant_branch(&self) -> Option<Branch> {
        self.branch_counts().into_iter().max_by_key(|(_, c)| *c).map(|(b, _)| b)
    }
}

/// Turns a nearly real complex line into a real unit vector.
fn realify(d: &DVector<C64>) -> DVector<f64> {
    let re = d.map(|z| z.re);
    let im = d.map(|z| z.im);
    let dec = svd(&DMatrix::from_columns(&[re, im]));
    dec.u.column(0).into_owned()
}

fn rank2_line(an: &CongruenceAnalysis, basis: &DMatrix<C64>, k: usize) -> std::result::Result<DVector<f64>, MaskReason> {
    let conj = basis.map(|z| z.conj());
    let (dirs, sines) = principal_directions(basis, &conj);
    let tol = an.config.rank_tol;
    if !(sines[0] < tol / GUARD_BAND && sines[1] > tol * GUARD_BAND) {
        return Err(MaskReason::Intersection);
    }
    let p = an.field.projectors().get(k).expect("valid point");
    let v = p * realify(&dirs[0]);
    Ok(canonical_direction(&v / v.norm()))
}

fn rank1_lines(
    an: &CongruenceAnalysis,
    basis: &DMatrix<C64>,
    k: usize,
) -> std::result::Result<[DVector<f64>; 2], MaskReason> {
    let u = basis.column(0).into_owned();
    let tol = an.config.rank_tol;
    let sine = principal_directions(basis, &basis.map(|z| z.conj())).1[0];
    if sine < tol * GUARD_BAND {
        return Err(MaskReason::DualPlane);
    }
    let vb = an.field.basis_v(k).expect("valid point").orthonormal();
    // real span of U ⊕ Ū, then its metric complement inside V
    let real = DMatrix::from_columns(&[u.map(|z| z.re), u.map(|z| z.im)]);
    let m = real.transpose() * eta_left(&vb);
    let coeff = euclid_complement(&m.transpose());
    if coeff.ncols() != 2 {
        return Err(MaskReason::DualPlane);
    }
    let plane = SubspaceBasis::from_columns(&vb * coeff, an.config.tol).map_err(|_| MaskReason::DualPlane)?;
    let (a, b) = null_lines_in_plane(&plane).map_err(|_| MaskReason::DualPlane)?;
    let unit = |s: &SubspaceBasis<f64>| {
        let v = s.columns().column(0).into_owned();
        &v / v.norm()
    };
    Ok([unit(&a), unit(&b)])
}

/// Unit-normalized lines of the rank-1 branch are ordered so that the
/// labels vary continuously over the grid (reference: the previously
/// visited neighbour).
fn relabel_by_continuity(an: &CongruenceAnalysis, res: &mut ReconstructionResult) {
    let grid = *an.grid();
    for k in 0..grid.len() {
        if res.lines[k].len() != 2 {
            continue;
        }
        let (i, j) = grid.ij(k);
        let prev = [(i, j.wrapping_sub(1)), (i.wrapping_sub(1), j)]
            .into_iter()
            .filter(|&(a, b)| a < grid.nu && b < grid.nv)
            .map(|(a, b)| grid.index(a, b))
            .find(|&q| res.lines[q].len() == 2);
        if let Some(q) = prev {
            let keep = line_distance(&res.lines[k][0], &res.lines[q][0]) + line_distance(&res.lines[k][1], &res.lines[q][1]);
            let swap = line_distance(&res.lines[k][0], &res.lines[q][1]) + line_distance(&res.lines[k][1], &res.lines[q][0]);
            if swap < keep {
                res.lines[k].swap(0, 1);
            }
        }
    }
}

fn reconstruct_ranked(an: &CongruenceAnalysis, cls: &RankClassification, only: usize) -> Result<ReconstructionResult> {
    let n = an.grid().len();
    let mut res = ReconstructionResult::empty(n);
    let results: Vec<Option<std::result::Result<Vec<DVector<f64>>, MaskReason>>> = (0..n)
        .into_par_iter()
        .map(|k| {
            if cls.rank[k] != Some(only) {
                return None;
            }
            let basis = cls.basis_u[k].as_ref().expect("classified point");
            Some(match only {
                2 => rank2_line(an, basis, k).map(|l| vec![l]),
                _ => rank1_lines(an, basis, k).map(|l| l.to_vec()),
            })
        })
        .collect();
    if only == 1 {
        let tension = an.residuals.get(ResidualKind::Tension).expect("tension computed");
        for k in 0..n {
            if cls.rank[k] == Some(1) {
                if let Some(t) = tension[k] {
                    if t > an.config.hypothesis_tol {
                        let (i, j) = an.grid().ij(k);
                        return Err(Error::Hypothesis {
                            hypothesis: "harmonic",
                            i,
                            j,
                            value: t,
                            threshold: an.config.hypothesis_tol,
                        });
                    }
                }
            }
        }
    }
    let branch = if only == 2 { Branch::Rank2Unique } else { Branch::Rank1DualPair };
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Some(Ok(lines)) => {
                res.branch[k] = Some(branch);
                res.lines[k] = lines;
            }
            Some(Err(m)) => res.mask[k] = Some(m),
            None => {}
        }
    }
    if only == 2 {
        res.stability = stability_residual(an, cls);
    } else {
        relabel_by_continuity(an, &mut res);
    }
    res.immersion = (0..if only == 2 { 1 } else { 2 }).map(|l| line_immersion(an, &res, l)).collect();
    Ok(res)
}

/// Theorem 7(a) on the rank-2 points of `cls`.
pub fn reconstruct_rank2(an: &CongruenceAnalysis, cls: &RankClassification) -> Result<ReconstructionResult> {
    reconstruct_ranked(an, cls, 2)
}

/// Theorem 7(b) on the rank-1 points of `cls`; fails if `τ` is not small there.
pub fn reconstruct_rank1(an: &CongruenceAnalysis, cls: &RankClassification) -> Result<ReconstructionResult> {
    reconstruct_ranked(an, cls, 1)
}

/// Theorem 7(c): verifies that `V` is constant and returns witnesses.
pub fn reconstruct_rank0(an: &CongruenceAnalysis) -> Result<ReconstructionResult> {
    let f = &an.field;
    let n = f.grid().len();
    let pis = f.projectors();
    let k0 = (0..n)
        .find(|&k| pis.get(k).is_some())
        .ok_or_else(|| Error::Inconsistent("no valid grid point".into()))?;
    let p0 = pis.get(k0).expect("valid");
    let deviation = (0..n)
        .filter_map(|k| pis.get(k).map(|p| (p - p0).norm()))
        .fold(0.0f64, f64::max);
    if deviation > CONSTANCY_TOL {
        return Err(Error::Inconsistent(format!(
            "rank 0 everywhere but V varies (deviation {deviation:.3e})"
        )));
    }
    let basis = f.basis_v(k0).expect("valid");
    let q = basis.orthonormal();
    let eig = crate::minkowski::gram_matrix(&q).symmetric_eigen();
    let ineg = eig.eigenvalues.imin();
    let ipos = eig.eigenvalues.imax();
    let (e1, e2) = (&q * eig.eigenvectors.column(ipos), &q * eig.eigenvectors.column(ineg));
    let plane = SubspaceBasis::from_columns(DMatrix::from_columns(&[e1, e2]), an.config.tol)?;
    let (a, b) = null_lines_in_plane(&plane)?;
    let mut res = ReconstructionResult::empty(n);
    for k in 0..n {
        if pis.get(k).is_some() {
            res.branch[k] = Some(Branch::Rank0Constant);
        } else {
            res.mask[k] = f.mask(k);
        }
    }
    res.infinitely_many = true;
    res.constant_projector = Some(p0.clone());
    res.constancy_deviation = Some(deviation);
    res.witnesses = vec![a.columns().column(0).into_owned(), b.columns().column(0).into_owned()];
    Ok(res)
}

/// Runs the branch that the classification calls for at each point.
///
/// If every classified point has rank 0 the rank-0 branch is taken for the
/// whole grid; otherwise rank-1 and rank-2 points are reconstructed and
/// isolated rank-0 points are left without lines.
pub fn reconstruct(an: &CongruenceAnalysis, cls: &RankClassification) -> Result<ReconstructionResult> {
    let ranks: Vec<usize> = cls.rank.iter().flatten().copied().collect();
    if !ranks.is_empty() && ranks.iter().all(|&r| r == 0) {
        let mut res = reconstruct_rank0(an)?;
        for (k, m) in cls.mask.iter().enumerate() {
            if m.is_some() {
                res.branch[k] = None;
                res.mask[k] = *m;
            }
        }
        return Ok(res);
    }
    let r2 = reconstruct_rank2(an, cls)?;
    let r1 = if ranks.contains(&1) {
        Some(reconstruct_rank1(an, cls)?)
    } else {
        None
    };
    let mut res = r2;
    if let Some(r1) = r1 {
        for k in 0..res.branch.len() {
            if r1.branch[k].is_some() || r1.mask[k].is_some() {
                res.branch[k] = r1.branch[k];
                res.lines[k] = r1.lines[k].clone();
                res.mask[k] = r1.mask[k];
            }
        }
        res.immersion = r1.immersion;
    }
    for k in 0..res.branch.len() {
        if res.branch[k].is_none() && res.mask[k].is_none() {
            res.mask[k] = cls.mask[k];
        }
    }
    Ok(res)
}

/// `|(I − P_U) D_Z̄ g| / (√s |g|)` for the generators `g = [N_Z π^⊥/√s, τ π^⊥/s]`.
fn stability_residual(an: &CongruenceAnalysis, cls: &RankClassification) -> Field<f64> {
    let f = &an.field;
    let n = f.grid().len();
    let gens: Field<DMatrix<C64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let p = f.projectors().get(k)?;
            let s = an.scale[k]?;
            if s <= NULL_SCALE {
                return None;
            }
            let q = DMatrix::identity(p.nrows(), p.ncols()) - p;
            let a = an.n10.get(k)? * q.map(|x| C64::new(x, 0.0)) / C64::new(s.sqrt(), 0.0);
            let t = (an.tau.get(k)? * &q).map(|x| C64::new(x / s, 0.0));
            let mut g = DMatrix::zeros(p.nrows(), 2 * p.ncols());
            g.columns_mut(0, p.ncols()).copy_from(&a);
            g.columns_mut(p.ncols(), p.ncols()).copy_from(&t);
            Some(g)
        })
        .collect();
    let dg = compute_dzbar(f, &gens);
    (0..n)
        .into_par_iter()
        .map(|k| {
            if cls.rank[k] != Some(2) {
                return None;
            }
            let b = cls.basis_u[k].as_ref()?;
            let d = dg[k].as_ref()?;
            let out = d - b * (b.adjoint() * d);
            Some(out.norm() / (an.scale[k]?.sqrt() * gens[k].as_ref()?.norm()))
        })
        .collect()
}

/// Immersion residual of the line field with label `label`, in the gauge
/// where the last coordinate is 1.
fn line_immersion(an: &CongruenceAnalysis, res: &ReconstructionResult, label: usize) -> Field<f64> {
    let grid = *an.grid();
    let order = an.config.fd_order;
    let gauge: Field<DVector<f64>> = res
        .lines
        .iter()
        .map(|ls| {
            let l = ls.get(label)?;
            let t = l[l.len() - 1];
            (t.abs() > 1e-8 * l.norm()).then(|| l / t)
        })
        .collect();
    let du = derivative(&grid, &gauge, Axis::U, order);
    let dv = derivative(&grid, &gauge, Axis::V, order);
    (0..grid.len())
        .map(|k| {
            let s = gauge[k].clone()?;
            let z = DVector::zeros(s.len());
            let jet = Jet {
                sigma: s,
                su: du[k].clone()?,
                sv: dv[k].clone()?,
                suu: z.clone(),
                suv: z.clone(),
                svv: z,
            };
            Some(immersion_of_jet(&jet))
        })
        .collect()
}

/// Round-trip fidelity against the generating chart.
#[derive(Clone, Debug, Default)]
pub struct RoundtripReport {
    /// Projective distance from the recovered line nearest `σ` to `σ`.
    pub error: Field<f64>,
    /// Rank-1 points: distance from the other line to the Willmore dual of the chart.
    pub dual_error: Field<f64>,
    /// Rank-1 points, `n = 3` only: distance from the other line to the polar lift.
    pub polar_error: Field<f64>,
    /// Points where the proximity-to-`σ` label differs from the continuous one.
    pub relabeled: usize,
}

impl RoundtripReport {
    pub fn summary(&self) -> Summary {
        Summary::of(&self.error)
    }
}

/// Per-point projective distance between the recovered line(s) and the chart.
pub fn roundtrip_error(chart: &LiftedChart, result: &ReconstructionResult) -> RoundtripReport {
    let grid = *chart.grid();
    let rows: Vec<(Option<f64>, Option<f64>, Option<f64>, bool)> = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let lines = &result.lines[k];
            if lines.is_empty() {
                return (None, None, None, false);
            }
            let (i, j) = grid.ij(k);
            let s = chart.sigma(i, j);
            let d: Vec<f64> = lines.iter().map(|l| line_distance(l, &s)).collect();
            if lines.len() == 1 {
                return (Some(d[0]), None, None, false);
            }
            let (near, far, swapped) = if d[0] <= d[1] { (0, 1, false) } else { (1, 0, true) };
            let other = &lines[far];
            let dual = chart.dual_lift(i, j).ok().map(|x| line_distance(other, x.coords()));
            let polar = chart.polar_lift(i, j).ok().map(|x| line_distance(other, x.coords()));
            (Some(d[near]), dual, polar, swapped)
        })
        .collect();
    let mut rep = RoundtripReport::default();
    for (e, d, p, sw) in rows {
        rep.error.push(e);
        rep.dual_error.push(d);
        rep.polar_error.push(p);
        rep.relabeled += sw as usize;
    }
    rep
}

/// Grid points where `rank(N^{1,0}|_{V^⊥}) = 2` and the `N∘τ` residual is
/// below `eq8_tol` but the `τ²` residual is not below `eq9_tol`.
pub fn eq7_redundancy_counterexamples(an: &CongruenceAnalysis, eq8_tol: f64, eq9_tol: f64) -> (usize, Vec<usize>) {
    let eq8 = an.residuals.get(ResidualKind::Eq8).expect("eq8");
    let eq9 = an.residuals.get(ResidualKind::Eq9).expect("eq9");
    let mut premises = 0;
    let mut bad = vec![];
    for k in 0..an.grid().len() {
        if let (Some(2), Some(a), Some(b)) = (an.n10_rank[k], eq8[k], eq9[k]) {
            if a < eq8_tol {
                premises += 1;
                if b >= eq9_tol {
                    bad.push(k);
                }
            }
        }
    }
    (premises, bad)
}

/// `|N^{1,0} W| / (|N^{1,0}| |W|)` for `W = ℓ ⊕ U` (Prop. 5: `W ≤ ker N^{1,0}`).
pub fn prop5_residual(n10: &DMatrix<C64>, line: &DVector<f64>, basis_u: &DMatrix<C64>) -> f64 {
    let mut w = DMatrix::zeros(line.len(), 1 + basis_u.ncols());
    w.set_column(0, &line.map(|x| C64::new(x, 0.0)));
    w.columns_mut(1, basis_u.ncols()).copy_from(basis_u);
    let den = n10.norm() * w.norm();
    if den == 0.0 {
        return 0.0;
    }
    (n10 * w).norm() / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::congruence::AnalysisConfig;
    use crate::grid::FdOrder;
    use crate::minkowski::{inner, MinkowskiVector};
    use crate::surfaces::{make_chart, Family};
    use proptest::prelude::*;

    fn run(f: Family, n: usize) -> (LiftedChart, CongruenceAnalysis, RankClassification) {
        let chart = make_chart(f, n, n).unwrap();
        let an = CongruenceAnalysis::of_chart(&chart, AnalysisConfig::default());
        let cls = classify_rank_u(&an).unwrap();
        (chart, an, cls)
    }

    #[test]
    fn round_sphere_is_rank_zero_with_equatorial_witnesses() {
        let (_, an, cls) = run(Family::RoundSphere, 16);
        assert!(cls.rank.iter().flatten().all(|&r| r == 0));
        let res = reconstruct(&an, &cls).unwrap();
        assert!(res.infinitely_many);
        assert!(res.constancy_deviation.unwrap() < CONSTANCY_TOL);
        let p = res.constant_projector.as_ref().unwrap();
        for w in &res.witnesses {
            let v = MinkowskiVector::new(w.clone()).unwrap();
            assert!(inner(&v, &v).unwrap().abs() < 1e-12);
            assert!((p * w - w).norm() < 1e-12);
            // a point of the equatorial S²: x₄ = 0
            assert!(w[3].abs() < 1e-12);
        }
    }

    #[test]
    fn clifford_is_rank_one_and_never_rank_zero() {
        let (chart, an, cls) = run(Family::Clifford, 24);
        assert_eq!(cls.fraction(1), 1.0);
        assert!(reconstruct_rank0(&an).is_err());
        let res = reconstruct(&an, &cls).unwrap();
        assert_eq!(res.dominant_branch(), Some(Branch::Rank1DualPair));
        let rt = roundtrip_error(&chart, &res);
        assert!(rt.summary().max < 1e-8);
        assert!(Summary::of(&rt.dual_error).max < 1e-8);
        for k in [0, 100, 333] {
            for l in &res.lines[k] {
                let v = MinkowskiVector::new(l.clone()).unwrap();
                assert!(inner(&v, &v).unwrap().abs() < 1e-10);
                let p = an.field.projectors().get(k).unwrap();
                assert!((p * l - l).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_pair_satisfies_prop5_both_ways() {
        let (_, an, cls) = run(Family::Clifford, 24);
        let res = reconstruct(&an, &cls).unwrap();
        for k in [3, 77, 400] {
            let n10 = an.n10.get(k).unwrap();
            let b = cls.basis_u[k].as_ref().unwrap();
            for l in &res.lines[k] {
                assert!(prop5_residual(n10, l, b) < 1e-8);
            }
        }
    }

    #[test]
    fn torus_is_rank_two_with_isotropic_u() {
        let (chart, an, cls) = run(Family::Torus { r: 0.6 }, 64);
        assert!(cls.fraction(2) > 0.99, "{:?}", cls.histogram());
        for b in cls.basis_u.iter().flatten() {
            assert!(isotropy_residual(b) < 1e-2);
        }
        let res = reconstruct(&an, &cls).unwrap();
        let rt = roundtrip_error(&chart, &res);
        assert!(rt.summary().max < 5e-2);
        assert!(Summary::of(&res.stability).max < 5e-2);
        for k in [0, 500] {
            let l = &res.lines[k][0];
            let p = an.field.projectors().get(k).unwrap();
            assert!((p * l - l).norm() < 1e-12);
            let v = MinkowskiVector::new(l.clone()).unwrap();
            assert!(inner(&v, &v).unwrap().abs() < 1e-2);
        }
    }

    #[test]
    fn torus_roundtrip_converges_at_second_order() {
        let err = |n| {
            let (chart, an, cls) = run(Family::Torus { r: 0.6 }, n);
            roundtrip_error(&chart, &reconstruct(&an, &cls).unwrap()).summary().max
        };
        let rate = (err(32) / err(64)).log2();
        assert!((rate - 2.0).abs() < 0.3, "rate {rate}");
    }

    #[test]
    fn histogram_sums_to_grid_size() {
        let (_, _, cls) = run(Family::Catenoid, 20);
        let h = cls.histogram();
        assert_eq!(h.values().sum::<usize>(), 400);
        let chart = make_chart(Family::Catenoid, 20, 20).unwrap();
        let f = crate::congruence::build_congruence(&chart, FdOrder::Second);
        let an = CongruenceAnalysis::of_field(f, AnalysisConfig::default());
        let h = classify_unchecked(&an).histogram();
        assert_eq!(h.values().sum::<usize>(), 400);
    }

    #[test]
    fn hypothesis_violation_is_typed() {
        let f = crate::congruence::CongruenceField::rotating_plane(1.0, 2.0, 32, 32, FdOrder::Second).unwrap();
        let an = CongruenceAnalysis::of_field(f, AnalysisConfig::default());
        match classify_rank_u(&an) {
            Err(Error::Hypothesis { hypothesis, .. }) => assert_eq!(hypothesis, "strong_conformality"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn catenoid_dual_is_point_at_infinity() {
        let (chart, an, cls) = run(Family::Catenoid, 48);
        assert!(cls.unmasked_fraction(1) == 1.0, "{:?}", cls.histogram());
        let res = reconstruct(&an, &cls).unwrap();
        let rt = roundtrip_error(&chart, &res);
        assert!(Summary::of(&rt.dual_error).max < 1e-2);
        // the constant dual does not immerse
        let far: Vec<f64> = (0..2).map(|l| Summary::of(&res.immersion[l]).max).collect();
        assert!(far.iter().any(|&x| x < 1e-2) && far.iter().any(|&x| x > 1e-1), "{far:?}");
    }

    #[test]
    fn eq7_redundancy_on_flat_torus() {
        let chart = make_chart(Family::FlatTorus { a: 0.55 }, 48, 48).unwrap();
        let an = CongruenceAnalysis::of_chart(
            &chart,
            AnalysisConfig {
                fd_order: FdOrder::Fourth,
                ..Default::default()
            },
        );
        let (premises, bad) = eq7_redundancy_counterexamples(&an, 1e-4, 1e-3);
        assert!(premises > 0);
        assert!(bad.is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn rank_two_line_ignores_basis_recombination(
            k in 0usize..1024,
            a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, d in -2.0f64..2.0,
            phase in 0.0f64..6.28,
        ) {
            prop_assume!((a * d - b * c).abs() > 0.1);
            let (_, an, cls) = &*TORUS32;
            prop_assume!(cls.rank[k] == Some(2));
            let basis = cls.basis_u[k].as_ref().unwrap();
            let mix = DMatrix::from_row_slice(2, 2, &[
                C64::new(a, 0.0), C64::from_polar(b, phase), C64::new(c, 0.0), C64::new(d, 0.0),
            ]);
            let other = crate::minkowski::orthonormalize(&(basis * mix));
            let l1 = rank2_line(an, basis, k).unwrap();
            let l2 = rank2_line(an, &other, k).unwrap();
            prop_assert!(line_distance(&l1, &l2) < 1e-10);
            // the conjugate subspace gives the same real line
            let l3 = rank2_line(an, &basis.map(|z| z.conj()), k).unwrap();
            prop_assert!(line_distance(&l1, &l3) < 1e-10);
        }
    }

    static TORUS32: std::sync::LazyLock<(LiftedChart, CongruenceAnalysis, RankClassification)> =
        std::sync::LazyLock::new(|| run(Family::Torus { r: 0.6 }, 32));
}
