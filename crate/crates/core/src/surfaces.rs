//! Conformally parametrized test surfaces and their lightcone lifts.
//!
//! Every built-in family comes with an analytic 2-jet of its lift, so that
//! the only discretization error downstream is the one introduced by
//! differentiating the projector field.

use std::collections::BTreeMap;
use std::f64::consts::{SQRT_2, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix4};

use crate::error::{Error, Result};
use crate::grid::{Domain, FdOrder, Grid};
use crate::minkowski::{bilinear, MinkowskiVector, C64};

/// Lift and its partial derivatives up to second order at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub sigma: DVector<f64>,
    pub su: DVector<f64>,
    pub sv: DVector<f64>,
    pub suu: DVector<f64>,
    pub suv: DVector<f64>,
    pub svv: DVector<f64>,
}

/// A real function and its partials up to second order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarJet {
    pub f: f64,
    pub fu: f64,
    pub fv: f64,
    pub fuu: f64,
    pub fuv: f64,
    pub fvv: f64,
}

impl Jet {
    pub fn laplacian(&self) -> DVector<f64> {
        &self.suu + &self.svv
    }

    /// Jet of `λσ` by the product rule.
    pub fn scaled(&self, l: &ScalarJet) -> Jet {
        let s = &self.sigma;
        Jet {
            sigma: s * l.f,
            su: s * l.fu + &self.su * l.f,
            sv: s * l.fv + &self.sv * l.f,
            suu: s * l.fuu + &self.su * (2.0 * l.fu) + &self.suu * l.f,
            suv: s * l.fuv + &self.su * l.fv + &self.sv * l.fu + &self.suv * l.f,
            svv: s * l.fvv + &self.sv * (2.0 * l.fv) + &self.svv * l.f,
        }
    }

    /// Embeds `R^{k+1,1}` into `R^{m−1,1}` by inserting zero spacelike coordinates.
    pub fn padded(&self, m: usize) -> Jet {
        let pad = |v: &DVector<f64>| {
            let k = v.len();
            let mut out = DVector::zeros(m);
            out.rows_mut(0, k - 1).copy_from(&v.rows(0, k - 1));
            out[m - 1] = v[k - 1];
            out
        };
        Jet {
            sigma: pad(&self.sigma),
            su: pad(&self.su),
            sv: pad(&self.sv),
            suu: pad(&self.suu),
            suv: pad(&self.suv),
            svv: pad(&self.svv),
        }
    }

    fn sheared(&self, s: f64) -> Jet {
        Jet {
            sigma: self.sigma.clone(),
            su: &self.su + &self.sv * s,
            sv: self.sv.clone(),
            suu: &self.suu + &self.suv * (2.0 * s) + &self.svv * (s * s),
            suv: &self.suv + &self.svv * s,
            svv: self.svv.clone(),
        }
    }
}

/// `∂_Z σ` and `∂_Z̄ σ` for the coordinate field `Z = ∂/∂z`, `z = u + iv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexDerivative {
    pub dz_sigma: DVector<C64>,
    pub dzbar_sigma: DVector<C64>,
}

impl ComplexDerivative {
    pub fn from_jet(jet: &Jet) -> Self {
        let dz: DVector<C64> =
            DVector::from_fn(jet.su.len(), |i, _| C64::new(0.5 * jet.su[i], -0.5 * jet.sv[i]));
        Self {
            dzbar_sigma: dz.map(|z| z.conj()),
            dz_sigma: dz,
        }
    }
}

/// Built-in surface families.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    /// Stereographic coordinates on the equatorial S² ⊂ S³.
    RoundSphere,
    /// The Clifford torus, minimal in S³.
    Clifford,
    /// Flat torus `S¹(r) × S¹(√(1−r²)) ⊂ S³`.
    Torus { r: f64 },
    /// Catenoid in R³ ⊂ S³.
    Catenoid,
    /// Enneper's surface in R³ ⊂ S³.
    Enneper,
    /// Flat torus in S⁷ spanned by four circles with wave vectors
    /// `(1,1), (1,−1), (1,0), (0,1)` and amplitudes `a, a, b, b`, `2a² + 2b² = 1`.
    FlatTorus { a: f64 },
}

impl Family {
    /// Numeric parameters by name.
    pub fn params(&self) -> BTreeMap<String, f64> {
        match *self {
            Family::Torus { r } => BTreeMap::from([("r".to_string(), r)]),
            Family::FlatTorus { a } => BTreeMap::from([("a".to_string(), a)]),
            _ => BTreeMap::new(),
        }
    }

    /// Dimension `n` of the sphere the family natively lives in.
    pub fn native_n(&self) -> usize {
        match self {
            Family::FlatTorus { .. } => 7,
            _ => 3,
        }
    }

    pub fn domain(&self) -> Domain {
        match *self {
            Family::RoundSphere | Family::Enneper => Domain {
                u: (-1.0, 1.0),
                v: (-1.0, 1.0),
                periodic: [false, false],
            },
            Family::Clifford => torus_domain(1.0 / SQRT_2),
            Family::Torus { r } => torus_domain(r),
            Family::Catenoid => Domain {
                u: (0.0, TAU),
                v: (-1.0, 1.0),
                periodic: [true, false],
            },
            Family::FlatTorus { .. } => Domain {
                u: (0.0, TAU),
                v: (0.0, TAU),
                periodic: [true, true],
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidParams {
                family: self.to_string(),
                reason: reason.into(),
            })
        };
        match *self {
            Family::Torus { r } if !(r > 0.0 && r < 1.0) => bad("need 0 < r < 1"),
            Family::FlatTorus { a } if !(a > 0.0 && a < 1.0 / SQRT_2) => {
                bad("need 0 < a < 1/sqrt(2)")
            }
            _ => Ok(()),
        }
    }

    /// Analytic jet of the lift at `(u, v)`.
    pub fn jet(&self, u: f64, v: f64) -> Jet {
        match *self {
            Family::RoundSphere => round_sphere_jet(u, v),
            Family::Clifford => circle_product_jet(&torus_circles(1.0 / SQRT_2), u, v),
            Family::Torus { r } => circle_product_jet(&torus_circles(r), u, v),
            Family::Catenoid => euclidean_lift_jet(&catenoid(u, v)),
            Family::Enneper => euclidean_lift_jet(&enneper(u, v)),
            Family::FlatTorus { a } => circle_product_jet(&flat_torus_circles(a), u, v),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::RoundSphere => write!(f, "round_sphere"),
            Family::Clifford => write!(f, "clifford"),
            Family::Torus { r } => write!(f, "torus:r={r}"),
            Family::Catenoid => write!(f, "catenoid"),
            Family::Enneper => write!(f, "enneper"),
            Family::FlatTorus { a } => write!(f, "flat_torus:a={a}"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    /// Parses `family[:k=v,...]`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = Vec::new();
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidParams {
                family: name.into(),
                reason: format!("expected k=v, got `{kv}`"),
            })?;
            let v: f64 = v.trim().parse().map_err(|_| Error::InvalidParams {
                family: name.into(),
                reason: format!("`{v}` is not a number"),
            })?;
            params.push((k.trim().to_string(), v));
        }
        let take = |key: &str, default: Option<f64>| -> Result<f64> {
            for (k, _) in &params {
                if k != key {
                    return Err(Error::InvalidParams {
                        family: name.into(),
                        reason: format!("unknown parameter `{k}`"),
                    });
                }
            }
            params
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .or(default)
                .ok_or_else(|| Error::InvalidParams {
                    family: name.into(),
                    reason: format!("missing parameter `{key}`"),
                })
        };
        let no_params = || {
            if params.is_empty() {
                Ok(())
            } else {
                Err(Error::InvalidParams {
                    family: name.into(),
                    reason: "takes no parameters".into(),
                })
            }
        };
        let fam = match name {
            "round_sphere" => no_params().map(|_| Family::RoundSphere)?,
            "clifford" => no_params().map(|_| Family::Clifford)?,
            "catenoid" => no_params().map(|_| Family::Catenoid)?,
            "enneper" => no_params().map(|_| Family::Enneper)?,
            "torus" | "torus_of_revolution" => Family::Torus {
                r: take("r", None)?,
            },
            "flat_torus" => Family::FlatTorus {
                a: take("a", Some(0.55))?,
            },
            other => return Err(Error::UnknownFamily(other.into())),
        };
        fam.validate()?;
        Ok(fam)
    }
}

fn torus_domain(r: f64) -> Domain {
    let big_r = (1.0 - r * r).sqrt();
    Domain {
        u: (0.0, TAU * r),
        v: (0.0, TAU * big_r),
        periodic: [true, true],
    }
}

/// `(amplitude, p, q)`: the circle `a (cos t, sin t)`, `t = p u + q v`.
type Circle = (f64, f64, f64);

fn torus_circles(r: f64) -> Vec<Circle> {
    let big_r = (1.0 - r * r).sqrt();
    vec![(r, 1.0 / r, 0.0), (big_r, 0.0, 1.0 / big_r)]
}

fn flat_torus_circles(a: f64) -> Vec<Circle> {
    let b = (0.5 - a * a).sqrt();
    vec![(a, 1.0, 1.0), (a, 1.0, -1.0), (b, 1.0, 0.0), (b, 0.0, 1.0)]
}

fn circle_product_jet(circles: &[Circle], u: f64, v: f64) -> Jet {
    let m = 2 * circles.len() + 1;
    let mut jet = Jet {
        sigma: DVector::zeros(m),
        su: DVector::zeros(m),
        sv: DVector::zeros(m),
        suu: DVector::zeros(m),
        suv: DVector::zeros(m),
        svv: DVector::zeros(m),
    };
    for (k, &(a, p, q)) in circles.iter().enumerate() {
        let (s, c) = (p * u + q * v).sin_cos();
        let (i, j) = (2 * k, 2 * k + 1);
        jet.sigma[i] = a * c;
        jet.sigma[j] = a * s;
        jet.su[i] = -a * p * s;
        jet.su[j] = a * p * c;
        jet.sv[i] = -a * q * s;
        jet.sv[j] = a * q * c;
        jet.suu[i] = -a * p * p * c;
        jet.suu[j] = -a * p * p * s;
        jet.suv[i] = -a * p * q * c;
        jet.suv[j] = -a * p * q * s;
        jet.svv[i] = -a * q * q * c;
        jet.svv[j] = -a * q * q * s;
    }
    jet.sigma[m - 1] = 1.0;
    jet
}

fn round_sphere_jet(u: f64, v: f64) -> Jet {
    // Polynomial lift (2u, 2v, 1 − ρ, 0, 1 + ρ) rescaled by 1/(1 + ρ).
    let rho = u * u + v * v;
    let poly = Jet {
        sigma: DVector::from_column_slice(&[2.0 * u, 2.0 * v, 1.0 - rho, 0.0, 1.0 + rho]),
        su: DVector::from_column_slice(&[2.0, 0.0, -2.0 * u, 0.0, 2.0 * u]),
        sv: DVector::from_column_slice(&[0.0, 2.0, -2.0 * v, 0.0, 2.0 * v]),
        suu: DVector::from_column_slice(&[0.0, 0.0, -2.0, 0.0, 2.0]),
        suv: DVector::zeros(5),
        svv: DVector::from_column_slice(&[0.0, 0.0, -2.0, 0.0, 2.0]),
    };
    let d = 1.0 + rho;
    let (d2, d3) = (d * d, d * d * d);
    poly.scaled(&ScalarJet {
        f: 1.0 / d,
        fu: -2.0 * u / d2,
        fv: -2.0 * v / d2,
        fuu: -2.0 / d2 + 8.0 * u * u / d3,
        fuv: 8.0 * u * v / d3,
        fvv: -2.0 / d2 + 8.0 * v * v / d3,
    })
}

/// 2-jet of a parametrized surface in R³.
struct EuclideanJet {
    y: [f64; 3],
    yu: [f64; 3],
    yv: [f64; 3],
    yuu: [f64; 3],
    yuv: [f64; 3],
    yvv: [f64; 3],
}

fn catenoid(u: f64, v: f64) -> EuclideanJet {
    let (s, c) = u.sin_cos();
    let (ch, sh) = (v.cosh(), v.sinh());
    EuclideanJet {
        y: [ch * c, ch * s, v],
        yu: [-ch * s, ch * c, 0.0],
        yv: [sh * c, sh * s, 1.0],
        yuu: [-ch * c, -ch * s, 0.0],
        yuv: [-sh * s, sh * c, 0.0],
        yvv: [ch * c, ch * s, 0.0],
    }
}

fn enneper(u: f64, v: f64) -> EuclideanJet {
    EuclideanJet {
        y: [
            u - u * u * u / 3.0 + u * v * v,
            -v + v * v * v / 3.0 - u * u * v,
            u * u - v * v,
        ],
        yu: [1.0 - u * u + v * v, -2.0 * u * v, 2.0 * u],
        yv: [2.0 * u * v, -1.0 + v * v - u * u, -2.0 * v],
        yuu: [-2.0 * u, -2.0 * v, 2.0],
        yuv: [2.0 * v, -2.0 * u, 0.0],
        yvv: [2.0 * u, 2.0 * v, -2.0],
    }
}

/// Lift `y ↦ (y, (1 − |y|²)/2, (1 + |y|²)/2)` of R³ into the lightcone of R^{4,1}.
fn euclidean_lift_jet(e: &EuclideanJet) -> Jet {
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let q = 0.5 * dot(&e.y, &e.y);
    let qu = dot(&e.y, &e.yu);
    let qv = dot(&e.y, &e.yv);
    let quu = dot(&e.yu, &e.yu) + dot(&e.y, &e.yuu);
    let quv = dot(&e.yu, &e.yv) + dot(&e.y, &e.yuv);
    let qvv = dot(&e.yv, &e.yv) + dot(&e.y, &e.yvv);
    let vec = |y: &[f64; 3], a: f64, b: f64| DVector::from_column_slice(&[y[0], y[1], y[2], a, b]);
    Jet {
        sigma: vec(&e.y, 0.5 - q, 0.5 + q),
        su: vec(&e.yu, -qu, qu),
        sv: vec(&e.yv, -qv, qv),
        suu: vec(&e.yuu, -quu, quu),
        suv: vec(&e.yuv, -quv, quv),
        svv: vec(&e.yvv, -qvv, qvv),
    }
}

type JetFn = Arc<dyn Fn(f64, f64) -> Jet + Send + Sync>;
type LiftFn = Arc<dyn Fn(f64, f64) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
enum JetSource {
    Analytic(JetFn),
    /// Only the lift is known; jets come from finite differences of it.
    Lift(LiftFn, FdOrder),
}

/// A grid-sampled lightcone lift of a conformally parametrized surface patch.
#[derive(Clone)]
pub struct LiftedChart {
    name: String,
    family: Option<Family>,
    n: usize,
    grid: Grid,
    source: JetSource,
}

impl fmt::Debug for LiftedChart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LiftedChart")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("grid", &self.grid)
            .finish()
    }
}

/// Smallest accepted grid size per axis.
pub const MIN_GRID: usize = 8;

/// Builds a built-in chart sampled on `nu × nv` points.
pub fn make_chart(family: Family, nu: usize, nv: usize) -> Result<LiftedChart> {
    family.validate()?;
    if nu < MIN_GRID || nv < MIN_GRID {
        return Err(Error::InvalidParams {
            family: family.to_string(),
            reason: format!("grid {nu}x{nv} smaller than {MIN_GRID}x{MIN_GRID}"),
        });
    }
    Ok(LiftedChart {
        name: family.to_string(),
        family: Some(family),
        n: family.native_n(),
        grid: Grid::new(family.domain(), nu, nv),
        source: JetSource::Analytic(Arc::new(move |u, v| family.jet(u, v))),
    })
}

impl LiftedChart {
    /// Chart known only through its lift; jets are finite differences of
    /// `lift` with spacing equal to the grid spacing.
    pub fn from_lift(
        name: impl Into<String>,
        domain: Domain,
        nu: usize,
        nv: usize,
        order: FdOrder,
        lift: impl Fn(f64, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        let name = name.into();
        let m = lift(domain.u.0, domain.v.0).len();
        if m < 5 {
            return Err(Error::AmbientTooSmall(m));
        }
        Ok(Self {
            name,
            family: None,
            n: m - 2,
            grid: Grid::new(domain, nu, nv),
            source: JetSource::Lift(Arc::new(lift), order),
        })
    }

    /// The constant chart `σ(u, v) = σ₀`, which never immerses.
    pub fn constant(sigma0: DVector<f64>, domain: Domain, nu: usize, nv: usize) -> Result<Self> {
        let m = sigma0.len();
        if m < 5 {
            return Err(Error::AmbientTooSmall(m));
        }
        let zero = DVector::zeros(m);
        let jet = Jet {
            sigma: sigma0,
            su: zero.clone(),
            sv: zero.clone(),
            suu: zero.clone(),
            suv: zero.clone(),
            svv: zero,
        };
        Ok(Self {
            name: "constant".into(),
            family: None,
            n: m - 2,
            grid: Grid::new(domain, nu, nv),
            source: JetSource::Analytic(Arc::new(move |_, _| jet.clone())),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn family(&self) -> Option<Family> {
        self.family
    }

    /// Dimension of the conformal sphere `Sⁿ`; coordinates have length `n + 2`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ambient_dim(&self) -> usize {
        self.n + 2
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn has_analytic_jet(&self) -> bool {
        matches!(self.source, JetSource::Analytic(_))
    }

    /// Same surface inside `Sⁿ` for a larger `n`.
    pub fn with_ambient(&self, n: usize) -> Result<Self> {
        if n < self.n {
            return Err(Error::InvalidParams {
                family: self.name.clone(),
                reason: format!("n = {n} below the native n = {}", self.n),
            });
        }
        if n == self.n {
            return Ok(self.clone());
        }
        let m = n + 2;
        let source = match self.source.clone() {
            JetSource::Analytic(f) => JetSource::Analytic(Arc::new(move |u, v| f(u, v).padded(m))),
            JetSource::Lift(f, order) => JetSource::Lift(
                Arc::new(move |u, v| {
                    let s = f(u, v);
                    let k = s.len();
                    let mut out = DVector::zeros(m);
                    out.rows_mut(0, k - 1).copy_from(&s.rows(0, k - 1));
                    out[m - 1] = s[k - 1];
                    out
                }),
                order,
            ),
        };
        Ok(Self {
            n,
            source,
            ..self.clone()
        })
    }

    /// Same surface with the lift rescaled `σ ↦ λσ`.
    pub fn rescaled(&self, lambda: impl Fn(f64, f64) -> ScalarJet + Send + Sync + 'static) -> Self {
        let source = match self.source.clone() {
            JetSource::Analytic(f) => {
                JetSource::Analytic(Arc::new(move |u, v| f(u, v).scaled(&lambda(u, v))))
            }
            JetSource::Lift(f, order) => {
                JetSource::Lift(Arc::new(move |u, v| f(u, v) * lambda(u, v).f), order)
            }
        };
        Self {
            name: format!("{}[rescaled]", self.name),
            source,
            ..self.clone()
        }
    }

    /// The reparametrization `(u, v) ↦ (u, v + s·u)`, which is not conformal
    /// for `s ≠ 0`. Periodicity in `u` is dropped.
    pub fn sheared(&self, s: f64) -> Self {
        let source = match self.source.clone() {
            JetSource::Analytic(f) => {
                JetSource::Analytic(Arc::new(move |u, v| f(u, v + s * u).sheared(s)))
            }
            JetSource::Lift(f, order) => JetSource::Lift(Arc::new(move |u, v| f(u, v + s * u)), order),
        };
        let mut domain = self.grid.domain;
        domain.periodic[0] = false;
        Self {
            name: format!("{}[sheared {s}]", self.name),
            family: None,
            grid: Grid::new(domain, self.grid.nu, self.grid.nv),
            source,
            ..self.clone()
        }
    }

    /// The same chart sampled on its grid extended by `pad` points beyond
    /// each non-periodic edge (the lift is assumed to extend), and the offset
    /// of the original grid inside the extended one.
    pub fn with_margin(&self, pad: usize) -> (Self, [usize; 2]) {
        let (grid, off) = self.grid.with_margin(pad);
        (Self { grid, ..self.clone() }, off)
    }

    /// Lift at arbitrary parameter values.
    pub fn lift_at(&self, u: f64, v: f64) -> DVector<f64> {
        match &self.source {
            JetSource::Analytic(f) => f(u, v).sigma,
            JetSource::Lift(f, _) => f(u, v),
        }
    }

    /// Jet at arbitrary parameter values; finite-difference jets use the grid spacing.
    pub fn jet_at(&self, u: f64, v: f64) -> Jet {
        match &self.source {
            JetSource::Analytic(f) => f(u, v),
            JetSource::Lift(f, order) => fd_jet(f.as_ref(), u, v, self.grid.hu, self.grid.hv, *order),
        }
    }

    pub fn jet(&self, i: usize, j: usize) -> Jet {
        let (u, v) = self.grid.coords(i, j);
        self.jet_at(u, v)
    }

    pub fn sigma(&self, i: usize, j: usize) -> DVector<f64> {
        let (u, v) = self.grid.coords(i, j);
        self.lift_at(u, v)
    }

    pub fn complex_derivative(&self, i: usize, j: usize) -> ComplexDerivative {
        ComplexDerivative::from_jet(&self.jet(i, j))
    }

    /// `|(∂_Zσ, ∂_Zσ)| / (∂_Zσ, ∂_Z̄σ)`.
    ///
    /// Both numerator and denominator pick up the same factor `λ²` under
    /// `σ ↦ λσ` because `σ` is null and orthogonal to its derivatives, so the
    /// ratio does not depend on the lift. Zero where the denominator vanishes.
    pub fn conformality_residual(&self, i: usize, j: usize) -> f64 {
        conformality_of_jet(&self.jet(i, j))
    }

    /// Smallest singular value of `[σ_u σ_v]` with the `σ` direction projected
    /// out, divided by `|σ|`. Zero at branch points and for constant maps.
    pub fn immersion_residual(&self, i: usize, j: usize) -> f64 {
        immersion_of_jet(&self.jet(i, j))
    }

    /// Lift `(ν, 1)` of the unit normal `ν` of the surface in S³.
    ///
    /// Only defined for `n = 3`; orientation is `ν = −⋆(x ∧ x_u ∧ x_v)`,
    /// which gives `ν = (−cos a, −sin a, cos b, sin b)/√2` on the Clifford torus.
    pub fn polar_lift(&self, i: usize, j: usize) -> Result<MinkowskiVector> {
        if self.ambient_dim() != 5 {
            return Err(Error::Unsupported(format!("polar lift of {} (n = {})", self.name, self.n)));
        }
        let jet = self.jet(i, j);
        let t = jet.sigma[4];
        if t.abs() < 1e-300 {
            return Err(Error::Unsupported(format!("polar lift of {}: zero lift", self.name)));
        }
        let x: DVector<f64> = jet.sigma.rows(0, 4) / t;
        let xu: DVector<f64> = (jet.su.rows(0, 4) - &x * jet.su[4]) / t;
        let xv: DVector<f64> = (jet.sv.rows(0, 4) - &x * jet.sv[4]) / t;
        let mut nu = DVector::zeros(4);
        for k in 0..4 {
            let mut m = Matrix4::zeros();
            for c in 0..4 {
                m[(0, c)] = x[c];
                m[(1, c)] = xu[c];
                m[(2, c)] = xv[c];
            }
            m[(3, k)] = 1.0;
            nu[k] = -m.determinant();
        }
        let norm = nu.norm();
        if norm == 0.0 {
            return Err(Error::Unsupported(format!("polar lift of {}: not immersed", self.name)));
        }
        let mut out = DVector::zeros(5);
        out.rows_mut(0, 4).copy_from(&(nu / norm));
        out[4] = 1.0;
        MinkowskiVector::new(out)
    }
}

impl LiftedChart {
    /// The second null line of `V ∩ {σ_u, σ_v}^⊥`, i.e. the Willmore dual point.
    ///
    /// In conformal coordinates `Δσ ⊥ σ_u, σ_v`, so that plane is
    /// `span{σ, Δσ}` and the dual is `Δσ − (Δσ,Δσ)/(2(σ,Δσ)) σ`.
    pub fn dual_lift(&self, i: usize, j: usize) -> Result<MinkowskiVector> {
        let jet = self.jet(i, j);
        let lap = jet.laplacian();
        let sl = bilinear(&jet.sigma, &lap);
        if sl.abs() < 1e-300 {
            return Err(Error::Unsupported(format!("dual lift of {}: not immersed", self.name)));
        }
        MinkowskiVector::new(&lap - &jet.sigma * (bilinear(&lap, &lap) / (2.0 * sl)))
    }
}

pub fn conformality_of_jet(jet: &Jet) -> f64 {
    let (a, b, c) = (
        bilinear(&jet.su, &jet.su),
        bilinear(&jet.sv, &jet.sv),
        bilinear(&jet.su, &jet.sv),
    );
    // (∂_Zσ, ∂_Zσ) = ¼(a − b − 2ic), (∂_Zσ, ∂_Z̄σ) = ¼(a + b)
    let den = a + b;
    if den <= 0.0 {
        return 0.0;
    }
    ((a - b).powi(2) + 4.0 * c * c).sqrt() / den
}

pub fn immersion_of_jet(jet: &Jet) -> f64 {
    let ns = jet.sigma.norm();
    if ns == 0.0 {
        return 0.0;
    }
    let s = &jet.sigma / ns;
    let pu = &jet.su - &s * s.dot(&jet.su);
    let pv = &jet.sv - &s * s.dot(&jet.sv);
    let m = DMatrix::from_columns(&[pu, pv]);
    crate::minkowski::singular_values(&m)[1] / ns
}

fn fd_jet(
    f: &(dyn Fn(f64, f64) -> DVector<f64> + Send + Sync),
    u: f64,
    v: f64,
    hu: f64,
    hv: f64,
    order: FdOrder,
) -> Jet {
    let sigma = f(u, v);
    let m = sigma.len();
    let d1 = order.first_derivative();
    let d2 = order.second_derivative();
    let mut jet = Jet {
        su: DVector::zeros(m),
        sv: DVector::zeros(m),
        suu: DVector::zeros(m),
        suv: DVector::zeros(m),
        svv: DVector::zeros(m),
        sigma,
    };
    for &(d, w) in d1 {
        jet.su += f(u + d as f64 * hu, v) * (w / hu);
        jet.sv += f(u, v + d as f64 * hv) * (w / hv);
        for &(e, x) in d1 {
            jet.suv += f(u + d as f64 * hu, v + e as f64 * hv) * (w * x / (hu * hv));
        }
    }
    for &(d, w) in d2 {
        jet.suu += f(u + d as f64 * hu, v) * (w / (hu * hu));
        jet.svv += f(u, v + d as f64 * hv) * (w / (hv * hv));
    }
    jet
}

/// Polar of the Clifford torus in closed form, used as an independent check
/// of [`LiftedChart::polar_lift`].
pub fn clifford_polar(u: f64, v: f64) -> DVector<f64> {
    let (a, b) = (SQRT_2 * u, SQRT_2 * v);
    DVector::from_column_slice(&[
        -a.cos() / SQRT_2,
        -a.sin() / SQRT_2,
        b.cos() / SQRT_2,
        b.sin() / SQRT_2,
        1.0,
    ])
}
