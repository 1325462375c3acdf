//! Rectangular sample grids and central finite differences on masked fields.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::minkowski::{Scalar, C64};

/// Central-difference stencil order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Default)]
pub enum FdOrder {
    #[default]
    #[serde(rename = "2")]
    Second,
    #[serde(rename = "4")]
    Fourth,
}

impl FdOrder {
    pub fn order(self) -> u32 {
        match self {
            FdOrder::Second => 2,
            FdOrder::Fourth => 4,
        }
    }

    pub fn radius(self) -> usize {
        match self {
            FdOrder::Second => 1,
            FdOrder::Fourth => 2,
        }
    }

    /// `(offset, weight)` pairs of the first-derivative stencil, weights in units of `1/h`.
    pub fn first_derivative(self) -> &'static [(isize, f64)] {
        match self {
            FdOrder::Second => &[(-1, -0.5), (1, 0.5)],
            FdOrder::Fourth => &[
                (-2, 1.0 / 12.0),
                (-1, -2.0 / 3.0),
                (1, 2.0 / 3.0),
                (2, -1.0 / 12.0),
            ],
        }
    }

    /// Second-derivative stencil, weights in units of `1/h²`.
    pub fn second_derivative(self) -> &'static [(isize, f64)] {
        match self {
            FdOrder::Second => &[(-1, 1.0), (0, -2.0), (1, 1.0)],
            FdOrder::Fourth => &[
                (-2, -1.0 / 12.0),
                (-1, 4.0 / 3.0),
                (0, -5.0 / 2.0),
                (1, 4.0 / 3.0),
                (2, -1.0 / 12.0),
            ],
        }
    }
}

impl FromStr for FdOrder {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "2" => Ok(FdOrder::Second),
            "4" => Ok(FdOrder::Fourth),
            other => Err(format!("fd order must be 2 or 4, got `{other}`")),
        }
    }
}

impl fmt::Display for FdOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.order())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Axis {
    U,
    V,
}

/// Parameter rectangle with per-axis periodicity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Domain {
    pub u: (f64, f64),
    pub v: (f64, f64),
    pub periodic: [bool; 2],
}

/// `nu × nv` samples of a [`Domain`].
///
/// Periodic axes sample `[a, b)` with spacing `(b − a)/N`; other axes sample
/// `[a, b]` with spacing `(b − a)/(N − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Grid {
    pub nu: usize,
    pub nv: usize,
    pub domain: Domain,
    pub hu: f64,
    pub hv: f64,
}

impl Grid {
    pub fn new(domain: Domain, nu: usize, nv: usize) -> Self {
        let step = |(a, b): (f64, f64), n: usize, periodic: bool| {
            if periodic {
                (b - a) / n as f64
            } else {
                (b - a) / (n as f64 - 1.0)
            }
        };
        Self {
            nu,
            nv,
            hu: step(domain.u, nu, domain.periodic[0]),
            hv: step(domain.v, nv, domain.periodic[1]),
            domain,
        }
    }

    pub fn len(&self) -> usize {
        self.nu * self.nv
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nv + j
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k / self.nv, k % self.nv)
    }

    pub fn coords(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.domain.u.0 + i as f64 * self.hu,
            self.domain.v.0 + j as f64 * self.hv,
        )
    }

    pub fn spacing(&self, axis: Axis) -> f64 {
        match axis {
            Axis::U => self.hu,
            Axis::V => self.hv,
        }
    }

    /// Largest spacing; the `h` used in convergence fits.
    pub fn h(&self) -> f64 {
        self.hu.max(self.hv)
    }

    /// The grid extended by `pad` points at the same spacing beyond each end
    /// of every non-periodic axis, and the offset of this grid inside it.
    pub fn with_margin(&self, pad: usize) -> (Grid, [usize; 2]) {
        let mut d = self.domain;
        let mut off = [0, 0];
        let (mut nu, mut nv) = (self.nu, self.nv);
        if !d.periodic[0] {
            let e = pad as f64 * self.hu;
            d.u = (d.u.0 - e, d.u.1 + e);
            nu += 2 * pad;
            off[0] = pad;
        }
        if !d.periodic[1] {
            let e = pad as f64 * self.hv;
            d.v = (d.v.0 - e, d.v.1 + e);
            nv += 2 * pad;
            off[1] = pad;
        }
        (Grid::new(d, nu, nv), off)
    }

    /// Index of the point offset by `d` along `axis`, wrapping periodic axes.
    pub fn shifted(&self, i: usize, j: usize, axis: Axis, d: isize) -> Option<usize> {
        let (pos, n, periodic) = match axis {
            Axis::U => (i as isize, self.nu as isize, self.domain.periodic[0]),
            Axis::V => (j as isize, self.nv as isize, self.domain.periodic[1]),
        };
        let mut p = pos + d;
        if periodic {
            p = p.rem_euclid(n);
        } else if p < 0 || p >= n {
            return None;
        }
        Some(match axis {
            Axis::U => self.index(p as usize, j),
            Axis::V => self.index(i, p as usize),
        })
    }
}

/// Values that finite differences can combine linearly.
pub trait Linear: Clone + Send + Sync {
    fn zeros_like(&self) -> Self;
    fn axpy(&mut self, a: f64, x: &Self);
}

impl<T: Scalar> Linear for DMatrix<T> {
    fn zeros_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        let a = T::from_real(a);
        for (s, v) in self.iter_mut().zip(x.iter()) {
            *s += a * *v;
        }
    }
}

impl<T: Scalar> Linear for DVector<T> {
    fn zeros_like(&self) -> Self {
        DVector::zeros(self.len())
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        let a = T::from_real(a);
        for (s, v) in self.iter_mut().zip(x.iter()) {
            *s += a * *v;
        }
    }
}

impl Linear for f64 {
    fn zeros_like(&self) -> Self {
        0.0
    }
    fn axpy(&mut self, a: f64, x: &Self) {
        *self += a * x;
    }
}

/// A grid-sampled quantity; `None` marks masked points.
pub type Field<T> = Vec<Option<T>>;

/// First derivative along `axis`.
///
/// Central stencils are used wherever they fit. Near the ends of a
/// non-periodic axis the stencil is one-sided with one extra point (one
/// order more accurate than the central stencil). The switch of stencil
/// still costs one order in a nested derivative at the boundary; chart
/// analyses avoid it with a ghost margin (see [`Grid::with_margin`]).
/// A point is valid only if every stencil point is valid.
pub fn derivative<T: Linear>(grid: &Grid, field: &[Option<T>], axis: Axis, order: FdOrder) -> Field<T> {
    use rayon::prelude::*;
    let h = grid.spacing(axis);
    let central = order.first_derivative();
    let (n, periodic) = match axis {
        Axis::U => (grid.nu, grid.domain.periodic[0]),
        Axis::V => (grid.nv, grid.domain.periodic[1]),
    };
    let r = order.radius();
    let width = order.order() as usize + 2;
    // one-sided stencils for the first and last `r` positions
    let boundary: Vec<Vec<(isize, f64)>> = if periodic || n < width {
        vec![]
    } else {
        (0..r)
            .map(|pos| {
                let offsets: Vec<isize> = (0..width as isize).map(|o| o - pos as isize).collect();
                offsets.iter().copied().zip(fd_weights(&offsets)).collect()
            })
            .collect()
    };
    (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let (i, j) = grid.ij(k);
            let pos = match axis {
                Axis::U => i,
                Axis::V => j,
            };
            let centre = field[k].as_ref()?;
            let mirrored;
            let stencil: &[(isize, f64)] = if periodic || (pos >= r && pos + r < n) {
                central
            } else if boundary.is_empty() {
                return None;
            } else if pos < r {
                &boundary[pos]
            } else {
                mirrored = boundary[n - 1 - pos].iter().map(|&(d, w)| (-d, -w)).collect::<Vec<_>>();
                &mirrored
            };
            let mut acc = centre.zeros_like();
            for &(d, w) in stencil {
                let idx = grid.shifted(i, j, axis, d)?;
                acc.axpy(w / h, field[idx].as_ref()?);
            }
            Some(acc)
        })
        .collect()
}

/// Weights `w` with `Σ w_k f(d_k) ≈ f'(0)`, exact for polynomials of degree
/// below the number of offsets.
fn fd_weights(offsets: &[isize]) -> Vec<f64> {
    let m = offsets.len();
    let a = DMatrix::from_fn(m, m, |row, col| (offsets[col] as f64).powi(row as i32));
    let mut rhs = DVector::zeros(m);
    rhs[1] = 1.0;
    a.lu().solve(&rhs).expect("distinct offsets").iter().copied().collect()
}

/// Restriction of a field on `outer` to the subgrid `inner` placed at `off`.
pub fn crop<T: Clone>(outer: &Grid, inner: &Grid, off: [usize; 2], field: &[Option<T>]) -> Field<T> {
    (0..inner.len())
        .map(|k| {
            let (i, j) = inner.ij(k);
            field[outer.index(i + off[0], j + off[1])].clone()
        })
        .collect()
}

/// Pointwise map over valid points.
pub fn map_field<A: Sync, B: Send>(field: &[Option<A>], f: impl Fn(&A) -> B + Sync + Send) -> Field<B> {
    use rayon::prelude::*;
    field.par_iter().map(|x| x.as_ref().map(&f)).collect()
}

/// Pointwise combination of two fields, valid where both are.
pub fn zip_field<A: Sync, B: Sync, R: Send>(
    a: &[Option<A>],
    b: &[Option<B>],
    f: impl Fn(&A, &B) -> R + Sync + Send,
) -> Field<R> {
    use rayon::prelude::*;
    a.par_iter()
        .zip(b.par_iter())
        .map(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => Some(f(x, y)),
            _ => None,
        })
        .collect()
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<C64> {
    m.map(|x| C64::new(x, 0.0))
}

/// Grid-max and grid-mean of a scalar field over its valid points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub max: f64,
    pub mean: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(field: &[Option<f64>]) -> Self {
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut count = 0;
        for v in field.iter().flatten() {
            max = max.max(*v);
            sum += *v;
            count += 1;
        }
        Self {
            max,
            mean: if count > 0 { sum / count as f64 } else { 0.0 },
            count,
        }
    }
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn fitted_slope(h: &[f64], err: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = h
        .iter()
        .zip(err)
        .filter(|(h, e)| **h > 0.0 && **e > 0.0 && e.is_finite())
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn periodic_grid(n: usize) -> Grid {
        let two_pi = std::f64::consts::TAU;
        Grid::new(
            Domain {
                u: (0.0, two_pi),
                v: (-1.0, 1.0),
                periodic: [true, false],
            },
            n,
            n,
        )
    }

    #[test]
    fn spacing_and_wrap() {
        let g = periodic_grid(8);
        assert!((g.hu - std::f64::consts::TAU / 8.0).abs() < 1e-15);
        assert!((g.hv - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(g.shifted(0, 3, Axis::U, -1), Some(g.index(7, 3)));
        assert_eq!(g.shifted(3, 0, Axis::V, -1), None);
    }

    fn sin_error(n: usize, order: FdOrder) -> f64 {
        let g = periodic_grid(n);
        let f: Field<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = g.ij(k);
                let (u, v) = g.coords(i, j);
                Some(u.sin() * v.exp())
            })
            .collect();
        let du = derivative(&g, &f, Axis::U, order);
        let dv = derivative(&g, &f, Axis::V, order);
        let mut worst = 0.0f64;
        for k in 0..g.len() {
            let (i, j) = g.ij(k);
            let (u, v) = g.coords(i, j);
            if let Some(d) = du[k] {
                worst = worst.max((d - u.cos() * v.exp()).abs());
            }
            if let Some(d) = dv[k] {
                worst = worst.max((d - u.sin() * v.exp()).abs());
            }
        }
        worst
    }

    #[test]
    fn stencils_converge_at_their_order() {
        for order in [FdOrder::Second, FdOrder::Fourth] {
            let e1 = sin_error(32, order);
            let e2 = sin_error(64, order);
            let rate = (e1 / e2).log2();
            assert!(
                (rate - order.order() as f64).abs() < 0.3,
                "order {order}: rate {rate}"
            );
        }
    }

    #[test]
    fn non_periodic_axis_is_covered_with_one_order_lost_when_nested() {
        let g = periodic_grid(10);
        let f: Field<f64> = vec![Some(1.0); g.len()];
        let dv = derivative(&g, &f, Axis::V, FdOrder::Fourth);
        assert!(dv.iter().all(|x| x.map(|d| d.abs() < 1e-12) == Some(true)));

        // nested derivative along the non-periodic axis, boundary included
        for order in [FdOrder::Second, FdOrder::Fourth] {
            let err = |n: usize| {
                let g = periodic_grid(n);
                let f: Field<f64> = (0..g.len())
                    .map(|k| {
                        let (i, j) = g.ij(k);
                        Some(g.coords(i, j).1.exp())
                    })
                    .collect();
                let d2 = derivative(&g, &derivative(&g, &f, Axis::V, order), Axis::V, order);
                (0..g.len())
                    .map(|k| {
                        let (i, j) = g.ij(k);
                        (d2[k].unwrap() - g.coords(i, j).1.exp()).abs()
                    })
                    .fold(0.0f64, f64::max)
            };
            let rate = (err(32) / err(64)).log2();
            assert!((rate - (order.order() - 1) as f64).abs() < 0.4, "{order}: {rate}");
        }
    }


    #[test]
    fn slope_of_power_law() {
        let h = [0.1, 0.05, 0.025];
        let e: Vec<f64> = h.iter().map(|h| 3.0 * h * h).collect();
        assert!((fitted_slope(&h, &e).unwrap() - 2.0).abs() < 1e-12);
    }
}
