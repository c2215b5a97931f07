//! Uniform cell-centered grid over the search domain, fields bound to it and
//! the handful of discrete operators the solvers share.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point or vector in the local east/north plane, meters (or m/s).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn from_angle(theta: f64) -> Self {
        Vec2::new(theta.cos(), theta.sin())
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Closed ring of vertices; the closing edge is implicit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon(pub Vec<Vec2>);

impl Polygon {
    pub fn new(vertices: Vec<Vec2>) -> Self {
        Polygon(vertices)
    }

    pub fn rectangle(min: Vec2, max: Vec2) -> Self {
        Polygon(vec![
            min,
            Vec2::new(max.x, min.y),
            max,
            Vec2::new(min.x, max.y),
        ])
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.0
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: Vec2) -> bool {
        let v = &self.0;
        if v.len() < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Unsigned shoelace area.
    pub fn area(&self) -> f64 {
        let v = &self.0;
        let n = v.len();
        let twice: f64 = (0..n).map(|i| v[i].cross(v[(i + 1) % n])).sum();
        0.5 * twice.abs()
    }

    pub fn bounding_box(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.0 {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }
}

/// Uniform Cartesian grid. Cell `(i, j)` has its center at
/// `origin + ((i + ½)·h, (j + ½)·h)`; storage is row-major with `i` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    origin: Vec2,
    h: f64,
    nx: usize,
    ny: usize,
    sea: Vec<bool>,
}

impl Grid {
    pub const MIN_CELLS: usize = 4;

    /// All-sea grid.
    pub fn new(origin: Vec2, h: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config(format!(
                "cell size must be positive, got {h}"
            )));
        }
        if nx < Self::MIN_CELLS || ny < Self::MIN_CELLS {
            return Err(Error::config(format!(
                "grid needs at least {m}x{m} cells, got {nx}x{ny}",
                m = Self::MIN_CELLS
            )));
        }
        Ok(Grid {
            origin,
            h,
            nx,
            ny,
            sea: vec![true; nx * ny],
        })
    }

    /// Grid covering `extent_x × extent_y` from the local origin, with every
    /// cell whose center falls inside a land polygon masked as land.
    pub fn from_extent(extent_x: f64, extent_y: f64, h: f64, land: &[Polygon]) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::config(format!(
                "cell size must be positive, got {h}"
            )));
        }
        let min_extent = Self::MIN_CELLS as f64 * h;
        if !(extent_x >= min_extent && extent_y >= min_extent) {
            return Err(Error::config(format!(
                "extent {extent_x} x {extent_y} m is below {min_extent} m at h = {h} m"
            )));
        }
        // Tolerate extents that are a whole number of cells up to rounding.
        let count = |extent: f64| ((extent / h) * (1.0 - 1e-12)).ceil() as usize;
        Grid::new(Vec2::ZERO, h, count(extent_x), count(extent_y)).map(|g| g.with_land(land))
    }

    pub fn with_land(mut self, land: &[Polygon]) -> Self {
        for poly in land {
            let (lo, hi) = poly.bounding_box();
            for j in 0..self.ny {
                for i in 0..self.nx {
                    let c = self.cell_center(i, j);
                    if c.x < lo.x || c.x > hi.x || c.y < lo.y || c.y > hi.y {
                        continue;
                    }
                    if poly.contains(c) {
                        let k = self.index(i, j);
                        self.sea[k] = false;
                    }
                }
            }
        }
        self
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.h
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_area(&self) -> f64 {
        self.h * self.h
    }

    /// Width and height of the grid box, meters.
    pub fn extent(&self) -> (f64, f64) {
        (self.nx as f64 * self.h, self.ny as f64 * self.h)
    }

    pub fn upper_corner(&self) -> Vec2 {
        let (w, h) = self.extent();
        self.origin + Vec2::new(w, h)
    }

    pub fn center(&self) -> Vec2 {
        let (w, h) = self.extent();
        self.origin + Vec2::new(0.5 * w, 0.5 * h)
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> Vec2 {
        self.origin + Vec2::new((i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h)
    }

    #[inline]
    pub fn is_sea(&self, i: usize, j: usize) -> bool {
        self.sea[self.index(i, j)]
    }

    pub fn sea_mask(&self) -> &[bool] {
        &self.sea
    }

    pub fn sea_count(&self) -> usize {
        self.sea.iter().filter(|&&s| s).count()
    }

    /// True when `p` lies inside the grid box (closed).
    pub fn contains(&self, p: Vec2) -> bool {
        let hi = self.upper_corner();
        p.x >= self.origin.x && p.x <= hi.x && p.y >= self.origin.y && p.y <= hi.y
    }

    /// Cell containing `p`, if `p` is inside the box.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        if !self.contains(p) {
            return None;
        }
        let i = (((p.x - self.origin.x) / self.h) as usize).min(self.nx - 1);
        let j = (((p.y - self.origin.y) / self.h) as usize).min(self.ny - 1);
        Some((i, j))
    }

    /// True when `p` is inside the box and over a sea cell.
    pub fn is_sea_at(&self, p: Vec2) -> bool {
        self.cell_of(p).is_some_and(|(i, j)| self.is_sea(i, j))
    }

    /// Bilinear stencil over the four surrounding cell centers. Points in the
    /// half-cell margin outside the center hull clamp to the edge cells.
    pub fn bilinear_stencil(&self, p: Vec2) -> Result<[(usize, f64); 4]> {
        if !self.contains(p) || !p.is_finite() {
            return Err(Error::OutOfDomain { x: p.x, y: p.y });
        }
        let fx = (p.x - self.origin.x) / self.h - 0.5;
        let fy = (p.y - self.origin.y) / self.h - 0.5;
        let i0 = (fx.floor().max(0.0) as usize).min(self.nx - 2);
        let j0 = (fy.floor().max(0.0) as usize).min(self.ny - 2);
        let tx = (fx - i0 as f64).clamp(0.0, 1.0);
        let ty = (fy - j0 as f64).clamp(0.0, 1.0);
        Ok([
            (self.index(i0, j0), (1.0 - tx) * (1.0 - ty)),
            (self.index(i0 + 1, j0), tx * (1.0 - ty)),
            (self.index(i0, j0 + 1), (1.0 - tx) * ty),
            (self.index(i0 + 1, j0 + 1), tx * ty),
        ])
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self == other
    }
}

fn check_same_grid(a: &Arc<Grid>, b: &Arc<Grid>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::config("fields are bound to different grids"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        ScalarField {
            grid,
            values: vec![0.0; n],
        }
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let n = grid.len();
        ScalarField {
            grid,
            values: vec![c; n],
        }
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::config(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite field value at cell {k}")));
        }
        Ok(ScalarField { grid, values })
    }

    /// Evaluates `f` at every cell center.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(Vec2) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (i, j) = grid.coords(k);
                f(grid.cell_center(i, j))
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sample(&self, p: Vec2) -> Result<f64> {
        let stencil = self.grid.bilinear_stencil(p)?;
        Ok(stencil.iter().map(|&(k, w)| w * self.values[k]).sum())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Arc<Grid>,
    values: Vec<Vec2>,
}

impl VectorField {
    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        VectorField {
            grid,
            values: vec![Vec2::ZERO; n],
        }
    }

    /// Values are forced to zero on land cells.
    pub fn from_values(grid: Arc<Grid>, mut values: Vec<Vec2>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::config(format!(
                "field has {} values, grid has {} cells",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("non-finite field value at cell {k}")));
        }
        for (v, &sea) in values.iter_mut().zip(grid.sea_mask()) {
            if !sea {
                *v = Vec2::ZERO;
            }
        }
        Ok(VectorField { grid, values })
    }

    /// Evaluates `f` at every sea cell center; land cells get zero.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(Vec2) -> Vec2) -> Self {
        let values = (0..grid.len())
            .map(|k| {
                let (i, j) = grid.coords(k);
                if grid.is_sea(i, j) {
                    f(grid.cell_center(i, j))
                } else {
                    Vec2::ZERO
                }
            })
            .collect();
        VectorField { grid, values }
    }

    /// Uniform vector on every sea cell.
    pub fn uniform(grid: Arc<Grid>, v: Vec2) -> Self {
        Self::from_fn(grid, |_| v)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Vec2] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> Vec2 {
        self.values[self.grid.index(i, j)]
    }

    pub fn max_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn sample(&self, p: Vec2) -> Result<Vec2> {
        let stencil = self.grid.bilinear_stencil(p)?;
        Ok(stencil
            .iter()
            .fold(Vec2::ZERO, |acc, &(k, w)| acc + self.values[k] * w))
    }

    /// Pointwise `self + other`.
    pub fn try_add(&self, other: &VectorField) -> Result<VectorField> {
        check_same_grid(&self.grid, &other.grid)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(VectorField {
            grid: Arc::clone(&self.grid),
            values,
        })
    }

    /// `Σ cᵢ·fieldᵢ` over fields sharing one grid.
    pub fn linear_combination(grid: &Arc<Grid>, terms: &[(f64, &VectorField)]) -> Result<Self> {
        let mut values = vec![Vec2::ZERO; grid.len()];
        for &(c, field) in terms {
            check_same_grid(grid, &field.grid)?;
            if c == 0.0 {
                continue;
            }
            for (acc, &v) in values.iter_mut().zip(&field.values) {
                *acc += v * c;
            }
        }
        Ok(VectorField {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// x- or y-component as a scalar field (for snapshots).
    pub fn component(&self, axis: usize) -> ScalarField {
        let values = self
            .values
            .iter()
            .map(|v| if axis == 0 { v.x } else { v.y })
            .collect();
        ScalarField {
            grid: Arc::clone(&self.grid),
            values,
        }
    }
}

/// A cell is interior when it is sea, off the outer ring, and all four
/// neighbours are sea.
pub fn is_interior(grid: &Grid, i: usize, j: usize) -> bool {
    i >= 1
        && j >= 1
        && i + 1 < grid.nx()
        && j + 1 < grid.ny()
        && grid.is_sea(i, j)
        && grid.is_sea(i - 1, j)
        && grid.is_sea(i + 1, j)
        && grid.is_sea(i, j - 1)
        && grid.is_sea(i, j + 1)
}

/// Central-difference divergence on interior cells, zero elsewhere.
pub fn divergence(w: &VectorField) -> ScalarField {
    let grid = w.grid();
    let inv2h = 0.5 / grid.cell_size();
    let mut out = ScalarField::zeros(Arc::clone(grid));
    for j in 0..grid.ny() {
        for i in 0..grid.nx() {
            if !is_interior(grid, i, j) {
                continue;
            }
            let du = w.get(i + 1, j).x - w.get(i - 1, j).x;
            let dv = w.get(i, j + 1).y - w.get(i, j - 1).y;
            let k = grid.index(i, j);
            out.values[k] = (du + dv) * inv2h;
        }
    }
    out
}

/// Flat-earth tangent plane around a reference point. Scale factors follow
/// the WGS84 series for meridian and parallel arc length per degree.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoProjection {
    lat0: f64,
    lon0: f64,
    m_per_deg_lat: f64,
    m_per_deg_lon: f64,
}

impl GeoProjection {
    pub fn new(lat0: f64, lon0: f64) -> Self {
        let phi = lat0.to_radians();
        let m_per_deg_lat = 111_132.954 - 559.822 * (2.0 * phi).cos() + 1.175 * (4.0 * phi).cos();
        let m_per_deg_lon =
            111_412.84 * phi.cos() - 93.5 * (3.0 * phi).cos() + 0.118 * (5.0 * phi).cos();
        GeoProjection {
            lat0,
            lon0,
            m_per_deg_lat,
            m_per_deg_lon,
        }
    }

    pub fn reference(&self) -> (f64, f64) {
        (self.lat0, self.lon0)
    }

    pub fn scale(&self) -> (f64, f64) {
        (self.m_per_deg_lat, self.m_per_deg_lon)
    }

    pub fn to_local(&self, lat: f64, lon: f64) -> Vec2 {
        Vec2::new(
            (lon - self.lon0) * self.m_per_deg_lon,
            (lat - self.lat0) * self.m_per_deg_lat,
        )
    }

    /// Returns `(lat, lon)` in degrees.
    pub fn to_geo(&self, p: Vec2) -> (f64, f64) {
        (
            self.lat0 + p.y / self.m_per_deg_lat,
            self.lon0 + p.x / self.m_per_deg_lon,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(n: usize, h: f64) -> Arc<Grid> {
        Arc::new(Grid::new(Vec2::ZERO, h, n, n).unwrap())
    }

    #[test]
    fn make_grid_counts_and_mask() {
        let g = Grid::from_extent(1000.0, 1000.0, 10.0, &[]).unwrap();
        assert_eq!((g.nx(), g.ny()), (100, 100));
        assert_eq!(g.sea_count(), 10_000);

        let whole = Polygon::rectangle(Vec2::new(-1.0, -1.0), Vec2::new(1001.0, 501.0));
        let g = Grid::from_extent(1000.0, 500.0, 10.0, &[whole]).unwrap();
        assert_eq!((g.nx(), g.ny()), (100, 50));
        assert_eq!(g.sea_count(), 0);
    }

    #[test]
    fn make_grid_bay_scale() {
        // 9.0 km x 6.2 km = 55.8 km²
        let g = Grid::from_extent(9000.0, 6200.0, 25.0, &[]).unwrap();
        assert_eq!((g.nx(), g.ny()), (360, 248));
        let area = g.len() as f64 * g.cell_area();
        assert!((area / 1e6 - 55.8).abs() < 1e-9);
    }

    #[test]
    fn make_grid_rejects_degenerate() {
        assert!(Grid::from_extent(1000.0, 1000.0, 0.0, &[]).is_err());
        assert!(Grid::from_extent(1000.0, 1000.0, -5.0, &[]).is_err());
        assert!(Grid::from_extent(30.0, 1000.0, 10.0, &[]).is_err());
        assert!(Grid::from_extent(40.0, 40.0, 10.0, &[]).is_ok());
    }

    #[test]
    fn make_grid_rounds_up_partial_cells() {
        let g = Grid::from_extent(1005.0, 1000.0, 10.0, &[]).unwrap();
        assert_eq!(g.nx(), 101);
    }

    #[test]
    fn divergence_of_analytic_fields() {
        let g = grid(20, 10.0);
        let c = g.center();
        let uniform = VectorField::uniform(Arc::clone(&g), Vec2::new(1.0, 0.0));
        assert!(divergence(&uniform).values().iter().all(|&d| d == 0.0));

        let rot = VectorField::from_fn(Arc::clone(&g), |p| Vec2::new(-(p.y - c.y), p.x - c.x));
        assert!(divergence(&rot).values().iter().all(|&d| d.abs() < 1e-12));

        let radial = VectorField::from_fn(Arc::clone(&g), |p| p - c);
        let div = divergence(&radial);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let expect = if is_interior(&g, i, j) { 2.0 } else { 0.0 };
                assert!((div.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_at_centers_and_midpoints() {
        let g = grid(6, 2.0);
        let f = ScalarField::from_fn(Arc::clone(&g), |p| p.x * 3.0 - p.y);
        for j in 0..6 {
            for i in 0..6 {
                let c = g.cell_center(i, j);
                assert_eq!(f.sample(c).unwrap(), f.get(i, j));
            }
        }
        let mut values = vec![0.0; g.len()];
        values[g.index(3, 2)] = 1.0;
        let f = ScalarField::from_values(Arc::clone(&g), values).unwrap();
        let mid = (g.cell_center(2, 2) + g.cell_center(3, 2)) * 0.5;
        assert!((f.sample(mid).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_out_of_domain() {
        let g = grid(6, 2.0);
        let f = ScalarField::zeros(Arc::clone(&g));
        assert!(matches!(
            f.sample(Vec2::new(-0.1, 1.0)),
            Err(Error::OutOfDomain { .. })
        ));
        assert!(f.sample(Vec2::new(12.0, 12.0)).is_ok());
        assert!(f.sample(Vec2::new(12.01, 1.0)).is_err());
    }

    /// Tent-function sum over every cell: an interpolation route that shares
    /// nothing with the stencil lookup.
    fn tent_oracle(f: &ScalarField, p: Vec2) -> f64 {
        let g = f.grid();
        let h = g.cell_size();
        let mut acc = 0.0;
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let c = g.cell_center(i, j);
                let wx = (1.0 - ((p.x - c.x) / h).abs()).max(0.0);
                let wy = (1.0 - ((p.y - c.y) / h).abs()).max(0.0);
                acc += wx * wy * f.get(i, j);
            }
        }
        acc
    }

    proptest! {
        #[test]
        fn bilinear_matches_tent_oracle(
            seed in proptest::collection::vec(-5.0f64..5.0, 64),
            px in 1.0f64..15.0,
            py in 1.0f64..15.0,
        ) {
            let g = grid(8, 2.0);
            let f = ScalarField::from_values(Arc::clone(&g), seed).unwrap();
            let p = Vec2::new(px, py);
            prop_assert!((f.sample(p).unwrap() - tent_oracle(&f, p)).abs() < 1e-12);
        }

        #[test]
        fn bilinear_exact_for_affine(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0,
            px in 5.0f64..75.0, py in 5.0f64..75.0,
        ) {
            let g = grid(8, 10.0);
            let f = ScalarField::from_fn(Arc::clone(&g), |p| a * p.x + b * p.y + c);
            let expect = a * px + b * py + c;
            prop_assert!((f.sample(Vec2::new(px, py)).unwrap() - expect).abs() < 1e-10);
        }

        #[test]
        fn geo_round_trip(dx in -5000.0f64..5000.0, dy in -5000.0f64..5000.0, lat in -60.0f64..60.0) {
            let proj = GeoProjection::new(lat, 14.35);
            let (la, lo) = proj.to_geo(Vec2::new(dx, dy));
            let back = proj.to_local(la, lo);
            prop_assert!((back - Vec2::new(dx, dy)).norm() < 0.5);
        }
    }

    #[test]
    fn geo_scale_is_plausible() {
        let proj = GeoProjection::new(44.93, 14.35);
        let (lat_m, lon_m) = proj.scale();
        assert!((lat_m - 111_140.0).abs() < 100.0);
        assert!((lon_m - 78_900.0).abs() < 300.0);
    }

    #[test]
    fn polygon_containment_and_area() {
        let sq = Polygon::rectangle(Vec2::new(0.0, 0.0), Vec2::new(2.0, 3.0));
        assert!(sq.contains(Vec2::new(1.0, 1.0)));
        assert!(!sq.contains(Vec2::new(2.5, 1.0)));
        assert!((sq.area() - 6.0).abs() < 1e-15);
    }

    #[test]
    fn vector_fields_zero_on_land() {
        let land = Polygon::rectangle(Vec2::new(0.0, 0.0), Vec2::new(20.0, 20.0));
        let g = Arc::new(
            Grid::new(Vec2::ZERO, 10.0, 5, 5)
                .unwrap()
                .with_land(&[land]),
        );
        let w = VectorField::uniform(Arc::clone(&g), Vec2::new(1.0, 1.0));
        assert_eq!(w.get(0, 0), Vec2::ZERO);
        assert_eq!(w.get(3, 3), Vec2::new(1.0, 1.0));
    }

    #[test]
    fn add_rejects_grid_mismatch() {
        let a = VectorField::zeros(grid(5, 1.0));
        let b = VectorField::zeros(grid(6, 1.0));
        assert!(a.try_add(&b).is_err());
    }
}
