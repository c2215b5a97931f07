//! Undetected-target density: initialization, advection–diffusion and the
//! multiplicative sensing update.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{Grid, Polygon, ScalarField, Vec2, VectorField};

/// One applied sensing update.
#[derive(Clone, Debug, PartialEq)]
pub struct SensingRecord {
    pub t: f64,
    pub footprints: Vec<Polygon>,
    pub recall: f64,
    pub removed_mass: f64,
}

/// Density `m` (probability per m²) with its mass bookkeeping.
///
/// `total_mass` is a cached integral: transport leaves it untouched (the
/// scheme is conservative), sensing lowers it by exactly the removed mass.
/// It therefore never increases.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityField {
    m: ScalarField,
    total_mass: f64,
    sensing_log: Vec<SensingRecord>,
    // images whose footprint covered each cell center
    coverage: Vec<u32>,
}

impl ProbabilityField {
    /// Normalizes a non-negative density to unit mass.
    pub fn from_density(m: ScalarField) -> Result<Self> {
        let grid = Arc::clone(m.grid());
        if m.values().iter().any(|&v| v < 0.0) {
            return Err(Error::config("density must be non-negative"));
        }
        let mut values = m.into_values();
        for (k, v) in values.iter_mut().enumerate() {
            if !grid.sea_mask()[k] {
                *v = 0.0;
            }
        }
        let mass: f64 = values.iter().sum::<f64>() * grid.cell_area();
        if !(mass > 0.0) {
            return Err(Error::config("density has no mass on sea cells"));
        }
        for v in &mut values {
            *v /= mass;
        }
        let m = ScalarField::from_values(Arc::clone(&grid), values)?;
        let n = grid.len();
        let mut p = ProbabilityField {
            m,
            total_mass: 0.0,
            sensing_log: Vec::new(),
            coverage: vec![0; n],
        };
        p.total_mass = p.integral();
        Ok(p)
    }

    pub fn density(&self) -> &ScalarField {
        &self.m
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.m.grid()
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    /// Recomputed `Σ m·h²`.
    pub fn integral(&self) -> f64 {
        self.m.sum() * self.grid().cell_area()
    }

    pub fn sensing_log(&self) -> &[SensingRecord] {
        &self.sensing_log
    }

    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }

    /// Fraction of sea cells imaged at least once.
    pub fn coverage_fraction(&self) -> f64 {
        let grid = self.grid();
        let sea = grid.sea_count();
        if sea == 0 {
            return 0.0;
        }
        let seen = self
            .coverage
            .iter()
            .zip(grid.sea_mask())
            .filter(|(c, s)| **s && **c > 0)
            .count();
        seen as f64 / sea as f64
    }

    /// Mass inside a polygon, by cell-center containment.
    pub fn mass_in(&self, poly: &Polygon) -> f64 {
        let grid = self.grid();
        covered_cells(grid, poly)
            .map(|k| self.m.values()[k])
            .sum::<f64>()
            * grid.cell_area()
    }
}

/// Density `1/(π R²)` on sea cells whose centers lie in the disc, then
/// renormalized to unit mass on the grid.
pub fn init_uniform_disc(center: Vec2, radius: f64, grid: Arc<Grid>) -> Result<ProbabilityField> {
    if !(radius > 0.0) {
        return Err(Error::config("disc radius must be positive"));
    }
    let level = 1.0 / (PI * radius * radius);
    let m = ScalarField::from_fn(Arc::clone(&grid), |c| {
        if (c - center).norm() <= radius {
            level
        } else {
            0.0
        }
    });
    let any = m
        .values()
        .iter()
        .zip(grid.sea_mask())
        .any(|(v, s)| *s && *v > 0.0);
    if !any {
        return Err(Error::config(format!(
            "deployment disc at ({}, {}) r = {radius} m covers no sea cell",
            center.x, center.y
        )));
    }
    ProbabilityField::from_density(m)
}

const E: usize = 0;
const W: usize = 1;
const N: usize = 2;
const S: usize = 3;

/// Explicit upwind + 5-point diffusion operator for one steady flow and
/// diffusivity. Coefficients are computed once and reused every step.
#[derive(Clone, Debug)]
pub struct Transport {
    grid: Arc<Grid>,
    // per cell, per direction (E, W, N, S): outflow rate to that neighbour, 1/s
    rate: Vec<[f64; 4]>,
    max_speed: f64,
    diffusion: f64,
}

impl Transport {
    pub fn new(w: &VectorField, diffusion: f64) -> Result<Self> {
        if !(diffusion >= 0.0 && diffusion.is_finite()) {
            return Err(Error::config(format!(
                "diffusion must be non-negative, got {diffusion}"
            )));
        }
        let grid = Arc::clone(w.grid());
        let h = grid.cell_size();
        let kd = diffusion / (h * h);
        let mut rate = vec![[0.0; 4]; grid.len()];
        let (nx, ny) = (grid.nx(), grid.ny());
        for j in 0..ny {
            for i in 0..nx {
                if !grid.is_sea(i, j) {
                    continue;
                }
                let a = grid.index(i, j);
                if i + 1 < nx && grid.is_sea(i + 1, j) {
                    let b = grid.index(i + 1, j);
                    let u = 0.5 * (w.values()[a].x + w.values()[b].x);
                    rate[a][E] = u.max(0.0) / h + kd;
                    rate[b][W] = (-u).max(0.0) / h + kd;
                }
                if j + 1 < ny && grid.is_sea(i, j + 1) {
                    let b = grid.index(i, j + 1);
                    let v = 0.5 * (w.values()[a].y + w.values()[b].y);
                    rate[a][N] = v.max(0.0) / h + kd;
                    rate[b][S] = (-v).max(0.0) / h + kd;
                }
            }
        }
        Ok(Transport {
            grid,
            rate,
            max_speed: w.max_norm(),
            diffusion,
        })
    }

    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }

    /// Largest step that keeps every cell's outflow within its content; the
    /// scheme is positive and conservative for any `dt` up to this.
    pub fn admissible_dt(&self) -> f64 {
        let worst = self
            .rate
            .iter()
            .map(|r| r.iter().sum::<f64>())
            .fold(0.0, f64::max);
        if worst > 0.0 {
            1.0 / worst
        } else {
            f64::INFINITY
        }
    }

    /// `0.5·min(h/‖w‖, h²/(4D))`, capped by the admissible step.
    pub fn recommended_dt(&self) -> f64 {
        let h = self.grid.cell_size();
        let adv = if self.max_speed > 0.0 {
            h / self.max_speed
        } else {
            f64::INFINITY
        };
        let dif = if self.diffusion > 0.0 {
            h * h / (4.0 * self.diffusion)
        } else {
            f64::INFINITY
        };
        (0.5 * adv.min(dif)).min(self.admissible_dt())
    }

    pub fn step(&self, field: &mut ProbabilityField, dt: f64) -> Result<()> {
        if !(dt >= 0.0) {
            return Err(Error::config(format!(
                "time step must be non-negative, got {dt}"
            )));
        }
        if !field.grid().same_shape(&self.grid) {
            return Err(Error::config("density and flow are on different grids"));
        }
        let admissible = self.admissible_dt();
        if dt > admissible * (1.0 + 1e-12) {
            return Err(Error::UnstableStep { dt, admissible });
        }
        if dt == 0.0 {
            return Ok(());
        }
        let nx = self.grid.nx();
        let old = field.m.values();
        let mut new = vec![0.0; old.len()];
        for (k, out) in new.iter_mut().enumerate() {
            let r = &self.rate[k];
            let keep = (1.0 - dt * (r[E] + r[W] + r[N] + r[S])).max(0.0);
            let mut v = keep * old[k];
            // inflow from each neighbour through the shared face
            if k % nx + 1 < nx {
                v += dt * self.rate[k + 1][W] * old[k + 1];
            }
            if k % nx > 0 {
                v += dt * self.rate[k - 1][E] * old[k - 1];
            }
            if k + nx < old.len() {
                v += dt * self.rate[k + nx][S] * old[k + nx];
            }
            if k >= nx {
                v += dt * self.rate[k - nx][N] * old[k - nx];
            }
            *out = v;
        }
        field.m = ScalarField::from_values(Arc::clone(field.grid()), new)?;
        Ok(())
    }

    /// Advances by `duration` in equal substeps no longer than the
    /// recommended step. Returns the substep count.
    pub fn advance(&self, field: &mut ProbabilityField, duration: f64) -> Result<usize> {
        if duration <= 0.0 {
            return Ok(0);
        }
        let dt_max = self.recommended_dt();
        let n = if dt_max.is_finite() {
            (duration / dt_max).ceil().max(1.0) as usize
        } else {
            1
        };
        let dt = duration / n as f64;
        for _ in 0..n {
            self.step(field, dt)?;
        }
        Ok(n)
    }
}

/// One explicit conservative step of `∂m/∂t = D∇²m − ∇·(w m)`.
pub fn step_advect_diffuse(
    field: &mut ProbabilityField,
    w: &VectorField,
    diffusion: f64,
    dt: f64,
) -> Result<()> {
    Transport::new(w, diffusion)?.step(field, dt)
}

fn covered_cells<'a>(grid: &'a Grid, poly: &'a Polygon) -> impl Iterator<Item = usize> + 'a {
    let (lo, hi) = poly.bounding_box();
    let h = grid.cell_size();
    let o = grid.origin();
    let range = |lo: f64, hi: f64, o: f64, n: usize| {
        let a = ((lo - o) / h - 0.5).floor().max(0.0) as usize;
        let b = (((hi - o) / h - 0.5).ceil().max(-1.0) + 1.0) as usize;
        a.min(n)..b.min(n)
    };
    let ir = range(lo.x, hi.x, o.x, grid.nx());
    let jr = range(lo.y, hi.y, o.y, grid.ny());
    jr.flat_map(move |j| ir.clone().map(move |i| (i, j)))
        .filter(move |&(i, j)| grid.is_sea(i, j) && poly.contains(grid.cell_center(i, j)))
        .map(move |(i, j)| grid.index(i, j))
}

/// Multiplies each cell by `(1 − r)^c`, `c` being the number of footprints
/// covering its center, and books the removed mass. Never renormalizes.
pub fn apply_sensing(
    field: &mut ProbabilityField,
    footprints: &[Polygon],
    recall: f64,
    t: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&recall) {
        return Err(Error::config(format!(
            "recall must lie in [0, 1], got {recall}"
        )));
    }
    let grid = Arc::clone(field.grid());
    let mut counts = vec![0u32; grid.len()];
    for poly in footprints {
        for k in covered_cells(&grid, poly) {
            counts[k] += 1;
        }
    }
    let keep = 1.0 - recall;
    let mut values = field.m.values().to_vec();
    let mut removed = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let before = values[k];
        let after = before * keep.powi(c as i32);
        removed += before - after;
        values[k] = after;
        field.coverage[k] += c;
    }
    removed *= grid.cell_area();
    field.m = ScalarField::from_values(grid, values)?;
    field.total_mass = (field.total_mass - removed).max(0.0);
    field.sensing_log.push(SensingRecord {
        t,
        footprints: footprints.to_vec(),
        recall,
        removed_mass: removed,
    });
    Ok(removed)
}
