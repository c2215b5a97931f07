//! HEDAC potential, gradient guidance and UAV kinematics.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, ScalarField, Vec2, VectorField};
use crate::linalg::{BandedCholesky, BandedSpd};

pub const POTENTIAL_TOLERANCE: f64 = 1e-8;

/// Screened-Poisson potential `u` with `α∇²u − u + m = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialField {
    pub u: ScalarField,
    pub alpha: f64,
    pub residual: f64,
}

/// `(I − α∇²)` with zero-flux faces at land and the domain edge, factored
/// once per grid.
#[derive(Clone, Debug)]
pub struct PotentialSolver {
    grid: Arc<Grid>,
    alpha: f64,
    factor: BandedCholesky,
}

impl PotentialSolver {
    pub fn new(grid: Arc<Grid>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        let (nx, ny) = (grid.nx(), grid.ny());
        let c = alpha / (grid.cell_size() * grid.cell_size());
        let mut a = BandedSpd::new(grid.len(), nx);
        for j in 0..ny {
            for i in 0..nx {
                let k = grid.index(i, j);
                a.add(k, k, 1.0);
                if !grid.is_sea(i, j) {
                    continue;
                }
                if i + 1 < nx && grid.is_sea(i + 1, j) {
                    let e = grid.index(i + 1, j);
                    a.add(k, k, c);
                    a.add(e, e, c);
                    a.add(e, k, -c);
                }
                if j + 1 < ny && grid.is_sea(i, j + 1) {
                    let n = grid.index(i, j + 1);
                    a.add(k, k, c);
                    a.add(n, n, c);
                    a.add(n, k, -c);
                }
            }
        }
        Ok(PotentialSolver {
            grid,
            alpha,
            factor: a.factor()?,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Solves for `u` from the density. The result is checked against the
    /// relative residual tolerance and the discrete maximum principle on sea
    /// cells.
    pub fn solve(&self, m: &ScalarField) -> Result<PotentialField> {
        if !m.grid().same_shape(&self.grid) {
            return Err(Error::config(
                "density and potential are on different grids",
            ));
        }
        let rhs: Vec<f64> = m
            .values()
            .iter()
            .zip(self.grid.sea_mask())
            .map(|(v, s)| if *s { *v } else { 0.0 })
            .collect();
        let (u, residual) =
            self.factor
                .solve_checked(&rhs, POTENTIAL_TOLERANCE, "screened Poisson potential")?;
        let (lo, hi) = sea_range(&self.grid, &rhs);
        let slack = 1e-9 * lo.abs().max(hi.abs());
        if let Some(bad) = u
            .iter()
            .zip(self.grid.sea_mask())
            .find(|(v, s)| **s && (**v < lo - slack || **v > hi + slack))
        {
            return Err(Error::Solver {
                context: "potential violates the maximum principle",
                residual: *bad.0,
                tolerance: slack,
            });
        }
        Ok(PotentialField {
            u: ScalarField::from_values(Arc::clone(&self.grid), u)?,
            alpha: self.alpha,
            residual,
        })
    }
}

fn sea_range(grid: &Grid, v: &[f64]) -> (f64, f64) {
    v.iter()
        .zip(grid.sea_mask())
        .filter(|(_, s)| **s)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| {
            (lo.min(*x), hi.max(*x))
        })
}

pub fn solve_potential(m: &ScalarField, alpha: f64) -> Result<PotentialField> {
    PotentialSolver::new(Arc::clone(m.grid()), alpha)?.solve(m)
}

/// Central differences at cell centers, one-sided next to land or the
/// domain edge.
pub fn gradient(u: &ScalarField) -> VectorField {
    let g = u.grid();
    let h = g.cell_size();
    let (nx, ny) = (g.nx(), g.ny());
    let axis = |i: usize, j: usize, di: isize, dj: isize| -> f64 {
        let fwd = neighbour(g, i, j, di, dj);
        let back = neighbour(g, i, j, -di, -dj);
        match (fwd, back) {
            (Some(f), Some(b)) => (u.get(f.0, f.1) - u.get(b.0, b.1)) / (2.0 * h),
            (Some(f), None) => (u.get(f.0, f.1) - u.get(i, j)) / h,
            (None, Some(b)) => (u.get(i, j) - u.get(b.0, b.1)) / h,
            (None, None) => 0.0,
        }
    };
    let values = (0..nx * ny)
        .map(|k| {
            let (i, j) = g.coords(k);
            if g.is_sea(i, j) {
                Vec2::new(axis(i, j, 1, 0), axis(i, j, 0, 1))
            } else {
                Vec2::ZERO
            }
        })
        .collect();
    VectorField::from_values(Arc::clone(g), values).expect("gradient has one value per cell")
}

fn neighbour(g: &Grid, i: usize, j: usize, di: isize, dj: isize) -> Option<(usize, usize)> {
    let a = i as isize + di;
    let b = j as isize + dj;
    if a < 0 || b < 0 || a >= g.nx() as isize || b >= g.ny() as isize {
        return None;
    }
    let (a, b) = (a as usize, b as usize);
    g.is_sea(a, b).then_some((a, b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Guidance {
    Direction(Vec2),
    /// Gradient too weak to define a direction; keep the current heading.
    Degenerate,
}

/// Gradient field of one potential, sampled by every UAV in a tick.
#[derive(Clone, Debug)]
pub struct GuidanceField {
    grad: VectorField,
    threshold: f64,
}

impl GuidanceField {
    /// The degenerate-gradient threshold is `1e-12` in units of
    /// `max|u|/h`, so it follows the scale of the density.
    pub fn new(p: &PotentialField) -> Self {
        let g = p.u.grid();
        let scale = p.u.values().iter().fold(0.0f64, |a, v| a.max(v.abs())) / g.cell_size();
        GuidanceField {
            grad: gradient(&p.u),
            threshold: (1e-12 * scale).max(f64::MIN_POSITIVE),
        }
    }

    pub fn gradient(&self) -> &VectorField {
        &self.grad
    }

    pub fn direction(&self, x: Vec2) -> Result<Guidance> {
        let g = self.grad.sample(x)?;
        let n = g.norm();
        Ok(if n < self.threshold || !n.is_finite() {
            Guidance::Degenerate
        } else {
            Guidance::Direction(g * (1.0 / n))
        })
    }
}

/// Normalized ascent direction of `u` at `x`.
pub fn guidance_direction(p: &PotentialField, x: Vec2) -> Result<Guidance> {
    GuidanceField::new(p).direction(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub id: usize,
    pub position: Vec2,
    /// Radians counter-clockwise from east.
    pub heading: f64,
    pub speed: f64,
    pub omega_max: f64,
    /// Seconds of flight left.
    pub battery: f64,
    /// Yaw rate applied on the last step.
    pub omega: f64,
}

impl UavState {
    pub fn new(id: usize, position: Vec2, heading: f64) -> Self {
        UavState {
            id,
            position,
            heading: wrap_angle(heading),
            speed: 8.0,
            omega_max: 0.5,
            battery: f64::INFINITY,
            omega: 0.0,
        }
    }

    pub fn is_flying(&self) -> bool {
        self.battery > 0.0
    }
}

/// Wraps to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(TAU) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Steering-override band next to the domain edge, m.
pub fn boundary_margin(state: &UavState, dt: f64) -> f64 {
    2.0 * state.speed * dt
}

/// One kinematic step: turn toward the guidance heading at no more than
/// `ω_max`, then fly `v·dt` along the new heading. Inside the edge margin, a
/// heading pointing out of the domain is replaced by one toward the domain
/// center. Battery drains by `dt`.
pub fn uav_step(state: &UavState, guidance: Guidance, grid: &Grid, dt: f64) -> Result<UavState> {
    if !(dt > 0.0) {
        return Err(Error::config(format!(
            "control step must be positive, got {dt}"
        )));
    }
    let mut next = state.clone();
    if !state.is_flying() {
        next.omega = 0.0;
        return Ok(next);
    }
    let mut desired = match guidance {
        Guidance::Direction(d) => d.angle(),
        Guidance::Degenerate => state.heading,
    };
    let lo = grid.origin();
    let hi = grid.upper_corner();
    let margin = boundary_margin(state, dt);
    let p = state.position;
    let dir = Vec2::from_angle(desired);
    let outward = (p.x < lo.x + margin && dir.x < 0.0)
        || (p.x > hi.x - margin && dir.x > 0.0)
        || (p.y < lo.y + margin && dir.y < 0.0)
        || (p.y > hi.y - margin && dir.y > 0.0);
    if outward {
        desired = (grid.center() - p).angle();
    }
    let omega = (wrap_angle(desired - state.heading) / dt).clamp(-state.omega_max, state.omega_max);
    next.heading = wrap_angle(state.heading + omega * dt);
    next.omega = omega;
    let moved = p + Vec2::from_angle(next.heading) * (state.speed * dt);
    let eps = 1e-9 * grid.cell_size();
    next.position = Vec2::new(
        moved.x.clamp(lo.x + eps, hi.x - eps),
        moved.y.clamp(lo.y + eps, hi.y - eps),
    );
    next.battery = state.battery - dt;
    Ok(next)
}

/// Pairs of UAVs closer than `min_sep`, logged as a warning.
pub fn separation_warnings(states: &[UavState], min_sep: f64) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for (a, sa) in states.iter().enumerate() {
        for sb in &states[a + 1..] {
            let d = (sa.position - sb.position).norm();
            if d < min_sep {
                out.push((sa.id, sb.id, d));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use proptest::prelude::*;

    fn grid(n: usize) -> Arc<Grid> {
        Arc::new(Grid::new(Vec2::ZERO, 25.0, n, n).unwrap())
    }

    #[test]
    fn constant_density_is_fixed_point() {
        let g = grid(30);
        let c = 3.5e-6;
        let p = solve_potential(&ScalarField::constant(Arc::clone(&g), c), 5000.0).unwrap();
        let err =
            p.u.values()
                .iter()
                .map(|v| (v - c).abs())
                .fold(0.0, f64::max);
        assert!(err <= 1e-8, "{err}");
        assert!(p.residual <= POTENTIAL_TOLERANCE);
        let z = solve_potential(&ScalarField::zeros(g), 5000.0).unwrap();
        assert!(z.u.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn point_source_decays_along_axes() {
        let g = grid(41);
        let mut m = vec![0.0; g.len()];
        m[g.index(20, 20)] = 1.0;
        let p = solve_potential(
            &ScalarField::from_values(Arc::clone(&g), m).unwrap(),
            5000.0,
        )
        .unwrap();
        for k in 20..40 {
            assert!(p.u.get(k + 1, 20) < p.u.get(k, 20));
            assert!(p.u.get(20 - (k - 19), 20) < p.u.get(20 - (k - 20), 20));
            assert!(p.u.get(20, k + 1) < p.u.get(20, k));
        }
    }

    #[test]
    fn maximum_principle_with_land() {
        let land = Polygon::rectangle(Vec2::new(300.0, 0.0), Vec2::new(400.0, 600.0));
        let g = Arc::new(
            Grid::new(Vec2::ZERO, 25.0, 30, 30)
                .unwrap()
                .with_land(&[land]),
        );
        let m = ScalarField::from_fn(Arc::clone(&g), |p| {
            (p.x * 0.01).sin().abs() + (p.y * 0.003).cos().abs()
        });
        let p = solve_potential(&m, 5000.0).unwrap();
        let (lo, hi) = sea_range(&g, m.values());
        for (v, s) in p.u.values().iter().zip(g.sea_mask()) {
            if *s {
                assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn guidance_points_at_blob() {
        let g = grid(41);
        let c = g.cell_center(20, 20);
        let m = ScalarField::from_fn(Arc::clone(&g), |p| {
            (-(p - c).norm_squared() / (2.0 * 60.0f64.powi(2))).exp()
        });
        let p = solve_potential(&m, 5000.0).unwrap();
        let Guidance::Direction(d) = guidance_direction(&p, c + Vec2::new(180.0, 0.0)).unwrap()
        else {
            panic!("degenerate");
        };
        assert!((d.norm() - 1.0).abs() < 1e-12);
        let off = wrap_angle(d.angle() - PI).abs();
        assert!(off < 1f64.to_radians(), "{off}");
        let flat = solve_potential(&ScalarField::constant(g, 1e-6), 5000.0).unwrap();
        assert_eq!(guidance_direction(&flat, c).unwrap(), Guidance::Degenerate);
    }

    #[test]
    fn aligned_step_is_straight() {
        let g = grid(40);
        let s = UavState::new(0, Vec2::new(300.0, 300.0), 0.3);
        let n = uav_step(&s, Guidance::Direction(Vec2::from_angle(0.3)), &g, 3.0).unwrap();
        assert!(((n.position - s.position).norm() - 24.0).abs() < 1e-12);
        assert_eq!(n.speed, s.speed);
        assert!(n.omega.abs() < 1e-15);
    }

    #[test]
    fn turn_is_rate_limited() {
        let g = grid(40);
        let s = UavState::new(0, Vec2::new(500.0, 500.0), 0.0);
        let n = uav_step(&s, Guidance::Direction(Vec2::new(0.0, 1.0)), &g, 3.0).unwrap();
        assert_eq!(n.omega, 0.5);
        assert!((n.heading - 1.5).abs() < 1e-15);
        let small = uav_step(&s, Guidance::Direction(Vec2::from_angle(-0.9)), &g, 3.0).unwrap();
        assert!((small.heading + 0.9).abs() < 1e-12);
        let keep = uav_step(&s, Guidance::Degenerate, &g, 3.0).unwrap();
        assert_eq!(keep.heading, 0.0);
    }

    #[test]
    fn edge_override_turns_back() {
        let g = grid(40);
        let s = UavState::new(0, Vec2::new(990.0, 500.0), 0.0);
        let n = uav_step(&s, Guidance::Direction(Vec2::new(1.0, 0.0)), &g, 3.0).unwrap();
        assert!(n.omega.abs() == 0.5);
        assert!(g.contains(n.position));
    }

    #[test]
    fn attraction_toward_blob() {
        let g = grid(60);
        let c = g.cell_center(45, 45);
        let m = ScalarField::from_fn(Arc::clone(&g), |p| {
            (-(p - c).norm_squared() / (2.0 * 50.0f64.powi(2))).exp()
        });
        let field = GuidanceField::new(&solve_potential(&m, 5000.0).unwrap());
        let mut s = UavState::new(0, Vec2::new(200.0, 300.0), 0.0);
        let mut d = (s.position - c).norm();
        while d > 47.5 {
            s = uav_step(&s, field.direction(s.position).unwrap(), &g, 3.0).unwrap();
            let nd = (s.position - c).norm();
            assert!(nd < d, "{nd} >= {d}");
            d = nd;
        }
    }

    #[test]
    fn separation_watch() {
        let a = UavState::new(0, Vec2::new(0.0, 0.0), 0.0);
        let b = UavState::new(1, Vec2::new(30.0, 0.0), 0.0);
        let c = UavState::new(2, Vec2::new(300.0, 0.0), 0.0);
        assert_eq!(separation_warnings(&[a, b, c], 50.0), vec![(0, 1, 30.0)]);
    }

    proptest! {
        #[test]
        fn step_invariants(
            x in 0.0f64..1000.0, y in 0.0f64..1000.0, th in -4.0f64..4.0, want in -4.0f64..4.0, dt in 0.5f64..5.0,
        ) {
            let g = grid(40);
            let s = UavState::new(0, Vec2::new(x, y), th);
            let n = uav_step(&s, Guidance::Direction(Vec2::from_angle(want)), &g, dt).unwrap();
            prop_assert!(n.omega.abs() <= s.omega_max);
            prop_assert_eq!(n.speed, s.speed);
            prop_assert!(g.contains(n.position));
            prop_assert!((n.position - s.position).norm() <= s.speed * dt + 1e-9);
            let again = uav_step(&s, Guidance::Direction(Vec2::from_angle(want)), &g, dt).unwrap();
            prop_assert_eq!(n, again);
        }
    }
}
