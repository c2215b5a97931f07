//! Drifter observations, particle advection through a steady field, and
//! the drift-error → diffusion link.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Vec2, VectorField};

/// Drifters faster than this are treated as corrupt reports.
pub const MAX_DRIFTER_SPEED: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DrifterId(pub String);

impl fmt::Display for DrifterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DrifterId {
    fn from(s: &str) -> Self {
        DrifterId(s.to_owned())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DrifterRole {
    /// Spread over the domain for global flow accuracy.
    Fitting,
    /// Near the target region for local accuracy.
    Local,
    /// Held out of fitting; used only to measure drift error.
    Validation,
}

impl DrifterRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DrifterRole::Fitting => "fitting",
            DrifterRole::Local => "local",
            DrifterRole::Validation => "validation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fitting" | "global" => Some(DrifterRole::Fitting),
            "local" => Some(DrifterRole::Local),
            "validation" => Some(DrifterRole::Validation),
            _ => None,
        }
    }

    pub fn used_for_fitting(self) -> bool {
        !matches!(self, DrifterRole::Validation)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrifterObservation {
    pub drifter_id: DrifterId,
    /// Seconds since the mission epoch.
    pub timestamp: f64,
    pub position: Vec2,
    pub velocity: Vec2,
    pub role: DrifterRole,
}

/// Drops reports over the speed gate (with a warning), sorts by time and
/// rejects streams whose per-drifter timestamps are not strictly increasing.
pub fn sanitize_observations(mut obs: Vec<DrifterObservation>) -> Result<Vec<DrifterObservation>> {
    obs.retain(|o| {
        let ok = o.velocity.is_finite() && o.position.is_finite() && o.velocity.norm() < MAX_DRIFTER_SPEED;
        if !ok {
            log::warn!(
                "dropping report from drifter {} at t = {} s: speed {:.2} m/s fails the sanity gate",
                o.drifter_id,
                o.timestamp,
                o.velocity.norm()
            );
        }
        ok
    });
    let mut last: BTreeMap<&DrifterId, f64> = BTreeMap::new();
    for o in &obs {
        if let Some(&prev) = last.get(&o.drifter_id) {
            if !(o.timestamp > prev) {
                return Err(Error::Input(format!(
                    "drifter {} timestamps are not strictly increasing ({} after {})",
                    o.drifter_id, o.timestamp, prev
                )));
            }
        }
        last.insert(&o.drifter_id, o.timestamp);
    }
    let mut obs = obs;
    obs.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.drifter_id.cmp(&b.drifter_id))
    });
    Ok(obs)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub positions: Vec<Vec2>,
    /// Set when the particle hit land or the grid edge and stopped.
    pub frozen: bool,
    pub frozen_at: Option<f64>,
}

impl Trajectory {
    pub fn last_position(&self) -> Vec2 {
        *self.positions.last().expect("trajectory has a start point")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Velocity at `p`, or `None` outside the domain or over land.
fn velocity_at(w: &VectorField, p: Vec2) -> Option<Vec2> {
    if !w.grid().is_sea_at(p) {
        return None;
    }
    w.sample(p).ok()
}

fn rk4_step(w: &VectorField, p: Vec2, dt: f64) -> Option<Vec2> {
    let k1 = velocity_at(w, p)?;
    let k2 = velocity_at(w, p + k1 * (0.5 * dt))?;
    let k3 = velocity_at(w, p + k2 * (0.5 * dt))?;
    let k4 = velocity_at(w, p + k3 * dt)?;
    let next = p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    w.grid().is_sea_at(next).then_some(next)
}

/// Classical RK4 through a steady field from time `t0`. The last step is
/// shortened to land exactly on `t0 + duration`.
pub fn advect_from(
    z0: Vec2,
    t0: f64,
    w: &VectorField,
    duration: f64,
    dt: f64,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::config(format!(
            "advection step must be positive, got {dt}"
        )));
    }
    if !w.grid().contains(z0) {
        return Err(Error::OutOfDomain { x: z0.x, y: z0.y });
    }
    let mut traj = Trajectory {
        times: vec![t0],
        positions: vec![z0],
        frozen: false,
        frozen_at: None,
    };
    if !w.grid().is_sea_at(z0) {
        traj.frozen = true;
        traj.frozen_at = Some(t0);
    }
    let steps = (duration / dt - 1e-9).ceil().max(0.0) as usize;
    let mut p = z0;
    for n in 0..steps {
        let t = t0 + n as f64 * dt;
        let h = dt.min(t0 + duration - t);
        if !traj.frozen {
            match rk4_step(w, p, h) {
                Some(next) => p = next,
                None => {
                    traj.frozen = true;
                    traj.frozen_at = Some(t);
                }
            }
        }
        traj.times.push(t + h);
        traj.positions.push(p);
    }
    Ok(traj)
}

pub fn advect(z0: Vec2, w: &VectorField, duration: f64, dt: f64) -> Result<Trajectory> {
    advect_from(z0, 0.0, w, duration, dt)
}

/// Mean distance `S = (1/N)·Σ‖z_r − z_s‖` over drifters matched by id.
pub fn position_error(
    reference: &[(DrifterId, Vec2)],
    simulated: &[(DrifterId, Vec2)],
) -> Result<f64> {
    Ok(mean(&paired_distances(reference, simulated)?))
}

/// Per-drifter distances, in reference order.
pub fn paired_distances(
    reference: &[(DrifterId, Vec2)],
    simulated: &[(DrifterId, Vec2)],
) -> Result<Vec<f64>> {
    if reference.is_empty() {
        return Err(Error::Pairing("no drifters to compare".into()));
    }
    if reference.len() != simulated.len() {
        return Err(Error::Pairing(format!(
            "{} reference positions but {} simulated",
            reference.len(),
            simulated.len()
        )));
    }
    let sim: BTreeMap<&DrifterId, Vec2> = simulated.iter().map(|(id, p)| (id, *p)).collect();
    if sim.len() != simulated.len() {
        return Err(Error::Pairing(
            "duplicate drifter id in simulated set".into(),
        ));
    }
    reference
        .iter()
        .map(|(id, z_r)| {
            sim.get(id)
                .map(|z_s| (*z_r - *z_s).norm())
                .ok_or_else(|| Error::Pairing(format!("drifter {id} has no simulated position")))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// How the squared displacement entering `D = S²/(4·T_u)` is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MsdMode {
    /// Square of the mean distance.
    #[default]
    SquaredMean,
    /// Mean of the squared distances.
    MeanSquare,
}

impl MsdMode {
    pub fn squared_displacement(self, distances: &[f64]) -> f64 {
        match self {
            MsdMode::SquaredMean => mean(distances).powi(2),
            MsdMode::MeanSquare => mean(&distances.iter().map(|d| d * d).collect::<Vec<_>>()),
        }
    }
}

/// `D = S² / (4·T_u)`, m²/s.
pub fn adaptive_diffusion(s: f64, update_interval: f64) -> Result<f64> {
    diffusion_from_msd(s * s, update_interval)
}

pub fn diffusion_from_msd(msd: f64, update_interval: f64) -> Result<f64> {
    if !(update_interval > 0.0) {
        return Err(Error::config("update interval must be positive"));
    }
    if !(msd >= 0.0) {
        return Err(Error::config("squared displacement must be non-negative"));
    }
    Ok(msd / (4.0 * update_interval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Grid;
    use proptest::prelude::*;
    use std::f64::consts::TAU;
    use std::sync::Arc;

    fn grid() -> Arc<Grid> {
        Arc::new(Grid::new(Vec2::ZERO, 10.0, 100, 100).unwrap())
    }

    fn rotation(g: &Arc<Grid>, omega: f64) -> VectorField {
        let c = g.center();
        VectorField::from_fn(Arc::clone(g), |p| {
            Vec2::new(-omega * (p.y - c.y), omega * (p.x - c.x))
        })
    }

    #[test]
    fn uniform_field_displacement() {
        let g = grid();
        let w = VectorField::uniform(Arc::clone(&g), Vec2::new(0.5, 0.0));
        let z0 = Vec2::new(100.0, 500.0);
        let t = advect(z0, &w, 600.0, 10.0).unwrap();
        assert!(!t.frozen);
        assert_eq!(t.len(), 61);
        assert!((t.last_position() - z0 - Vec2::new(300.0, 0.0)).norm() < 1e-9);
        assert!((t.times[60] - 600.0).abs() < 1e-12);
    }

    #[test]
    fn zero_field_is_stationary() {
        let g = grid();
        let w = VectorField::zeros(Arc::clone(&g));
        let z0 = Vec2::new(321.0, 123.0);
        let t = advect(z0, &w, 100.0, 10.0).unwrap();
        assert!(t.positions.iter().all(|&p| p == z0));
    }

    #[test]
    fn partial_last_step() {
        let g = grid();
        let w = VectorField::uniform(Arc::clone(&g), Vec2::new(1.0, 0.0));
        let t = advect(Vec2::new(100.0, 100.0), &w, 25.0, 10.0).unwrap();
        assert_eq!(t.times, vec![0.0, 10.0, 20.0, 25.0]);
        assert!((t.last_position().x - 125.0).abs() < 1e-9);
    }

    #[test]
    fn rotation_returns_after_one_period() {
        let g = grid();
        let omega = TAU / 600.0;
        let w = rotation(&g, omega);
        let radius = 200.0;
        let z0 = g.center() + Vec2::new(radius, 0.0);
        let t = advect(z0, &w, 600.0, 10.0).unwrap();
        assert!((t.last_position() - z0).norm() < 1e-4 * radius);
    }

    #[test]
    fn freezes_at_boundary() {
        let g = grid();
        let w = VectorField::uniform(Arc::clone(&g), Vec2::new(2.0, 0.0));
        let t = advect(Vec2::new(900.0, 500.0), &w, 600.0, 10.0).unwrap();
        assert!(t.frozen);
        let last = t.last_position();
        assert!(g.contains(last) && last.x > 975.0);
        assert_eq!(t.len(), 61);
    }

    #[test]
    fn position_error_examples() {
        let id = |s: &str| DrifterId::from(s);
        let a = vec![
            (id("a"), Vec2::new(0.0, 0.0)),
            (id("b"), Vec2::new(10.0, 0.0)),
        ];
        assert_eq!(position_error(&a, &a).unwrap(), 0.0);
        let one_r = vec![(id("a"), Vec2::new(0.0, 0.0))];
        let one_s = vec![(id("a"), Vec2::new(60.0, 80.0))];
        assert_eq!(position_error(&one_r, &one_s).unwrap(), 100.0);
        let s = vec![
            (id("b"), Vec2::new(10.0, 200.0)),
            (id("a"), Vec2::new(100.0, 0.0)),
        ];
        assert!((position_error(&a, &s).unwrap() - 150.0).abs() < 1e-12);
    }

    #[test]
    fn position_error_pairing_failures() {
        let id = |s: &str| DrifterId::from(s);
        let a = vec![(id("a"), Vec2::ZERO)];
        let b = vec![(id("a"), Vec2::ZERO), (id("b"), Vec2::ZERO)];
        assert!(matches!(position_error(&a, &b), Err(Error::Pairing(_))));
        let c = vec![(id("c"), Vec2::ZERO)];
        assert!(matches!(position_error(&a, &c), Err(Error::Pairing(_))));
        assert!(position_error(&[], &[]).is_err());
    }

    #[test]
    fn adaptive_diffusion_examples() {
        assert_eq!(adaptive_diffusion(0.0, 600.0).unwrap(), 0.0);
        assert!((adaptive_diffusion(100.0, 600.0).unwrap() - 10_000.0 / 2400.0).abs() < 1e-12);
        assert!((adaptive_diffusion(100.0, 600.0).unwrap() - 4.1667).abs() < 1e-4);
        assert!((adaptive_diffusion(40.0, 600.0).unwrap() - 0.6667).abs() < 1e-4);
        assert!(adaptive_diffusion(10.0, 0.0).is_err());
    }

    #[test]
    fn msd_modes() {
        let d = [100.0, 200.0];
        assert_eq!(MsdMode::SquaredMean.squared_displacement(&d), 22_500.0);
        assert_eq!(MsdMode::MeanSquare.squared_displacement(&d), 25_000.0);
    }

    #[test]
    fn sanitize_drops_fast_and_rejects_disorder() {
        let o = |id: &str, t: f64, v: f64| DrifterObservation {
            drifter_id: id.into(),
            timestamp: t,
            position: Vec2::ZERO,
            velocity: Vec2::new(v, 0.0),
            role: DrifterRole::Fitting,
        };
        let kept =
            sanitize_observations(vec![o("a", 0.0, 0.1), o("a", 10.0, 7.0), o("b", 5.0, 0.2)])
                .unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[1].drifter_id.0, "b");
        assert!(sanitize_observations(vec![o("a", 10.0, 0.1), o("a", 10.0, 0.1)]).is_err());
    }

    proptest! {
        #[test]
        fn position_error_symmetric_and_translation_invariant(
            pts in proptest::collection::vec((-500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0, -500.0f64..500.0), 1..8),
            shift in (-1000.0f64..1000.0, -1000.0f64..1000.0),
        ) {
            let r: Vec<_> = pts.iter().enumerate().map(|(k, p)| (DrifterId(k.to_string()), Vec2::new(p.0, p.1))).collect();
            let s: Vec<_> = pts.iter().enumerate().map(|(k, p)| (DrifterId(k.to_string()), Vec2::new(p.2, p.3))).collect();
            let d = Vec2::new(shift.0, shift.1);
            let rt: Vec<_> = r.iter().map(|(id, p)| (id.clone(), *p + d)).collect();
            let st: Vec<_> = s.iter().map(|(id, p)| (id.clone(), *p + d)).collect();
            let e = position_error(&r, &s).unwrap();
            prop_assert!((e - position_error(&s, &r).unwrap()).abs() < 1e-9);
            prop_assert!((e - position_error(&rt, &st).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn diffusion_monotone(s1 in 0.0f64..500.0, ds in 0.001f64..100.0, t in 1.0f64..5000.0, dt in 0.1f64..1000.0) {
            prop_assert!(adaptive_diffusion(s1 + ds, t).unwrap() > adaptive_diffusion(s1, t).unwrap());
            if s1 > 0.0 {
                prop_assert!(adaptive_diffusion(s1, t + dt).unwrap() < adaptive_diffusion(s1, t).unwrap());
            }
        }
    }
}
