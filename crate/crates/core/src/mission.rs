//! The closed loop: windowed flow fitting, drifter error → adaptive
//! diffusion, belief evolution, HEDAC control and sensing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::belief::{apply_sensing, init_uniform_disc, ProbabilityField, Transport};
use crate::error::{Error, Result};
use crate::fitting::{
    pso_fit_with_basis, quasi_steady_schedule, FitTemplate, Reduction, ScheduledWindow,
};
use crate::geometry::{GeoProjection, Grid, Polygon, ScalarField, Vec2, VectorField};
use crate::hedac::{separation_warnings, uav_step, GuidanceField, PotentialSolver, UavState};
use crate::io::{self, SnapshotHeader};
use crate::lagrangian::{
    advect_from, paired_distances, sanitize_observations, DrifterObservation, DrifterRole, MsdMode,
    Trajectory,
};
use crate::pso::PsoSettings;
use crate::sensing::{capture, DetectionEvent, SensorModel, Target};
use crate::surrogate::{
    BoundarySpec, OptimizationVector, Side, SurrogateBasis, SurrogateFlow, SurrogateModel,
    DEFAULT_BOUNDS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    /// Box size east × north, m.
    pub extent: [f64; 2],
    pub cell_size: f64,
    /// Local-plane origin as `[lat, lon]`, degrees.
    pub reference: [f64; 2],
    /// Land rings of `[lon, lat]` pairs.
    pub land: Vec<Vec<[f64; 2]>>,
    /// Land rings in local meters.
    pub land_local: Vec<Vec<Vec2>>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            extent: [2500.0, 2500.0],
            cell_size: 25.0,
            reference: [44.90, 14.36],
            land: Vec::new(),
            land_local: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Quasi-steady window length T_u, s.
    pub update_interval: f64,
    pub bounds: [f64; 2],
    /// South, east, north, west.
    pub sides: [Side; 4],
    pub circle_control_points: usize,
    /// Full boundary layout; overrides `sides` and `circle_control_points`.
    pub boundary: Option<BoundarySpec>,
    pub pso: PsoSettings,
    pub reduction: Reduction,
    /// Diffusivity before the first drifter error is known, m²/s.
    pub initial_diffusion: f64,
    pub msd: MsdMode,
    /// RK4 step for drifter and target advection, s.
    pub advection_step: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            update_interval: 600.0,
            bounds: [DEFAULT_BOUNDS.0, DEFAULT_BOUNDS.1],
            sides: [
                Side::Open { control_points: 4 },
                Side::Wall,
                Side::Open { control_points: 4 },
                Side::Wall,
            ],
            circle_control_points: 8,
            boundary: None,
            pso: PsoSettings::default(),
            reduction: Reduction::Latest,
            initial_diffusion: 1.0,
            msd: MsdMode::SquaredMean,
            advection_step: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDrifters {
    pub fitting: usize,
    pub validation: usize,
    /// Drifters start uniformly within this radius of the deployment center.
    pub spread: f64,
    pub report_interval: f64,
    /// Velocity noise per component, m/s.
    pub noise: f64,
    /// Entries of the hidden truth vector are uniform in ±this.
    pub truth_amplitude: f64,
    pub truth_seed: Option<u64>,
}

impl Default for SyntheticDrifters {
    fn default() -> Self {
        SyntheticDrifters {
            fitting: 9,
            validation: 3,
            spread: 500.0,
            report_interval: 10.0,
            noise: 0.02,
            truth_amplitude: 20.0,
            truth_seed: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DrifterConfig {
    /// Recorded beacon CSV; when absent, drifters are simulated.
    pub csv: Option<PathBuf>,
    pub synthetic: SyntheticDrifters,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPattern {
    /// Four points at half radius along the axes, plus the center for five.
    #[default]
    Plus,
    Random,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    /// Defaults to the domain center.
    pub center: Option<Vec2>,
    pub radius: f64,
    pub count: usize,
    pub pattern: TargetPattern,
    pub positions: Vec<Vec2>,
    pub drifting: bool,
    /// Belief snapshot (`.bin` with its sidecar) to start from instead of
    /// the uniform disc, e.g. the evolved belief of an earlier sortie.
    /// Renormalized to unit mass.
    pub prior: Option<PathBuf>,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            center: None,
            radius: 300.0,
            count: 4,
            pattern: TargetPattern::Plus,
            positions: Vec::new(),
            drifting: false,
            prior: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavConfig {
    pub start: Vec2,
    /// Radians from east; defaults to pointing at the deployment center.
    #[serde(default)]
    pub heading: Option<f64>,
    #[serde(default = "default_speed")]
    pub speed: f64,
    #[serde(default = "default_omega_max")]
    pub omega_max: f64,
    /// Endurance counted from search start, s.
    #[serde(default = "default_battery")]
    pub battery: f64,
}

fn default_speed() -> f64 {
    8.0
}

fn default_omega_max() -> f64 {
    0.5
}

fn default_battery() -> f64 {
    1800.0
}

impl UavConfig {
    pub fn at(start: Vec2) -> Self {
        UavConfig {
            start,
            heading: None,
            speed: default_speed(),
            omega_max: default_omega_max(),
            battery: default_battery(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HedacConfig {
    pub alpha: f64,
    /// Reserved; read and recorded but not used by any computation.
    pub beta: f64,
    pub min_separation: f64,
}

impl Default for HedacConfig {
    fn default() -> Self {
        HedacConfig {
            alpha: 5000.0,
            beta: 0.1,
            min_separation: 50.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Deployment time, RFC 3339. Mission time 0.
    pub epoch: String,
    pub control_dt: f64,
    /// Search start after deployment, s.
    pub start_delay: f64,
    /// Search duration, s.
    pub duration: f64,
    /// Belief snapshot cadence, s; 0 disables intermediate snapshots.
    pub snapshot_interval: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            epoch: "2024-06-12T10:15:00Z".into(),
            control_dt: 3.0,
            start_delay: 600.0,
            duration: 1500.0,
            snapshot_interval: 300.0,
        }
    }
}

/// Complete scenario. The default is the desk-scale replica of the first
/// field mission: a 2.5 km box, four targets in a plus inside a 300 m
/// disc, two UAVs starting about 1.2 km away, 25 minutes of search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MissionConfig {
    pub seed: u64,
    pub domain: DomainConfig,
    pub flow: FlowConfig,
    pub drifters: DrifterConfig,
    pub targets: TargetConfig,
    pub uavs: Vec<UavConfig>,
    pub sensor: SensorModel,
    pub hedac: HedacConfig,
    pub timing: TimingConfig,
}

impl Default for MissionConfig {
    fn default() -> Self {
        MissionConfig {
            seed: 1,
            domain: DomainConfig::default(),
            flow: FlowConfig::default(),
            drifters: DrifterConfig::default(),
            targets: TargetConfig::default(),
            uavs: vec![
                UavConfig::at(Vec2::new(400.0, 400.0)),
                UavConfig::at(Vec2::new(550.0, 250.0)),
            ],
            sensor: SensorModel::default(),
            hedac: HedacConfig::default(),
            timing: TimingConfig::default(),
        }
    }
}

fn resolve(p: &Path, base_dir: Option<&Path>) -> PathBuf {
    match base_dir {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

fn whole_multiple(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let n = r.round();
    ((r - n).abs() < 1e-9 && n >= 0.0).then_some(n as usize)
}

impl MissionConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn projection(&self) -> GeoProjection {
        GeoProjection::new(self.domain.reference[0], self.domain.reference[1])
    }

    pub fn epoch(&self) -> Result<DateTime<Utc>> {
        io::parse_epoch(&self.timing.epoch)
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        let d = &self.domain;
        let proj = self.projection();
        let mut land: Vec<Polygon> = d
            .land
            .iter()
            .map(|ring| Polygon::new(ring.iter().map(|p| proj.to_local(p[1], p[0])).collect()))
            .collect();
        land.extend(d.land_local.iter().map(|r| Polygon::new(r.clone())));
        if let Some(k) = land.iter().position(|p| p.vertices().len() < 3) {
            return Err(Error::config(format!(
                "land polygon {k} has fewer than 3 vertices"
            )));
        }
        Ok(Arc::new(Grid::from_extent(
            d.extent[0],
            d.extent[1],
            d.cell_size,
            &land,
        )?))
    }

    pub fn boundary_spec(&self, grid: &Grid) -> BoundarySpec {
        self.flow.boundary.clone().unwrap_or_else(|| {
            BoundarySpec::rectangle(
                grid,
                self.flow.sides,
                BoundarySpec::default_open(grid, self.flow.circle_control_points),
            )
        })
    }

    pub fn target_center(&self, grid: &Grid) -> Vec2 {
        self.targets.center.unwrap_or_else(|| grid.center())
    }

    /// Per-window UAV control ticks and other derived counts.
    pub fn schedule(&self) -> Result<Schedule> {
        let t = &self.timing;
        let dt = t.control_dt;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!(
                "timing.control_dt must be positive, got {dt}"
            )));
        }
        let multiple = |v: f64, name: &str| {
            whole_multiple(v, dt).ok_or_else(|| {
                Error::config(format!(
                    "{name} = {v} s is not a whole number of control steps ({dt} s)"
                ))
            })
        };
        let window = multiple(self.flow.update_interval, "flow.update_interval")?;
        if window == 0 {
            return Err(Error::config("flow.update_interval must be positive"));
        }
        let capture = multiple(self.sensor.capture_interval, "sensor.capture_interval")?;
        if capture == 0 {
            return Err(Error::config("sensor.capture_interval must be positive"));
        }
        let delay = multiple(t.start_delay, "timing.start_delay")?;
        let search = multiple(t.duration, "timing.duration")?;
        if search == 0 {
            return Err(Error::config("timing.duration must be positive"));
        }
        let snapshot = if t.snapshot_interval == 0.0 {
            None
        } else {
            Some(multiple(t.snapshot_interval, "timing.snapshot_interval")?).filter(|&n| n > 0)
        };
        Ok(Schedule {
            dt,
            window_ticks: window,
            capture_ticks: capture,
            delay_ticks: delay,
            search_ticks: search,
            snapshot_ticks: snapshot,
        })
    }

    /// Checks everything that can be checked without running.
    /// Relative drifter paths resolve against `base_dir`.
    pub fn validate(&self, base_dir: Option<&Path>) -> Result<()> {
        self.schedule()?;
        self.epoch()?;
        let grid = self.grid()?;
        self.boundary_spec(&grid).validate(&grid)?;
        self.sensor.validate()?;
        let f = &self.flow;
        if !(f.bounds[0] < f.bounds[1]) {
            return Err(Error::config(
                "flow.bounds must be [lower, upper] with lower < upper",
            ));
        }
        if !(f.initial_diffusion >= 0.0) {
            return Err(Error::config("flow.initial_diffusion must be non-negative"));
        }
        if !(f.advection_step > 0.0) {
            return Err(Error::config("flow.advection_step must be positive"));
        }
        if !(self.hedac.alpha > 0.0) {
            return Err(Error::config("hedac.alpha must be positive"));
        }
        let s = &self.drifters.synthetic;
        if self.drifters.csv.is_none() {
            if s.fitting == 0 {
                return Err(Error::config(
                    "drifters.synthetic.fitting must be at least 1",
                ));
            }
            if !(s.report_interval > 0.0
                && s.noise >= 0.0
                && s.spread > 0.0
                && s.truth_amplitude >= 0.0)
            {
                return Err(Error::config(
                    "drifters.synthetic has a non-positive interval, spread or negative noise",
                ));
            }
        }
        if let Some(path) = self.drifter_path(base_dir) {
            if !path.is_file() {
                return Err(Error::Input(format!(
                    "drifter file {} does not exist",
                    path.display()
                )));
            }
        }
        if let Some(path) = self.prior_path(base_dir) {
            if !path.is_file() {
                return Err(Error::Input(format!(
                    "prior belief {} does not exist",
                    path.display()
                )));
            }
        }
        if !(self.targets.radius > 0.0) {
            return Err(Error::config("targets.radius must be positive"));
        }
        for (k, p) in self.target_positions(&grid)?.iter().enumerate() {
            if !grid.is_sea_at(*p) {
                return Err(Error::config(format!(
                    "target {k} at ({}, {}) is not on a sea cell",
                    p.x, p.y
                )));
            }
        }
        for (k, u) in self.uavs.iter().enumerate() {
            if !grid.contains(u.start) {
                return Err(Error::config(format!(
                    "uavs[{k}].start lies outside the domain"
                )));
            }
            if !(u.speed > 0.0 && u.omega_max > 0.0 && u.battery >= 0.0) {
                return Err(Error::config(format!(
                    "uavs[{k}] needs positive speed and omega_max"
                )));
            }
        }
        Ok(())
    }

    pub fn drifter_path(&self, base_dir: Option<&Path>) -> Option<PathBuf> {
        self.drifters.csv.as_ref().map(|p| resolve(p, base_dir))
    }

    pub fn prior_path(&self, base_dir: Option<&Path>) -> Option<PathBuf> {
        self.targets.prior.as_ref().map(|p| resolve(p, base_dir))
    }

    /// Deployment positions of the targets.
    pub fn target_positions(&self, grid: &Grid) -> Result<Vec<Vec2>> {
        let t = &self.targets;
        let c = self.target_center(grid);
        let half = 0.5 * t.radius;
        match t.pattern {
            TargetPattern::Plus => {
                let mut pts = vec![
                    c + Vec2::new(half, 0.0),
                    c + Vec2::new(0.0, half),
                    c + Vec2::new(-half, 0.0),
                    c + Vec2::new(0.0, -half),
                ];
                match t.count {
                    4 => {}
                    5 => pts.insert(0, c),
                    n => {
                        return Err(Error::config(format!(
                            "plus pattern needs 4 or 5 targets, got {n}"
                        )))
                    }
                }
                Ok(pts)
            }
            TargetPattern::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, 0x7461_7267));
                Ok((0..t.count)
                    .map(|_| sample_disc(&mut rng, c, t.radius))
                    .collect())
            }
            TargetPattern::Explicit => {
                if t.positions.is_empty() {
                    return Err(Error::config(
                        "explicit target pattern needs targets.positions",
                    ));
                }
                Ok(t.positions.clone())
            }
        }
    }
}

/// Tick counts derived from the timing configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub dt: f64,
    pub window_ticks: usize,
    pub capture_ticks: usize,
    pub delay_ticks: usize,
    pub search_ticks: usize,
    pub snapshot_ticks: Option<usize>,
}

impl Schedule {
    pub fn total_ticks(&self) -> usize {
        self.delay_ticks + self.search_ticks
    }

    pub fn end_time(&self) -> f64 {
        self.total_ticks() as f64 * self.dt
    }

    pub fn search_start(&self) -> f64 {
        self.delay_ticks as f64 * self.dt
    }
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_disc(rng: &mut ChaCha8Rng, c: Vec2, r: f64) -> Vec2 {
    let rho = r * rng.random::<f64>().sqrt();
    let th = rng.random::<f64>() * std::f64::consts::TAU;
    c + Vec2::from_angle(th) * rho
}

/// Hidden truth flow and the drifter reports it produces.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    pub b: Vec<f64>,
    pub flow: VectorField,
    pub observations: Vec<DrifterObservation>,
}

/// Truth vector uniform in ±amplitude; drifters advected through it by RK4
/// and reported every `report_interval` with Gaussian velocity noise.
/// Beached or exited drifters stop reporting.
pub fn synthesize_drifters(
    config: &MissionConfig,
    basis: &SurrogateBasis,
    until: f64,
) -> Result<SyntheticTruth> {
    let s = &config.drifters.synthetic;
    let grid = basis.grid();
    let truth_seed = s
        .truth_seed
        .unwrap_or_else(|| sub_seed(config.seed, 0x7472_7574));
    let mut rng = ChaCha8Rng::seed_from_u64(truth_seed);
    let b: Vec<f64> = (0..basis.dim())
        .map(|_| {
            if s.truth_amplitude > 0.0 {
                rng.random_range(-s.truth_amplitude..=s.truth_amplitude)
            } else {
                0.0
            }
        })
        .collect();
    let flow = basis.flow(&b)?.fused;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, 0x6472_6966));
    let noise =
        Normal::new(0.0, s.noise).map_err(|e| Error::config(format!("drifter noise: {e}")))?;
    let center = config.target_center(grid);
    let roster = (0..s.fitting)
        .map(|k| (format!("D{:02}", k + 1), DrifterRole::Fitting))
        .chain((0..s.validation).map(|k| (format!("V{:02}", k + 1), DrifterRole::Validation)));
    let mut obs = Vec::new();
    for (id, role) in roster {
        let mut start = None;
        for _ in 0..10_000 {
            let p = sample_disc(&mut rng, center, s.spread);
            if grid.contains(p) && grid.is_sea_at(p) {
                start = Some(p);
                break;
            }
        }
        let z0 = start.ok_or_else(|| Error::config("no sea cell within the drifter spread"))?;
        let traj = advect_from(z0, 0.0, &flow, until, s.report_interval)?;
        for (&t, &p) in traj.times.iter().zip(&traj.positions) {
            if traj.frozen_at.is_some_and(|f| t > f) {
                break;
            }
            let v = flow.sample(p)? + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            obs.push(DrifterObservation {
                drifter_id: id.as_str().into(),
                timestamp: t,
                position: p,
                velocity: v,
                role,
            });
        }
    }
    obs.sort_by(|a, b| {
        a.timestamp
            .total_cmp(&b.timestamp)
            .then_with(|| a.drifter_id.cmp(&b.drifter_id))
    });
    Ok(SyntheticTruth {
        b,
        flow,
        observations: obs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub t: f64,
    pub residual_mass: f64,
    pub diffusion: f64,
    pub position_error: Option<f64>,
    pub window: usize,
    pub coverage: f64,
    pub images: usize,
    pub detections: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowRecord {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// E_d of the flow active in this window; `None` for the initial still
    /// flow and for carried-over windows.
    pub e_d: Option<f64>,
    pub e_d_zero: Option<f64>,
    pub observations: usize,
    pub carried_over: bool,
    pub diffusion: f64,
    pub position_error: Option<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    /// Wall-clock fit time; kept out of the written log.
    pub fit_time: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UavTrackRow {
    pub id: usize,
    pub t: f64,
    pub position: Vec2,
    pub heading: f64,
    pub omega: f64,
    pub battery: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Termination {
    #[default]
    Duration,
    Battery,
    Aborted,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Duration => "duration",
            Termination::Battery => "battery",
            Termination::Aborted => "aborted",
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct MissionLog {
    pub config: MissionConfig,
    pub grid: Option<Arc<Grid>>,
    pub search_start: f64,
    pub metrics: Vec<MetricsRow>,
    pub windows: Vec<WindowRecord>,
    pub flows: Vec<SurrogateFlow>,
    pub detections: Vec<DetectionEvent>,
    pub uav_tracks: Vec<UavTrackRow>,
    pub drifters: Vec<DrifterObservation>,
    pub targets: Vec<Target>,
    /// `(t, belief density)`.
    pub snapshots: Vec<(f64, ScalarField)>,
    /// Removed mass of every sensing update, in order.
    pub removed_mass: Vec<f64>,
    pub termination: Termination,
    pub truth_b: Option<Vec<f64>>,
}

/// Result of a run; `error` is set when a subsystem aborted the loop, in
/// which case `log` holds everything up to the failure.
#[derive(Debug)]
pub struct MissionOutcome {
    pub log: MissionLog,
    pub error: Option<Error>,
}

/// Reads a belief snapshot that must lie on `grid`.
fn load_prior(path: &Path, grid: &Arc<Grid>) -> Result<ProbabilityField> {
    let (h, values) = io::read_snapshot(path)?;
    let same = h.nx == grid.nx()
        && h.ny == grid.ny()
        && (h.cell_size - grid.cell_size()).abs() < 1e-9
        && (h.origin - grid.origin()).norm() < 1e-6;
    if !same {
        return Err(Error::Input(format!(
            "prior belief {} is on a {}x{} grid at h = {}, the mission grid is {}x{} at h = {}",
            path.display(),
            h.nx,
            h.ny,
            h.cell_size,
            grid.nx(),
            grid.ny(),
            grid.cell_size()
        )));
    }
    ProbabilityField::from_density(ScalarField::from_values(Arc::clone(grid), values)?)
        .map_err(|e| Error::Input(format!("prior belief {}: {e}", path.display())))
}

/// A validated, ready-to-run mission.
pub struct Mission {
    config: MissionConfig,
    schedule: Schedule,
    grid: Arc<Grid>,
    basis: SurrogateBasis,
    observations: Vec<DrifterObservation>,
    truth: Option<SyntheticTruth>,
    prior: Option<ProbabilityField>,
}

impl Mission {
    pub fn prepare(config: &MissionConfig, base_dir: Option<&Path>) -> Result<Self> {
        config.validate(base_dir)?;
        let schedule = config.schedule()?;
        let grid = config.grid()?;
        let spec = config.boundary_spec(&grid);
        let basis = SurrogateModel::new(spec, Arc::clone(&grid))?.basis()?;
        let (observations, truth) = match config.drifter_path(base_dir) {
            Some(path) => {
                let raw = io::read_drifter_csv(&path, &config.projection(), config.epoch()?)?;
                (sanitize_observations(raw)?, None)
            }
            None => {
                let truth = synthesize_drifters(config, &basis, schedule.end_time())?;
                (truth.observations.clone(), Some(truth))
            }
        };
        let prior = config
            .prior_path(base_dir)
            .map(|p| load_prior(&p, &grid))
            .transpose()?;
        Ok(Mission {
            config: config.clone(),
            schedule,
            grid,
            basis,
            observations,
            truth,
            prior,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn observations(&self) -> &[DrifterObservation] {
        &self.observations
    }

    pub fn basis(&self) -> &SurrogateBasis {
        &self.basis
    }

    pub fn run(self) -> MissionOutcome {
        let mut log = MissionLog {
            config: self.config.clone(),
            grid: Some(Arc::clone(&self.grid)),
            search_start: self.schedule.search_start(),
            drifters: self.observations.clone(),
            truth_b: self.truth.as_ref().map(|t| t.b.clone()),
            ..Default::default()
        };
        let error = self.run_into(&mut log).err();
        if error.is_some() {
            log.termination = Termination::Aborted;
        }
        MissionOutcome { log, error }
    }

    fn fit_template(&self) -> FitTemplate {
        let f = &self.config.flow;
        let mut pso = f.pso.clone();
        pso.seed = pso
            .seed
            .wrapping_add(sub_seed(self.config.seed, 0x7073_6f00));
        FitTemplate {
            spec: self.config.boundary_spec(&self.grid),
            grid: Arc::clone(&self.grid),
            bounds: (f.bounds[0], f.bounds[1]),
            pso,
            reduction: f.reduction,
        }
    }

    fn run_into(&self, log: &mut MissionLog) -> Result<()> {
        let cfg = &self.config;
        let sch = self.schedule;
        let dt = sch.dt;
        let t_u = cfg.flow.update_interval;
        let grid = &self.grid;
        let bounds = (cfg.flow.bounds[0], cfg.flow.bounds[1]);
        let template = self.fit_template();
        let windows = quasi_steady_schedule(
            &self.observations,
            t_u,
            &template,
            Some(0.0),
            Some(sch.end_time()),
        )?;

        let center = cfg.target_center(grid);
        let mut belief = match &self.prior {
            Some(p) => p.clone(),
            None => init_uniform_disc(center, cfg.targets.radius, Arc::clone(grid))?,
        };
        let mut targets: Vec<Target> = cfg
            .target_positions(grid)?
            .into_iter()
            .enumerate()
            .map(|(id, p)| Target {
                drifting: cfg.targets.drifting,
                ..Target::new(id, p)
            })
            .collect();
        let mut uavs: Vec<UavState> = cfg
            .uavs
            .iter()
            .enumerate()
            .map(|(id, u)| UavState {
                speed: u.speed,
                omega_max: u.omega_max,
                battery: u.battery,
                ..UavState::new(
                    id,
                    u.start,
                    u.heading.unwrap_or_else(|| (center - u.start).angle()),
                )
            })
            .collect();
        let potential = if uavs.is_empty() {
            None
        } else {
            Some(PotentialSolver::new(Arc::clone(grid), cfg.hedac.alpha)?)
        };

        let mut flow = SurrogateFlow::still(grid, self.basis.dim(), bounds, 0.0, t_u)?;
        let mut diffusion = cfg.flow.initial_diffusion;
        let mut position_error = None;
        let mut transport = Transport::new(&flow.fused, diffusion)?;
        let mut warm: Option<Vec<f64>> = None;
        log.windows.push(WindowRecord {
            index: 0,
            start: 0.0,
            end: t_u,
            e_d: None,
            e_d_zero: None,
            observations: 0,
            carried_over: false,
            diffusion,
            position_error: None,
            iterations: 0,
            evaluations: 0,
            fit_time: Duration::ZERO,
        });
        log.flows.push(flow.clone());
        let mut images = 0;
        self.record(log, &belief, 0.0, diffusion, position_error, 0, images);
        log.snapshots.push((0.0, belief.density().clone()));
        for u in &uavs {
            log.uav_tracks.push(track_row(u, sch.search_start()));
        }

        for tick in 1..=sch.total_ticks() {
            let t_prev = (tick - 1) as f64 * dt;
            if tick > 1 && (tick - 1) % sch.window_ticks == 0 {
                let k = (tick - 1) / sch.window_ticks;
                let previous = flow.clone();
                let (next, record) =
                    self.update_window(k, &windows, &previous, warm.as_deref(), diffusion)?;
                if !record.carried_over {
                    warm = Some(next.fitted.values.clone());
                }
                diffusion = record.diffusion;
                position_error = record.position_error;
                flow = next;
                transport = Transport::new(&flow.fused, diffusion)?;
                log.windows.push(record);
                log.flows.push(flow.clone());
            }
            transport.advance(&mut belief, dt)?;
            for target in targets.iter_mut().filter(|t| t.drifting) {
                let water = self.truth.as_ref().map_or(&flow.fused, |t| &t.flow);
                target.position = advect_from(
                    target.position,
                    t_prev,
                    water,
                    dt,
                    cfg.flow.advection_step.min(dt),
                )?
                .last_position();
            }
            let t = tick as f64 * dt;

            if tick > sch.delay_ticks {
                if let Some(solver) = &potential {
                    let u = solver.solve(belief.density())?;
                    let guide = GuidanceField::new(&u);
                    uavs = uavs
                        .iter()
                        .map(|s| uav_step(s, guide.direction(s.position)?, grid, dt))
                        .collect::<Result<_>>()?;
                    for (a, b, d) in separation_warnings(
                        &uavs
                            .iter()
                            .filter(|u| u.is_flying())
                            .cloned()
                            .collect::<Vec<_>>(),
                        cfg.hedac.min_separation,
                    ) {
                        log::warn!("t = {t} s: UAVs {a} and {b} are {d:.1} m apart");
                    }
                    let search_tick = tick - sch.delay_ticks;
                    if search_tick % sch.capture_ticks == 0 {
                        let shot =
                            capture(&uavs, &mut targets, &cfg.sensor, t, tick as u64, cfg.seed);
                        let polys: Vec<Polygon> =
                            shot.footprints.iter().map(|(_, p)| p.clone()).collect();
                        images += polys.len();
                        let removed = apply_sensing(&mut belief, &polys, cfg.sensor.recall, t)?;
                        log.removed_mass.push(removed);
                        log.detections.extend(shot.events);
                    }
                    for u in &uavs {
                        log.uav_tracks.push(track_row(u, t));
                    }
                }
            }
            let window = (tick - 1) / sch.window_ticks;
            self.record(log, &belief, t, diffusion, position_error, window, images);
            if sch.snapshot_ticks.is_some_and(|n| tick % n == 0) && tick != sch.total_ticks() {
                log.snapshots.push((t, belief.density().clone()));
            }
            if tick > sch.delay_ticks && !uavs.is_empty() && uavs.iter().all(|u| !u.is_flying()) {
                log::info!("all UAVs out of battery at t = {t} s");
                log.termination = Termination::Battery;
                break;
            }
        }
        let t_end = log.metrics.last().map_or(0.0, |m| m.t);
        log.snapshots.push((t_end, belief.density().clone()));
        log.targets = targets;
        Ok(())
    }

    fn record(
        &self,
        log: &mut MissionLog,
        belief: &ProbabilityField,
        t: f64,
        diffusion: f64,
        s: Option<f64>,
        window: usize,
        images: usize,
    ) {
        log.metrics.push(MetricsRow {
            t,
            residual_mass: belief.total_mass(),
            diffusion,
            position_error: s,
            window,
            coverage: belief.coverage_fraction(),
            images,
            detections: log.detections.len(),
        });
    }

    /// At the start of window `k`: fit on window `k − 1`'s reports and
    /// score the flow that was active during it against the validation
    /// drifters.
    fn update_window(
        &self,
        k: usize,
        windows: &[ScheduledWindow],
        previous: &SurrogateFlow,
        warm: Option<&[f64]>,
        diffusion_before: f64,
    ) -> Result<(SurrogateFlow, WindowRecord)> {
        let t_u = self.config.flow.update_interval;
        let (start, end) = (k as f64 * t_u, (k + 1) as f64 * t_u);
        let source = windows.get(k - 1);
        let mut record = WindowRecord {
            index: k,
            start,
            end,
            e_d: None,
            e_d_zero: None,
            observations: 0,
            carried_over: true,
            diffusion: diffusion_before,
            position_error: None,
            iterations: 0,
            evaluations: 0,
            fit_time: Duration::ZERO,
        };
        let flow = match source.and_then(|w| w.problem.as_ref()) {
            Some(problem) => {
                let mut problem = problem.clone();
                problem.warm_start = warm.map(<[f64]>::to_vec);
                let fit = pso_fit_with_basis(&problem, &self.basis)?;
                let fields = self.basis.flow(&fit.best.values)?;
                record.e_d = Some(fit.e_d_best);
                record.e_d_zero = Some(fit.e_d_zero);
                record.observations = problem.observations.len();
                record.carried_over = false;
                record.iterations = fit.iterations;
                record.evaluations = fit.evaluations;
                record.fit_time = fit.wall_clock;
                SurrogateFlow {
                    bounded: fields.bounded,
                    open: fields.open,
                    fused: fields.fused,
                    fitted: fit.best,
                    fit_error: fit.e_d_best,
                    valid_from: start,
                    valid_until: end,
                }
            }
            None => {
                log::warn!(
                    "window {k}: no drifter reports in the previous window; flow carried over"
                );
                SurrogateFlow {
                    valid_from: start,
                    valid_until: end,
                    ..previous.clone()
                }
            }
        };
        let prev_start = start - t_u;
        match self.validation_distances(prev_start, start, &previous.fused)? {
            Some(d) => {
                let msd = self.config.flow.msd.squared_displacement(&d);
                record.position_error = Some(d.iter().sum::<f64>() / d.len() as f64);
                record.diffusion = crate::lagrangian::diffusion_from_msd(msd, t_u)?;
            }
            None => log::warn!(
                "window {k}: no validation drifter spans the previous window; diffusion unchanged"
            ),
        }
        Ok((flow, record))
    }

    /// Distances between observed and hindcast validation-drifter positions
    /// over `[from, to)`.
    fn validation_distances(
        &self,
        from: f64,
        to: f64,
        flow: &VectorField,
    ) -> Result<Option<Vec<f64>>> {
        let mut spans: BTreeMap<&str, (&DrifterObservation, &DrifterObservation)> = BTreeMap::new();
        for o in self.observations.iter().filter(|o| {
            o.role == DrifterRole::Validation && o.timestamp >= from && o.timestamp < to
        }) {
            let e = spans.entry(o.drifter_id.0.as_str()).or_insert((o, o));
            if o.timestamp < e.0.timestamp {
                e.0 = o;
            }
            if o.timestamp > e.1.timestamp {
                e.1 = o;
            }
        }
        let mut reference = Vec::new();
        let mut simulated = Vec::new();
        for (a, b) in spans.values().filter(|(a, b)| b.timestamp > a.timestamp) {
            if !self.grid.contains(a.position) {
                continue;
            }
            let traj = advect_from(
                a.position,
                a.timestamp,
                flow,
                b.timestamp - a.timestamp,
                self.config.flow.advection_step,
            )?;
            reference.push((a.drifter_id.clone(), b.position));
            simulated.push((a.drifter_id.clone(), traj.last_position()));
        }
        if reference.is_empty() {
            return Ok(None);
        }
        paired_distances(&reference, &simulated).map(Some)
    }
}

fn track_row(u: &UavState, t: f64) -> UavTrackRow {
    UavTrackRow {
        id: u.id,
        t,
        position: u.position,
        heading: u.heading,
        omega: u.omega,
        battery: u.battery,
    }
}

/// Validates, prepares and runs; fails on any error.
pub fn run_mission(config: &MissionConfig) -> Result<MissionLog> {
    let out = Mission::prepare(config, None)?.run();
    match out.error {
        None => Ok(out.log),
        Some(e) => Err(e),
    }
}

/// Advects a point through a piecewise-steady flow sequence, one RK4
/// integration per window, each starting where the previous one ended.
pub fn advect_piecewise(z0: Vec2, flows: &[SurrogateFlow], dt: f64) -> Result<Trajectory> {
    let first = flows
        .first()
        .ok_or_else(|| Error::config("empty flow sequence"))?;
    let mut traj = Trajectory {
        times: vec![first.valid_from],
        positions: vec![z0],
        frozen: false,
        frozen_at: None,
    };
    for (k, f) in flows.iter().enumerate() {
        if k > 0 && (f.valid_from - flows[k - 1].valid_until).abs() > 1e-9 {
            return Err(Error::config(format!(
                "flow sequence has a gap before window {k}"
            )));
        }
        let part = advect_from(
            traj.last_position(),
            f.valid_from,
            &f.fused,
            f.valid_until - f.valid_from,
            dt,
        )?;
        if traj.frozen {
            let p = traj.last_position();
            for &t in &part.times[1..] {
                traj.times.push(t);
                traj.positions.push(p);
            }
            continue;
        }
        traj.times.extend_from_slice(&part.times[1..]);
        traj.positions.extend_from_slice(&part.positions[1..]);
        if part.frozen {
            traj.frozen = true;
            traj.frozen_at = part.frozen_at;
        }
    }
    Ok(traj)
}

/// Nominal target tracks through the fitted flow sequence.
pub fn predict_targets(config: &MissionConfig, flows: &[SurrogateFlow]) -> Result<Vec<Trajectory>> {
    let grid = config.grid()?;
    config
        .target_positions(&grid)?
        .into_iter()
        .map(|p| advect_piecewise(p, flows, config.flow.advection_step))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MissionSummary {
    /// First detection after search start, per target.
    pub latency: Vec<(usize, Option<f64>)>,
    pub residual_mass: Vec<(f64, f64)>,
    pub mean_position_error: Option<f64>,
    pub window_e_d: Vec<(usize, f64)>,
    pub coverage: f64,
    pub detections: usize,
    pub targets_detected: usize,
}

pub fn metrics(log: &MissionLog) -> MissionSummary {
    let latency: Vec<(usize, Option<f64>)> = log
        .targets
        .iter()
        .map(|t| {
            let first = log
                .detections
                .iter()
                .filter(|d| d.target_id == t.id)
                .map(|d| d.t)
                .fold(None, |a: Option<f64>, x| Some(a.map_or(x, |a| a.min(x))));
            (t.id, first.map(|f| f - log.search_start))
        })
        .collect();
    let errors: Vec<f64> = log
        .windows
        .iter()
        .filter_map(|w| w.position_error)
        .collect();
    MissionSummary {
        targets_detected: latency.iter().filter(|(_, l)| l.is_some()).count(),
        latency,
        residual_mass: log.metrics.iter().map(|m| (m.t, m.residual_mass)).collect(),
        mean_position_error: (!errors.is_empty())
            .then(|| errors.iter().sum::<f64>() / errors.len() as f64),
        window_e_d: log
            .windows
            .iter()
            .filter_map(|w| w.e_d.map(|e| (w.index, e)))
            .collect(),
        coverage: log.metrics.last().map_or(0.0, |m| m.coverage),
        detections: log.detections.len(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MissionLog {
    /// Writes the log directory. Contents depend only on the configuration
    /// and seeds; wall-clock timings are left out.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("snapshots"))?;
        let cfg = &self.config;

        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record([
            "t",
            "residual_mass",
            "diffusion",
            "position_error",
            "window",
            "coverage",
            "images",
            "detections",
        ])?;
        for m in &self.metrics {
            w.write_record([
                m.t.to_string(),
                m.residual_mass.to_string(),
                m.diffusion.to_string(),
                opt(m.position_error),
                m.window.to_string(),
                m.coverage.to_string(),
                m.images.to_string(),
                m.detections.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("windows.csv"))?;
        w.write_record([
            "window",
            "start",
            "end",
            "e_d",
            "e_d_zero",
            "observations",
            "carried_over",
            "diffusion",
            "position_error",
            "iterations",
            "evaluations",
        ])?;
        for r in &self.windows {
            w.write_record([
                r.index.to_string(),
                r.start.to_string(),
                r.end.to_string(),
                opt(r.e_d),
                opt(r.e_d_zero),
                r.observations.to_string(),
                r.carried_over.to_string(),
                r.diffusion.to_string(),
                opt(r.position_error),
                r.iterations.to_string(),
                r.evaluations.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("detections.csv"))?;
        w.write_record(["uav_id", "target_id", "t", "x", "y"])?;
        for d in &self.detections {
            w.write_record([
                d.uav_id.to_string(),
                d.target_id.to_string(),
                d.t.to_string(),
                d.position.x.to_string(),
                d.position.y.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("uav_tracks.csv"))?;
        w.write_record(["id", "t", "x", "y", "theta", "omega", "battery"])?;
        for r in &self.uav_tracks {
            w.write_record([
                r.id.to_string(),
                r.t.to_string(),
                r.position.x.to_string(),
                r.position.y.to_string(),
                r.heading.to_string(),
                r.omega.to_string(),
                r.battery.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("drifter_tracks.csv"))?;
        w.write_record(["drifter_id", "t", "x", "y", "vx", "vy", "role"])?;
        for o in &self.drifters {
            w.write_record([
                o.drifter_id.0.clone(),
                o.timestamp.to_string(),
                o.position.x.to_string(),
                o.position.y.to_string(),
                o.velocity.x.to_string(),
                o.velocity.y.to_string(),
                o.role.as_str().to_string(),
            ])?;
        }
        w.flush()?;
        io::write_drifter_csv(
            &dir.join("drifters.csv"),
            &self.drifters,
            &cfg.projection(),
            cfg.epoch()?,
        )?;

        let mut w = csv::Writer::from_path(dir.join("target_tracks.csv"))?;
        w.write_record(["id", "t", "x", "y", "frozen"])?;
        if !self.flows.is_empty() {
            for (id, tr) in predict_targets(cfg, &self.flows)?.iter().enumerate() {
                for (t, p) in tr.times.iter().zip(&tr.positions) {
                    let frozen = tr.frozen_at.is_some_and(|f| *t >= f);
                    w.write_record([
                        id.to_string(),
                        t.to_string(),
                        p.x.to_string(),
                        p.y.to_string(),
                        frozen.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;

        let summary = metrics(self);
        let mut w = csv::Writer::from_path(dir.join("targets.csv"))?;
        w.write_record(["target_id", "x", "y", "detections", "latency"])?;
        for (t, (_, lat)) in self.targets.iter().zip(&summary.latency) {
            w.write_record([
                t.id.to_string(),
                t.position.x.to_string(),
                t.position.y.to_string(),
                t.detections.len().to_string(),
                opt(*lat),
            ])?;
        }
        w.flush()?;

        let mut s = String::new();
        let _ = writeln!(s, "termination = {}", self.termination.as_str());
        let _ = writeln!(s, "search_start = {}", self.search_start);
        let _ = writeln!(s, "detections = {}", summary.detections);
        let _ = writeln!(s, "targets_detected = {}", summary.targets_detected);
        let _ = writeln!(s, "coverage = {}", summary.coverage);
        let _ = writeln!(
            s,
            "final_residual_mass = {}",
            summary.residual_mass.last().map_or(1.0, |r| r.1)
        );
        let _ = writeln!(
            s,
            "mean_position_error = {}",
            opt(summary.mean_position_error)
        );
        fs::write(dir.join("summary.txt"), s)?;

        fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
        let mut seeds = format!("seed = {}\n", cfg.seed);
        if let Some(b) = &self.truth_b {
            let _ = writeln!(
                seeds,
                "truth_b = [{}]",
                b.iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        fs::write(dir.join("seed.txt"), seeds)?;

        let snaps = dir.join("snapshots");
        for (t, field) in &self.snapshots {
            let stem = format!("belief_{:07}", t.round() as i64);
            io::write_snapshot(
                &snaps,
                &stem,
                &SnapshotHeader::for_field("belief", field, *t),
                field.values(),
            )?;
        }
        Ok(())
    }
}

/// Zero-flow optimization vector for a config's layout.
pub fn zero_vector(config: &MissionConfig, grid: &Grid) -> Result<OptimizationVector> {
    OptimizationVector::zeros(
        config.boundary_spec(grid).dim(),
        (config.flow.bounds[0], config.flow.bounds[1]),
    )
}
