//! Fitting the surrogate's optimization vector to drifter velocities, one
//! quasi-steady window at a time.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Grid, Vec2};
use crate::lagrangian::{DrifterId, DrifterObservation};
use crate::pso::{self, PsoSettings};
use crate::surrogate::{BoundarySpec, OptimizationVector, SurrogateBasis, SurrogateModel};

/// One velocity measurement at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub position: Vec2,
    pub velocity: Vec2,
}

#[derive(Clone, Debug)]
pub struct FitProblem {
    pub observations: Vec<Observation>,
    pub spec: BoundarySpec,
    pub grid: Arc<Grid>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Termination, seed and swarm parameters.
    pub pso: PsoSettings,
    pub warm_start: Option<Vec<f64>>,
}

impl FitProblem {
    pub fn new(
        observations: Vec<Observation>,
        spec: BoundarySpec,
        grid: Arc<Grid>,
        bounds: (f64, f64),
        pso: PsoSettings,
    ) -> Self {
        let dim = spec.dim();
        FitProblem {
            observations,
            spec,
            grid,
            lower: vec![bounds.0; dim],
            upper: vec![bounds.1; dim],
            pso,
            warm_start: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.observations.is_empty() {
            return Err(Error::Fit("fit problem has no observations".into()));
        }
        if let Some(o) = self
            .observations
            .iter()
            .find(|o| !self.grid.contains(o.position))
        {
            return Err(Error::OutOfDomain {
                x: o.position.x,
                y: o.position.y,
            });
        }
        let dim = self.spec.dim();
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(Error::config(format!("bounds must have {dim} entries")));
        }
        if let Some(b) = self.pso.time_budget {
            if !(b > 0.0) {
                return Err(Error::config("fit time budget must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub best: OptimizationVector,
    pub e_d_best: f64,
    /// E_d of the zero vector, the no-flow baseline.
    pub e_d_zero: f64,
    /// Global best per PSO iteration (index 0 is the initial swarm).
    pub e_d_history: Vec<f64>,
    pub evaluations: usize,
    pub iterations: usize,
    pub wall_clock: Duration,
}

/// `sqrt((1/n)·Σ‖w_r − w_s‖²)` over paired measured/simulated velocities.
pub fn rms_velocity_error(measured: &[Vec2], simulated: &[Vec2]) -> Result<f64> {
    if measured.is_empty() || measured.len() != simulated.len() {
        return Err(Error::Pairing(format!(
            "{} measured velocities vs {} simulated",
            measured.len(),
            simulated.len()
        )));
    }
    let sum: f64 = measured
        .iter()
        .zip(simulated)
        .map(|(r, s)| (*r - *s).norm_squared())
        .sum();
    Ok((sum / measured.len() as f64).sqrt())
}

/// E_d by the direct route: both component solves, fusion and bilinear
/// sampling at every observation.
pub fn objective_e_d(b: &[f64], problem: &FitProblem) -> Result<f64> {
    let model = SurrogateModel::new(problem.spec.clone(), Arc::clone(&problem.grid))?;
    objective_with_model(b, problem, &model)
}

pub fn objective_with_model(
    b: &[f64],
    problem: &FitProblem,
    model: &SurrogateModel,
) -> Result<f64> {
    let flow = model.solve(b)?;
    let points: Vec<Vec2> = problem.observations.iter().map(|o| o.position).collect();
    let measured: Vec<Vec2> = problem.observations.iter().map(|o| o.velocity).collect();
    let simulated = points
        .iter()
        .map(|&p| flow.fused.sample(p))
        .collect::<Result<Vec<_>>>()?;
    rms_velocity_error(&measured, &simulated)
}

/// E_d through the precomputed linear response at the observation points.
#[derive(Clone, Debug)]
pub struct FitObjective {
    measured: Vec<Vec2>,
    // [entry][observation]
    response: Vec<Vec<Vec2>>,
}

impl FitObjective {
    pub fn new(problem: &FitProblem, basis: &SurrogateBasis) -> Result<Self> {
        let points: Vec<Vec2> = problem.observations.iter().map(|o| o.position).collect();
        Ok(FitObjective {
            measured: problem.observations.iter().map(|o| o.velocity).collect(),
            response: basis.response_at(&points)?,
        })
    }

    pub fn simulated(&self, b: &[f64]) -> Vec<Vec2> {
        let mut sim = vec![Vec2::ZERO; self.measured.len()];
        for (coef, resp) in b.iter().zip(&self.response) {
            if *coef == 0.0 {
                continue;
            }
            for (s, r) in sim.iter_mut().zip(resp) {
                *s += *r * *coef;
            }
        }
        sim
    }

    pub fn eval(&self, b: &[f64]) -> Result<f64> {
        if b.len() != self.response.len() {
            return Err(Error::config("optimization vector has the wrong dimension"));
        }
        rms_velocity_error(&self.measured, &self.simulated(b))
    }
}

/// Global-best PSO over the problem's box.
pub fn pso_fit(problem: &FitProblem) -> Result<FitResult> {
    let model = SurrogateModel::new(problem.spec.clone(), Arc::clone(&problem.grid))?;
    pso_fit_with_basis(problem, &model.basis()?)
}

pub fn pso_fit_with_basis(problem: &FitProblem, basis: &SurrogateBasis) -> Result<FitResult> {
    problem.validate()?;
    let objective = FitObjective::new(problem, basis)?;
    let e_d_zero = objective.eval(&vec![0.0; basis.dim()])?;
    let out = pso::minimize(
        |b| objective.eval(b),
        &problem.lower,
        &problem.upper,
        problem.warm_start.as_deref(),
        &problem.pso,
    )?;
    Ok(FitResult {
        best: OptimizationVector::new(out.best, problem.lower.clone(), problem.upper.clone())?,
        e_d_best: out.best_value,
        e_d_zero,
        e_d_history: out.history,
        evaluations: out.evaluations,
        iterations: out.iterations,
        wall_clock: out.elapsed,
    })
}

/// How several samples from one drifter within a window are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    #[default]
    Latest,
    Average,
}

/// Settings shared by every window's problem.
#[derive(Clone, Debug)]
pub struct FitTemplate {
    pub spec: BoundarySpec,
    pub grid: Arc<Grid>,
    pub bounds: (f64, f64),
    pub pso: PsoSettings,
    pub reduction: Reduction,
}

#[derive(Clone, Debug)]
pub struct ScheduledWindow {
    pub index: usize,
    pub start: f64,
    pub end: f64,
    /// Fitting-role samples per drifter inside the window.
    pub samples: BTreeMap<DrifterId, usize>,
    /// `None` when the window holds no usable observation; the previous
    /// flow carries over.
    pub problem: Option<FitProblem>,
}

impl ScheduledWindow {
    pub fn carries_over(&self) -> bool {
        self.problem.is_none()
    }
}

/// Splits a timestamped stream into windows `[t₀ + k·T_u, t₀ + (k+1)·T_u)`
/// from `t₀ = start` up to `end` (defaults: first and last timestamps) and
/// builds one problem per window from the fitting-role drifters. Each
/// window's PSO seed is offset by its index.
pub fn quasi_steady_schedule(
    stream: &[DrifterObservation],
    update_interval: f64,
    template: &FitTemplate,
    start: Option<f64>,
    end: Option<f64>,
) -> Result<Vec<ScheduledWindow>> {
    if !(update_interval > 0.0) {
        return Err(Error::config("update interval must be positive"));
    }
    let first = stream
        .iter()
        .map(|o| o.timestamp)
        .fold(f64::INFINITY, f64::min);
    let last = stream
        .iter()
        .map(|o| o.timestamp)
        .fold(f64::NEG_INFINITY, f64::max);
    let t0 = start.unwrap_or(first);
    let t_end = end.unwrap_or(last);
    if !t0.is_finite() || !t_end.is_finite() {
        return Ok(Vec::new());
    }
    let count = (((t_end - t0) / update_interval).floor() as usize + 1).max(1);
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let ws = t0 + k as f64 * update_interval;
        let we = ws + update_interval;
        let in_window: Vec<&DrifterObservation> = stream
            .iter()
            .filter(|o| o.timestamp >= ws && o.timestamp < we && o.role.used_for_fitting())
            .collect();
        let (samples, observations) = reduce_window(&in_window, template);
        let problem = if observations.is_empty() {
            log::warn!(
                "window {k} [{ws}, {we}) s has no fitting observations; previous flow retained"
            );
            None
        } else {
            let mut pso = template.pso.clone();
            pso.seed = pso.seed.wrapping_add(k as u64);
            Some(FitProblem::new(
                observations,
                template.spec.clone(),
                Arc::clone(&template.grid),
                template.bounds,
                pso,
            ))
        };
        windows.push(ScheduledWindow {
            index: k,
            start: ws,
            end: we,
            samples,
            problem,
        });
    }
    Ok(windows)
}

/// One observation per drifter from the samples of a window.
pub fn reduce_window(
    samples: &[&DrifterObservation],
    template: &FitTemplate,
) -> (BTreeMap<DrifterId, usize>, Vec<Observation>) {
    let mut by_drifter: BTreeMap<&DrifterId, Vec<&DrifterObservation>> = BTreeMap::new();
    for o in samples {
        by_drifter.entry(&o.drifter_id).or_default().push(o);
    }
    let mut counts = BTreeMap::new();
    let mut out = Vec::new();
    for (id, list) in by_drifter {
        counts.insert(id.clone(), list.len());
        let obs = match template.reduction {
            Reduction::Latest => {
                let o = list
                    .iter()
                    .max_by(|a, b| a.timestamp.total_cmp(&b.timestamp))
                    .expect("non-empty");
                Observation {
                    position: o.position,
                    velocity: o.velocity,
                }
            }
            Reduction::Average => {
                let n = list.len() as f64;
                let (p, v) = list.iter().fold((Vec2::ZERO, Vec2::ZERO), |(p, v), o| {
                    (p + o.position, v + o.velocity)
                });
                Observation {
                    position: p * (1.0 / n),
                    velocity: v * (1.0 / n),
                }
            }
        };
        if template.grid.contains(obs.position) {
            out.push(obs);
        } else {
            log::warn!("drifter {id} is outside the grid; excluded from the fit");
        }
    }
    (counts, out)
}
