//! Global-best particle swarm over a box.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsoSettings {
    pub swarm_size: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Velocity limit per dimension as a fraction of the box width.
    pub velocity_clamp: f64,
    pub max_iterations: Option<usize>,
    /// Wall-clock budget in seconds.
    pub time_budget: Option<f64>,
    pub seed: u64,
}

impl Default for PsoSettings {
    fn default() -> Self {
        PsoSettings {
            swarm_size: 32,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            velocity_clamp: 0.2,
            max_iterations: Some(200),
            time_budget: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsoOutcome {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Global best after initialization and after every iteration.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    pub iterations: usize,
    pub elapsed: Duration,
}

/// Minimizes `objective` over `[lower, upper]`. Stops at `max_iterations`
/// or when the time budget runs out, whichever comes first. With no time
/// budget the result depends only on the seed.
///
/// `warm_start`, if given, seeds particle 0 (clamped into the box).
pub fn minimize<F>(
    objective: F,
    lower: &[f64],
    upper: &[f64],
    warm_start: Option<&[f64]>,
    settings: &PsoSettings,
) -> Result<PsoOutcome>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    let dim = lower.len();
    if upper.len() != dim || lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
        return Err(Error::config("PSO bounds are inconsistent"));
    }
    if settings.swarm_size == 0 {
        return Err(Error::config("PSO swarm must have at least one particle"));
    }
    if settings.max_iterations.is_none() && settings.time_budget.is_none() {
        return Err(Error::config("PSO needs an iteration cap or a time budget"));
    }
    if let Some(b) = settings.time_budget {
        if !(b > 0.0) {
            return Err(Error::config("PSO time budget must be positive"));
        }
    }
    let start = Instant::now();
    let budget = settings.time_budget.map(Duration::from_secs_f64);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let vmax: Vec<f64> = lower
        .iter()
        .zip(upper)
        .map(|(l, u)| settings.velocity_clamp * (u - l))
        .collect();

    let n = settings.swarm_size;
    let mut pos: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            lower
                .iter()
                .zip(upper)
                .map(|(&l, &u)| if u > l { rng.random_range(l..=u) } else { l })
                .collect()
        })
        .collect();
    if let Some(w) = warm_start {
        if w.len() == dim {
            pos[0] = w
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&x, (&l, &u))| x.clamp(l, u))
                .collect();
        }
    }
    let mut vel: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            vmax.iter()
                .map(|&m| {
                    if m > 0.0 {
                        rng.random_range(-m..=m)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut evaluations = 0;
    let mut failed = 0;
    let mut evaluate = |pos: &[Vec<f64>]| -> Vec<f64> {
        let vals: Vec<Option<f64>> = pos
            .par_iter()
            .map(|x| match objective(x) {
                Ok(v) if v.is_finite() => Some(v),
                Ok(_) => None,
                Err(e) => {
                    log::debug!("objective evaluation failed: {e}");
                    None
                }
            })
            .collect();
        evaluations += vals.len();
        vals.into_iter()
            .map(|v| {
                v.unwrap_or_else(|| {
                    failed += 1;
                    f64::INFINITY
                })
            })
            .collect()
    };

    let values = evaluate(&pos);
    let mut pbest = pos.clone();
    let mut pbest_val = values;
    let (mut gbest, mut gbest_val) = best_of(&pbest, &pbest_val);
    let mut history = vec![gbest_val];
    let mut iterations = 0;

    loop {
        if settings.max_iterations.is_some_and(|m| iterations >= m) {
            break;
        }
        if budget.is_some_and(|b| start.elapsed() >= b) {
            break;
        }
        for i in 0..n {
            for d in 0..dim {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let mut v = settings.inertia * vel[i][d]
                    + settings.cognitive * r1 * (pbest[i][d] - pos[i][d])
                    + settings.social * r2 * (gbest[d] - pos[i][d]);
                v = v.clamp(-vmax[d], vmax[d]);
                let (l, u) = (lower[d], upper[d]);
                let mut x = pos[i][d] + v;
                if x > u {
                    x = u - (x - u);
                    v = -v;
                }
                if x < l {
                    x = l + (l - x);
                    v = -v;
                }
                pos[i][d] = x.clamp(l, u);
                vel[i][d] = v;
            }
        }
        let values = evaluate(&pos);
        for i in 0..n {
            if values[i] < pbest_val[i] {
                pbest_val[i] = values[i];
                pbest[i].clone_from(&pos[i]);
            }
        }
        let (b, bv) = best_of(&pbest, &pbest_val);
        if bv < gbest_val {
            gbest = b;
            gbest_val = bv;
        }
        history.push(gbest_val);
        iterations += 1;
    }

    if failed == evaluations {
        return Err(Error::Fit("no objective evaluation succeeded".into()));
    }
    Ok(PsoOutcome {
        best: gbest,
        best_value: gbest_val,
        history,
        evaluations,
        failed_evaluations: failed,
        iterations,
        elapsed: start.elapsed(),
    })
}

fn best_of(pos: &[Vec<f64>], vals: &[f64]) -> (Vec<f64>, f64) {
    let mut k = 0;
    for i in 1..vals.len() {
        if vals[i] < vals[k] {
            k = i;
        }
    }
    (pos[k].clone(), vals[k])
}
