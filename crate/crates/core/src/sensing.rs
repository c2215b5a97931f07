//! Camera footprint and the probabilistic detector standing in for the
//! vision pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Polygon, Vec2};
use crate::hedac::UavState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub altitude: f64,
    pub reference_altitude: f64,
    /// Along-heading extent at the reference altitude, m.
    pub footprint_length: f64,
    /// Cross-heading extent at the reference altitude, m.
    pub footprint_width: f64,
    pub capture_interval: f64,
    pub recall: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        SensorModel {
            altitude: 75.0,
            reference_altitude: 75.0,
            footprint_length: 95.0,
            footprint_width: 53.4,
            capture_interval: 3.0,
            recall: 0.68,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("altitude", self.altitude),
            ("reference_altitude", self.reference_altitude),
            ("footprint_length", self.footprint_length),
            ("footprint_width", self.footprint_width),
            ("capture_interval", self.capture_interval),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!(
                    "sensor.{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.recall) {
            return Err(Error::config(format!(
                "sensor.recall must lie in [0, 1], got {}",
                self.recall
            )));
        }
        Ok(())
    }

    /// Ground footprint `(length, width)` at the current altitude.
    pub fn footprint_size(&self) -> (f64, f64) {
        let s = self.altitude / self.reference_altitude;
        (self.footprint_length * s, self.footprint_width * s)
    }

    /// Full field-of-view angles `(along, across)`, radians.
    pub fn field_of_view(&self) -> (f64, f64) {
        let (l, w) = self.footprint_size();
        (
            2.0 * (0.5 * l / self.altitude).atan(),
            2.0 * (0.5 * w / self.altitude).atan(),
        )
    }
}

/// Nadir-centered rectangle with its long axis along the heading.
pub fn footprint(state: &UavState, sensor: &SensorModel) -> Polygon {
    let (l, w) = sensor.footprint_size();
    let a = Vec2::from_angle(state.heading) * (0.5 * l);
    let b = Vec2::new(-a.y, a.x) * (w / l);
    let c = state.position;
    Polygon::new(vec![c + a + b, c - a + b, c - a - b, c + a - b])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub id: usize,
    pub position: Vec2,
    /// Advected with the water when set.
    pub drifting: bool,
    /// Times of every detection.
    pub detections: Vec<f64>,
}

impl Target {
    pub fn new(id: usize, position: Vec2) -> Self {
        Target {
            id,
            position,
            drifting: false,
            detections: Vec::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub uav_id: usize,
    pub target_id: usize,
    pub t: f64,
    pub position: Vec2,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Capture {
    pub footprints: Vec<(usize, Polygon)>,
    pub events: Vec<DetectionEvent>,
}

/// Independent random stream for one UAV at one tick. Mixing the three
/// keys into the ChaCha seed means the draw order of other UAVs can never
/// change this stream.
pub fn capture_rng(seed: u64, uav_id: usize, tick: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(uav_id as u64).to_le_bytes());
    key[16..24].copy_from_slice(&tick.to_le_bytes());
    key[24..].copy_from_slice(b"capture\0");
    ChaCha8Rng::from_seed(key)
}

/// One image per flying UAV. Each target inside an image is detected with
/// probability `recall`, independently per image. Detections are appended
/// to the targets.
pub fn capture(
    states: &[UavState],
    targets: &mut [Target],
    sensor: &SensorModel,
    t: f64,
    tick: u64,
    seed: u64,
) -> Capture {
    let mut out = Capture::default();
    for s in states.iter().filter(|s| s.is_flying()) {
        let fp = footprint(s, sensor);
        let mut rng = capture_rng(seed, s.id, tick);
        for target in targets.iter_mut() {
            if !fp.contains(target.position) {
                continue;
            }
            let draw: f64 = rng.random();
            if draw < sensor.recall {
                target.detections.push(t);
                out.events.push(DetectionEvent {
                    uav_id: s.id,
                    target_id: target.id,
                    t,
                    position: target.position,
                });
            }
        }
        out.footprints.push((s.id, fp));
    }
    out
}
