//! Synthetic FMCW lidar world.
//!
//! Renders sweeping scans with per-point timestamps and Doppler returns
//! against a world of static planes and boxes plus constant-velocity
//! dynamic boxes, along with gyroscope streams and exact continuous-time
//! groundtruth. Identical seeds produce bitwise-identical output.
//!
//! Doppler sign convention: a static world and forward motion yield
//! positive Doppler on forward-looking beams (closing speed is positive),
//! matching the measurement model used by the Doppler estimator.

use crate::cloud::{LidarFrame, LidarPoint, FOV_AZIMUTH, FOV_ELEVATION};
use crate::doppler::GyroSample;
use crate::geom::{adjoint, exp_map, rpy_to_rotation, Pose, Twist, Vec3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("route must contain at least one segment")]
    EmptyRoute,
    #[error("segment {index} has non-positive duration")]
    BadSegmentTimes { index: usize },
    #[error("segment {index} does not start where the previous one ends")]
    NonContiguous { index: usize },
    #[error("world must contain at least one static primitive")]
    NoStaticPrimitive,
    #[error("primitive {index} has a non-positive extent")]
    BadExtent { index: usize },
    #[error("time {t} outside route bounds [{t_start}, {t_end}]")]
    OutOfRoute { t: f64, t_start: f64, t_end: f64 },
}

/// Finite rectangle: centre, normal, half extents along two in-plane axes
/// derived deterministically from the normal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub center: Vec3,
    pub normal: Vec3,
    pub half_extents: [f64; 2],
}

impl PlaneSpec {
    fn axes(&self) -> (Vec3, Vec3, Vec3) {
        let n = self.normal / self.normal.norm();
        let reference = if n.z.abs() < 0.9 { Vec3::z() } else { Vec3::x() };
        let u = reference.cross(&n).normalize();
        let v = n.cross(&u);
        (n, u, v)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoxSpec {
    pub min: Vec3,
    pub max: Vec3,
}

/// Box translating at a constant world-frame velocity; `shape` is its
/// footprint at t = 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DynamicBoxSpec {
    pub shape: BoxSpec,
    pub velocity: Vec3,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct WorldSpec {
    #[serde(default)]
    pub planes: Vec<PlaneSpec>,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub dynamics: Vec<DynamicBoxSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.planes.is_empty() && self.boxes.is_empty() {
            return Err(SimError::NoStaticPrimitive);
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !(p.half_extents[0] > 0.0 && p.half_extents[1] > 0.0 && p.normal.norm() > 0.0) {
                return Err(SimError::BadExtent { index: i });
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.max > b.min) {
                return Err(SimError::BadExtent { index: i });
            }
        }
        for (i, d) in self.dynamics.iter().enumerate() {
            if !(d.shape.max > d.shape.min) {
                return Err(SimError::BadExtent { index: i });
            }
        }
        Ok(())
    }

    /// Distance from a world-frame point to the nearest primitive surface
    /// at time `t`. Verification helper for the on-surface invariant.
    pub fn surface_distance(&self, p: &Vec3, t: f64) -> f64 {
        let mut best = f64::INFINITY;
        for plane in &self.planes {
            let (_, u, v) = plane.axes();
            let d = p - plane.center;
            let in_u = d.dot(&u).clamp(-plane.half_extents[0], plane.half_extents[0]);
            let in_v = d.dot(&v).clamp(-plane.half_extents[1], plane.half_extents[1]);
            let closest = plane.center + u * in_u + v * in_v;
            best = best.min((p - closest).norm());
        }
        for b in &self.boxes {
            best = best.min(box_surface_distance(b, p));
        }
        for d in &self.dynamics {
            let shifted = BoxSpec {
                min: d.shape.min + d.velocity * t,
                max: d.shape.max + d.velocity * t,
            };
            best = best.min(box_surface_distance(&shifted, p));
        }
        best
    }
}

fn box_surface_distance(b: &BoxSpec, p: &Vec3) -> f64 {
    let centre = (b.min + b.max) * 0.5;
    let half = (b.max - b.min) * 0.5;
    let d = (p - centre).abs() - half;
    let outside = Vec3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
    let inside = d.x.max(d.y).max(d.z).min(0.0);
    (outside + inside).abs()
}

/// FMCW sensor model: sweep pattern, noise and bias terms, and the rigid
/// mounting on the vehicle. The field of view is the fixed 120 x 30 degree
/// window shared with the preprocessing grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorSpec {
    /// Scans per second.
    pub scan_rate: f64,
    /// Fixed elevation rows of the beam grid.
    pub elevation_rows: usize,
    /// Azimuth columns swept uniformly in time across a frame.
    pub azimuth_cols: usize,
    /// Metres.
    pub max_range: f64,
    /// Doppler measurement noise, m/s (1 sigma).
    pub doppler_sigma: f64,
    /// Range-dependent Doppler bias injected into returns.
    pub bias_slope: f64,
    pub bias_intercept: f64,
    /// Gyroscope sample rate, Hz.
    pub gyro_rate: f64,
    /// Gyroscope noise, rad/s (1 sigma, per axis).
    pub gyro_sigma: f64,
    /// Gyroscope bias, rad/s, sensor frame.
    pub gyro_bias: Vec3,
    /// Sensor mounting: translation of the sensor origin in the vehicle
    /// frame and intrinsic x-y-z mounting angles in degrees.
    pub extrinsic_translation: Vec3,
    pub extrinsic_rpy_deg: Vec3,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self {
            scan_rate: 10.0,
            elevation_rows: 64,
            azimuth_cols: 900,
            max_range: 500.0,
            doppler_sigma: 0.0,
            bias_slope: 0.0,
            bias_intercept: 0.0,
            gyro_rate: 100.0,
            gyro_sigma: 0.0,
            gyro_bias: Vec3::zeros(),
            extrinsic_translation: Vec3::zeros(),
            extrinsic_rpy_deg: Vec3::zeros(),
        }
    }
}

impl SensorSpec {
    /// Pose of the sensor in the vehicle frame (`T_vs`).
    pub fn extrinsic(&self) -> Pose {
        Pose::new(
            rpy_to_rotation(
                self.extrinsic_rpy_deg.x.to_radians(),
                self.extrinsic_rpy_deg.y.to_radians(),
                self.extrinsic_rpy_deg.z.to_radians(),
            ),
            self.extrinsic_translation,
        )
    }

    pub fn frame_period(&self) -> f64 {
        1.0 / self.scan_rate
    }
}

/// One piecewise-constant-twist leg of a route.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RouteSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub twist: Twist,
}

/// Exact continuous-time groundtruth: vehicle pose in the world frame and
/// body twist, queryable at any route time.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    segments: Vec<RouteSegment>,
    /// Vehicle pose at each segment start, world frame.
    knots: Vec<Pose>,
}

/// Builds groundtruth by exact screw integration of contiguous
/// piecewise-constant-twist segments, starting from the identity pose.
pub fn build_trajectory(segments: &[RouteSegment]) -> Result<GroundTruth, SimError> {
    if segments.is_empty() {
        return Err(SimError::EmptyRoute);
    }
    let mut knots = Vec::with_capacity(segments.len());
    let mut pose = Pose::identity();
    for (i, seg) in segments.iter().enumerate() {
        if !(seg.t_end > seg.t_start) {
            return Err(SimError::BadSegmentTimes { index: i });
        }
        if i > 0 && (seg.t_start - segments[i - 1].t_end).abs() > 1e-9 {
            return Err(SimError::NonContiguous { index: i });
        }
        knots.push(pose);
        pose = pose.compose(&exp_map(&seg.twist.scaled(seg.t_end - seg.t_start)));
    }
    Ok(GroundTruth {
        segments: segments.to_vec(),
        knots,
    })
}

impl GroundTruth {
    pub fn t_start(&self) -> f64 {
        self.segments[0].t_start
    }

    pub fn t_end(&self) -> f64 {
        self.segments[self.segments.len() - 1].t_end
    }

    fn segment_index(&self, t: f64) -> Result<usize, SimError> {
        if t < self.t_start() - 1e-9 || t > self.t_end() + 1e-9 {
            return Err(SimError::OutOfRoute {
                t,
                t_start: self.t_start(),
                t_end: self.t_end(),
            });
        }
        Ok(self
            .segments
            .partition_point(|s| s.t_end <= t)
            .min(self.segments.len() - 1))
    }

    /// Vehicle pose in the world frame at time `t`.
    pub fn pose(&self, t: f64) -> Result<Pose, SimError> {
        let i = self.segment_index(t)?;
        let seg = &self.segments[i];
        Ok(self.knots[i].compose(&exp_map(&seg.twist.scaled(t - seg.t_start))))
    }

    /// Body twist at time `t` (right-continuous at segment boundaries).
    pub fn twist(&self, t: f64) -> Result<Twist, SimError> {
        Ok(self.segments[self.segment_index(t)?].twist)
    }

    /// Number of whole scan frames that fit in the route.
    pub fn frame_count(&self, sensor: &SensorSpec) -> usize {
        ((self.t_end() - self.t_start()) * sensor.scan_rate + 1e-9).floor() as usize
    }
}

/// Per-frame RNG stream: scans use even streams, gyro odd ones, so frames
/// can be rendered independently and in any order.
fn frame_rng(seed: u64, t_start: f64, scan_rate: f64, gyro: bool) -> ChaCha8Rng {
    let frame_index = (t_start * scan_rate).round() as i64 as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index.wrapping_mul(2).wrapping_add(gyro as u64));
    rng
}

struct Hit {
    range: f64,
    surface_velocity: Vec3,
}

fn ray_plane(plane: &PlaneSpec, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let (n, u, v) = plane.axes();
    let denom = n.dot(dir);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = n.dot(&(plane.center - origin)) / denom;
    if t <= 1e-6 {
        return None;
    }
    let hit = origin + dir * t;
    let d = hit - plane.center;
    if d.dot(&u).abs() <= plane.half_extents[0] && d.dot(&v).abs() <= plane.half_extents[1] {
        Some(t)
    } else {
        None
    }
}

fn ray_box(b: &BoxSpec, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if dir[axis].abs() < 1e-15 {
            if origin[axis] < b.min[axis] || origin[axis] > b.max[axis] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[axis];
        let (mut t0, mut t1) = (
            (b.min[axis] - origin[axis]) * inv,
            (b.max[axis] - origin[axis]) * inv,
        );
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_near = t_near.max(t0);
        t_far = t_far.min(t1);
        if t_near > t_far {
            return None;
        }
    }
    if t_near > 1e-6 {
        Some(t_near)
    } else {
        None
    }
}

fn cast(world: &WorldSpec, t: f64, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut best_range = max_range;
    for plane in &world.planes {
        if let Some(r) = ray_plane(plane, origin, dir) {
            if r <= best_range {
                best_range = r;
                best = Some(Hit {
                    range: r,
                    surface_velocity: Vec3::zeros(),
                });
            }
        }
    }
    for b in &world.boxes {
        if let Some(r) = ray_box(b, origin, dir) {
            if r <= best_range {
                best_range = r;
                best = Some(Hit {
                    range: r,
                    surface_velocity: Vec3::zeros(),
                });
            }
        }
    }
    for d in &world.dynamics {
        let shifted = BoxSpec {
            min: d.shape.min + d.velocity * t,
            max: d.shape.max + d.velocity * t,
        };
        if let Some(r) = ray_box(&shifted, origin, dir) {
            if r <= best_range {
                best_range = r;
                best = Some(Hit {
                    range: r,
                    surface_velocity: d.velocity,
                });
            }
        }
    }
    best
}

/// Renders one sweep over `[t_start, t_end]`: beams are cast column by
/// column, each column from the sensor pose at its own timestamp. Returns
/// sensor-frame points with Doppler
/// `closing speed + slope * range + intercept + noise`.
pub fn render_scan(
    world: &WorldSpec,
    gt: &GroundTruth,
    t_start: f64,
    t_end: f64,
    sensor: &SensorSpec,
) -> Result<LidarFrame, SimError> {
    let mut frame = LidarFrame::new(t_start, t_end);
    let extrinsic = sensor.extrinsic();
    let ad_sv = adjoint(&extrinsic.inverse());
    let mut rng = frame_rng(world.seed, t_start, sensor.scan_rate, false);
    let noise = Normal::new(0.0, sensor.doppler_sigma.max(f64::MIN_POSITIVE)).unwrap();
    for col in 0..sensor.azimuth_cols {
        let s = (col as f64 + 0.5) / sensor.azimuth_cols as f64;
        let t = t_start + s * (t_end - t_start);
        let az = -FOV_AZIMUTH / 2.0 + s * FOV_AZIMUTH;
        let vehicle = gt.pose(t)?;
        let sensor_pose = vehicle.compose(&extrinsic);
        let sensor_twist = ad_sv.apply(&gt.twist(t)?);
        let c_sw = sensor_pose.rotation.transpose();
        for row in 0..sensor.elevation_rows {
            let el = -FOV_ELEVATION / 2.0
                + (row as f64 + 0.5) / sensor.elevation_rows as f64 * FOV_ELEVATION;
            let dir_s = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir_w = sensor_pose.rotation * dir_s;
            if let Some(hit) = cast(world, t, &sensor_pose.translation, &dir_w, sensor.max_range) {
                let p_s = dir_s * hit.range;
                // Closing speed of the surface point as seen by the sensor.
                let own = sensor_twist.angular.cross(&p_s) + sensor_twist.linear;
                let mut doppler = dir_s.dot(&own) - dir_s.dot(&(c_sw * hit.surface_velocity));
                doppler += sensor.bias_slope * hit.range + sensor.bias_intercept;
                if sensor.doppler_sigma > 0.0 {
                    doppler += noise.sample(&mut rng);
                }
                frame.points.push(LidarPoint::new(p_s, t, doppler));
            }
        }
    }
    Ok(frame)
}

/// Samples the gyroscope over `[t_start, t_end)`: the vehicle angular rate
/// rotated into the sensor frame, plus bias and noise. `seed` is the world
/// seed so scans and gyro streams stay jointly reproducible.
pub fn simulate_gyro(
    gt: &GroundTruth,
    sensor: &SensorSpec,
    seed: u64,
    t_start: f64,
    t_end: f64,
) -> Result<Vec<GyroSample>, SimError> {
    let c_sv = sensor.extrinsic().rotation.transpose();
    let mut rng = frame_rng(seed, t_start, sensor.scan_rate, true);
    let noise = Normal::new(0.0, sensor.gyro_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let count = ((t_end - t_start) * sensor.gyro_rate + 1e-9).floor() as usize;
    let mut samples = Vec::with_capacity(count);
    for k in 0..count {
        let t = t_start + (k as f64 + 0.5) / sensor.gyro_rate;
        if t >= t_end {
            break;
        }
        let mut rate = c_sv * gt.twist(t)?.angular + sensor.gyro_bias;
        if sensor.gyro_sigma > 0.0 {
            rate += Vec3::new(
                noise.sample(&mut rng),
                noise.sample(&mut rng),
                noise.sample(&mut rng),
            );
        }
        samples.push(GyroSample { stamp: t, rate });
    }
    Ok(samples)
}
