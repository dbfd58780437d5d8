//! Correspondence-free Doppler odometry.
//!
//! Per frame, the body velocity is estimated directly from per-point radial
//! velocities and gyroscope rates: RANSAC rejects returns that disagree
//! with a rigid sensor-frame velocity, then a single linear solve fuses
//! Doppler factors, gyroscope factors, a white-noise-on-acceleration motion
//! prior linking the two frame-boundary velocity states, and a kinematic
//! penalty on lateral, vertical, roll, and pitch rates. The relative pose
//! follows by numerically integrating the interpolated velocity.

use crate::cloud::LidarFrame;
use crate::geom::{adjoint, exp_map, Mat3, Mat4, Mat6, Pose, Twist, Vec3, Vec6};
use crate::reduce::{deterministic_sum, InfoAccum};
use nalgebra::SMatrix;
use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::AddAssign;
use thiserror::Error;

pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Vec12 = nalgebra::SVector<f64, 12>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DopplerError {
    #[error("need at least {need} usable points, frame has {got}")]
    InsufficientData { got: usize, need: usize },
    #[error("no non-degenerate velocity model found by RANSAC")]
    DegenerateGeometry,
    #[error("normal equations are rank deficient")]
    RankDeficient,
}

/// Body velocity at a frame boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityState {
    pub twist: Twist,
    /// Seconds.
    pub stamp: f64,
}

/// One gyroscope measurement: angular rate in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GyroSample {
    pub stamp: f64,
    pub rate: Vec3,
}

/// Velocity state with its marginal information, anchoring the older
/// boundary state of the next solve.
#[derive(Debug, Clone, Copy)]
pub struct VelocityPrior {
    pub state: VelocityState,
    pub information: Mat6,
}

/// Result of one linear velocity solve: both refined boundary states and
/// the marginal information of the newer one.
#[derive(Debug, Clone, Copy)]
pub struct VelocitySolve {
    pub begin: VelocityState,
    pub end: VelocityState,
    pub end_information: Mat6,
}

#[derive(Debug, Clone)]
pub struct DopplerConfig {
    /// Power spectral density of the white-noise-on-acceleration prior.
    pub qc: Mat6,
    /// Covariance of the kinematic penalty on (v_y, v_z, w_roll, w_pitch).
    pub qz: Mat4,
    /// Doppler measurement variance, (m/s)^2.
    pub r_dop: f64,
    /// Gyroscope covariance.
    pub r_gyro: Mat3,
    /// Sensor mounting in the vehicle frame (`T_vs`).
    pub t_vs: Pose,
    /// Fixed gyroscope bias subtracted from measurements, sensor frame.
    pub gyro_bias: Vec3,
    pub ransac_iters: usize,
    /// Inlier residual threshold, m/s.
    pub ransac_threshold: f64,
    pub ransac_seed: u64,
    /// Reject solves whose forward velocity jumps by more than this, m/s.
    pub forward_gate: f64,
    /// Interpolation steps for pose integration.
    pub integration_steps: usize,
    /// Twist assumed before the first frame.
    pub initial_twist: Twist,
    /// Anchor information used until a solve produces a marginal.
    pub initial_information: Mat6,
}

impl Default for DopplerConfig {
    fn default() -> Self {
        Self {
            qc: Mat6::from_diagonal(&Vec6::new(1.0, 1.0, 1.0, 0.1, 0.1, 0.1)),
            qz: Mat4::from_diagonal(&nalgebra::Vector4::repeat(1e-4)),
            r_dop: 0.2 * 0.2,
            r_gyro: Mat3::identity() * (0.01 * 0.01),
            t_vs: Pose::identity(),
            gyro_bias: Vec3::zeros(),
            ransac_iters: 100,
            ransac_threshold: 0.3,
            ransac_seed: 0,
            forward_gate: 3.0,
            integration_steps: 10,
            initial_twist: Twist::zero(),
            initial_information: Mat6::identity() * 1e-2,
        }
    }
}

/// Fits a sensor-frame linear velocity from minimal 3-point samples of the
/// radial model `y_i = (q_i / |q_i|) . v` and returns the largest consensus
/// set plus the least-squares refit on it. Deterministic for a fixed seed.
pub fn ransac_doppler_inliers(
    frame: &LidarFrame,
    config: &DopplerConfig,
) -> Result<(Vec<usize>, Vec3), DopplerError> {
    let mut usable = Vec::new();
    let mut dirs = Vec::new();
    let mut meas = Vec::new();
    for (i, p) in frame.points.iter().enumerate() {
        let r = p.range();
        if r > 1e-9 {
            usable.push(i);
            dirs.push(p.position / r);
            meas.push(p.doppler);
        }
    }
    if usable.len() < 3 {
        return Err(DopplerError::InsufficientData {
            got: usable.len(),
            need: 3,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.ransac_seed);
    let mut best: Vec<usize> = Vec::new(); // indices into `usable`
    for _ in 0..config.ransac_iters {
        let pick = sample(&mut rng, usable.len(), 3);
        let a = Mat3::from_rows(&[
            dirs[pick.index(0)].transpose(),
            dirs[pick.index(1)].transpose(),
            dirs[pick.index(2)].transpose(),
        ]);
        if a.determinant().abs() < 1e-9 {
            continue;
        }
        let y = Vec3::new(meas[pick.index(0)], meas[pick.index(1)], meas[pick.index(2)]);
        let Some(v) = a.lu().solve(&y) else { continue };
        let inliers: Vec<usize> = (0..usable.len())
            .filter(|&k| (meas[k] - dirs[k].dot(&v)).abs() < config.ransac_threshold)
            .collect();
        if inliers.len() > best.len() {
            best = inliers;
        }
    }
    if best.len() < 3 {
        return Err(DopplerError::DegenerateGeometry);
    }

    let refit = least_squares_velocity(&best, &dirs, &meas);
    Ok((best.iter().map(|&k| usable[k]).collect(), refit))
}

fn least_squares_velocity(selected: &[usize], dirs: &[Vec3], meas: &[f64]) -> Vec3 {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for &k in selected {
        a += dirs[k] * dirs[k].transpose();
        b += dirs[k] * meas[k];
    }
    // Pseudo-inverse handles direction sets spanning fewer than three
    // dimensions (single-wall scenes).
    a.svd(true, true)
        .solve(&b, 1e-12)
        .unwrap_or_else(|_| Vec3::zeros())
}

/// Accept or reject a solve by the change in forward velocity between
/// frames. `true` means accept.
pub fn forward_velocity_gate(current: &Twist, previous: &Twist, gate: f64) -> bool {
    (current.linear.x - previous.linear.x).abs() <= gate
}

// Selection of (v_y, v_z, w_roll, w_pitch) from a twist vector.
fn kinematic_selector() -> SMatrix<f64, 4, 6> {
    let mut h = SMatrix::<f64, 4, 6>::zeros();
    h[(0, 1)] = 1.0;
    h[(1, 2)] = 1.0;
    h[(2, 3)] = 1.0;
    h[(3, 4)] = 1.0;
    h
}

// Selection of the angular block from a twist vector.
fn angular_selector() -> SMatrix<f64, 3, 6> {
    let mut d = SMatrix::<f64, 3, 6>::zeros();
    d[(0, 3)] = 1.0;
    d[(1, 4)] = 1.0;
    d[(2, 5)] = 1.0;
    d
}

/// One exact linear solve for the boundary velocity pair of a frame.
///
/// The state is `x = (w_begin, w_end)`; the older state is anchored at the
/// supplied prior with its information, the motion prior ties the pair
/// together, the kinematic factor penalises the newer state, and Doppler
/// and gyroscope factors observe the velocity linearly interpolated at
/// their own timestamps. The frame must already be downsampled,
/// bias-corrected, and reduced to RANSAC inliers.
pub fn solve_velocity(
    frame: &LidarFrame,
    gyro: &[GyroSample],
    prior: &VelocityPrior,
    config: &DopplerConfig,
) -> Result<VelocitySolve, DopplerError> {
    let t0 = frame.t_start;
    let t1 = frame.t_end;
    let dt = t1 - t0;
    let mut h = Mat12::zeros();
    let mut g = Vec12::zeros();

    // Anchor on the older state.
    h.fixed_view_mut::<6, 6>(0, 0).add_assign(&prior.information);
    g.fixed_rows_mut::<6>(0)
        .add_assign(&(prior.information * prior.state.twist.to_vector()));

    // Motion prior between the pair: e = w_end - w_begin, cov dt * Qc.
    let q_inv = (config.qc * dt)
        .try_inverse()
        .ok_or(DopplerError::RankDeficient)?;
    h.fixed_view_mut::<6, 6>(0, 0).add_assign(&q_inv);
    h.fixed_view_mut::<6, 6>(6, 6).add_assign(&q_inv);
    h.fixed_view_mut::<6, 6>(0, 6).add_assign(&(-q_inv));
    h.fixed_view_mut::<6, 6>(6, 0).add_assign(&(-q_inv));

    // Kinematic penalty on the newer state.
    let k = kinematic_selector();
    let qz_inv = config.qz.try_inverse().ok_or(DopplerError::RankDeficient)?;
    h.fixed_view_mut::<6, 6>(6, 6)
        .add_assign(&(k.transpose() * qz_inv * k));

    // Doppler factors: y_i = (1/|q|) [q^T 0] Ad(T_sv) w(t_i).
    let ad_sv = *adjoint(&config.t_vs.inverse()).matrix();
    let w_dop = 1.0 / config.r_dop;
    let dop = deterministic_sum(&frame.points, InfoAccum::<12>::zero(), |p| {
        let r = p.range();
        if r <= 1e-9 {
            return InfoAccum::zero();
        }
        let alpha = ((p.timestamp - t0) / dt).clamp(0.0, 1.0);
        let mut a = Vec6::zeros();
        a.fixed_rows_mut::<3>(0).copy_from(&(p.position / r));
        let m = ad_sv.transpose() * a;
        let mut row = Vec12::zeros();
        row.fixed_rows_mut::<6>(0).copy_from(&(m * (1.0 - alpha)));
        row.fixed_rows_mut::<6>(6).copy_from(&(m * alpha));
        InfoAccum {
            h: row * row.transpose() * w_dop,
            g: row * (w_dop * p.doppler),
        }
    });
    h += dop.h;
    g += dop.g;

    // Gyroscope factors: y_j = C_sv D w(t_j) + bias.
    let c_sv = config.t_vs.rotation.transpose();
    let d = angular_selector();
    let r_gyro_inv = config
        .r_gyro
        .try_inverse()
        .ok_or(DopplerError::RankDeficient)?;
    let gyr = deterministic_sum(gyro, InfoAccum::<12>::zero(), |s| {
        let alpha = ((s.stamp - t0) / dt).clamp(0.0, 1.0);
        let base = c_sv * d;
        let mut jac = SMatrix::<f64, 3, 12>::zeros();
        jac.fixed_view_mut::<3, 6>(0, 0)
            .copy_from(&(base * (1.0 - alpha)));
        jac.fixed_view_mut::<3, 6>(0, 6).copy_from(&(base * alpha));
        let y = s.rate - config.gyro_bias;
        InfoAccum {
            h: jac.transpose() * r_gyro_inv * jac,
            g: jac.transpose() * (r_gyro_inv * y),
        }
    });
    h += gyr.h;
    g += gyr.g;

    let chol = h.cholesky().ok_or(DopplerError::RankDeficient)?;
    let x = chol.solve(&g);

    // Marginal information of the newer state (Schur complement).
    let h_bb = h.fixed_view::<6, 6>(6, 6).into_owned();
    let h_ba = h.fixed_view::<6, 6>(6, 0).into_owned();
    let h_aa_inv = h
        .fixed_view::<6, 6>(0, 0)
        .into_owned()
        .try_inverse()
        .ok_or(DopplerError::RankDeficient)?;
    let end_information = h_bb - h_ba * h_aa_inv * h_ba.transpose();

    Ok(VelocitySolve {
        begin: VelocityState {
            twist: Twist::from_vector(&x.fixed_rows::<6>(0).into_owned()),
            stamp: t0,
        },
        end: VelocityState {
            twist: Twist::from_vector(&x.fixed_rows::<6>(6).into_owned()),
            stamp: t1,
        },
        end_information,
    })
}

/// Relative pose `T_{prev <- curr}` by compounding `steps` screw increments
/// of the linearly interpolated velocity.
pub fn integrate_pose(prev: &VelocityState, curr: &VelocityState, steps: usize) -> Pose {
    assert!(steps >= 1, "integration needs at least one step");
    assert!(curr.stamp > prev.stamp, "states must advance in time");
    let dt = (curr.stamp - prev.stamp) / steps as f64;
    let w0 = prev.twist.to_vector();
    let w1 = curr.twist.to_vector();
    let mut pose = Pose::identity();
    for i in 1..=steps {
        let alpha = i as f64 / steps as f64;
        let w = w0 * (1.0 - alpha) + w1 * alpha;
        pose = pose.compose(&exp_map(&Twist::from_vector(&(w * dt))));
    }
    pose
}

/// Frame-by-frame Doppler odometry carrying the one-state marginal forward.
pub struct DopplerOdometry {
    config: DopplerConfig,
    previous: Option<VelocityPrior>,
}

/// Outcome of one odometry frame.
#[derive(Debug, Clone)]
pub struct DopplerStep {
    pub begin: VelocityState,
    pub end: VelocityState,
    /// `T_{prev <- curr}`: maps current-frame vehicle coordinates into the
    /// previous frame.
    pub relative: Pose,
    pub inliers: usize,
    pub gate_rejected: bool,
}

impl DopplerOdometry {
    pub fn new(config: DopplerConfig) -> Self {
        Self {
            config,
            previous: None,
        }
    }

    pub fn config(&self) -> &DopplerConfig {
        &self.config
    }

    /// Processes one azimuth-elevation-downsampled, bias-corrected frame.
    ///
    /// Runs RANSAC, solves the boundary velocity pair, applies the forward
    /// velocity gate (holding the previous twist on rejection), and
    /// integrates the relative pose. Frames too sparse for RANSAC fall back
    /// to the gyro-plus-prior solve.
    pub fn process_frame(
        &mut self,
        frame: &LidarFrame,
        gyro: &[GyroSample],
    ) -> Result<DopplerStep, DopplerError> {
        let prior = self.previous.unwrap_or(VelocityPrior {
            state: VelocityState {
                twist: self.config.initial_twist,
                stamp: frame.t_start,
            },
            information: self.config.initial_information,
        });

        let (inlier_frame, inliers) = match ransac_doppler_inliers(frame, &self.config) {
            Ok((idx, _)) => {
                let mut f = LidarFrame::new(frame.t_start, frame.t_end);
                f.points = idx.iter().map(|&i| frame.points[i]).collect();
                let n = f.len();
                (f, n)
            }
            Err(DopplerError::InsufficientData { .. }) | Err(DopplerError::DegenerateGeometry) => {
                (LidarFrame::new(frame.t_start, frame.t_end), 0)
            }
            Err(e) => return Err(e),
        };

        let solve = solve_velocity(&inlier_frame, gyro, &prior, &self.config)?;
        let accepted = forward_velocity_gate(
            &solve.end.twist,
            &prior.state.twist,
            self.config.forward_gate,
        );
        let (begin, end, info) = if accepted {
            (solve.begin, solve.end, solve.end_information)
        } else {
            // Constant-velocity fallback: hold the previous twist.
            (
                VelocityState {
                    twist: prior.state.twist,
                    stamp: frame.t_start,
                },
                VelocityState {
                    twist: prior.state.twist,
                    stamp: frame.t_end,
                },
                prior.information,
            )
        };
        let relative = integrate_pose(&begin, &end, self.config.integration_steps);
        self.previous = Some(VelocityPrior {
            state: end,
            information: info,
        });
        Ok(DopplerStep {
            begin,
            end,
            relative,
            inliers,
            gate_rejected: !accepted,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{apply_doppler_bias, azel_downsample, LidarPoint};
    use crate::sim;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame_with(points: Vec<LidarPoint>) -> LidarFrame {
        LidarFrame {
            points,
            t_start: 0.0,
            t_end: 0.1,
        }
    }

    fn random_direction(rng: &mut impl Rng) -> Vec3 {
        // Within a generous forward cone so sampled triples are well
        // conditioned.
        let az: f64 = rng.gen_range(-1.0..1.0);
        let el: f64 = rng.gen_range(-0.26..0.26);
        Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
    }

    #[test]
    fn ransac_exact_consistency_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let v = Vec3::new(10.0, 0.0, 0.0);
        let points: Vec<LidarPoint> = (0..100)
            .map(|_| {
                let d = random_direction(&mut rng);
                let r = rng.gen_range(5.0..80.0);
                LidarPoint::new(d * r, 0.05, d.dot(&v))
            })
            .collect();
        let frame = frame_with(points);
        let (inliers, vel) = ransac_doppler_inliers(&frame, &DopplerConfig::default()).unwrap();
        assert_eq!(inliers.len(), frame.len());
        assert_relative_eq!(vel, v, epsilon = 1e-9);
    }

    #[test]
    fn ransac_stationary_recovers_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let points: Vec<LidarPoint> = (0..50)
            .map(|_| LidarPoint::new(random_direction(&mut rng) * 20.0, 0.05, 0.0))
            .collect();
        let (inliers, vel) =
            ransac_doppler_inliers(&frame_with(points), &DopplerConfig::default()).unwrap();
        assert_eq!(inliers.len(), 50);
        assert_relative_eq!(vel, Vec3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn ransac_rejects_planted_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        let v = Vec3::new(8.0, 0.0, 0.0);
        let mut points = Vec::new();
        let mut planted = Vec::new();
        for i in 0..200 {
            let d = random_direction(&mut rng);
            let r = rng.gen_range(5.0..60.0);
            let clean = d.dot(&v);
            if i % 10 < 7 {
                planted.push(i);
                points.push(LidarPoint::new(d * r, 0.05, clean));
            } else {
                points.push(LidarPoint::new(d * r, 0.05, clean + 5.0));
            }
        }
        let (inliers, vel) =
            ransac_doppler_inliers(&frame_with(points), &DopplerConfig::default()).unwrap();
        assert_eq!(inliers, planted);
        assert!((vel - v).norm() < 1e-6);
    }

    #[test]
    fn ransac_needs_three_points() {
        let points = vec![
            LidarPoint::new(Vec3::new(10.0, 0.0, 0.0), 0.0, 1.0),
            LidarPoint::new(Vec3::new(0.0, 10.0, 0.0), 0.0, 1.0),
        ];
        assert!(matches!(
            ransac_doppler_inliers(&frame_with(points), &DopplerConfig::default()),
            Err(DopplerError::InsufficientData { got: 2, need: 3 })
        ));
    }

    #[test]
    fn gate_examples() {
        let t = |vx: f64| Twist::new(Vec3::new(vx, 0.0, 0.0), Vec3::zeros());
        assert!(forward_velocity_gate(&t(10.0), &t(10.0), 3.0));
        assert!(!forward_velocity_gate(&t(14.0), &t(10.0), 3.0));
        assert!(forward_velocity_gate(&t(12.9), &t(10.0), 3.0));
    }

    #[test]
    fn solve_all_zero_inputs_yields_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let points: Vec<LidarPoint> = (0..40)
            .map(|_| LidarPoint::new(random_direction(&mut rng) * 15.0, 0.05, 0.0))
            .collect();
        let gyro: Vec<GyroSample> = (0..10)
            .map(|k| GyroSample {
                stamp: 0.005 + 0.01 * k as f64,
                rate: Vec3::zeros(),
            })
            .collect();
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::zero(),
                stamp: 0.0,
            },
            information: Mat6::identity(),
        };
        let solve =
            solve_velocity(&frame_with(points), &gyro, &prior, &DopplerConfig::default()).unwrap();
        assert!(solve.end.twist.to_vector().norm() < 1e-12);
        assert!(solve.begin.twist.to_vector().norm() < 1e-12);
    }

    #[test]
    fn solve_gradient_vanishes_at_solution() {
        // Reassemble the objective gradient and check it is zero at the
        // returned solution.
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let v = Vec3::new(7.0, 0.3, -0.1);
        let points: Vec<LidarPoint> = (0..60)
            .map(|_| {
                let d = random_direction(&mut rng);
                let r = rng.gen_range(4.0..40.0);
                let t = rng.gen_range(0.0..0.1);
                LidarPoint::new(d * r, t, d.dot(&v) + rng.gen_range(-0.2..0.2))
            })
            .collect();
        let gyro: Vec<GyroSample> = (0..10)
            .map(|k| GyroSample {
                stamp: 0.005 + 0.01 * k as f64,
                rate: Vec3::new(0.01, -0.02, 0.15),
            })
            .collect();
        let config = DopplerConfig::default();
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::new(Vec3::new(6.8, 0.0, 0.0), Vec3::zeros()),
                stamp: 0.0,
            },
            information: Mat6::identity() * 10.0,
        };
        let frame = frame_with(points);
        let solve = solve_velocity(&frame, &gyro, &prior, &config).unwrap();

        let x0 = solve.begin.twist.to_vector();
        let x1 = solve.end.twist.to_vector();
        let mut grad0 = prior.information * (x0 - prior.state.twist.to_vector());
        let mut grad1 = Vec6::zeros();
        let q_inv = (config.qc * 0.1).try_inverse().unwrap();
        let e_wnoa = x1 - x0;
        grad0 += -q_inv * e_wnoa;
        grad1 += q_inv * e_wnoa;
        let k = kinematic_selector();
        grad1 += k.transpose() * config.qz.try_inverse().unwrap() * (k * x1);
        let ad_sv = *adjoint(&config.t_vs.inverse()).matrix();
        for p in &frame.points {
            let r = p.range();
            let alpha = (p.timestamp - frame.t_start) / frame.duration();
            let mut a = Vec6::zeros();
            a.fixed_rows_mut::<3>(0).copy_from(&(p.position / r));
            let m = ad_sv.transpose() * a;
            let pred = m.dot(&(x0 * (1.0 - alpha) + x1 * alpha));
            let e = pred - p.doppler;
            grad0 += m * ((1.0 - alpha) * e / config.r_dop);
            grad1 += m * (alpha * e / config.r_dop);
        }
        let c_sv = config.t_vs.rotation.transpose();
        let d = angular_selector();
        for s in &gyro {
            let alpha = (s.stamp - frame.t_start) / frame.duration();
            let base = c_sv * d;
            let pred = base * (x0 * (1.0 - alpha) + x1 * alpha);
            let e = pred - s.rate;
            let w = config.r_gyro.try_inverse().unwrap() * e;
            grad0 += (base * (1.0 - alpha)).transpose() * w;
            grad1 += (base * alpha).transpose() * w;
        }
        assert!(grad0.norm() < 1e-9, "grad0 {}", grad0.norm());
        assert!(grad1.norm() < 1e-9, "grad1 {}", grad1.norm());
    }

    #[test]
    fn solve_recovers_constant_twist_from_simulator() {
        let world = sim::WorldSpec {
            planes: vec![
                sim::PlaneSpec {
                    center: Vec3::new(0.0, 0.0, -1.5),
                    normal: Vec3::z(),
                    half_extents: [300.0, 300.0],
                },
                sim::PlaneSpec {
                    center: Vec3::new(0.0, 12.0, 3.0),
                    normal: -Vec3::y(),
                    half_extents: [300.0, 6.0],
                },
                sim::PlaneSpec {
                    center: Vec3::new(90.0, 0.0, 3.0),
                    normal: -Vec3::x(),
                    half_extents: [40.0, 8.0],
                },
            ],
            ..sim::WorldSpec::default()
        };
        let truth = Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros());
        let gt = sim::build_trajectory(&[sim::RouteSegment {
            t_start: 0.0,
            t_end: 0.5,
            twist: truth,
        }])
        .unwrap();
        let sensor = sim::SensorSpec {
            elevation_rows: 12,
            azimuth_cols: 100,
            ..sim::SensorSpec::default()
        };
        let raw = sim::render_scan(&world, &gt, 0.1, 0.2, &sensor).unwrap();
        let frame = azel_downsample(&raw, 240, 60).unwrap();
        let gyro = sim::simulate_gyro(&gt, &sensor, 0, 0.1, 0.2).unwrap();

        // Weak prior relative to measurement weights.
        let config = DopplerConfig {
            qc: Mat6::identity() * 1e6,
            initial_information: Mat6::identity() * 1e-6,
            ..DopplerConfig::default()
        };
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::zero(),
                stamp: 0.1,
            },
            information: config.initial_information,
        };
        let (idx, _) = ransac_doppler_inliers(&frame, &config).unwrap();
        let mut inlier_frame = LidarFrame::new(frame.t_start, frame.t_end);
        inlier_frame.points = idx.iter().map(|&i| frame.points[i]).collect();
        let solve = solve_velocity(&inlier_frame, &gyro, &prior, &config).unwrap();
        assert!(
            (solve.end.twist.linear - truth.linear).norm() < 1e-3,
            "linear error {}",
            (solve.end.twist.linear - truth.linear).norm()
        );
        assert!((solve.end.twist.angular - truth.angular).norm() < 1e-6);
    }

    #[test]
    fn solve_pure_yaw_pins_angular_and_kinematic_dims() {
        let world = sim::WorldSpec {
            planes: vec![
                sim::PlaneSpec {
                    center: Vec3::new(0.0, 0.0, -1.5),
                    normal: Vec3::z(),
                    half_extents: [300.0, 300.0],
                },
                sim::PlaneSpec {
                    center: Vec3::new(40.0, 0.0, 3.0),
                    normal: -Vec3::x(),
                    half_extents: [40.0, 8.0],
                },
            ],
            ..sim::WorldSpec::default()
        };
        let truth = Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 0.2));
        let gt = sim::build_trajectory(&[sim::RouteSegment {
            t_start: 0.0,
            t_end: 0.5,
            twist: truth,
        }])
        .unwrap();
        let sensor = sim::SensorSpec {
            elevation_rows: 10,
            azimuth_cols: 80,
            ..sim::SensorSpec::default()
        };
        let raw = sim::render_scan(&world, &gt, 0.0, 0.1, &sensor).unwrap();
        let frame = azel_downsample(&raw, 240, 60).unwrap();
        let gyro = sim::simulate_gyro(&gt, &sensor, 0, 0.0, 0.1).unwrap();
        let config = DopplerConfig::default();
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::zero(),
                stamp: 0.0,
            },
            information: Mat6::identity() * 1e-6,
        };
        let solve = solve_velocity(&frame, &gyro, &prior, &config).unwrap();
        assert!((solve.end.twist.angular - truth.angular).norm() < 1e-6);
        let w = solve.end.twist;
        assert!(w.linear.y.abs() < 1e-4);
        assert!(w.linear.z.abs() < 1e-4);
        assert!(w.angular.x.abs() < 1e-6);
        assert!(w.angular.y.abs() < 1e-6);
    }

    #[test]
    fn huge_doppler_variance_matches_gyro_prior_only_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let v = Vec3::new(5.0, 0.0, 0.0);
        let points: Vec<LidarPoint> = (0..50)
            .map(|_| {
                let d = random_direction(&mut rng);
                LidarPoint::new(d * 20.0, rng.gen_range(0.0..0.1), d.dot(&v))
            })
            .collect();
        let gyro: Vec<GyroSample> = (0..10)
            .map(|k| GyroSample {
                stamp: 0.005 + 0.01 * k as f64,
                rate: Vec3::new(0.0, 0.0, 0.1),
            })
            .collect();
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::new(Vec3::new(4.0, 0.0, 0.0), Vec3::zeros()),
                stamp: 0.0,
            },
            // Strong enough that the 1e6-scaled Doppler variance leaves a
            // sub-1e-6 residual influence on the solution.
            information: Mat6::identity() * 1e4,
        };
        let base = DopplerConfig {
            qc: Mat6::identity() * 1e-4,
            ..DopplerConfig::default()
        };
        let config = DopplerConfig {
            r_dop: 0.2 * 0.2 * 1e6,
            ..base.clone()
        };
        let frame = frame_with(points);
        let with_weak_doppler = solve_velocity(&frame, &gyro, &prior, &config).unwrap();
        let without_doppler =
            solve_velocity(&LidarFrame::new(0.0, 0.1), &gyro, &prior, &base).unwrap();
        assert!(
            (with_weak_doppler.end.twist.to_vector() - without_doppler.end.twist.to_vector())
                .norm()
                < 1e-6
        );
    }

    #[test]
    fn integrate_zero_twist_is_identity() {
        let s = |t: f64| VelocityState {
            twist: Twist::zero(),
            stamp: t,
        };
        let p = integrate_pose(&s(0.0), &s(0.1), 10);
        assert_eq!(p.translation, Vec3::zeros());
    }

    #[test]
    fn integrate_constant_forward_motion() {
        for steps in [1, 3, 10, 50] {
            let w = Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros());
            let p = integrate_pose(
                &VelocityState {
                    twist: w,
                    stamp: 0.0,
                },
                &VelocityState {
                    twist: w,
                    stamp: 0.1,
                },
                steps,
            );
            assert_relative_eq!(p.translation, Vec3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn integrate_constant_screw_matches_closed_form() {
        let w = Twist::new(Vec3::new(5.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.5));
        let closed = exp_map(&w.scaled(0.1));
        for steps in [1, 2, 7, 40] {
            let p = integrate_pose(
                &VelocityState {
                    twist: w,
                    stamp: 0.0,
                },
                &VelocityState {
                    twist: w,
                    stamp: 0.1,
                },
                steps,
            );
            assert!((p.to_homogeneous() - closed.to_homogeneous()).norm() < 1e-12);
        }
    }

    #[test]
    fn pipeline_holds_twist_on_gate_rejection() {
        // A frame consistent with a 4 m/s jump in forward velocity must be
        // rejected at the 3 m/s gate and the previous twist held.
        let mut odom = DopplerOdometry::new(DopplerConfig {
            initial_twist: Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros()),
            initial_information: Mat6::identity() * 1e-6,
            ..DopplerConfig::default()
        });
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let jumped = Vec3::new(14.0, 0.0, 0.0);
        let points: Vec<LidarPoint> = (0..80)
            .map(|_| {
                let d = random_direction(&mut rng);
                LidarPoint::new(d * 20.0, rng.gen_range(0.0..0.1), d.dot(&jumped))
            })
            .collect();
        let step = odom.process_frame(&frame_with(points), &[]).unwrap();
        assert!(step.gate_rejected);
        assert_relative_eq!(step.end.twist.linear.x, 10.0, epsilon = 1e-12);
        assert_relative_eq!(step.relative.translation.x, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn biased_gyro_with_matching_config_is_unbiased() {
        let truth = Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 0.3));
        let gt = sim::build_trajectory(&[sim::RouteSegment {
            t_start: 0.0,
            t_end: 0.2,
            twist: truth,
        }])
        .unwrap();
        let bias = Vec3::new(0.01, -0.02, 0.005);
        let sensor = sim::SensorSpec {
            gyro_bias: bias,
            ..sim::SensorSpec::default()
        };
        let gyro = sim::simulate_gyro(&gt, &sensor, 0, 0.0, 0.1).unwrap();
        let config = DopplerConfig {
            gyro_bias: bias,
            ..DopplerConfig::default()
        };
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::zero(),
                stamp: 0.0,
            },
            information: Mat6::identity() * 1e-9,
        };
        let solve = solve_velocity(&LidarFrame::new(0.0, 0.1), &gyro, &prior, &config).unwrap();
        assert!((solve.end.twist.angular - truth.angular).norm() < 1e-6);
    }

    #[test]
    fn bias_corrected_simulator_frames_feed_clean_measurements() {
        // End-to-end preprocessing order: downsample, correct bias, solve.
        let world = sim::WorldSpec {
            planes: vec![
                sim::PlaneSpec {
                    center: Vec3::new(0.0, 0.0, -1.5),
                    normal: Vec3::z(),
                    half_extents: [300.0, 300.0],
                },
                sim::PlaneSpec {
                    center: Vec3::new(60.0, 0.0, 3.0),
                    normal: -Vec3::x(),
                    half_extents: [40.0, 8.0],
                },
            ],
            ..sim::WorldSpec::default()
        };
        let truth = Twist::new(Vec3::new(6.0, 0.0, 0.0), Vec3::zeros());
        let gt = sim::build_trajectory(&[sim::RouteSegment {
            t_start: 0.0,
            t_end: 0.3,
            twist: truth,
        }])
        .unwrap();
        let sensor = sim::SensorSpec {
            elevation_rows: 10,
            azimuth_cols: 90,
            bias_slope: 0.001,
            bias_intercept: 0.04,
            ..sim::SensorSpec::default()
        };
        let model = crate::cloud::DopplerBiasModel {
            slope: 0.001,
            intercept: 0.04,
        };
        let raw = sim::render_scan(&world, &gt, 0.1, 0.2, &sensor).unwrap();
        let frame = apply_doppler_bias(&azel_downsample(&raw, 240, 60).unwrap(), &model);
        let gyro = sim::simulate_gyro(&gt, &sensor, 0, 0.1, 0.2).unwrap();
        let prior = VelocityPrior {
            state: VelocityState {
                twist: Twist::zero(),
                stamp: 0.1,
            },
            information: Mat6::identity() * 1e-6,
        };
        let config = DopplerConfig {
            qc: Mat6::identity() * 1e3,
            ..DopplerConfig::default()
        };
        let (idx, _) = ransac_doppler_inliers(&frame, &config).unwrap();
        let mut inlier_frame = LidarFrame::new(frame.t_start, frame.t_end);
        inlier_frame.points = idx.iter().map(|&i| frame.points[i]).collect();
        let solve = solve_velocity(&inlier_frame, &gyro, &prior, &config).unwrap();
        assert!(
            (solve.end.twist.linear.x - truth.linear.x).abs() < 0.05,
            "forward velocity error {}",
            (solve.end.twist.linear.x - truth.linear.x).abs()
        );
    }
}
