//! Continuous-time ICP odometry.
//!
//! The in-frame trajectory is a two-knot Gaussian-process segment under a
//! white-noise-on-acceleration prior: each knot carries a pose and a body
//! twist, and states at point timestamps come from the posterior-mean
//! (cubic Hermite) interpolation in the local chart of the older knot.
//! Gauss-Newton alternates exact nearest-neighbour association against a
//! sliding local map with a solve over both knots, fusing point-to-plane
//! weighted point factors, gyroscope factors, the motion prior, and a
//! marginal anchor on the older knot. Residual Jacobians are exact:
//! Lie-series derivatives, no internal finite differencing.

use crate::cloud::LidarFrame;
use crate::doppler::GyroSample;
use crate::geom::{
    adjoint, exp_map, hat, log_map, relative_log, se3_right_jacobian, se3_right_jacobian_dir,
    GeomError, Mat3, Mat6, Pose, Twist, Vec3, Vec6,
};
use crate::kdtree::KdTree;
use crate::reduce::{deterministic_sum, InfoAccum};
use nalgebra::SMatrix;
use std::collections::VecDeque;
use thiserror::Error;

pub type Mat12 = SMatrix<f64, 12, 12>;
pub type Vec12 = nalgebra::SVector<f64, 12>;
pub type Mat24 = SMatrix<f64, 24, 24>;
pub type Vec24 = nalgebra::SVector<f64, 24>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IcpError {
    #[error("local map is empty")]
    EmptyMap,
    #[error("time {t} outside knot interval [{t0}, {t1}]")]
    TimeOutOfRange { t: f64, t0: f64, t1: f64 },
    #[error("only {matched} correspondences, need {needed}")]
    InsufficientOverlap { matched: usize, needed: usize },
    #[error("Gauss-Newton system is rank deficient")]
    RankDeficient,
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Trajectory state at a knot: vehicle pose in the local map frame and
/// body twist.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryKnot {
    pub pose: Pose,
    pub twist: Twist,
    pub stamp: f64,
}

/// Map point with its surface normal, both in the map frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub position: Vec3,
    pub normal: Vec3,
}

/// Sliding local map over the most recent frames, indexed for exact
/// nearest-neighbour queries.
#[derive(Debug, Clone, Default)]
pub struct LocalMap {
    frames: VecDeque<Vec<MapPoint>>,
    flat: Vec<MapPoint>,
    tree: Option<KdTree>,
}

impl LocalMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Single-shot map from points already in the map frame.
    pub fn from_points(points: Vec<MapPoint>) -> Self {
        let mut map = Self::new();
        map.push_frame(points, usize::MAX);
        map
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.flat
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn push_frame(&mut self, points: Vec<MapPoint>, span: usize) {
        self.frames.push_back(points);
        while self.frames.len() > span {
            self.frames.pop_front();
        }
        self.flat = self.frames.iter().flatten().copied().collect();
        let positions: Vec<Vec3> = self.flat.iter().map(|p| p.position).collect();
        self.tree = if positions.is_empty() {
            None
        } else {
            Some(KdTree::build(&positions))
        };
    }
}

/// Exact nearest map point within `max_dist` of a map-frame query.
pub fn associate<'m>(query: &Vec3, map: &'m LocalMap, max_dist: f64) -> Option<(&'m MapPoint, f64)> {
    let tree = map.tree.as_ref()?;
    let (idx, d2) = tree.nearest(query)?;
    let d = d2.sqrt();
    if d <= max_dist {
        Some((&map.flat[idx], d))
    } else {
        None
    }
}

/// Inserts an undistorted frame into the map under `sensor_pose` (sensor to
/// map) and evicts frames beyond `span`. Points without normals are
/// skipped.
pub fn update_local_map(
    map: &LocalMap,
    frame: &LidarFrame,
    sensor_pose: &Pose,
    span: usize,
) -> LocalMap {
    let mut out = map.clone();
    let points: Vec<MapPoint> = frame
        .points
        .iter()
        .filter_map(|p| {
            p.normal.map(|n| MapPoint {
                position: sensor_pose.apply(&p.position),
                normal: sensor_pose.rotate(&n),
            })
        })
        .collect();
    out.push_frame(points, span);
    out
}

#[derive(Debug, Clone)]
pub struct IcpConfig {
    /// Spectral density of the motion prior; doubles as the prior
    /// covariance of localization solves.
    pub q_prior: Mat6,
    /// Point noise along the map normal, metres (1 sigma).
    pub r_icp_sigma: f64,
    /// Relative weight of the in-plane residual directions.
    pub plane_epsilon: f64,
    /// Gyroscope covariance.
    pub r_gyro: Mat3,
    /// Fixed gyroscope bias subtracted from measurements, sensor frame.
    pub gyro_bias: Vec3,
    pub max_iterations: usize,
    /// Convergence thresholds on the update norms.
    pub pose_tol: f64,
    pub twist_tol: f64,
    /// Association gate, metres.
    pub max_correspondence_dist: f64,
    /// Correspondences whose scan and map normals disagree by more than
    /// this angle are rejected (cross-surface mismatches at creases and
    /// occlusion shadows). Scan points without normals skip the gate.
    pub normal_gate: f64,
    /// Frames retained in the sliding local map.
    pub local_map_span: usize,
    /// Sensor mounting in the vehicle frame (`T_vs`).
    pub t_vs: Pose,
    /// Minimum correspondences per iteration.
    pub min_correspondences: usize,
    /// Quality gates for re-estimating normals on undistorted clouds
    /// before map insertion.
    pub map_normals: NormalParams,
    /// Twist assumed before the first frame.
    pub initial_twist: Twist,
    /// Anchor information on the first knot (pose block, then twist block).
    pub initial_information: Mat12,
}

impl Default for IcpConfig {
    fn default() -> Self {
        let mut info = Mat12::zeros();
        info.fixed_view_mut::<6, 6>(0, 0)
            .copy_from(&(Mat6::identity() * 1e6));
        info.fixed_view_mut::<6, 6>(6, 6)
            .copy_from(&(Mat6::identity() * 1e-2));
        Self {
            q_prior: Mat6::from_diagonal(&Vec6::new(1.0, 1.0, 1.0, 0.1, 0.1, 0.1)),
            r_icp_sigma: 0.02,
            plane_epsilon: 1e-3,
            r_gyro: Mat3::identity() * (0.01 * 0.01),
            gyro_bias: Vec3::zeros(),
            max_iterations: 20,
            pose_tol: 1e-6,
            twist_tol: 1e-6,
            max_correspondence_dist: 1.0,
            normal_gate: 45.0_f64.to_radians(),
            local_map_span: 3,
            t_vs: Pose::identity(),
            min_correspondences: 10,
            map_normals: NormalParams::default(),
            initial_twist: Twist::zero(),
            initial_information: info,
        }
    }
}

/// Point-to-plane weight: concentrates information along the map normal,
/// keeping `epsilon` of it in-plane.
pub fn point_weight(normal: &Vec3, sigma: f64, epsilon: f64) -> Mat3 {
    let nn = normal * normal.transpose();
    (nn + (Mat3::identity() - nn) * epsilon) / (sigma * sigma)
}

/// PCA normals over a point set: each point gets the smallest eigenvector
/// of its k-neighbourhood covariance, signed toward the origin of the
/// set's frame. Rank-deficient neighbourhoods and points whose planarity
/// score `1 - l_min/l_mid` falls at or below `score_threshold` yield
/// `None` — edge neighbourhoods blending two surfaces produce tilted
/// normals that poison point-to-plane weights.
///
/// Map-facing normals must be estimated on undistorted geometry — the
/// in-sweep motion shear is not a rotation, so normals carried through
/// undistortion stay tilted.
/// Quality gates for map-side normal estimation.
#[derive(Debug, Clone, Copy)]
pub struct NormalParams {
    pub k_neighbors: usize,
    /// Planarity score `1 - l_min/l_mid` must exceed this.
    pub score_threshold: f64,
    /// Neighbourhood radius cap, metres.
    pub radius: f64,
    /// Surface thickness cap `sqrt(l_min)`, metres: blends of two surfaces
    /// look planar to the relative score but are thick in absolute terms.
    pub max_thickness: f64,
}

impl Default for NormalParams {
    fn default() -> Self {
        Self {
            k_neighbors: 20,
            score_threshold: 0.95,
            radius: 4.0,
            max_thickness: 0.1,
        }
    }
}

pub fn estimate_normals(positions: &[Vec3], params: &NormalParams) -> Vec<Option<Vec3>> {
    if positions.is_empty() {
        return Vec::new();
    }
    let k = params.k_neighbors.min(positions.len());
    // Where angular sampling gets sparse, far neighbourhoods collapse to
    // 1D arcs whose PCA normals are garbage yet score well; the radius cap
    // plus an absolute spread floor on the middle eigenvalue reject them.
    let r2 = params.radius * params.radius;
    let spread_floor = (0.05 * params.radius) * (0.05 * params.radius);
    let thickness_cap = params.max_thickness * params.max_thickness;
    let tree = KdTree::build(positions);
    positions
        .iter()
        .map(|p| {
            let neighbours: Vec<usize> = tree
                .k_nearest(p, k)
                .into_iter()
                .filter(|&(_, d2)| d2 <= r2)
                .map(|(i, _)| i)
                .collect();
            if neighbours.len() < 5 {
                return None;
            }
            let mut mean = Vec3::zeros();
            for &i in &neighbours {
                mean += positions[i];
            }
            mean /= neighbours.len() as f64;
            let mut cov = Mat3::zeros();
            for &i in &neighbours {
                let d = positions[i] - mean;
                cov += d * d.transpose();
            }
            cov /= neighbours.len() as f64;
            let eig = nalgebra::SymmetricEigen::new(cov);
            let mut idx = [0usize, 1, 2];
            idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
            let (l_min, l_mid) = (eig.eigenvalues[idx[0]].max(0.0), eig.eigenvalues[idx[1]]);
            if l_mid <= spread_floor
                || l_min > thickness_cap
                || 1.0 - l_min / l_mid <= params.score_threshold
            {
                return None;
            }
            let mut normal: Vec3 = eig.eigenvectors.column(idx[0]).into_owned();
            normal /= normal.norm();
            if normal.dot(p) > 0.0 {
                normal = -normal;
            }
            Some(normal)
        })
        .collect()
}

/// Replaces every point's normal with one estimated from the (undistorted)
/// positions themselves.
pub fn refresh_normals(frame: &LidarFrame, params: &NormalParams) -> LidarFrame {
    let positions: Vec<Vec3> = frame.points.iter().map(|p| p.position).collect();
    let normals = estimate_normals(&positions, params);
    let mut out = frame.clone();
    for (p, n) in out.points.iter_mut().zip(normals) {
        p.normal = n;
    }
    out
}

/// Chart state of a two-knot segment relative to a base pose:
/// `V_k = base * exp(xi_k)` and `twist_k = J_r(xi_k) nu_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalState {
    pub xi1: Vec6,
    pub nu1: Vec6,
    pub xi2: Vec6,
    pub nu2: Vec6,
}

impl LocalState {
    pub fn from_knots(
        base: &Pose,
        a: &TrajectoryKnot,
        b: &TrajectoryKnot,
    ) -> Result<Self, IcpError> {
        let xi1 = relative_log(base, &a.pose)?;
        let xi2 = relative_log(base, &b.pose)?;
        let nu1 = se3_right_jacobian(&xi1)
            .lu()
            .solve(&a.twist.to_vector())
            .ok_or(IcpError::RankDeficient)?;
        let nu2 = se3_right_jacobian(&xi2)
            .lu()
            .solve(&b.twist.to_vector())
            .ok_or(IcpError::RankDeficient)?;
        Ok(Self { xi1, nu1, xi2, nu2 })
    }

    pub fn to_vector(&self) -> Vec24 {
        let mut v = Vec24::zeros();
        v.fixed_rows_mut::<6>(0).copy_from(&self.xi1);
        v.fixed_rows_mut::<6>(6).copy_from(&self.nu1);
        v.fixed_rows_mut::<6>(12).copy_from(&self.xi2);
        v.fixed_rows_mut::<6>(18).copy_from(&self.nu2);
        v
    }

    pub fn from_vector(v: &Vec24) -> Self {
        Self {
            xi1: v.fixed_rows::<6>(0).into_owned(),
            nu1: v.fixed_rows::<6>(6).into_owned(),
            xi2: v.fixed_rows::<6>(12).into_owned(),
            nu2: v.fixed_rows::<6>(18).into_owned(),
        }
    }

    pub fn knots(&self, base: &Pose, t0: f64, t1: f64) -> (TrajectoryKnot, TrajectoryKnot) {
        let pose1 = base.compose(&exp_map(&Twist::from_vector(&self.xi1)));
        let pose2 = base.compose(&exp_map(&Twist::from_vector(&self.xi2)));
        (
            TrajectoryKnot {
                pose: pose1,
                twist: Twist::from_vector(&(se3_right_jacobian(&self.xi1) * self.nu1)),
                stamp: t0,
            },
            TrajectoryKnot {
                pose: pose2,
                twist: Twist::from_vector(&(se3_right_jacobian(&self.xi2) * self.nu2)),
                stamp: t1,
            },
        )
    }
}

/// Derived quantities of a chart state shared by every factor of one
/// Gauss-Newton iteration, including the exact derivative blocks of the
/// knot-relative pose `c = ln(exp(-xi1) exp(xi2))` and of the boundary
/// velocities with respect to the chart parameters.
pub struct ChartTerms {
    pub v1: Pose,
    /// `c = ln(V1^-1 V2)` in the knot-1 chart.
    pub c: Vec6,
    /// Body twist at knot 1.
    pub w1: Vec6,
    /// Chart velocity at knot 2: `J_r(c)^-1 J_r(xi2) nu2`.
    pub xidot2: Vec6,
    jr_xi1: Mat6,
    // dc/dxi1 and dc/dxi2.
    a: Mat6,
    b: Mat6,
    // d(J_r(xi1) nu1)/dxi1.
    p1: Mat6,
    dxidot2_dxi1: Mat6,
    dxidot2_dxi2: Mat6,
    dxidot2_dnu2: Mat6,
    t0: f64,
    dt: f64,
}

impl ChartTerms {
    pub fn new(state: &LocalState, base: &Pose, t0: f64, t1: f64) -> Result<Self, IcpError> {
        let dt = t1 - t0;
        let v1 = base.compose(&exp_map(&Twist::from_vector(&state.xi1)));
        let e1_inv = exp_map(&Twist::from_vector(&(-state.xi1)));
        let e2 = exp_map(&Twist::from_vector(&state.xi2));
        let c = log_map(&e1_inv.compose(&e2))?.to_vector();
        let jr_xi1 = se3_right_jacobian(&state.xi1);
        let jr_xi2 = se3_right_jacobian(&state.xi2);
        let jr_c_inv = se3_right_jacobian(&c)
            .try_inverse()
            .ok_or(IcpError::RankDeficient)?;
        let w1 = jr_xi1 * state.nu1;
        let w2 = jr_xi2 * state.nu2;
        let xidot2 = jr_c_inv * w2;
        let a = -jr_c_inv * adjoint(&exp_map(&Twist::from_vector(&(-c)))).0 * jr_xi1;
        let b = jr_c_inv * jr_xi2;
        let p1 = se3_right_jacobian_dir(&state.xi1, &state.nu1);
        let p2 = se3_right_jacobian_dir(&state.xi2, &state.nu2);
        let qm = -jr_c_inv * se3_right_jacobian_dir(&c, &xidot2);
        Ok(ChartTerms {
            v1,
            c,
            w1,
            xidot2,
            jr_xi1,
            a,
            b,
            p1,
            dxidot2_dxi1: qm * a,
            dxidot2_dxi2: qm * b + jr_c_inv * p2,
            dxidot2_dnu2: jr_c_inv * jr_xi2,
            t0,
            dt,
        })
    }

    fn bases(&self, t: f64) -> (f64, f64, f64, f64, f64, f64) {
        let s = ((t - self.t0) / self.dt).clamp(0.0, 1.0);
        let bv = self.dt * (s - 2.0 * s * s + s * s * s);
        let bp = 3.0 * s * s - 2.0 * s * s * s;
        let bd = self.dt * (s * s * s - s * s);
        let bv_dot = 1.0 - 4.0 * s + 3.0 * s * s;
        let bp_dot = (6.0 * s - 6.0 * s * s) / self.dt;
        let bd_dot = 3.0 * s * s - 2.0 * s;
        (bv, bp, bd, bv_dot, bp_dot, bd_dot)
    }

    /// Chart-local pose of the interpolant at `t` and its time derivative.
    pub fn local_xi(&self, t: f64) -> (Vec6, Vec6) {
        let (bv, bp, bd, bvd, bpd, bdd) = self.bases(t);
        (
            self.w1 * bv + self.c * bp + self.xidot2 * bd,
            self.w1 * bvd + self.c * bpd + self.xidot2 * bdd,
        )
    }

    // Derivatives of the interpolant (position bases) or its time
    // derivative (dotted bases) with respect to (xi1, nu1, xi2, nu2).
    fn g_blocks(&self, bv: f64, bp: f64, bd: f64) -> [Mat6; 4] {
        [
            self.p1 * bv + self.a * bp + self.dxidot2_dxi1 * bd,
            self.jr_xi1 * bv,
            self.b * bp + self.dxidot2_dxi2 * bd,
            self.dxidot2_dnu2 * bd,
        ]
    }

    /// Interpolated vehicle pose in the map frame at `t`.
    pub fn pose_at(&self, t: f64) -> Pose {
        let (g, _) = self.local_xi(t);
        self.v1.compose(&exp_map(&Twist::from_vector(&g)))
    }

    /// Map-frame position of a vehicle-frame point observed at `t`.
    pub fn transform(&self, point_vehicle: &Vec3, t: f64) -> Vec3 {
        self.pose_at(t).apply(point_vehicle)
    }

    /// Point residual `e = p_map - V(t) y` with its exact 3x24 Jacobian.
    pub fn point_residual(
        &self,
        point_vehicle: &Vec3,
        map_point: &Vec3,
        t: f64,
    ) -> (Vec3, SMatrix<f64, 3, 24>) {
        let (bv, bp, bd, _, _, _) = self.bases(t);
        let (g, _) = self.local_xi(t);
        let exp_g = exp_map(&Twist::from_vector(&g));
        let z = exp_g.apply(point_vehicle);
        let residual = map_point - self.v1.apply(&z);

        let jr_g = se3_right_jacobian(&g);
        let r_f = self.v1.rotation * exp_g.rotation;
        let mut dot_y = SMatrix::<f64, 3, 6>::zeros();
        dot_y
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Mat3::identity());
        dot_y
            .fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-hat(point_vehicle)));
        // d e / d g.
        let m = -r_f * dot_y * jr_g;
        // Direct dependence through V1 = base * exp(xi1).
        let mut dot_z = SMatrix::<f64, 3, 6>::zeros();
        dot_z
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&Mat3::identity());
        dot_z.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-hat(&z)));
        let direct = -self.v1.rotation * dot_z * self.jr_xi1;

        let blocks = self.g_blocks(bv, bp, bd);
        let mut jac = SMatrix::<f64, 3, 24>::zeros();
        jac.fixed_view_mut::<3, 6>(0, 0)
            .copy_from(&(direct + m * blocks[0]));
        jac.fixed_view_mut::<3, 6>(0, 6).copy_from(&(m * blocks[1]));
        jac.fixed_view_mut::<3, 6>(0, 12)
            .copy_from(&(m * blocks[2]));
        jac.fixed_view_mut::<3, 6>(0, 18)
            .copy_from(&(m * blocks[3]));
        (residual, jac)
    }

    /// Interpolated body twist at `t` with its exact 6x24 Jacobian.
    pub fn twist_with_jacobian(&self, t: f64) -> (Vec6, SMatrix<f64, 6, 24>) {
        let (bv, bp, bd, bvd, bpd, bdd) = self.bases(t);
        let (g, g_dot) = self.local_xi(t);
        let jr_g = se3_right_jacobian(&g);
        let twist = jr_g * g_dot;
        let d_dir = se3_right_jacobian_dir(&g, &g_dot);
        let g_blocks = self.g_blocks(bv, bp, bd);
        let gdot_blocks = self.g_blocks(bvd, bpd, bdd);
        let mut jac = SMatrix::<f64, 6, 24>::zeros();
        for (k, col) in [0usize, 6, 12, 18].into_iter().enumerate() {
            let block = jr_g * gdot_blocks[k] + d_dir * g_blocks[k];
            jac.fixed_view_mut::<6, 6>(0, col).copy_from(&block);
        }
        (twist, jac)
    }

    /// Gyroscope residual `e = y - bias - C_sv D w(t)` with its Jacobian.
    pub fn gyro_residual(
        &self,
        rate: &Vec3,
        t: f64,
        c_sv: &Mat3,
        bias: &Vec3,
    ) -> (Vec3, SMatrix<f64, 3, 24>) {
        let (twist, twist_jac) = self.twist_with_jacobian(t);
        let angular = twist.fixed_rows::<3>(3).into_owned();
        let residual = rate - bias - c_sv * angular;
        let jac = -c_sv * twist_jac.fixed_rows::<3>(3).into_owned();
        (residual, jac)
    }

    /// Motion prior residual `e = (c - dt w1, xidot2 - w1)` with Jacobian.
    pub fn prior_residual(&self) -> (Vec12, SMatrix<f64, 12, 24>) {
        let mut e = Vec12::zeros();
        e.fixed_rows_mut::<6>(0)
            .copy_from(&(self.c - self.w1 * self.dt));
        e.fixed_rows_mut::<6>(6).copy_from(&(self.xidot2 - self.w1));
        let mut jac = SMatrix::<f64, 12, 24>::zeros();
        jac.fixed_view_mut::<6, 6>(0, 0)
            .copy_from(&(self.a - self.p1 * self.dt));
        jac.fixed_view_mut::<6, 6>(0, 6)
            .copy_from(&(-self.jr_xi1 * self.dt));
        jac.fixed_view_mut::<6, 6>(0, 12).copy_from(&self.b);
        jac.fixed_view_mut::<6, 6>(6, 0)
            .copy_from(&(self.dxidot2_dxi1 - self.p1));
        jac.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-self.jr_xi1));
        jac.fixed_view_mut::<6, 6>(6, 12)
            .copy_from(&self.dxidot2_dxi2);
        jac.fixed_view_mut::<6, 6>(6, 18)
            .copy_from(&self.dxidot2_dnu2);
        (e, jac)
    }
}

/// Inverse covariance of the two-knot motion prior for spectral density
/// `qc` over an interval `dt`.
pub fn wnoa_information(qc: &Mat6, dt: f64) -> Option<Mat12> {
    let qc_inv = qc.try_inverse()?;
    let mut q = Mat12::zeros();
    q.fixed_view_mut::<6, 6>(0, 0)
        .copy_from(&(qc_inv * (12.0 / (dt * dt * dt))));
    q.fixed_view_mut::<6, 6>(0, 6)
        .copy_from(&(qc_inv * (-6.0 / (dt * dt))));
    q.fixed_view_mut::<6, 6>(6, 0)
        .copy_from(&(qc_inv * (-6.0 / (dt * dt))));
    q.fixed_view_mut::<6, 6>(6, 6)
        .copy_from(&(qc_inv * (4.0 / dt)));
    Some(q)
}

/// WNOA posterior-mean state between two knots.
pub fn interpolate_state(
    a: &TrajectoryKnot,
    b: &TrajectoryKnot,
    t: f64,
) -> Result<(Pose, Twist), IcpError> {
    if !(b.stamp > a.stamp) || t < a.stamp - 1e-9 || t > b.stamp + 1e-9 {
        return Err(IcpError::TimeOutOfRange {
            t,
            t0: a.stamp,
            t1: b.stamp,
        });
    }
    let state = LocalState::from_knots(&a.pose, a, b)?;
    let chart = ChartTerms::new(&state, &a.pose, a.stamp, b.stamp)?;
    let (g, g_dot) = chart.local_xi(t);
    let pose = chart.v1.compose(&exp_map(&Twist::from_vector(&g)));
    let twist = Twist::from_vector(&(se3_right_jacobian(&g) * g_dot));
    Ok((pose, twist))
}

/// Re-expresses every point at the frame-end pose through the sensor
/// extrinsic; output timestamps collapse to the frame end.
pub fn undistort(
    frame: &LidarFrame,
    a: &TrajectoryKnot,
    b: &TrajectoryKnot,
    extrinsic: &Pose,
) -> Result<LidarFrame, IcpError> {
    let state = LocalState::from_knots(&a.pose, a, b)?;
    let chart = ChartTerms::new(&state, &a.pose, a.stamp, b.stamp)?;
    let left = extrinsic
        .inverse()
        .compose(&b.pose.inverse())
        .compose(&chart.v1);
    let mut out = LidarFrame::new(frame.t_start, frame.t_end);
    out.points.reserve(frame.len());
    for p in &frame.points {
        let t = p.timestamp;
        if t < a.stamp - 1e-9 || t > b.stamp + 1e-9 {
            return Err(IcpError::TimeOutOfRange {
                t,
                t0: a.stamp,
                t1: b.stamp,
            });
        }
        let (g, _) = chart.local_xi(t);
        // sensor-at-t_end <- sensor-at-t.
        let motion = left
            .compose(&exp_map(&Twist::from_vector(&g)))
            .compose(extrinsic);
        let mut q = *p;
        q.position = motion.apply(&p.position);
        q.normal = p.normal.map(|n| motion.rotate(&n));
        q.timestamp = frame.t_end;
        out.points.push(q);
    }
    Ok(out)
}

/// Result of one odometry step.
#[derive(Debug, Clone)]
pub struct IcpStepResult {
    pub knots: (TrajectoryKnot, TrajectoryKnot),
    /// `T_{curr <- prev}`: maps previous frame-end vehicle coordinates into
    /// the current frame-end vehicle frame.
    pub relative: Pose,
    pub iterations: usize,
    pub diverged: bool,
    pub correspondences: usize,
    /// Marginal information of the newer knot in its own chart.
    pub end_information: Mat12,
    /// Final cost per factor.
    pub cost: f64,
}

struct PointFactor {
    vehicle: Vec3,
    timestamp: f64,
    /// Scan normal in the vehicle frame, for the compatibility gate.
    normal: Option<Vec3>,
}

#[derive(Clone)]
struct StepAccum {
    info: InfoAccum<24>,
    cost: f64,
}

impl std::ops::Add for StepAccum {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        StepAccum {
            info: self.info + rhs.info,
            cost: self.cost + rhs.cost,
        }
    }
}

#[derive(Clone)]
struct Correspondence {
    vehicle: Vec3,
    timestamp: f64,
    map_position: Vec3,
    map_normal: Vec3,
}

/// Adaptive trim threshold on point-to-plane distances: generous while the
/// alignment is coarse, tightening to a few sigma as residuals shrink, so
/// occlusion-shadow mismatches never enter the solve at full weight.
pub fn plane_trim_gate(plane_dists: &[f64], sigma: f64) -> f64 {
    let floor = 3.0 * sigma;
    if plane_dists.is_empty() {
        return floor;
    }
    let mut sorted = plane_dists.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (3.0 * sorted[sorted.len() / 2]).max(floor)
}

/// One continuous-time ICP odometry step over a preprocessed feature frame.
///
/// `prior` supplies the anchored older knot and the initial guess for the
/// newer one; `anchor_information` weighs the older knot's chart
/// coordinates. Each iteration re-associates against the map, assembles
/// the exact Gauss-Newton system, and updates the chart state until the
/// update norms fall under the configured thresholds.
pub fn icp_odometry_step(
    frame: &LidarFrame,
    map: &LocalMap,
    gyro: &[GyroSample],
    prior: &(TrajectoryKnot, TrajectoryKnot),
    anchor_information: &Mat12,
    config: &IcpConfig,
) -> Result<IcpStepResult, IcpError> {
    if map.is_empty() {
        return Err(IcpError::EmptyMap);
    }
    let (t0, t1) = (prior.0.stamp, prior.1.stamp);
    assert!(t1 > t0, "knots must advance in time");
    let base = prior.0.pose;
    let mut state = LocalState::from_knots(&base, &prior.0, &prior.1)?;
    let anchor_xi1 = state.xi1;
    let anchor_nu1 = state.nu1;
    let q_info = wnoa_information(&config.q_prior, t1 - t0).ok_or(IcpError::RankDeficient)?;
    let r_gyro_inv = config.r_gyro.try_inverse().ok_or(IcpError::RankDeficient)?;
    let c_sv = config.t_vs.rotation.transpose();

    let factors: Vec<PointFactor> = frame
        .points
        .iter()
        .map(|p| PointFactor {
            vehicle: config.t_vs.apply(&p.position),
            timestamp: p.timestamp,
            normal: p.normal.map(|n| config.t_vs.rotate(&n)),
        })
        .collect();
    let gate_cos = config.normal_gate.cos();

    let mut iterations = 0;
    let mut converged = false;
    let mut correspondences = 0;
    let mut costs: Vec<f64> = Vec::new();
    let mut final_h = Mat24::zeros();

    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let chart = ChartTerms::new(&state, &base, t0, t1)?;

        // Pass 1: associate under the normal-compatibility gate and record
        // point-to-plane distances. Chunked and flattened in order, so the
        // result is partition-independent.
        let candidates: Vec<(Correspondence, f64)> = {
            use rayon::prelude::*;
            let per_chunk: Vec<Vec<(Correspondence, f64)>> = factors
                .par_chunks(crate::reduce::CHUNK)
                .map(|chunk| {
                    let mut out = Vec::with_capacity(chunk.len());
                    for f in chunk {
                        let pose_t = chart.pose_at(f.timestamp);
                        let mapped = pose_t.apply(&f.vehicle);
                        let Some((mp, _)) =
                            associate(&mapped, map, config.max_correspondence_dist)
                        else {
                            continue;
                        };
                        if let Some(n) = &f.normal {
                            if pose_t.rotate(n).dot(&mp.normal).abs() < gate_cos {
                                continue;
                            }
                        }
                        let plane_dist = (mp.position - mapped).dot(&mp.normal).abs();
                        out.push((
                            Correspondence {
                                vehicle: f.vehicle,
                                timestamp: f.timestamp,
                                map_position: mp.position,
                                map_normal: mp.normal,
                            },
                            plane_dist,
                        ));
                    }
                    out
                })
                .collect();
            per_chunk.into_iter().flatten().collect()
        };
        let trim = plane_trim_gate(
            &candidates.iter().map(|(_, d)| *d).collect::<Vec<_>>(),
            config.r_icp_sigma,
        );
        let survivors: Vec<Correspondence> = candidates
            .into_iter()
            .filter(|(_, d)| *d <= trim)
            .map(|(c, _)| c)
            .collect();
        correspondences = survivors.len();
        if correspondences < config.min_correspondences {
            return Err(IcpError::InsufficientOverlap {
                matched: correspondences,
                needed: config.min_correspondences,
            });
        }

        // Pass 2: assemble the surviving point factors.
        let zero = StepAccum {
            info: InfoAccum::zero(),
            cost: 0.0,
        };
        let acc = deterministic_sum(&survivors, zero, |c| {
            let w = point_weight(&c.map_normal, config.r_icp_sigma, config.plane_epsilon);
            let (e, jac) = chart.point_residual(&c.vehicle, &c.map_position, c.timestamp);
            StepAccum {
                info: InfoAccum {
                    h: jac.transpose() * w * jac,
                    g: jac.transpose() * (w * e),
                },
                cost: 0.5 * (e.transpose() * w * e)[0],
            }
        });

        let mut h = acc.info.h;
        let mut g = acc.info.g;
        let mut cost = acc.cost;

        for s in gyro {
            let (e, jac) = chart.gyro_residual(&s.rate, s.stamp, &c_sv, &config.gyro_bias);
            h += jac.transpose() * r_gyro_inv * jac;
            g += jac.transpose() * (r_gyro_inv * e);
            cost += 0.5 * (e.transpose() * r_gyro_inv * e)[0];
        }

        let (e_prior, j_prior) = chart.prior_residual();
        h += j_prior.transpose() * q_info * j_prior;
        g += j_prior.transpose() * (q_info * e_prior);
        cost += 0.5 * (e_prior.transpose() * q_info * e_prior)[0];

        // Anchor on the older knot's chart coordinates (linear factor).
        let mut e_anchor = Vec12::zeros();
        e_anchor
            .fixed_rows_mut::<6>(0)
            .copy_from(&(state.xi1 - anchor_xi1));
        e_anchor
            .fixed_rows_mut::<6>(6)
            .copy_from(&(state.nu1 - anchor_nu1));
        let mut j_anchor = SMatrix::<f64, 12, 24>::zeros();
        j_anchor
            .fixed_view_mut::<12, 12>(0, 0)
            .copy_from(&Mat12::identity());
        h += j_anchor.transpose() * anchor_information * j_anchor;
        g += j_anchor.transpose() * (anchor_information * e_anchor);
        cost += 0.5 * (e_anchor.transpose() * anchor_information * e_anchor)[0];

        // Track cost per factor: the trim gate changes the correspondence
        // set between iterations, so raw sums are not comparable.
        costs.push(cost / (correspondences + gyro.len() + 1) as f64);
        final_h = h;

        let delta = h.cholesky().ok_or(IcpError::RankDeficient)?.solve(&(-g));
        state = LocalState::from_vector(&(state.to_vector() + delta));

        let pose_update = (delta.fixed_rows::<6>(0).norm_squared()
            + delta.fixed_rows::<6>(12).norm_squared())
        .sqrt();
        let twist_update = (delta.fixed_rows::<6>(6).norm_squared()
            + delta.fixed_rows::<6>(18).norm_squared())
        .sqrt();
        if pose_update < config.pose_tol && twist_update < config.twist_tol {
            converged = true;
            break;
        }
    }

    // Divergence is diagnosed, not acted on: a run that failed to converge
    // and ended on materially non-decreasing cost across three consecutive
    // iterations. Trim-set churn keeps raw comparisons noisy, hence the
    // relative slack.
    let n = costs.len();
    let grew = |a: f64, b: f64| b > a * (1.0 - 1e-9);
    let diverged = !converged
        && n >= 3
        && grew(costs[n - 2], costs[n - 1])
        && grew(costs[n - 3], costs[n - 2]);

    let knots = state.knots(&base, t0, t1);
    let forward = knots.0.pose.inverse().compose(&knots.1.pose);

    // Marginal information of the newer knot, transported into its own
    // chart (first-order exact).
    let h11 = final_h.fixed_view::<12, 12>(0, 0).into_owned();
    let h12 = final_h.fixed_view::<12, 12>(0, 12).into_owned();
    let h22 = final_h.fixed_view::<12, 12>(12, 12).into_owned();
    let h11_inv = h11.try_inverse().ok_or(IcpError::RankDeficient)?;
    let schur = h22 - h12.transpose() * h11_inv * h12;
    let jr2 = se3_right_jacobian(&state.xi2);
    let p2 = se3_right_jacobian_dir(&state.xi2, &state.nu2);
    let mut transport = Mat12::zeros();
    transport.fixed_view_mut::<6, 6>(0, 0).copy_from(&jr2);
    transport.fixed_view_mut::<6, 6>(6, 0).copy_from(&p2);
    transport.fixed_view_mut::<6, 6>(6, 6).copy_from(&jr2);
    let transport_inv = transport.try_inverse().ok_or(IcpError::RankDeficient)?;
    let end_information = transport_inv.transpose() * schur * transport_inv;

    Ok(IcpStepResult {
        knots,
        relative: forward.inverse(),
        iterations,
        diverged,
        correspondences,
        end_information,
        cost: *costs.last().unwrap_or(&0.0),
    })
}

/// Frame-by-frame continuous-time ICP odometry against its own sliding
/// local map, with posterior undistortion feeding the map.
pub struct IcpOdometry {
    config: IcpConfig,
    map: LocalMap,
    state: Option<(TrajectoryKnot, Mat12)>,
}

#[derive(Debug, Clone)]
pub struct IcpFrameResult {
    /// `T_{prev <- curr}` between frame-end vehicle frames.
    pub relative: Pose,
    /// Vehicle pose in the odometry frame at the frame end.
    pub pose: Pose,
    pub knots: (TrajectoryKnot, TrajectoryKnot),
    /// Undistorted feature frame, sensor frame at the frame end.
    pub undistorted: LidarFrame,
    pub iterations: usize,
    pub diverged: bool,
    pub correspondences: usize,
    pub end_information: Mat12,
}

impl IcpOdometry {
    pub fn new(config: IcpConfig) -> Self {
        Self {
            config,
            map: LocalMap::new(),
            state: None,
        }
    }

    pub fn config(&self) -> &IcpConfig {
        &self.config
    }

    pub fn map(&self) -> &LocalMap {
        &self.map
    }

    /// Current frame-end vehicle pose in the odometry frame.
    pub fn pose(&self) -> Option<Pose> {
        self.state.as_ref().map(|(k, _)| k.pose)
    }

    /// Processes one voxel-downsampled planar-feature frame.
    ///
    /// The first frame seeds the odometry frame at its end pose; later
    /// frames register against the sliding local map.
    pub fn process_frame(
        &mut self,
        features: &LidarFrame,
        gyro: &[GyroSample],
    ) -> Result<IcpFrameResult, IcpError> {
        let dt = features.duration();
        match self.state.take() {
            None => {
                // Bootstrap: constant-twist trajectory ending at identity.
                let w = self.config.initial_twist;
                let end = TrajectoryKnot {
                    pose: Pose::identity(),
                    twist: w,
                    stamp: features.t_end,
                };
                let begin = TrajectoryKnot {
                    pose: exp_map(&w.scaled(dt)).inverse(),
                    twist: w,
                    stamp: features.t_start,
                };
                let undistorted = undistort(features, &begin, &end, &self.config.t_vs)?;
                let sensor_pose = end.pose.compose(&self.config.t_vs);
                self.map = update_local_map(
                    &self.map,
                    &refresh_normals(&undistorted, &self.config.map_normals),
                    &sensor_pose,
                    self.config.local_map_span,
                );
                let info = self.config.initial_information;
                self.state = Some((end, info));
                Ok(IcpFrameResult {
                    relative: exp_map(&w.scaled(dt)),
                    pose: end.pose,
                    knots: (begin, end),
                    undistorted,
                    iterations: 0,
                    diverged: false,
                    correspondences: 0,
                    end_information: info,
                })
            }
            Some((knot, info)) => {
                let predicted = TrajectoryKnot {
                    pose: knot.pose.compose(&exp_map(&knot.twist.scaled(dt))),
                    twist: knot.twist,
                    stamp: features.t_end,
                };
                let prior = (knot, predicted);
                let step =
                    icp_odometry_step(features, &self.map, gyro, &prior, &info, &self.config)?;
                let undistorted =
                    undistort(features, &step.knots.0, &step.knots.1, &self.config.t_vs)?;
                let sensor_pose = step.knots.1.pose.compose(&self.config.t_vs);
                self.map = update_local_map(
                    &self.map,
                    &refresh_normals(&undistorted, &self.config.map_normals),
                    &sensor_pose,
                    self.config.local_map_span,
                );
                self.state = Some((step.knots.1, step.end_information));
                Ok(IcpFrameResult {
                    relative: step.relative.inverse(),
                    pose: step.knots.1.pose,
                    knots: step.knots,
                    undistorted,
                    iterations: step.iterations,
                    diverged: step.diverged,
                    correspondences: step.correspondences,
                    end_information: step.end_information,
                })
            }
        }
    }
}
