//! Teach-and-repeat topometric localization.
//!
//! The teach pass drives ICP odometry over a route and drops submap
//! vertices whenever accumulated motion exceeds a translation or rotation
//! threshold, each holding the voxel-merged cloud of the last three
//! undistorted frames. The repeat pass runs either odometry backend every
//! frame, dead-reckons between map matches, and every `n`-th frame finds
//! the nearest vertex by graph expansion, compounds the odometry chain
//! since the last successful match into a prior, and aligns the live frame
//! to the vertex submap.

use crate::cloud::{
    apply_doppler_bias, azel_downsample, extract_planar_features, voxel_downsample, CloudError,
    DopplerBiasModel, LidarFrame, LidarPoint,
};
use crate::doppler::{DopplerConfig, DopplerError, DopplerOdometry, GyroSample, VelocityState};
use crate::geom::{hat, log_map, se3_right_jacobian, Mat6, Pose, Vec3, Vec6};
use crate::icp::{
    associate, point_weight, undistort, IcpConfig, IcpError, IcpOdometry, LocalMap, MapPoint,
    TrajectoryKnot,
};
use std::time::Instant;
use thiserror::Error;

pub mod io;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("teach odometry diverged at frame {frame}")]
    TeachDiverged { frame: usize },
    #[error("graph has no teach vertices")]
    EmptyGraph,
    #[error("no localization anchor before frame {frame}")]
    NoAnchor { frame: usize },
    #[error("missing {kind} edge for index {index}")]
    BrokenChain { kind: &'static str, index: usize },
    #[error("localization prior rotation {angle} rad too close to pi")]
    PriorOutOfDomain { angle: f64 },
    #[error(transparent)]
    Icp(#[from] IcpError),
    #[error(transparent)]
    Doppler(#[from] DopplerError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
}

impl From<crate::geom::GeomError> for GraphError {
    fn from(e: crate::geom::GeomError) -> Self {
        GraphError::Icp(IcpError::Geometry(e))
    }
}

/// Preprocessing parameters shared by teach and repeat.
#[derive(Debug, Clone)]
pub struct PrepConfig {
    pub voxel_size: f64,
    pub k_neighbors: usize,
    pub score_threshold: f64,
    /// Quality gates for submap normal estimation.
    pub submap_normals: crate::icp::NormalParams,
    pub az_bins: usize,
    pub el_bins: usize,
    pub bias: DopplerBiasModel,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            voxel_size: crate::cloud::DEFAULT_VOXEL_SIZE,
            k_neighbors: crate::cloud::DEFAULT_K_NEIGHBORS,
            score_threshold: crate::cloud::DEFAULT_SCORE_THRESHOLD,
            submap_normals: crate::icp::NormalParams::default(),
            az_bins: crate::cloud::DEFAULT_AZ_BINS,
            el_bins: crate::cloud::DEFAULT_EL_BINS,
            bias: DopplerBiasModel::default(),
        }
    }
}

/// Submap vertex recorded during teach: pose in the teach odometry frame
/// and the merged local cloud, stored in the vertex frame.
///
/// `cloud` is the raw merged point set as persisted on disk; `submap` is
/// the derived query structure with quality-gated normals, reproducible
/// from `cloud` alone.
#[derive(Debug, Clone)]
pub struct TeachVertex {
    pub id: usize,
    pub pose: Pose,
    pub cloud: Vec<Vec3>,
    pub submap: LocalMap,
}

impl TeachVertex {
    /// Builds a vertex from its raw cloud, deriving gated normals.
    pub fn from_cloud(
        id: usize,
        pose: Pose,
        cloud: Vec<Vec3>,
        params: &crate::icp::NormalParams,
    ) -> Self {
        let submap = LocalMap::from_points(compute_submap_normals(&cloud, params));
        Self {
            id,
            pose,
            cloud,
            submap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Teach(usize),
    Repeat(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Odometry,
    Localization,
}

/// Directed edge carrying `T_{src <- dst}`: maps dst-frame coordinates
/// into the src frame.
#[derive(Debug, Clone, Copy)]
pub struct GraphEdge {
    pub kind: EdgeKind,
    pub src: NodeRef,
    pub dst: NodeRef,
    pub relative: Pose,
}

/// Teach vertices with their odometry chain, plus the repeat branch built
/// during a repeat pass.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub vertices: Vec<TeachVertex>,
    /// `teach_edges[m]` holds `T_{m <- m+1}`.
    teach_edges: Vec<Pose>,
    /// `repeat_odometry[r]` holds `T_{r-1 <- r}` (entry 0 is identity).
    repeat_odometry: Vec<Pose>,
    /// Successful matches: `(frame, vertex, T_{frame <- vertex})`.
    localizations: Vec<(usize, usize, Pose)>,
    /// Initial alignment standing in for a match before the first one.
    anchor: Option<(usize, usize, Pose)>,
    edges: Vec<GraphEdge>,
}

impl PoseGraph {
    pub fn edges(&self) -> &[GraphEdge] {
        &self.edges
    }

    pub fn repeat_frame_count(&self) -> usize {
        self.repeat_odometry.len()
    }

    pub fn localizations(&self) -> &[(usize, usize, Pose)] {
        &self.localizations
    }

    pub fn add_teach_vertex(&mut self, vertex: TeachVertex, relative_from_previous: Option<Pose>) {
        if let Some(rel) = relative_from_previous {
            self.teach_edges.push(rel);
            self.edges.push(GraphEdge {
                kind: EdgeKind::Odometry,
                src: NodeRef::Teach(self.vertices.len() - 1),
                dst: NodeRef::Teach(self.vertices.len()),
                relative: rel,
            });
        }
        self.vertices.push(vertex);
    }

    /// Appends a repeat frame with its incoming odometry edge
    /// `T_{prev <- curr}`; frame 0 carries the identity.
    pub fn add_repeat_frame(&mut self, relative: Pose) -> usize {
        let r = self.repeat_odometry.len();
        self.repeat_odometry.push(relative);
        if r > 0 {
            self.edges.push(GraphEdge {
                kind: EdgeKind::Odometry,
                src: NodeRef::Repeat(r - 1),
                dst: NodeRef::Repeat(r),
                relative,
            });
        }
        r
    }

    pub fn add_localization(&mut self, frame: usize, vertex: usize, t_rm: Pose) {
        self.localizations.push((frame, vertex, t_rm));
        self.edges.push(GraphEdge {
            kind: EdgeKind::Localization,
            src: NodeRef::Repeat(frame),
            dst: NodeRef::Teach(vertex),
            relative: t_rm,
        });
    }

    /// Sets the initial alignment `T_{frame <- vertex}` used before the
    /// first successful match.
    pub fn set_anchor(&mut self, frame: usize, vertex: usize, t_rm: Pose) {
        self.anchor = Some((frame, vertex, t_rm));
    }

    /// Drops the repeat branch, keeping the teach map.
    pub fn clear_repeat(&mut self) {
        self.repeat_odometry.clear();
        self.localizations.clear();
        self.anchor = None;
        self.edges.retain(|e| {
            e.kind == EdgeKind::Odometry
                && matches!(e.src, NodeRef::Teach(_))
                && matches!(e.dst, NodeRef::Teach(_))
        });
    }

    /// `T_{a <- b}` chained through teach odometry edges.
    pub fn teach_relative(&self, a: usize, b: usize) -> Result<Pose, GraphError> {
        if a > b {
            return Ok(self.teach_relative(b, a)?.inverse());
        }
        if b > 0 && b - 1 >= self.teach_edges.len() {
            return Err(GraphError::BrokenChain {
                kind: "teach",
                index: b - 1,
            });
        }
        let mut rel = Pose::identity();
        for m in a..b {
            rel = rel.compose(&self.teach_edges[m]);
        }
        Ok(rel)
    }

    /// Prior `T_{r,m}` by compounding the odometry estimates since the
    /// last successful localization (or the anchor) through the graph.
    pub fn compound_prior(&self, r: usize, m: usize) -> Result<Pose, GraphError> {
        let mut last = self.anchor;
        for &(frame, vertex, rel) in &self.localizations {
            if frame <= r && last.is_none_or(|(lf, _, _)| frame >= lf) {
                last = Some((frame, vertex, rel));
            }
        }
        let (r_prime, m_prime, t_rm_prime) = last.ok_or(GraphError::NoAnchor { frame: r })?;
        // T_{r' <- r} through the repeat chain, then inverted.
        let mut t_rp_r = Pose::identity();
        for k in (r_prime + 1)..=r {
            let rel = self
                .repeat_odometry
                .get(k)
                .ok_or(GraphError::BrokenChain {
                    kind: "repeat",
                    index: k,
                })?;
            t_rp_r = t_rp_r.compose(rel);
        }
        let t_mp_m = self.teach_relative(m_prime, m)?;
        Ok(t_rp_r.inverse().compose(&t_rm_prime).compose(&t_mp_m))
    }

    /// Teach vertex nearest to the estimate, searched over a bounded hop
    /// window around `start`.
    pub fn find_nearest_vertex(&self, estimate: &Pose, start: usize, hop_radius: usize) -> usize {
        let lo = start.saturating_sub(hop_radius);
        let hi = (start + hop_radius).min(self.vertices.len().saturating_sub(1));
        let mut best = (lo, f64::INFINITY);
        for m in lo..=hi {
            let d = (self.vertices[m].pose.translation - estimate.translation).norm();
            if d < best.1 {
                best = (m, d);
            }
        }
        best.0
    }

    /// Exhaustive nearest vertex; seeds the repeat pass.
    pub fn nearest_vertex_global(&self, estimate: &Pose) -> Result<usize, GraphError> {
        if self.vertices.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        Ok(self.find_nearest_vertex(estimate, 0, self.vertices.len()))
    }
}

/// PCA normals over a merged submap cloud, signed toward the vertex
/// origin; rank-deficient neighbourhoods are dropped. Runs identically on
/// freshly built and reloaded submaps, which never store normals.
pub fn compute_submap_normals(
    positions: &[Vec3],
    params: &crate::icp::NormalParams,
) -> Vec<MapPoint> {
    crate::icp::estimate_normals(positions, params)
        .into_iter()
        .zip(positions)
        .filter_map(|(normal, p)| {
            normal.map(|n| MapPoint {
                position: *p,
                normal: n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct TeachConfig {
    /// Metres of accumulated translation that trigger a new vertex.
    pub translation_threshold: f64,
    /// Radians of accumulated rotation that trigger a new vertex.
    pub rotation_threshold: f64,
}

impl Default for TeachConfig {
    fn default() -> Self {
        Self {
            translation_threshold: 10.0,
            rotation_threshold: 30.0_f64.to_radians(),
        }
    }
}

/// Builds the teach map by running ICP odometry over the route, dropping a
/// vertex whenever motion since the last one reaches either threshold. The
/// submap merges the last three undistorted feature frames,
/// voxel-downsampled in the vertex frame.
pub fn teach(
    frames: &[LidarFrame],
    gyro: &[Vec<GyroSample>],
    prep: &PrepConfig,
    icp_config: &IcpConfig,
    teach_config: &TeachConfig,
) -> Result<PoseGraph, GraphError> {
    let mut odom = IcpOdometry::new(icp_config.clone());
    let mut graph = PoseGraph::default();
    let mut recent: Vec<(LidarFrame, Pose)> = Vec::new(); // undistorted + sensor pose
    let mut last_vertex_pose = Pose::identity();

    for (r, frame) in frames.iter().enumerate() {
        let features = extract_planar_features(
            &voxel_downsample(frame, prep.voxel_size)?,
            prep.k_neighbors,
            prep.score_threshold,
        )?;
        let out = odom
            .process_frame(&features, gyro.get(r).map_or(&[][..], |g| &g[..]))
            .map_err(|e| match e {
                IcpError::InsufficientOverlap { .. } => GraphError::TeachDiverged { frame: r },
                other => GraphError::Icp(other),
            })?;
        if out.diverged {
            return Err(GraphError::TeachDiverged { frame: r });
        }
        let sensor_pose = out.pose.compose(&icp_config.t_vs);
        recent.push((out.undistorted, sensor_pose));
        if recent.len() > 3 {
            recent.remove(0);
        }

        let create = if graph.vertices.is_empty() {
            true
        } else {
            let delta = last_vertex_pose.inverse().compose(&out.pose);
            delta.translation.norm() >= teach_config.translation_threshold
                || delta.rotation_angle() >= teach_config.rotation_threshold
        };
        if create {
            let cloud = build_submap(&recent, &out.pose, prep)?;
            let relative = if graph.vertices.is_empty() {
                None
            } else {
                Some(last_vertex_pose.inverse().compose(&out.pose))
            };
            let id = graph.vertices.len();
            graph.add_teach_vertex(
                TeachVertex::from_cloud(id, out.pose, cloud, &prep.submap_normals),
                relative,
            );
            last_vertex_pose = out.pose;
        }
    }
    if graph.vertices.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    Ok(graph)
}

fn build_submap(
    recent: &[(LidarFrame, Pose)],
    vertex_pose: &Pose,
    prep: &PrepConfig,
) -> Result<Vec<Vec3>, GraphError> {
    let into_vertex = vertex_pose.inverse();
    let mut merged = LidarFrame::new(0.0, 1.0);
    for (frame, sensor_pose) in recent {
        let to_vertex = into_vertex.compose(sensor_pose);
        for p in &frame.points {
            merged
                .points
                .push(LidarPoint::new(to_vertex.apply(&p.position), 0.5, 0.0));
        }
    }
    let downsampled = voxel_downsample(&merged, prep.voxel_size)?;
    Ok(downsampled.points.iter().map(|p| p.position).collect())
}

/// Outcome of one map-matching attempt.
#[derive(Debug, Clone)]
pub struct LocResult {
    pub frame: usize,
    /// `T_{r,m}`: maps vertex-frame coordinates into the live vehicle
    /// frame.
    pub t_rm: Pose,
    pub vertex: usize,
    pub converged: bool,
    pub iterations: usize,
    pub solve_time: f64,
}

/// Gauss-Newton alignment of an undistorted feature frame to a vertex
/// submap under a compounded prior.
///
/// The prior factor penalises `ln(prior * T^-1)` with weight `q_prior^-1`;
/// point factors are point-to-plane weighted. Correspondence starvation or
/// the iteration cap clear the converged flag rather than erroring.
pub fn localize(
    frame: &LidarFrame,
    vertex: &TeachVertex,
    prior: &Pose,
    config: &IcpConfig,
) -> Result<LocResult, GraphError> {
    let start = Instant::now();
    let angle = prior.rotation_angle();
    if angle >= std::f64::consts::PI - 1e-6 {
        return Err(GraphError::PriorOutOfDomain { angle });
    }
    let w_prior = config
        .q_prior
        .try_inverse()
        .ok_or(IcpError::RankDeficient)?;
    // Estimated vehicle pose in the vertex frame; the prior maps the other
    // way.
    let mut g = prior.inverse();
    let vehicle_points: Vec<(Vec3, Option<Vec3>)> = frame
        .points
        .iter()
        .map(|p| {
            (
                config.t_vs.apply(&p.position),
                p.normal.map(|n| config.t_vs.rotate(&n)),
            )
        })
        .collect();
    let gate_cos = config.normal_gate.cos();

    let mut converged = false;
    let mut iterations = 0;
    for iter in 0..config.max_iterations {
        iterations = iter + 1;
        let rot = g.rotation;
        // Associate, gate by normal agreement, then trim on point-to-plane
        // distance as in the odometry solver.
        let mut candidates: Vec<(&Vec3, &MapPoint, f64)> = Vec::new();
        for (y, normal) in &vehicle_points {
            let mapped = g.apply(y);
            let Some((mp, _)) = associate(&mapped, &vertex.submap, config.max_correspondence_dist)
            else {
                continue;
            };
            if let Some(n) = normal {
                if g.rotate(n).dot(&mp.normal).abs() < gate_cos {
                    continue;
                }
            }
            let plane_dist = (mp.position - mapped).dot(&mp.normal).abs();
            candidates.push((y, mp, plane_dist));
        }
        let trim = crate::icp::plane_trim_gate(
            &candidates.iter().map(|(_, _, d)| *d).collect::<Vec<_>>(),
            config.r_icp_sigma,
        );
        candidates.retain(|(_, _, d)| *d <= trim);
        if candidates.len() < config.min_correspondences {
            converged = false;
            break;
        }
        let mut h = Mat6::zeros();
        let mut grad = Vec6::zeros();
        for (y, mp, _) in &candidates {
            let w = point_weight(&mp.normal, config.r_icp_sigma, config.plane_epsilon);
            let e = mp.position - g.apply(y);
            // e(z) = p - G exp(z) y; exact Jacobian at z = 0.
            let mut jac = nalgebra::SMatrix::<f64, 3, 6>::zeros();
            jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rot));
            jac.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rot * hat(y)));
            h += jac.transpose() * w * jac;
            grad += jac.transpose() * (w * e);
        }
        // Prior factor: e = ln(prior * T_{r,m}^-1)^v = ln(prior * G)^v.
        let c0 = log_map(&prior.compose(&g))?.to_vector();
        let j_prior = se3_right_jacobian(&c0)
            .try_inverse()
            .ok_or(IcpError::RankDeficient)?;
        h += j_prior.transpose() * w_prior * j_prior;
        grad += j_prior.transpose() * (w_prior * c0);

        let delta = h
            .cholesky()
            .ok_or(IcpError::RankDeficient)?
            .solve(&(-grad));
        g = crate::geom::compose_exp(&g, &delta);
        if delta.norm() < config.pose_tol {
            converged = true;
            break;
        }
    }

    Ok(LocResult {
        frame: 0,
        t_rm: g.inverse(),
        vertex: vertex.id,
        converged,
        iterations,
        solve_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Doppler,
    Icp,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::Doppler => write!(f, "doppler"),
            BackendKind::Icp => write!(f, "icp"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RepeatConfig {
    /// Frames between localization attempts.
    pub interval: usize,
    pub backend: BackendKind,
    /// Vertex search window around the last match.
    pub hop_radius: usize,
    /// Vehicle pose in the teach-map frame at the first frame end.
    pub initial_pose: Pose,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        Self {
            interval: 1,
            backend: BackendKind::Icp,
            hop_radius: 5,
            initial_pose: Pose::identity(),
        }
    }
}

/// Instrumentation of one repeat pass.
#[derive(Debug, Clone, Default)]
pub struct RepeatStats {
    /// Frames at which a preprocessed cloud was stored for localization.
    pub stored_cloud_frames: Vec<usize>,
    pub attempts: usize,
    pub failures: usize,
    pub gate_rejections: usize,
}

#[derive(Debug, Clone)]
pub struct RepeatOutput {
    pub loc_results: Vec<LocResult>,
    /// Map-frame vehicle pose at every frame end: dead-reckoned between
    /// matches, corrected at successful ones.
    pub trajectory: Vec<Pose>,
    /// Seconds per frame: preprocessing + odometry + localization.
    pub timings: Vec<f64>,
    pub stats: RepeatStats,
}

/// Runs the repeat pass: the chosen backend every frame, a localization
/// attempt every `interval` frames against the nearest teach vertex, with
/// priors compounded through the graph since the last successful match.
/// Failed attempts leave the dead-reckoned chain untouched and do not
/// reset the attempt cadence.
pub fn repeat(
    frames: &[LidarFrame],
    gyro: &[Vec<GyroSample>],
    graph: &mut PoseGraph,
    prep: &PrepConfig,
    doppler_config: &DopplerConfig,
    icp_config: &IcpConfig,
    rc: &RepeatConfig,
) -> Result<RepeatOutput, GraphError> {
    assert!(rc.interval >= 1, "interval must be at least 1");
    if graph.vertices.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    graph.clear_repeat();

    enum Backend {
        Doppler(Box<DopplerOdometry>),
        Icp(Box<IcpOdometry>),
    }
    let mut backend = match rc.backend {
        BackendKind::Doppler => {
            Backend::Doppler(Box::new(DopplerOdometry::new(doppler_config.clone())))
        }
        BackendKind::Icp => Backend::Icp(Box::new(IcpOdometry::new(icp_config.clone()))),
    };

    let mut out = RepeatOutput {
        loc_results: Vec::new(),
        trajectory: Vec::with_capacity(frames.len()),
        timings: Vec::with_capacity(frames.len()),
        stats: RepeatStats::default(),
    };
    let mut map_pose = rc.initial_pose;
    let mut last_vertex = graph.nearest_vertex_global(&rc.initial_pose)?;

    for (r, frame) in frames.iter().enumerate() {
        let timer = Instant::now();
        let gyro_r = gyro.get(r).map_or(&[][..], |g| &g[..]);
        let attempt = r % rc.interval == 0;

        // Odometry plus, on attempt frames, the stored localization cloud
        // (undistorted feature frame in the sensor frame at t_end).
        let (relative, loc_cloud): (Pose, Option<LidarFrame>) = match &mut backend {
            Backend::Doppler(odom) => {
                let downsampled = azel_downsample(frame, prep.az_bins, prep.el_bins)?;
                let corrected = apply_doppler_bias(&downsampled, &prep.bias);
                let step = odom.process_frame(&corrected, gyro_r)?;
                if step.gate_rejected {
                    out.stats.gate_rejections += 1;
                }
                let cloud = if attempt {
                    // Stored only when a localization attempt is flagged.
                    let features = extract_planar_features(
                        &voxel_downsample(frame, prep.voxel_size)?,
                        prep.k_neighbors,
                        prep.score_threshold,
                    )?;
                    let knots = doppler_knots(&step.begin, &step.end, odom.config());
                    Some(undistort(&features, &knots.0, &knots.1, &odom.config().t_vs)?)
                } else {
                    None
                };
                (step.relative, cloud)
            }
            Backend::Icp(odom) => {
                let features = extract_planar_features(
                    &voxel_downsample(frame, prep.voxel_size)?,
                    prep.k_neighbors,
                    prep.score_threshold,
                )?;
                let step = odom.process_frame(&features, gyro_r)?;
                let cloud = attempt.then(|| step.undistorted.clone());
                (step.relative, cloud)
            }
        };

        if r == 0 {
            graph.add_repeat_frame(Pose::identity());
            let t_rm = graph.vertices[last_vertex]
                .pose
                .inverse()
                .compose(&map_pose)
                .inverse();
            graph.set_anchor(0, last_vertex, t_rm);
        } else {
            map_pose = map_pose.compose(&relative);
            graph.add_repeat_frame(relative);
        }

        if attempt {
            out.stats.attempts += 1;
            let cloud = loc_cloud.expect("attempt frames carry a stored cloud");
            out.stats.stored_cloud_frames.push(r);
            let vertex_id = graph.find_nearest_vertex(&map_pose, last_vertex, rc.hop_radius);
            let prior = graph.compound_prior(r, vertex_id)?;
            let mut result = localize(&cloud, &graph.vertices[vertex_id], &prior, icp_config)?;
            result.frame = r;
            if result.converged {
                graph.add_localization(r, vertex_id, result.t_rm);
                map_pose = graph.vertices[vertex_id]
                    .pose
                    .compose(&result.t_rm.inverse());
                last_vertex = vertex_id;
            } else {
                out.stats.failures += 1;
            }
            out.loc_results.push(result);
        }

        out.trajectory.push(map_pose);
        out.timings.push(timer.elapsed().as_secs_f64());
    }
    Ok(out)
}

/// Constant-chart knots equivalent to the Doppler velocity solution, for
/// undistorting a frame in its own start frame.
fn doppler_knots(
    begin: &VelocityState,
    end: &VelocityState,
    config: &DopplerConfig,
) -> (TrajectoryKnot, TrajectoryKnot) {
    let relative = crate::doppler::integrate_pose(begin, end, config.integration_steps);
    (
        TrajectoryKnot {
            pose: Pose::identity(),
            twist: begin.twist,
            stamp: begin.stamp,
        },
        TrajectoryKnot {
            pose: relative,
            twist: end.twist,
            stamp: end.stamp,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{Mat3, Twist};
    use crate::sim;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // A street-like corridor: ground, side walls, an end wall, and
    // building-sized boxes so forward motion stays observable everywhere.
    fn corridor_world() -> sim::WorldSpec {
        let mut boxes = Vec::new();
        for k in 0..8 {
            let x = 12.0 + 18.0 * k as f64;
            let side = if k % 2 == 0 { 1.0 } else { -1.0 };
            boxes.push(sim::BoxSpec {
                min: Vec3::new(x, side * 5.0 - 2.0, -1.5),
                max: Vec3::new(x + 4.0, side * 5.0 + 2.0, 2.5),
            });
        }
        sim::WorldSpec {
            planes: vec![
                sim::PlaneSpec {
                    center: Vec3::new(60.0, 0.0, -1.5),
                    normal: Vec3::z(),
                    half_extents: [260.0, 40.0],
                },
                sim::PlaneSpec {
                    center: Vec3::new(60.0, 11.0, 2.5),
                    normal: -Vec3::y(),
                    half_extents: [260.0, 4.5],
                },
                sim::PlaneSpec {
                    center: Vec3::new(60.0, -11.0, 2.5),
                    normal: Vec3::y(),
                    half_extents: [260.0, 4.5],
                },
                sim::PlaneSpec {
                    center: Vec3::new(160.0, 0.0, 3.0),
                    normal: -Vec3::x(),
                    half_extents: [30.0, 8.0],
                },
            ],
            boxes,
            dynamics: vec![],
            seed: 11,
        }
    }

    fn forward_route(speed: f64, duration: f64) -> sim::GroundTruth {
        sim::build_trajectory(&[sim::RouteSegment {
            t_start: 0.0,
            t_end: duration,
            twist: Twist::new(Vec3::new(speed, 0.0, 0.0), Vec3::zeros()),
        }])
        .unwrap()
    }

    fn render_route(
        world: &sim::WorldSpec,
        gt: &sim::GroundTruth,
        sensor: &sim::SensorSpec,
        count: usize,
    ) -> (Vec<LidarFrame>, Vec<Vec<GyroSample>>) {
        let dt = sensor.frame_period();
        let mut frames = Vec::with_capacity(count);
        let mut gyro = Vec::with_capacity(count);
        for k in 0..count {
            let (t0, t1) = (k as f64 * dt, (k + 1) as f64 * dt);
            frames.push(sim::render_scan(world, gt, t0, t1, sensor).unwrap());
            gyro.push(sim::simulate_gyro(gt, sensor, world.seed, t0, t1).unwrap());
        }
        (frames, gyro)
    }

    fn test_sensor() -> sim::SensorSpec {
        sim::SensorSpec {
            elevation_rows: 12,
            azimuth_cols: 100,
            ..sim::SensorSpec::default()
        }
    }

    fn icp_config_with_twist(v: f64) -> IcpConfig {
        IcpConfig {
            initial_twist: Twist::new(Vec3::new(v, 0.0, 0.0), Vec3::zeros()),
            ..IcpConfig::default()
        }
    }

    #[test]
    fn stationary_sequence_creates_one_vertex() {
        let world = corridor_world();
        let gt = forward_route(0.0, 1.0);
        let sensor = test_sensor();
        let (frames, gyro) = render_route(&world, &gt, &sensor, 8);
        let graph = teach(
            &frames,
            &gyro,
            &PrepConfig::default(),
            &IcpConfig::default(),
            &TeachConfig::default(),
        )
        .unwrap();
        assert_eq!(graph.vertices.len(), 1);
        assert!(!graph.vertices[0].submap.is_empty());
    }

    #[test]
    fn straight_route_vertex_count_matches_threshold_arithmetic() {
        // 101 frames at 1 m per frame: 100 m past the origin vertex with a
        // vertex every 10 m gives 11 vertices.
        let world = corridor_world();
        let gt = forward_route(10.0, 10.2);
        let sensor = test_sensor();
        let (frames, gyro) = render_route(&world, &gt, &sensor, 101);
        let graph = teach(
            &frames,
            &gyro,
            &PrepConfig::default(),
            &icp_config_with_twist(10.0),
            &TeachConfig::default(),
        )
        .unwrap();
        assert_eq!(graph.vertices.len(), 11);
        for w in graph.vertices.windows(2) {
            let d = (w[1].pose.translation - w[0].pose.translation).norm();
            assert!(d >= 10.0 - 1e-3, "spacing {d}");
        }
    }

    #[test]
    fn nearest_vertex_picks_closest_within_hops() {
        let mut graph = PoseGraph::default();
        for m in 0..20 {
            graph.add_teach_vertex(
                TeachVertex {
                    id: m,
                    pose: Pose::new(Mat3::identity(), Vec3::new(m as f64 * 10.0, 0.0, 0.0)),
                    cloud: Vec::new(),
                    submap: LocalMap::from_points(vec![MapPoint {
                        position: Vec3::zeros(),
                        normal: Vec3::z(),
                    }]),
                },
                (m > 0).then_some(Pose::new(Mat3::identity(), Vec3::new(10.0, 0.0, 0.0))),
            );
        }
        let estimate = Pose::new(Mat3::identity(), Vec3::new(52.6, 0.0, 0.0));
        assert_eq!(graph.find_nearest_vertex(&estimate, 5, 5), 5);
        let estimate = Pose::new(Mat3::identity(), Vec3::new(55.1, 0.0, 0.0));
        assert_eq!(graph.find_nearest_vertex(&estimate, 5, 5), 6);
        // Exhaustive agreement within the hop window.
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        for _ in 0..100 {
            let x = rng.gen_range(0.0..190.0);
            let estimate =
                Pose::new(Mat3::identity(), Vec3::new(x, rng.gen_range(-3.0..3.0), 0.0));
            let start = rng.gen_range(0..20);
            let picked = graph.find_nearest_vertex(&estimate, start, 5);
            let lo = start.saturating_sub(5);
            let hi = (start + 5).min(19);
            let brute = (lo..=hi)
                .min_by(|&a, &b| {
                    let da = (graph.vertices[a].pose.translation - estimate.translation).norm();
                    let db = (graph.vertices[b].pose.translation - estimate.translation).norm();
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(picked, brute);
        }
    }

    #[test]
    fn compound_prior_identity_chain() {
        let mut graph = PoseGraph::default();
        graph.add_teach_vertex(
            TeachVertex {
                id: 0,
                pose: Pose::identity(),
                cloud: Vec::new(),
                submap: LocalMap::from_points(vec![MapPoint {
                    position: Vec3::zeros(),
                    normal: Vec3::z(),
                }]),
            },
            None,
        );
        for _ in 0..6 {
            graph.add_repeat_frame(Pose::identity());
        }
        graph.set_anchor(0, 0, Pose::identity());
        let prior = graph.compound_prior(5, 0).unwrap();
        assert!((prior.to_homogeneous() - Pose::identity().to_homogeneous()).norm() < 1e-12);
    }

    #[test]
    fn compound_prior_matches_fold_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let mut random_pose = || {
            crate::geom::exp_map(&Twist::new(
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-0.2..0.2),
                ),
                Vec3::new(0.0, 0.0, rng.gen_range(-0.3..0.3)),
            ))
        };
        let mut graph = PoseGraph::default();
        let submap = LocalMap::from_points(vec![MapPoint {
            position: Vec3::zeros(),
            normal: Vec3::z(),
        }]);
        let teach_rel: Vec<Pose> = (0..2).map(|_| random_pose()).collect();
        for m in 0..3 {
            graph.add_teach_vertex(
                TeachVertex {
                    id: m,
                    pose: Pose::identity(),
                    cloud: Vec::new(),
                    submap: submap.clone(),
                },
                (m > 0).then(|| teach_rel[m - 1]),
            );
        }
        let odo: Vec<Pose> = (0..6).map(|_| random_pose()).collect();
        graph.add_repeat_frame(Pose::identity());
        for rel in &odo[1..6] {
            graph.add_repeat_frame(*rel);
        }
        let t_loc = random_pose();
        graph.add_localization(0, 0, t_loc);

        let prior = graph.compound_prior(5, 2).unwrap();
        let mut t_0_5 = Pose::identity();
        for rel in &odo[1..6] {
            t_0_5 = t_0_5.compose(rel);
        }
        let expected = t_0_5
            .inverse()
            .compose(&t_loc)
            .compose(&teach_rel[0])
            .compose(&teach_rel[1]);
        assert!((prior.to_homogeneous() - expected.to_homogeneous()).norm() < 1e-12);
    }

    #[test]
    fn compound_prior_errors_on_broken_chain() {
        let mut graph = PoseGraph::default();
        graph.add_teach_vertex(
            TeachVertex {
                id: 0,
                pose: Pose::identity(),
                cloud: Vec::new(),
                submap: LocalMap::from_points(vec![MapPoint {
                    position: Vec3::zeros(),
                    normal: Vec3::z(),
                }]),
            },
            None,
        );
        graph.add_repeat_frame(Pose::identity());
        graph.set_anchor(0, 0, Pose::identity());
        // Frame 3 is not in the repeat chain.
        assert!(matches!(
            graph.compound_prior(3, 0),
            Err(GraphError::BrokenChain { .. })
        ));
        // Vertex 2 does not exist either.
        assert!(matches!(
            graph.compound_prior(0, 2),
            Err(GraphError::BrokenChain { .. })
        ));
    }

    fn submap_vertex_from_scene(rng: &mut impl Rng) -> TeachVertex {
        let mut points = Vec::new();
        for _ in 0..500 {
            points.push(MapPoint {
                position: Vec3::new(rng.gen_range(2.0..40.0), rng.gen_range(-15.0..15.0), -1.5),
                normal: Vec3::z(),
            });
            points.push(MapPoint {
                position: Vec3::new(rng.gen_range(2.0..40.0), 12.0, rng.gen_range(-1.5..4.0)),
                normal: -Vec3::y(),
            });
            points.push(MapPoint {
                position: Vec3::new(40.0, rng.gen_range(-12.0..12.0), rng.gen_range(-1.5..4.0)),
                normal: -Vec3::x(),
            });
        }
        TeachVertex {
            id: 0,
            pose: Pose::identity(),
            cloud: Vec::new(),
            submap: LocalMap::from_points(points),
        }
    }

    #[test]
    fn localize_prior_at_truth_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(109);
        let vertex = submap_vertex_from_scene(&mut rng);
        let mut frame = LidarFrame::new(0.0, 0.1);
        for mp in vertex.submap.points().iter().step_by(2) {
            frame.points.push(LidarPoint {
                position: mp.position,
                timestamp: 0.1,
                doppler: 0.0,
                normal: Some(mp.normal),
                planarity_score: Some(1.0),
            });
        }
        let result = localize(&frame, &vertex, &Pose::identity(), &IcpConfig::default()).unwrap();
        assert!(result.converged);
        assert_eq!(result.iterations, 1);
        assert!((result.t_rm.to_homogeneous() - Pose::identity().to_homogeneous()).norm() < 1e-9);
    }

    #[test]
    fn localize_recovers_offset_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(113);
        let vertex = submap_vertex_from_scene(&mut rng);
        // True vehicle pose in the vertex frame.
        let truth_g = crate::geom::exp_map(&Twist::new(
            Vec3::new(0.2, -0.1, 0.05),
            Vec3::new(0.0, 0.0, 0.5_f64.to_radians()),
        ));
        let truth_g_inv = truth_g.inverse();
        let mut frame = LidarFrame::new(0.0, 0.1);
        for mp in vertex.submap.points().iter().step_by(2) {
            frame.points.push(LidarPoint {
                position: truth_g_inv.apply(&mp.position),
                timestamp: 0.1,
                doppler: 0.0,
                normal: None,
                planarity_score: None,
            });
        }
        // Prior offset by about (0.3 m, 1 deg) from the truth.
        let offset = crate::geom::exp_map(&Twist::new(
            Vec3::new(0.25, 0.15, -0.05),
            Vec3::new(0.0, 0.0, 1.0_f64.to_radians()),
        ));
        let prior = truth_g.compose(&offset).inverse();
        let config = IcpConfig {
            q_prior: Mat6::identity() * 1e2,
            max_iterations: 40,
            ..IcpConfig::default()
        };
        let result = localize(&frame, &vertex, &prior, &config).unwrap();
        assert!(result.converged);
        let err = truth_g.inverse().compose(&result.t_rm.inverse());
        assert!(
            err.translation.norm() < 1e-4,
            "trans {}",
            err.translation.norm()
        );
        assert!(
            err.rotation_angle().to_degrees() < 1e-3,
            "rot {}",
            err.rotation_angle().to_degrees()
        );
    }

    #[test]
    fn localize_without_measurements_returns_prior() {
        let vertex = TeachVertex {
            id: 0,
            pose: Pose::identity(),
            cloud: Vec::new(),
            submap: LocalMap::new(),
        };
        let frame = LidarFrame::new(0.0, 0.1);
        let prior = crate::geom::exp_map(&Twist::new(
            Vec3::new(1.0, 2.0, 0.0),
            Vec3::new(0.0, 0.0, 0.4),
        ));
        let config = IcpConfig {
            min_correspondences: 0,
            ..IcpConfig::default()
        };
        let result = localize(&frame, &vertex, &prior, &config).unwrap();
        assert!(result.converged);
        assert!((result.t_rm.to_homogeneous() - prior.to_homogeneous()).norm() < 1e-9);
    }

    #[test]
    fn localize_rejects_prior_rotation_at_pi() {
        let vertex = TeachVertex {
            id: 0,
            pose: Pose::identity(),
            cloud: Vec::new(),
            submap: LocalMap::new(),
        };
        let frame = LidarFrame::new(0.0, 0.1);
        let prior = crate::geom::exp_map(&Twist::new(
            Vec3::zeros(),
            Vec3::new(0.0, 0.0, std::f64::consts::PI - 1e-9),
        ));
        assert!(matches!(
            localize(&frame, &vertex, &prior, &IcpConfig::default()),
            Err(GraphError::PriorOutOfDomain { .. })
        ));
    }

    #[test]
    fn repeat_attempt_cadence_and_graph_integrity() {
        let world = corridor_world();
        let gt = forward_route(10.0, 10.2);
        let sensor = test_sensor();
        let (frames, gyro) = render_route(&world, &gt, &sensor, 100);
        let prep = PrepConfig::default();
        let icp_config = icp_config_with_twist(10.0);
        let graph0 = teach(&frames, &gyro, &prep, &icp_config, &TeachConfig::default()).unwrap();

        for n in [1usize, 10] {
            let mut graph = graph0.clone();
            let rc = RepeatConfig {
                interval: n,
                backend: BackendKind::Icp,
                ..RepeatConfig::default()
            };
            let out = repeat(
                &frames,
                &gyro,
                &mut graph,
                &prep,
                &DopplerConfig::default(),
                &icp_config,
                &rc,
            )
            .unwrap();
            assert_eq!(out.stats.attempts, frames.len().div_ceil(n));
            assert_eq!(out.stats.failures, 0, "n = {n}");
            // One incoming odometry edge per frame after the first.
            let odo_edges = graph
                .edges()
                .iter()
                .filter(|e| e.kind == EdgeKind::Odometry && matches!(e.src, NodeRef::Repeat(_)))
                .count();
            assert_eq!(odo_edges, frames.len() - 1);
            // Localization edges exactly at attempt frames.
            let loc_frames: Vec<usize> = graph
                .edges()
                .iter()
                .filter_map(|e| match (e.kind, e.src) {
                    (EdgeKind::Localization, NodeRef::Repeat(r)) => Some(r),
                    _ => None,
                })
                .collect();
            let expected: Vec<usize> = (0..frames.len()).filter(|r| r % n == 0).collect();
            assert_eq!(loc_frames, expected);
            // Storage instrumentation: clouds held only on attempt frames.
            assert_eq!(out.stats.stored_cloud_frames, expected);
        }
    }

    #[test]
    fn repeat_odometry_edges_do_not_depend_on_interval() {
        let world = corridor_world();
        let gt = forward_route(10.0, 6.2);
        let sensor = test_sensor();
        let (frames, gyro) = render_route(&world, &gt, &sensor, 60);
        let prep = PrepConfig::default();
        let icp_config = icp_config_with_twist(10.0);
        let graph0 = teach(&frames, &gyro, &prep, &icp_config, &TeachConfig::default()).unwrap();

        let run = |n: usize| {
            let mut graph = graph0.clone();
            let rc = RepeatConfig {
                interval: n,
                backend: BackendKind::Doppler,
                ..RepeatConfig::default()
            };
            let doppler_config = DopplerConfig {
                initial_twist: Twist::new(Vec3::new(10.0, 0.0, 0.0), Vec3::zeros()),
                ..DopplerConfig::default()
            };
            repeat(
                &frames,
                &gyro,
                &mut graph,
                &prep,
                &doppler_config,
                &icp_config,
                &rc,
            )
            .unwrap();
            graph
                .edges()
                .iter()
                .filter(|e| e.kind == EdgeKind::Odometry && matches!(e.src, NodeRef::Repeat(_)))
                .map(|e| e.relative)
                .collect::<Vec<_>>()
        };
        let edges_n1 = run(1);
        let edges_n6 = run(6);
        assert_eq!(edges_n1.len(), edges_n6.len());
        for (a, b) in edges_n1.iter().zip(&edges_n6) {
            assert_eq!(a, b, "odometry must be independent of localization");
        }
    }

    #[test]
    fn repeat_noiseless_stays_on_route() {
        let world = corridor_world();
        let gt = forward_route(10.0, 6.2);
        let sensor = test_sensor();
        let (frames, gyro) = render_route(&world, &gt, &sensor, 60);
        let prep = PrepConfig::default();
        let icp_config = icp_config_with_twist(10.0);
        let graph0 = teach(&frames, &gyro, &prep, &icp_config, &TeachConfig::default()).unwrap();
        let mut graph = graph0.clone();
        let rc = RepeatConfig {
            interval: 1,
            backend: BackendKind::Icp,
            ..RepeatConfig::default()
        };
        let out = repeat(
            &frames,
            &gyro,
            &mut graph,
            &prep,
            &DopplerConfig::default(),
            &icp_config,
            &rc,
        )
        .unwrap();
        // Truth in the map frame, anchored at the frame-0 end pose.
        let anchor = gt.pose(0.1).unwrap();
        for (r, est) in out.trajectory.iter().enumerate() {
            let truth = anchor
                .inverse()
                .compose(&gt.pose(0.1 * (r + 1) as f64).unwrap());
            let err = (est.translation - truth.translation).norm();
            assert!(err < 1e-3, "frame {r} error {err}");
        }
    }

    #[test]
    fn submap_normals_match_plane_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(127);
        let mut positions = Vec::new();
        for _ in 0..400 {
            positions.push(Vec3::new(
                rng.gen_range(3.0..30.0),
                rng.gen_range(-10.0..10.0),
                -1.5,
            ));
        }
        let points = compute_submap_normals(
            &positions,
            &crate::icp::NormalParams {
                k_neighbors: 12,
                score_threshold: 0.9,
                ..Default::default()
            },
        );
        assert!(points.len() > 350);
        for p in &points {
            assert_relative_eq!(p.normal.z.abs(), 1.0, epsilon = 1e-6);
        }
    }
}
