//! Point-cloud containers and the two raw-data preprocessing pipelines:
//! azimuth-elevation downsampling plus range-dependent Doppler bias
//! correction for the Doppler path, and voxel downsampling plus PCA planar
//! feature extraction for the ICP path.

pub mod io;

use crate::geom::Vec3;
use crate::kdtree::KdTree;
use std::collections::HashMap;
use thiserror::Error;

/// Sensor horizontal field of view (radians).
pub const FOV_AZIMUTH: f64 = 120.0 * std::f64::consts::PI / 180.0;
/// Sensor vertical field of view (radians).
pub const FOV_ELEVATION: f64 = 30.0 * std::f64::consts::PI / 180.0;

/// Default azimuth bin count for Doppler-path downsampling (0.5 deg cells).
pub const DEFAULT_AZ_BINS: usize = 240;
/// Default elevation bin count for Doppler-path downsampling (0.5 deg cells).
pub const DEFAULT_EL_BINS: usize = 60;
/// Default voxel edge length for ICP-path downsampling (metres).
pub const DEFAULT_VOXEL_SIZE: f64 = 0.5;
/// Default neighbourhood size for PCA normal estimation.
pub const DEFAULT_K_NEIGHBORS: usize = 20;
/// Default planarity score threshold for feature retention.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("voxel size must be positive, got {0}")]
    BadVoxelSize(f64),
    #[error("bin counts must be at least 1")]
    BadBinCount,
    #[error("frame has {got} points, need at least {need}")]
    TooFewPoints { got: usize, need: usize },
    #[error("bias fit needs at least two distinct ranges")]
    DegenerateBiasFit,
}

/// One lidar return: position and per-point timestamp, plus the radial
/// (Doppler) velocity reported by an FMCW sensor. Normal and planarity
/// score are filled in by feature extraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    /// Sensor-frame position, metres.
    pub position: Vec3,
    /// Seconds; lies within the owning frame's bounds.
    pub timestamp: f64,
    /// Radial velocity, m/s; positive for approaching surfaces.
    pub doppler: f64,
    pub normal: Option<Vec3>,
    pub planarity_score: Option<f64>,
}

impl LidarPoint {
    pub fn new(position: Vec3, timestamp: f64, doppler: f64) -> Self {
        Self {
            position,
            timestamp,
            doppler,
            normal: None,
            planarity_score: None,
        }
    }

    pub fn range(&self) -> f64 {
        self.position.norm()
    }
}

/// A timestamped sweep of lidar returns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarFrame {
    pub points: Vec<LidarPoint>,
    pub t_start: f64,
    pub t_end: f64,
}

impl LidarFrame {
    pub fn new(t_start: f64, t_end: f64) -> Self {
        Self {
            points: Vec::new(),
            t_start,
            t_end,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    fn with_points(&self, points: Vec<LidarPoint>) -> LidarFrame {
        LidarFrame {
            points,
            t_start: self.t_start,
            t_end: self.t_end,
        }
    }
}

/// Linear range-dependent Doppler bias: `bias(r) = slope * r + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DopplerBiasModel {
    /// (m/s) per metre of range.
    pub slope: f64,
    /// m/s.
    pub intercept: f64,
}

impl DopplerBiasModel {
    pub fn evaluate(&self, range: f64) -> f64 {
        self.slope * range + self.intercept
    }
}

/// Keeps at most one point per voxel: the one closest to its voxel centre,
/// ties broken toward the lowest input index.
pub fn voxel_downsample(frame: &LidarFrame, voxel_size: f64) -> Result<LidarFrame, CloudError> {
    if !(voxel_size > 0.0) {
        return Err(CloudError::BadVoxelSize(voxel_size));
    }
    let mut best: HashMap<(i64, i64, i64), (usize, f64)> = HashMap::new();
    for (idx, p) in frame.points.iter().enumerate() {
        let key = (
            (p.position.x / voxel_size).floor() as i64,
            (p.position.y / voxel_size).floor() as i64,
            (p.position.z / voxel_size).floor() as i64,
        );
        let centre = Vec3::new(
            (key.0 as f64 + 0.5) * voxel_size,
            (key.1 as f64 + 0.5) * voxel_size,
            (key.2 as f64 + 0.5) * voxel_size,
        );
        let d2 = (p.position - centre).norm_squared();
        match best.get_mut(&key) {
            Some(entry) => {
                if d2 < entry.1 {
                    *entry = (idx, d2);
                }
            }
            None => {
                best.insert(key, (idx, d2));
            }
        }
    }
    let mut keep: Vec<usize> = best.values().map(|&(idx, _)| idx).collect();
    keep.sort_unstable();
    Ok(frame.with_points(keep.into_iter().map(|i| frame.points[i]).collect()))
}

fn azel_of(p: &Vec3) -> (f64, f64) {
    let az = p.y.atan2(p.x);
    let el = p.z.atan2((p.x * p.x + p.y * p.y).sqrt());
    (az, el)
}

/// Keeps the first-seen point per azimuth-elevation cell over the sensor's
/// field of view.
pub fn azel_downsample(
    frame: &LidarFrame,
    az_bins: usize,
    el_bins: usize,
) -> Result<LidarFrame, CloudError> {
    if az_bins == 0 || el_bins == 0 {
        return Err(CloudError::BadBinCount);
    }
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut keep: Vec<usize> = Vec::new();
    for (idx, p) in frame.points.iter().enumerate() {
        let (az, el) = azel_of(&p.position);
        let a = (((az + FOV_AZIMUTH / 2.0) / FOV_AZIMUTH) * az_bins as f64).floor();
        let e = (((el + FOV_ELEVATION / 2.0) / FOV_ELEVATION) * el_bins as f64).floor();
        let cell = (
            (a.max(0.0) as usize).min(az_bins - 1),
            (e.max(0.0) as usize).min(el_bins - 1),
        );
        if let std::collections::hash_map::Entry::Vacant(v) = seen.entry(cell) {
            v.insert(idx);
            keep.push(idx);
        }
    }
    Ok(frame.with_points(keep.into_iter().map(|i| frame.points[i]).collect()))
}

/// PCA planar feature extraction.
///
/// Each point's k-nearest neighbourhood (including the point itself) is
/// analysed; the smallest-eigenvalue eigenvector of the neighbourhood
/// covariance becomes the normal, signed toward the sensor origin, and the
/// planarity score is `1 - lambda_min / lambda_mid`, which is 1 for a
/// perfect plane and 0 for an isotropic blob. Points scoring at or below
/// `score_threshold`, or with a rank-deficient neighbourhood, are dropped.
pub fn extract_planar_features(
    frame: &LidarFrame,
    k_neighbors: usize,
    score_threshold: f64,
) -> Result<LidarFrame, CloudError> {
    if frame.len() < k_neighbors {
        return Err(CloudError::TooFewPoints {
            got: frame.len(),
            need: k_neighbors,
        });
    }
    let positions: Vec<Vec3> = frame.points.iter().map(|p| p.position).collect();
    let tree = KdTree::build(&positions);
    let mut out = Vec::new();
    for p in &frame.points {
        let neighbours = tree.k_nearest(&p.position, k_neighbors);
        let mut mean = Vec3::zeros();
        for &(i, _) in &neighbours {
            mean += positions[i];
        }
        mean /= neighbours.len() as f64;
        let mut cov = nalgebra::Matrix3::<f64>::zeros();
        for &(i, _) in &neighbours {
            let d = positions[i] - mean;
            cov += d * d.transpose();
        }
        cov /= neighbours.len() as f64;
        let eig = nalgebra::SymmetricEigen::new(cov);
        // Ascending eigenvalue order.
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let (l_min, l_mid) = (eig.eigenvalues[idx[0]].max(0.0), eig.eigenvalues[idx[1]]);
        if l_mid <= 1e-12 {
            continue; // rank-deficient neighbourhood
        }
        let score = 1.0 - l_min / l_mid;
        if score <= score_threshold {
            continue;
        }
        let mut normal: Vec3 = eig.eigenvectors.column(idx[0]).into_owned();
        normal /= normal.norm();
        if normal.dot(&p.position) > 0.0 {
            normal = -normal;
        }
        let mut q = *p;
        q.normal = Some(normal);
        q.planarity_score = Some(score);
        out.push(q);
    }
    Ok(frame.with_points(out))
}

/// Ordinary least-squares fit of the range-dependent Doppler bias from
/// `(range, residual)` samples.
pub fn fit_doppler_bias(samples: &[(f64, f64)]) -> Result<DopplerBiasModel, CloudError> {
    if samples.len() < 2 {
        return Err(CloudError::TooFewPoints {
            got: samples.len(),
            need: 2,
        });
    }
    let n = samples.len() as f64;
    let sum_r: f64 = samples.iter().map(|s| s.0).sum();
    let sum_y: f64 = samples.iter().map(|s| s.1).sum();
    let mean_r = sum_r / n;
    let mean_y = sum_y / n;
    let sxx: f64 = samples.iter().map(|s| (s.0 - mean_r) * (s.0 - mean_r)).sum();
    if sxx <= 0.0 {
        return Err(CloudError::DegenerateBiasFit);
    }
    let sxy: f64 = samples.iter().map(|s| (s.0 - mean_r) * (s.1 - mean_y)).sum();
    let slope = sxy / sxx;
    Ok(DopplerBiasModel {
        slope,
        intercept: mean_y - slope * mean_r,
    })
}

/// Subtracts the fitted range-dependent bias from every Doppler return.
pub fn apply_doppler_bias(frame: &LidarFrame, model: &DopplerBiasModel) -> LidarFrame {
    let points = frame
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            q.doppler -= model.evaluate(p.range());
            q
        })
        .collect();
    frame.with_points(points)
}
