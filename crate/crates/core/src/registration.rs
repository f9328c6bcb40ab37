//! Candidate verification: correspondence grouping, closed-form rigid
//! alignment, point-to-plane ICP and the acceptance test.

use nalgebra::{Matrix3, Matrix6, Vector6};
use thiserror::Error;

use crate::cloud::{SurfaceCloud, VoxelCloud};
use crate::descriptors::DescriptorIndex;
pub use crate::geometry::RigidTransform;
use crate::geometry::{sorted_symmetric_eigen, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("no correspondences within {0} m")]
    NoCorrespondences(f64),
    #[error("no consistent correspondence cluster")]
    NoConsistentCluster,
    #[error("residual {residual} m² exceeds threshold {threshold} m²")]
    ResidualTooHigh { residual: f64, threshold: f64 },
    #[error("overlap {overlap:.3} below the required {min:.3}")]
    InsufficientOverlap { overlap: f64, min: f64 },
    #[error("non-finite initial transform")]
    InvalidInit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iter: usize,
    pub max_corr_dist: f64,
    pub tol: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 50,
            max_corr_dist: 2.0,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationParams {
    pub resolution: f64,
    pub min_cluster: usize,
    /// Nearest place descriptors considered per scan descriptor.
    pub match_k: usize,
    pub icp: IcpParams,
    pub epsilon_icp: f64,
    /// Minimum fraction of scan cells with a target neighbour within
    /// `icp.max_corr_dist` after refinement.
    pub min_overlap: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            resolution: 7.0,
            min_cluster: 8,
            match_k: 4,
            icp: IcpParams::default(),
            epsilon_icp: 0.08,
            min_overlap: 0.0,
        }
    }
}

/// A putative match between a scan keypoint and a place keypoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub scan: usize,
    pub place: usize,
    pub scan_pos: Vec3,
    pub place_pos: Vec3,
    pub distance: f64,
}

/// Greedy geometric-consistency grouping. Seeds are visited in ascending
/// descriptor distance; a correspondence joins a cluster when it is
/// length-compatible with every member and reuses neither of their
/// keypoints. Returns clusters (indices into `corrs`) of at least
/// `min_cluster` members, largest first.
pub fn geometric_consistency(corrs: &[Correspondence], resolution: f64, min_cluster: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..corrs.len()).collect();
    order.sort_by(|&a, &b| corrs[a].distance.total_cmp(&corrs[b].distance).then(a.cmp(&b)));
    let mut taken = vec![false; corrs.len()];
    let mut clusters = Vec::new();
    for (k, &seed) in order.iter().enumerate() {
        if taken[seed] {
            continue;
        }
        let mut members = vec![seed];
        for &c in &order[k + 1..] {
            if taken[c] {
                continue;
            }
            let cand = &corrs[c];
            let ok = members.iter().all(|&m| {
                let mm = &corrs[m];
                mm.scan != cand.scan
                    && mm.place != cand.place
                    && ((mm.scan_pos - cand.scan_pos).norm() - (mm.place_pos - cand.place_pos).norm()).abs() < resolution
            });
            if ok {
                members.push(c);
            }
        }
        if members.len() >= min_cluster {
            for &m in &members {
                taken[m] = true;
            }
            clusters.push(members);
        }
    }
    clusters.sort_by(|a, b| b.len().cmp(&a.len()));
    clusters
}

fn is_degenerate(points: &[Vec3]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let (vals, _) = sorted_symmetric_eigen(&cov);
    !(vals[0] > 1e-18) || vals[1] <= 1e-12 * vals[0]
}

/// Least-squares rigid motion mapping `src[i]` onto `dst[i]`.
pub fn estimate_rigid(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform, RegistrationError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(RegistrationError::DegenerateConfiguration("need at least 3 pairs"));
    }
    if is_degenerate(src) || is_degenerate(dst) {
        return Err(RegistrationError::DegenerateConfiguration("points are collinear or coincident"));
    }
    let n = src.len() as f64;
    let cs = src.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let cd = dst.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p - cs) * (q - cd).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    Ok(RigidTransform::new(r, cd - r * cs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    pub transform: RigidTransform,
    /// Mean squared point-to-plane error over the final correspondences (m²).
    pub residual: f64,
    pub correspondences: usize,
    /// Fraction of source cells with a correspondence at the final pose.
    pub overlap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `(sum of squared point-to-plane errors, count)` plus the normal
/// equations at `t`.
fn linearize(source: &[Vec3], target: &SurfaceCloud, t: &RigidTransform, max_d: f64) -> (f64, usize, Matrix6<f64>, Vector6<f64>) {
    let mut sum = 0.0;
    let mut count = 0;
    let mut jtj = Matrix6::zeros();
    let mut jtr = Vector6::zeros();
    let max_d2 = max_d * max_d;
    for p in source {
        let pt = t.apply(p);
        let Some(nb) = target.index.nearest(&pt) else {
            continue;
        };
        if nb.dist_sq > max_d2 || !target.normals.valid[nb.index] {
            continue;
        }
        let n = target.normals.normals[nb.index];
        let r = n.dot(&(pt - target.cloud.cells[nb.index].position));
        let c = pt.cross(&n);
        let j = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
        jtj += j * j.transpose();
        jtr += j * r;
        sum += r * r;
        count += 1;
    }
    (sum, count, jtj, jtr)
}

/// Point-to-plane ICP of `source` onto `target`, starting from `init`.
pub fn icp_point_to_plane(
    source: &VoxelCloud,
    target: &SurfaceCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult, RegistrationError> {
    if !init.is_finite() {
        return Err(RegistrationError::InvalidInit);
    }
    let src = source.positions();
    let mut t = *init;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..params.max_iter {
        let (_, count, jtj, jtr) = linearize(&src, target, &t, params.max_corr_dist);
        if count < 6 {
            if iterations == 0 {
                return Err(RegistrationError::NoCorrespondences(params.max_corr_dist));
            }
            break;
        }
        iterations += 1;
        let rhs = -jtr;
        let x = match jtj.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => match jtj.lu().solve(&rhs) {
                Some(x) => x,
                None => break,
            },
        };
        let omega = Vec3::new(x[0], x[1], x[2]);
        let v = Vec3::new(x[3], x[4], x[5]);
        let step = RigidTransform::from_rotation_vector(&omega, v);
        t = step.compose(&t).orthonormalized();
        if omega.norm() + v.norm() < params.tol {
            converged = true;
            break;
        }
    }
    let (sum, count, _, _) = linearize(&src, target, &t, params.max_corr_dist);
    if count == 0 {
        return Err(RegistrationError::NoCorrespondences(params.max_corr_dist));
    }
    Ok(IcpResult {
        transform: t,
        residual: sum / count as f64,
        correspondences: count,
        overlap: count as f64 / src.len().max(1) as f64,
        iterations,
        converged,
    })
}

/// Scan side of a verification; all positions in the scan frame.
pub struct ScanFeatures<'a> {
    pub cloud: &'a VoxelCloud,
    /// Keypoint position per descriptor row.
    pub keypoints: &'a [Vec3],
    /// SHOT rows aligned with `keypoints`.
    pub shot: &'a [Vec<f32>],
}

/// Place side of a verification; all positions in the map frame.
pub struct PlaceFeatures<'a> {
    pub surface: &'a SurfaceCloud,
    pub keypoints: &'a [Vec3],
    /// SHOT rows whose `local_index` points into `keypoints`.
    pub shot: &'a DescriptorIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verification {
    /// Scan frame to map frame.
    pub transform: RigidTransform,
    pub initial: RigidTransform,
    pub cluster_size: usize,
    pub icp: IcpResult,
}

/// SHOT correspondences (`match_k` nearest place rows per scan row).
pub fn match_features(scan: &ScanFeatures, place: &PlaceFeatures, k: usize) -> Vec<Correspondence> {
    let mut out = Vec::new();
    if place.shot.is_empty() {
        return out;
    }
    for (i, row) in scan.shot.iter().enumerate() {
        let Ok(nn) = place.shot.knn(row, k) else {
            continue;
        };
        for (r, d2) in nn {
            let j = place.shot.local_index[r] as usize;
            out.push(Correspondence {
                scan: i,
                place: j,
                scan_pos: scan.keypoints[i],
                place_pos: place.keypoints[j],
                distance: d2.sqrt(),
            });
        }
    }
    out
}

/// Matches, groups, aligns and refines; accepted iff the ICP residual is
/// at most `epsilon_icp` and the overlap at least `min_overlap`.
pub fn verify_candidate(scan: &ScanFeatures, place: &PlaceFeatures, params: &RegistrationParams) -> Result<Verification, RegistrationError> {
    let corrs = match_features(scan, place, params.match_k);
    let clusters = geometric_consistency(&corrs, params.resolution, params.min_cluster);
    // the largest cluster that is not degenerate
    let (cluster_size, initial) = clusters
        .iter()
        .find_map(|c| {
            let src: Vec<Vec3> = c.iter().map(|&i| corrs[i].scan_pos).collect();
            let dst: Vec<Vec3> = c.iter().map(|&i| corrs[i].place_pos).collect();
            estimate_rigid(&src, &dst).ok().map(|t| (c.len(), t))
        })
        .ok_or(RegistrationError::NoConsistentCluster)?;
    let icp = icp_point_to_plane(scan.cloud, place.surface, &initial, &params.icp)?;
    if !(icp.residual <= params.epsilon_icp) {
        return Err(RegistrationError::ResidualTooHigh {
            residual: icp.residual,
            threshold: params.epsilon_icp,
        });
    }
    if icp.overlap < params.min_overlap {
        return Err(RegistrationError::InsufficientOverlap {
            overlap: icp.overlap,
            min: params.min_overlap,
        });
    }
    Ok(Verification {
        transform: icp.transform,
        initial,
        cluster_size,
        icp,
    })
}

/// `scan_id place_id qw qx qy qz tx ty tz residual accepted`
pub fn format_pose_line(scan_id: &str, place: Option<usize>, t: &RigidTransform, residual: f64, accepted: bool) -> String {
    let q = t.quaternion();
    let place = place.map_or_else(|| "-".to_string(), |p| p.to_string());
    format!(
        "{scan_id} {place} {} {} {} {} {} {} {} {residual} {}",
        q.w,
        q.i,
        q.j,
        q.k,
        t.translation.x,
        t.translation.y,
        t.translation.z,
        accepted as u8
    )
}
