//! ISS keypoints with boundary removal (ISS-BR).

use std::f64::consts::FRAC_PI_2;

use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::{SurfaceCloud, VoxelCloud};
use crate::geometry::{sorted_symmetric_eigen, Vec3};
use crate::spatial::SpatialIndex;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointError {
    #[error("cannot detect keypoints in an empty cloud")]
    EmptyCloud,
    #[error("invalid detector parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub position: Vec3,
    /// Smallest scatter eigenvalue `λ3` (m²).
    pub saliency: f64,
    pub is_boundary: bool,
    /// Index of the source cell in the cloud it was detected on.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IssParams {
    pub salient_radius: f64,
    pub nonmax_radius: f64,
    pub gamma21: f64,
    pub gamma32: f64,
    pub min_neighbors: usize,
    /// Candidates with `λ3` below this are dropped (flat or nearly flat support).
    pub min_saliency: f64,
    pub boundary_radius: f64,
    pub gap_threshold: f64,
}

impl Default for IssParams {
    fn default() -> Self {
        Self {
            salient_radius: 2.4,
            nonmax_radius: 1.2,
            gamma21: 0.975,
            gamma32: 0.975,
            min_neighbors: 5,
            min_saliency: 0.01,
            boundary_radius: 1.2,
            gap_threshold: FRAC_PI_2,
        }
    }
}

impl IssParams {
    pub fn validate(&self) -> Result<(), KeypointError> {
        let bad = |m: &str| Err(KeypointError::InvalidParameter(m.to_string()));
        if !(self.salient_radius > 0.0) || !(self.nonmax_radius > 0.0) || !(self.boundary_radius > 0.0) {
            return bad("radii must be positive");
        }
        if !(self.gamma21 > 0.0 && self.gamma21 < 1.0 && self.gamma32 > 0.0 && self.gamma32 < 1.0) {
            return bad("gamma21 and gamma32 must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Eigenvalues `λ1 ≥ λ2 ≥ λ3` of the unweighted neighbourhood scatter
/// matrix around `center`, plus the neighbour count.
pub fn scatter_eigenvalues(cloud: &VoxelCloud, index: &SpatialIndex, center: &Vec3, radius: f64) -> ([f64; 3], usize) {
    let mut count = 0usize;
    let mut sum = Vec3::zeros();
    let mut outer = Matrix3::zeros();
    index.for_each_within(center, radius, |j, _| {
        let p = cloud.cells[j].position - center;
        count += 1;
        sum += p;
        outer += p * p.transpose();
    });
    if count == 0 {
        return ([0.0; 3], 0);
    }
    let mean = sum / count as f64;
    let cov = outer / count as f64 - mean * mean.transpose();
    let (vals, _) = sorted_symmetric_eigen(&cov);
    (vals, count)
}

/// True when the tangent-plane projections of the neighbours around
/// `position` leave an angular gap wider than `gap_threshold`.
/// Fewer than three neighbours counts as boundary.
pub fn is_boundary(cloud: &VoxelCloud, index: &SpatialIndex, position: &Vec3, radius: f64, gap_threshold: f64) -> bool {
    let mut offsets = Vec::new();
    index.for_each_within(position, radius, |j, d2| {
        if d2 > 1e-18 {
            offsets.push(cloud.cells[j].position - position);
        }
    });
    if offsets.len() < 3 {
        return true;
    }
    let mut mean = Vec3::zeros();
    for o in &offsets {
        mean += o;
    }
    mean /= offsets.len() as f64;
    let mut cov = Matrix3::zeros();
    for o in &offsets {
        let d = o - mean;
        cov += d * d.transpose();
    }
    let (_, vecs) = sorted_symmetric_eigen(&cov);
    let u: Vec3 = vecs.column(0).into_owned();
    let v: Vec3 = vecs.column(1).into_owned();
    let angles: Vec<f64> = offsets.iter().map(|o| o.dot(&v).atan2(o.dot(&u))).collect();
    max_angular_gap(angles) > gap_threshold
}

/// Largest gap between consecutive angles on the circle.
pub fn max_angular_gap(mut angles: Vec<f64>) -> f64 {
    if angles.is_empty() {
        return std::f64::consts::TAU;
    }
    angles.sort_by(|a, b| a.total_cmp(b));
    let mut gap = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
    for w in angles.windows(2) {
        gap = gap.max(w[1] - w[0]);
    }
    gap
}

/// ISS-BR over a cloud; builds its own index.
pub fn detect_iss_br(cloud: &VoxelCloud, params: &IssParams) -> Result<Vec<Keypoint>, KeypointError> {
    if cloud.is_empty() {
        return Err(KeypointError::EmptyCloud);
    }
    let index = SpatialIndex::new(&cloud.positions());
    detect_iss_br_indexed(cloud, &index, params)
}

pub fn detect_on_surface(surface: &SurfaceCloud, params: &IssParams) -> Result<Vec<Keypoint>, KeypointError> {
    detect_iss_br_indexed(&surface.cloud, &surface.index, params)
}

pub fn detect_iss_br_indexed(
    cloud: &VoxelCloud,
    index: &SpatialIndex,
    params: &IssParams,
) -> Result<Vec<Keypoint>, KeypointError> {
    if cloud.is_empty() {
        return Err(KeypointError::EmptyCloud);
    }
    params.validate()?;
    // per-cell λ3 for cells passing the ratio tests, else None
    let saliency: Vec<Option<f64>> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let pos = cloud.cells[i].position;
            let (l, n) = scatter_eigenvalues(cloud, index, &pos, params.salient_radius);
            if n < params.min_neighbors || !(l[0] > 0.0) || !(l[1] > 0.0) {
                return None;
            }
            let passes = l[1] / l[0] < params.gamma21 && l[2] / l[1] < params.gamma32;
            if !passes || l[2] <= 0.0 || l[2] < params.min_saliency {
                return None;
            }
            if is_boundary(cloud, index, &pos, params.boundary_radius, params.gap_threshold) {
                return None;
            }
            Some(l[2])
        })
        .collect();

    let keep: Vec<bool> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let Some(s) = saliency[i] else {
                return false;
            };
            let mut wins = true;
            index.for_each_within(&cloud.cells[i].position, params.nonmax_radius, |j, _| {
                if j != i {
                    if let Some(o) = saliency[j] {
                        if o > s || (o == s && j < i) {
                            wins = false;
                        }
                    }
                }
            });
            wins
        })
        .collect();

    Ok((0..cloud.len())
        .filter(|&i| keep[i])
        .map(|i| Keypoint {
            position: cloud.cells[i].position,
            saliency: saliency[i].unwrap(),
            is_boundary: false,
            cell: i,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::VoxelCell;

    fn cloud_of(points: Vec<Vec3>, viewpoint: Vec3) -> VoxelCloud {
        VoxelCloud {
            cell_size: 0.4,
            viewpoint,
            cells: points
                .into_iter()
                .map(|position| VoxelCell {
                    position,
                    intensity: 0.5,
                    count: 1,
                })
                .collect(),
        }
    }

    #[test]
    fn gap_of_half_circle_is_pi() {
        let angles: Vec<f64> = (0..=20).map(|i| i as f64 * std::f64::consts::PI / 20.0).collect();
        assert!((max_angular_gap(angles) - std::f64::consts::PI).abs() < 1e-12);
    }

    #[test]
    fn disk_interior_is_not_boundary_but_edge_is() {
        let mut pts = Vec::new();
        for i in -10..=10 {
            for j in -10..=10 {
                pts.push(Vec3::new(i as f64 * 0.2, j as f64 * 0.2, 0.0));
            }
        }
        let cloud = cloud_of(pts, Vec3::new(0.0, 0.0, 2.0));
        let index = SpatialIndex::new(&cloud.positions());
        assert!(!is_boundary(&cloud, &index, &Vec3::zeros(), 0.7, FRAC_PI_2));
        assert!(is_boundary(&cloud, &index, &Vec3::new(0.0, 2.0, 0.0), 0.7, FRAC_PI_2));
    }

    #[test]
    fn plane_has_no_keypoints() {
        let mut pts = Vec::new();
        for i in 0..60 {
            for j in 0..60 {
                pts.push(Vec3::new(i as f64 * 0.4, j as f64 * 0.4, 0.0));
            }
        }
        let cloud = cloud_of(pts, Vec3::new(12.0, 12.0, 2.0));
        assert!(detect_iss_br(&cloud, &IssParams::default()).unwrap().is_empty());
    }

    #[test]
    fn empty_cloud_errors() {
        let cloud = cloud_of(vec![], Vec3::zeros());
        assert_eq!(detect_iss_br(&cloud, &IssParams::default()), Err(KeypointError::EmptyCloud));
    }
}
