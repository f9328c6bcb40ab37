//! Shared scan preparation: range crop, intensity calibration,
//! voxelization, normals and keypoints.

use thiserror::Error;

use crate::calib::{apply_calibration, CalibError, CalibrationTable};
use crate::cloud::{voxel_downsample, CloudError, Scan, SurfaceCloud, VoxelCloud};
use crate::keypoints::{detect_on_surface, Keypoint, KeypointError};
use crate::params::PipelineParams;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Keypoints(#[from] KeypointError),
}

/// A voxelized surface with its detected keypoints.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub surface: SurfaceCloud,
    pub keypoints: Vec<Keypoint>,
}

impl PreparedCloud {
    pub fn keypoint_cells(&self) -> Vec<usize> {
        self.keypoints.iter().map(|k| k.cell).collect()
    }
}

pub fn prepare_cloud(cloud: VoxelCloud, params: &PipelineParams) -> Result<PreparedCloud, PipelineError> {
    let surface = SurfaceCloud::new(cloud, params.normal_radius);
    let keypoints = if surface.is_empty() {
        Vec::new()
    } else {
        detect_on_surface(&surface, &params.iss)?
    };
    Ok(PreparedCloud { surface, keypoints })
}

/// Crops to `max_range`, calibrates intensities, voxelizes and detects
/// keypoints. The result stays in the scan's own frame.
pub fn prepare_scan(scan: &Scan, table: &CalibrationTable, params: &PipelineParams) -> Result<PreparedCloud, PipelineError> {
    let cropped = scan.cropped(params.max_range);
    if cropped.is_empty() {
        return Err(CloudError::EmptyScan(scan.id.clone()).into());
    }
    let calibrated = apply_calibration(&cropped, table)?;
    let cloud = voxel_downsample(&calibrated, params.voxel_size)?;
    prepare_cloud(cloud, params)
}
