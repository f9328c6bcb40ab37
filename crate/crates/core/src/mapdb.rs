//! Places along a trajectory, the descriptor database and its file format.
//!
//! File layout (little endian): magic `LPRDB1`, one version byte, then
//! sections `[len: u64][payload][crc32(payload): u32]`: one manifest
//! followed by one section per place.

use std::fs;
use std::ops::Range;
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::{apply_calibration, CalibrationTable};
use crate::cloud::{Normals, Scan, SurfaceCloud, VoxelCell, VoxelCloud};
use crate::descriptors::{describe_cells, DescriptorIndex, DescriptorKind, ISHOT_LEN, SHOT_LEN};
use crate::geometry::{RigidTransform, Vec3};
use crate::keypoints::Keypoint;
use crate::params::{ParamError, PipelineParams};
use crate::pipeline::{prepare_cloud, PipelineError};
use crate::spatial::SpatialIndex;
use crate::voting::{build_probability_table, PrecisionModel, ProbabilityTable, VotingError};

pub const MAGIC: &[u8; 6] = b"LPRDB1";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum MapDbError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("no places to build")]
    NoPlaces,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a place database")]
    BadMagic { path: String },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    VersionMismatch { path: String, found: u8, expected: u8 },
    #[error("{path}: checksum mismatch or truncated data in section {section}")]
    ChecksumMismatch { path: String, section: usize },
    #[error("{path}: malformed manifest: {msg}")]
    Manifest { path: String, msg: String },
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Clone, Debug)]
pub struct Place {
    pub id: usize,
    pub center: Vec3,
    pub surface: SurfaceCloud,
    /// Only keypoints with a usable descriptor are kept.
    pub keypoints: Vec<Keypoint>,
    /// Rows of this place in the database descriptor index.
    pub descriptors: Range<usize>,
}

impl Place {
    pub fn keypoint_count(&self) -> usize {
        self.keypoints.len()
    }
}

impl PartialEq for Place {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.center == other.center
            && self.surface.cloud == other.surface.cloud
            && self.surface.normals == other.surface.normals
            && self.keypoints == other.keypoints
            && self.descriptors == other.descriptors
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaceDatabase {
    pub params: PipelineParams,
    pub calibration: CalibrationTable,
    pub places: Vec<Place>,
    /// Row-major N×N matrix of centre distances (m).
    pub center_distances: Vec<f64>,
    /// ISHOT rows of every place, tagged with the owning place.
    pub index: DescriptorIndex,
}

impl PlaceDatabase {
    pub fn num_places(&self) -> usize {
        self.places.len()
    }

    pub fn center_distance(&self, i: usize, j: usize) -> f64 {
        self.center_distances[i * self.places.len() + j]
    }

    pub fn keypoint_counts(&self) -> Vec<usize> {
        self.places.iter().map(Place::keypoint_count).collect()
    }

    /// Largest pairwise centre distance (the uniform-tail extent).
    pub fn d_max(&self) -> f64 {
        self.center_distances.iter().cloned().fold(0.0, f64::max)
    }

    /// Index over all places for `kind`; SHOT rows are the geometric prefix
    /// of the stored ISHOT rows.
    pub fn descriptor_index(&self, kind: DescriptorKind) -> DescriptorIndex {
        match kind {
            DescriptorKind::Ishot => self.index.clone(),
            DescriptorKind::Shot => slice_index(&self.index, 0..self.index.len()),
        }
    }

    /// SHOT rows of one place (row order = keypoint order).
    pub fn place_shot_index(&self, place: usize) -> DescriptorIndex {
        slice_index(&self.index, self.places[place].descriptors.clone())
    }

    pub fn probability_table(&self, model: &PrecisionModel) -> Result<ProbabilityTable, VotingError> {
        build_probability_table(model, &self.center_distances, &self.keypoint_counts())
    }

    /// Place whose centre is nearest to `p`.
    pub fn nearest_place(&self, p: &Vec3) -> Option<usize> {
        self.places
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1.center - p).norm().total_cmp(&(b.1.center - p).norm()))
            .map(|(i, _)| i)
    }
}

fn slice_index(index: &DescriptorIndex, rows: Range<usize>) -> DescriptorIndex {
    let mut out = DescriptorIndex::new(SHOT_LEN);
    for r in rows {
        out.push(&index.row(r)[..SHOT_LEN], index.place_of[r] as usize, index.local_index[r] as usize)
            .expect("SHOT prefix has fixed length");
    }
    out
}

/// Greedy walk along the trajectory: a centre at the first pose and then
/// whenever the arc length since the last centre reaches
/// `min_place_distance`. Members are indices of `map` points within
/// `place_radius` of each centre.
pub fn partition_places(
    map: &[Vec3],
    trajectory: &[Vec3],
    min_place_distance: f64,
    place_radius: f64,
) -> Result<Vec<(Vec3, Vec<usize>)>, MapDbError> {
    if trajectory.is_empty() {
        return Err(MapDbError::EmptyTrajectory);
    }
    if !(min_place_distance > 0.0) || !(min_place_distance < place_radius) {
        return Err(MapDbError::InvalidParameter(
            "need 0 < min_place_distance < place_radius".into(),
        ));
    }
    let mut centers = vec![trajectory[0]];
    let mut arc = 0.0;
    for w in trajectory.windows(2) {
        arc += (w[1] - w[0]).norm();
        if arc >= min_place_distance {
            centers.push(w[1]);
            arc = 0.0;
        }
    }
    let index = (!map.is_empty()).then(|| SpatialIndex::new(map));
    Ok(centers
        .into_iter()
        .map(|c| {
            let mut members = index.as_ref().map_or_else(Vec::new, |ix| ix.indices_within(&c, place_radius));
            members.sort_unstable();
            (c, members)
        })
        .collect())
}

/// Place clouds cut from a voxelized map, re-voxelized at the pipeline
/// cell size with the place centre as viewpoint.
pub fn place_clouds(map: &VoxelCloud, trajectory: &[Vec3], params: &PipelineParams) -> Result<Vec<(Vec3, VoxelCloud)>, MapDbError> {
    let parts = partition_places(&map.positions(), trajectory, params.min_place_distance, params.place_radius)?;
    parts
        .into_iter()
        .map(|(center, members)| {
            let cloud = VoxelCloud::from_samples(
                members.iter().map(|&i| (map.cells[i].position, map.cells[i].intensity)),
                params.voxel_size,
                center,
            )
            .map_err(PipelineError::from)?;
            Ok((center, cloud))
        })
        .collect()
}

/// Calibrated, range-cropped survey scans merged into one map-frame cloud.
pub fn merge_survey(
    survey: &[(Scan, RigidTransform)],
    table: &CalibrationTable,
    max_range: f64,
    cell_size: f64,
) -> Result<VoxelCloud, MapDbError> {
    let mut samples = Vec::new();
    for (scan, pose) in survey {
        let cal = apply_calibration(&scan.cropped(max_range), table).map_err(PipelineError::from)?;
        samples.extend(
            cal.points
                .iter()
                .map(|p| (pose.apply(&p.position), p.calibrated_intensity.unwrap_or(0.0))),
        );
    }
    Ok(VoxelCloud::from_samples(samples, cell_size, Vec3::zeros()).map_err(PipelineError::from)?)
}

/// Place clouds from posed survey scans. Membership is the radius rule of
/// [`partition_places`], applied only to scans recorded within `window`
/// of each centre, so overlapping places hold independently sampled
/// copies of shared structure rather than identical ones.
pub fn windowed_place_clouds(
    survey: &[(Scan, RigidTransform)],
    trajectory: &[Vec3],
    table: &CalibrationTable,
    params: &PipelineParams,
    merge_cell: f64,
    window: f64,
) -> Result<Vec<(Vec3, VoxelCloud)>, MapDbError> {
    let centers = partition_places(&[], trajectory, params.min_place_distance, params.place_radius)?;
    centers
        .into_par_iter()
        .enumerate()
        .map(|(i, (center, _))| {
            let near: Vec<(Scan, RigidTransform)> = survey
                .iter()
                .filter(|(_, pose)| (pose.translation - center).norm() <= window)
                .cloned()
                .collect();
            if near.is_empty() {
                return Err(MapDbError::InvalidParameter(format!(
                    "no survey scan within {window} m of place {i}"
                )));
            }
            let map = merge_survey(&near, table, params.max_range, merge_cell)?;
            let mut cut = place_clouds(&map, &[center], params)?;
            Ok(cut.remove(0))
        })
        .collect()
}

/// Detects and describes keypoints for every place and assembles the index.
pub fn build_database(
    places: Vec<(Vec3, VoxelCloud)>,
    calibration: &CalibrationTable,
    params: &PipelineParams,
) -> Result<PlaceDatabase, MapDbError> {
    if places.is_empty() {
        return Err(MapDbError::NoPlaces);
    }
    let built: Vec<(Vec3, SurfaceCloud, Vec<Keypoint>, Vec<Vec<f32>>)> = places
        .into_par_iter()
        .map(|(center, cloud)| {
            let prepared = prepare_cloud(cloud, params)?;
            let descs = describe_cells(
                &prepared.surface,
                &prepared.keypoint_cells(),
                DescriptorKind::Ishot,
                params.descriptor_radius,
            );
            let mut keypoints = Vec::new();
            let mut rows = Vec::new();
            for (kp, d) in prepared.keypoints.into_iter().zip(descs) {
                if d.usable {
                    keypoints.push(kp);
                    rows.push(d.to_f32());
                }
            }
            Ok((center, prepared.surface, keypoints, rows))
        })
        .collect::<Result<_, MapDbError>>()?;

    let mut index = DescriptorIndex::new(ISHOT_LEN);
    let mut out = Vec::with_capacity(built.len());
    for (id, (center, surface, keypoints, rows)) in built.into_iter().enumerate() {
        if keypoints.is_empty() {
            warn!("place {id} has no keypoints");
        }
        let start = index.len();
        for (k, r) in rows.iter().enumerate() {
            index.push(r, id, k).expect("ISHOT rows have fixed length");
        }
        out.push(Place {
            id,
            center,
            surface,
            keypoints,
            descriptors: start..index.len(),
        });
    }
    let center_distances = distance_matrix(&out);
    Ok(PlaceDatabase {
        params: params.clone(),
        calibration: calibration.clone(),
        places: out,
        center_distances,
        index,
    })
}

fn distance_matrix(places: &[Place]) -> Vec<f64> {
    let n = places.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = (places[i].center - places[j].center).norm();
        }
    }
    d
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        self.f64(v.x);
        self.f64(v.y);
        self.f64(v.z);
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

/// Cursor over one section payload; any short read is a `None`.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f64(&mut self) -> Option<f64> {
        self.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
    fn vec3(&mut self) -> Option<Vec3> {
        Some(Vec3::new(self.f64()?, self.f64()?, self.f64()?))
    }
    fn str(&mut self) -> Option<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
    fn count(&mut self, elem_size: usize) -> Option<usize> {
        let n = self.u64()? as usize;
        // reject counts the remaining bytes cannot hold
        (n.checked_mul(elem_size)? <= self.buf.len() - self.pos).then_some(n)
    }
}

fn push_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
}

pub fn encode_database(db: &PlaceDatabase) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    let mut m = Writer(Vec::new());
    m.u64(db.places.len() as u64);
    m.u8(1); // descriptor kind: ISHOT
    m.u32(db.index.dim as u32);
    m.str(&db.params.to_config_text());
    m.str(&db.calibration.to_text());
    push_section(&mut out, &m.0);
    for p in &db.places {
        let mut w = Writer(Vec::new());
        w.u64(p.id as u64);
        w.vec3(&p.center);
        let cloud = &p.surface.cloud;
        w.f64(cloud.cell_size);
        w.vec3(&cloud.viewpoint);
        w.u64(cloud.cells.len() as u64);
        for (i, c) in cloud.cells.iter().enumerate() {
            w.vec3(&c.position);
            w.f64(c.intensity);
            w.u32(c.count);
            w.vec3(&p.surface.normals.normals[i]);
            w.u8(p.surface.normals.valid[i] as u8);
        }
        w.u64(p.keypoints.len() as u64);
        for k in &p.keypoints {
            w.vec3(&k.position);
            w.f64(k.saliency);
            w.u64(k.cell as u64);
        }
        w.u64(p.descriptors.len() as u64);
        for r in p.descriptors.clone() {
            for &v in db.index.row(r) {
                w.f32(v);
            }
        }
        push_section(&mut out, &w.0);
    }
    out
}

pub fn save_database(db: &PlaceDatabase, path: &Path) -> Result<(), MapDbError> {
    fs::write(path, encode_database(db)).map_err(|source| MapDbError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_database(path: &Path) -> Result<PlaceDatabase, MapDbError> {
    let bytes = fs::read(path).map_err(|source| MapDbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_database(&bytes, &path.display().to_string())
}

pub fn decode_database(bytes: &[u8], path: &str) -> Result<PlaceDatabase, MapDbError> {
    let truncated = |section: usize| MapDbError::ChecksumMismatch {
        path: path.to_string(),
        section,
    };
    if bytes.len() < MAGIC.len() + 1 {
        return Err(truncated(0));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(MapDbError::BadMagic { path: path.to_string() });
    }
    let version = bytes[MAGIC.len()];
    if version != FORMAT_VERSION {
        return Err(MapDbError::VersionMismatch {
            path: path.to_string(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mut file = Reader {
        buf: bytes,
        pos: MAGIC.len() + 1,
    };
    let mut next_section = |k: usize| -> Result<&[u8], MapDbError> {
        let len = file.u64().ok_or(truncated(k))? as usize;
        let payload = file.take(len).ok_or(truncated(k))?;
        let crc = file.u32().ok_or(truncated(k))?;
        if crc32fast::hash(payload) != crc {
            return Err(truncated(k));
        }
        Ok(payload)
    };

    let manifest = next_section(0)?;
    let bad_manifest = |msg: &str| MapDbError::Manifest {
        path: path.to_string(),
        msg: msg.to_string(),
    };
    let mut m = Reader { buf: manifest, pos: 0 };
    let n_places = m.u64().ok_or_else(|| bad_manifest("place count"))? as usize;
    let kind = m.u8().ok_or_else(|| bad_manifest("descriptor kind"))?;
    let dim = m.u32().ok_or_else(|| bad_manifest("dimension"))? as usize;
    if kind != 1 || dim != ISHOT_LEN {
        return Err(bad_manifest("unsupported descriptor layout"));
    }
    let params_text = m.str().ok_or_else(|| bad_manifest("parameter block"))?;
    let calib_text = m.str().ok_or_else(|| bad_manifest("calibration block"))?;
    let params = PipelineParams::from_config_text(&params_text)?;
    let calibration = CalibrationTable::from_text(&calib_text).map_err(|e| bad_manifest(&e.to_string()))?;

    let mut places = Vec::with_capacity(n_places);
    let mut index = DescriptorIndex::new(ISHOT_LEN);
    for k in 1..=n_places {
        let payload = next_section(k)?;
        let mut r = Reader { buf: payload, pos: 0 };
        let place = (|| -> Option<Place> {
            let id = r.u64()? as usize;
            let center = r.vec3()?;
            let cell_size = r.f64()?;
            let viewpoint = r.vec3()?;
            let n_cells = r.count(61)?;
            let mut cells = Vec::with_capacity(n_cells);
            let mut normals = Vec::with_capacity(n_cells);
            let mut valid = Vec::with_capacity(n_cells);
            for _ in 0..n_cells {
                let position = r.vec3()?;
                let intensity = r.f64()?;
                let count = r.u32()?;
                cells.push(VoxelCell {
                    position,
                    intensity,
                    count,
                });
                normals.push(r.vec3()?);
                valid.push(r.u8()? != 0);
            }
            let n_kp = r.count(40)?;
            let mut keypoints = Vec::with_capacity(n_kp);
            for _ in 0..n_kp {
                keypoints.push(Keypoint {
                    position: r.vec3()?,
                    saliency: r.f64()?,
                    is_boundary: false,
                    cell: r.u64()? as usize,
                });
            }
            let n_rows = r.count(ISHOT_LEN * 4)?;
            let start = index.len();
            let mut row = vec![0f32; ISHOT_LEN];
            for local in 0..n_rows {
                for v in row.iter_mut() {
                    *v = r.f32()?;
                }
                index.push(&row, id, local).ok()?;
            }
            let cloud = VoxelCloud {
                cell_size,
                viewpoint,
                cells,
            };
            Some(Place {
                id,
                center,
                surface: SurfaceCloud::with_normals(cloud, Normals { normals, valid }),
                keypoints,
                descriptors: start..index.len(),
            })
        })()
        .ok_or(truncated(k))?;
        if r.pos != payload.len() {
            return Err(truncated(k));
        }
        places.push(place);
    }
    if file.pos != bytes.len() {
        return Err(truncated(n_places + 1));
    }
    let center_distances = distance_matrix(&places);
    Ok(PlaceDatabase {
        params,
        calibration,
        places,
        center_distances,
        index,
    })
}
