//! Local reference frames, SHOT and ISHOT signatures, and exact
//! nearest-neighbour-distance-ratio matching.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, TAU};

use nalgebra::Matrix3;
use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::SurfaceCloud;
use crate::geometry::{sorted_symmetric_eigen, Vec3};

pub const AZIMUTH_DIVISIONS: usize = 8;
pub const ELEVATION_DIVISIONS: usize = 2;
pub const RADIAL_DIVISIONS: usize = 2;
pub const VOLUMES: usize = AZIMUTH_DIVISIONS * ELEVATION_DIVISIONS * RADIAL_DIVISIONS;
pub const COSINE_BINS: usize = 11;
pub const INTENSITY_BINS: usize = 31;
pub const SHOT_LEN: usize = VOLUMES * COSINE_BINS;
pub const INTENSITY_LEN: usize = VOLUMES * INTENSITY_BINS;
pub const ISHOT_LEN: usize = SHOT_LEN + INTENSITY_LEN;
pub const MIN_LRF_NEIGHBORS: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DescriptorError {
    #[error("only {found} neighbours within the support radius, need {needed}")]
    InsufficientSupport { found: usize, needed: usize },
    #[error("database holds {0} descriptors, matching needs at least 2")]
    DatabaseTooSmall(usize),
    #[error("descriptor length {found} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DescriptorKind {
    Shot,
    Ishot,
}

impl DescriptorKind {
    pub fn len(self) -> usize {
        match self {
            DescriptorKind::Shot => SHOT_LEN,
            DescriptorKind::Ishot => ISHOT_LEN,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DescriptorKind::Shot => "shot",
            DescriptorKind::Ishot => "ishot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shot" => Some(DescriptorKind::Shot),
            "ishot" => Some(DescriptorKind::Ishot),
            _ => None,
        }
    }
}

/// Rows of `axes` are the frame's x, y and z axes in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalReferenceFrame {
    pub origin: Vec3,
    pub axes: Matrix3<f64>,
}

impl LocalReferenceFrame {
    pub fn x(&self) -> Vec3 {
        self.axes.row(0).transpose()
    }

    pub fn y(&self) -> Vec3 {
        self.axes.row(1).transpose()
    }

    pub fn z(&self) -> Vec3 {
        self.axes.row(2).transpose()
    }

    /// World point to frame coordinates.
    #[inline]
    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.axes * (p - self.origin)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub kind: DescriptorKind,
    pub values: Vec<f64>,
    pub keypoint_index: usize,
    /// False when the support was empty; `values` is then all zero.
    pub usable: bool,
}

impl Descriptor {
    pub fn geometric(&self) -> &[f64] {
        &self.values[..SHOT_LEN]
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        (self.kind == DescriptorKind::Ishot).then(|| &self.values[SHOT_LEN..])
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.values.iter().map(|&v| v as f32).collect()
    }
}

/// Distance-weighted covariance frame around `keypoint`.
pub fn compute_lrf(surface: &SurfaceCloud, keypoint: &Vec3, radius: f64) -> Result<LocalReferenceFrame, DescriptorError> {
    let mut offsets: Vec<(Vec3, f64)> = Vec::new();
    surface.index.for_each_within(keypoint, radius, |j, d2| {
        if d2 > 1e-18 {
            offsets.push((surface.cloud.cells[j].position - keypoint, d2.sqrt()));
        }
    });
    if offsets.len() < MIN_LRF_NEIGHBORS {
        return Err(DescriptorError::InsufficientSupport {
            found: offsets.len(),
            needed: MIN_LRF_NEIGHBORS,
        });
    }
    let mut cov = Matrix3::zeros();
    let mut wsum = 0.0;
    for (o, d) in &offsets {
        let w = radius - d;
        cov += w * (o * o.transpose());
        wsum += w;
    }
    if !(wsum > 0.0) {
        return Err(DescriptorError::InsufficientSupport {
            found: 0,
            needed: MIN_LRF_NEIGHBORS,
        });
    }
    cov /= wsum;
    let (_, vecs) = sorted_symmetric_eigen(&cov);
    let mut x: Vec3 = vecs.column(0).into_owned();
    let mut z: Vec3 = vecs.column(2).into_owned();
    if should_flip(&offsets, &x) {
        x = -x;
    }
    if should_flip(&offsets, &z) {
        z = -z;
    }
    x.normalize_mut();
    z.normalize_mut();
    let y = z.cross(&x);
    Ok(LocalReferenceFrame {
        origin: *keypoint,
        axes: Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
    })
}

/// Majority vote of the neighbours' side of the plane orthogonal to `axis`;
/// ties fall back to the summed projection.
fn should_flip(offsets: &[(Vec3, f64)], axis: &Vec3) -> bool {
    let mut pos = 0usize;
    let mut neg = 0usize;
    let mut sum = 0.0;
    for (o, _) in offsets {
        let p = o.dot(axis);
        sum += p;
        if p >= 0.0 {
            pos += 1;
        } else {
            neg += 1;
        }
    }
    neg > pos || (neg == pos && sum < 0.0)
}

/// Linear interpolation weights of `u` (in bin-centre units) between two
/// adjacent bins of a clamped axis with `n` bins.
#[inline]
fn clamped_bins(u: f64, n: usize) -> [(usize, f64); 2] {
    if u <= 0.0 {
        return [(0, 1.0), (0, 0.0)];
    }
    let top = (n - 1) as f64;
    if u >= top {
        return [(n - 1, 1.0), (n - 1, 0.0)];
    }
    let b = u.floor();
    let f = u - b;
    let b = b as usize;
    [(b, 1.0 - f), (b + 1, f)]
}

/// Soft assignment of one neighbour to the spatial volumes, as
/// `(volume, weight)` pairs summing to one.
fn spatial_weights(local: &Vec3, radius: f64) -> [(usize, f64); 8] {
    let r = local.norm();
    let mut azimuth = local.y.atan2(local.x);
    if azimuth < 0.0 {
        azimuth += TAU;
    }
    let ua = azimuth / FRAC_PI_4 - 0.5;
    let fa = ua.floor();
    let wa1 = ua - fa;
    let a0 = (fa as i64).rem_euclid(AZIMUTH_DIVISIONS as i64) as usize;
    let a1 = (a0 + 1) % AZIMUTH_DIVISIONS;
    let az = [(a0, 1.0 - wa1), (a1, wa1)];

    let elevation = local.z.atan2((local.x * local.x + local.y * local.y).sqrt());
    let el = clamped_bins((elevation + FRAC_PI_2) / FRAC_PI_2 - 0.5, ELEVATION_DIVISIONS);
    let rad = clamped_bins(r / (radius / RADIAL_DIVISIONS as f64) - 0.5, RADIAL_DIVISIONS);

    let mut out = [(0usize, 0.0f64); 8];
    let mut k = 0;
    for &(ri, rw) in &rad {
        for &(ei, ew) in &el {
            for &(ai, aw) in &az {
                out[k] = ((ri * ELEVATION_DIVISIONS + ei) * AZIMUTH_DIVISIONS + ai, rw * ew * aw);
                k += 1;
            }
        }
    }
    out
}

/// Adds `weight` spread over the spatial volumes and two value bins.
#[inline]
fn accumulate(hist: &mut [f64], bins: usize, spatial: &[(usize, f64); 8], value_u: f64) {
    let vb = clamped_bins(value_u, bins);
    for &(vol, sw) in spatial {
        if sw == 0.0 {
            continue;
        }
        for &(b, w) in &vb {
            if w != 0.0 {
                hist[vol * bins + b] += sw * w;
            }
        }
    }
}

fn normalize(block: &mut [f64]) -> bool {
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in block.iter_mut() {
            *v /= norm;
        }
        true
    } else {
        false
    }
}

/// Shared histogram pass; the intensity cue is filled only when
/// `with_intensity` is set.
fn signature(
    surface: &SurfaceCloud,
    keypoint: &Vec3,
    keypoint_intensity: f64,
    lrf: &LocalReferenceFrame,
    radius: f64,
    with_intensity: bool,
) -> (Vec<f64>, bool, bool) {
    let mut values = vec![0.0; if with_intensity { ISHOT_LEN } else { SHOT_LEN }];
    let normal = lrf.z();
    let (geo, int) = values.split_at_mut(SHOT_LEN);
    surface.index.for_each_within(keypoint, radius, |j, d2| {
        if d2 < 1e-18 {
            return;
        }
        let cell = &surface.cloud.cells[j];
        let spatial = spatial_weights(&lrf.to_local(&cell.position), radius);
        if surface.normals.valid[j] {
            let cos = normal.dot(&surface.normals.normals[j]).clamp(-1.0, 1.0);
            accumulate(geo, COSINE_BINS, &spatial, (cos + 1.0) / 2.0 * COSINE_BINS as f64 - 0.5);
        }
        if with_intensity {
            let diff = (keypoint_intensity - cell.intensity).clamp(-1.0, 1.0);
            accumulate(int, INTENSITY_BINS, &spatial, (diff + 1.0) / 2.0 * INTENSITY_BINS as f64 - 0.5);
        }
    });
    let geo_ok = normalize(geo);
    let int_ok = if with_intensity { normalize(int) } else { true };
    (values, geo_ok, int_ok)
}

pub fn compute_shot(surface: &SurfaceCloud, keypoint: &Vec3, lrf: &LocalReferenceFrame, radius: f64) -> Descriptor {
    let (values, geo_ok, _) = signature(surface, keypoint, 0.0, lrf, radius, false);
    Descriptor {
        kind: DescriptorKind::Shot,
        values,
        keypoint_index: 0,
        usable: geo_ok,
    }
}

/// SHOT followed by per-volume histograms of `I_P - I_Q`, where `I_P` is
/// `keypoint_intensity` and `I_Q` each neighbour cell's intensity.
pub fn compute_ishot(
    surface: &SurfaceCloud,
    keypoint: &Vec3,
    keypoint_intensity: f64,
    lrf: &LocalReferenceFrame,
    radius: f64,
) -> Descriptor {
    let (values, geo_ok, int_ok) = signature(surface, keypoint, keypoint_intensity, lrf, radius, true);
    Descriptor {
        kind: DescriptorKind::Ishot,
        values,
        keypoint_index: 0,
        usable: geo_ok && int_ok,
    }
}

/// Describes the cell `cell` of `surface`: LRF plus SHOT or ISHOT. An
/// insufficient support yields a zero, unusable descriptor.
pub fn describe_cell(surface: &SurfaceCloud, cell: usize, kind: DescriptorKind, radius: f64) -> Descriptor {
    let c = &surface.cloud.cells[cell];
    match compute_lrf(surface, &c.position, radius) {
        Ok(lrf) => match kind {
            DescriptorKind::Shot => compute_shot(surface, &c.position, &lrf, radius),
            DescriptorKind::Ishot => compute_ishot(surface, &c.position, c.intensity, &lrf, radius),
        },
        Err(_) => Descriptor {
            kind,
            values: vec![0.0; kind.len()],
            keypoint_index: 0,
            usable: false,
        },
    }
}

/// Describes many cells in parallel; `keypoint_index` is the position in `cells`.
pub fn describe_cells(surface: &SurfaceCloud, cells: &[usize], kind: DescriptorKind, radius: f64) -> Vec<Descriptor> {
    cells
        .par_iter()
        .enumerate()
        .map(|(k, &cell)| {
            let mut d = describe_cell(surface, cell, kind, radius);
            d.keypoint_index = k;
            d
        })
        .collect()
}

/// Squared Euclidean distance between two stored descriptors, summed
/// sequentially in f64. Every match result is defined by this value.
#[inline]
pub fn exact_sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        s += d * d;
    }
    s
}

/// Fast screening distance; within a small relative error of the exact one.
#[inline]
fn approx_sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Screening slack: relative error bound of the f32 pass is far below this.
const SCREEN_REL: f64 = 1e-3;
const SCREEN_ABS: f64 = 1e-6;

/// One NNDR vote.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoteMatch {
    pub query_index: usize,
    pub nearest: usize,
    pub second: usize,
    pub nearest_dist: f64,
    pub second_dist: f64,
    pub tau: f64,
    /// Place owning the nearest descriptor.
    pub place: usize,
}

/// Row-major f32 descriptor matrix tagged with owning place and the
/// place-local keypoint index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DescriptorIndex {
    pub dim: usize,
    pub data: Vec<f32>,
    pub place_of: Vec<u32>,
    pub local_index: Vec<u32>,
}

impl DescriptorIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.place_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.place_of.is_empty()
    }

    pub fn push(&mut self, values: &[f32], place: usize, local: usize) -> Result<(), DescriptorError> {
        if values.len() != self.dim {
            return Err(DescriptorError::DimensionMismatch {
                expected: self.dim,
                found: values.len(),
            });
        }
        self.data.extend_from_slice(values);
        self.place_of.push(place as u32);
        self.local_index.push(local as u32);
        Ok(())
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Exact `k` nearest rows as `(row, squared distance)`, ascending by
    /// distance then row index.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<(usize, f64)>, DescriptorError> {
        if query.len() != self.dim {
            return Err(DescriptorError::DimensionMismatch {
                expected: self.dim,
                found: query.len(),
            });
        }
        let k = k.min(self.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        let approx: Vec<f32> = (0..self.len()).map(|i| approx_sq_dist(query, self.row(i))).collect();
        let mut sorted = approx.clone();
        let (_, kth, _) = sorted.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
        let bound = *kth as f64 * (1.0 + SCREEN_REL) + SCREEN_ABS;
        let mut cands: Vec<(usize, f64)> = approx
            .iter()
            .enumerate()
            .filter(|(_, &a)| (a as f64) <= bound)
            .map(|(i, _)| (i, exact_sq_dist(query, self.row(i))))
            .collect();
        cands.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        cands.truncate(k);
        Ok(cands)
    }

    /// Exact brute-force 2-NN vote for one query.
    pub fn nndr(&self, query: &[f32], query_index: usize) -> Result<VoteMatch, DescriptorError> {
        if self.len() < 2 {
            return Err(DescriptorError::DatabaseTooSmall(self.len()));
        }
        let nn = self.knn(query, 2)?;
        let (d1, d2) = (nn[0].1.sqrt(), nn[1].1.sqrt());
        let tau = if d2 > 0.0 { d1 / d2 } else { 1.0 };
        Ok(VoteMatch {
            query_index,
            nearest: nn[0].0,
            second: nn[1].0,
            nearest_dist: d1,
            second_dist: d2,
            tau,
            place: self.place_of[nn[0].0] as usize,
        })
    }
}

/// NNDR votes for every query, in query order.
pub fn match_nndr(queries: &[Vec<f32>], index: &DescriptorIndex) -> Result<Vec<VoteMatch>, DescriptorError> {
    if index.len() < 2 {
        return Err(DescriptorError::DatabaseTooSmall(index.len()));
    }
    queries
        .par_iter()
        .enumerate()
        .map(|(qi, q)| index.nndr(q, qi))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{VoxelCell, VoxelCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn surface(points: &[(Vec3, f64)]) -> SurfaceCloud {
        let cloud = VoxelCloud {
            cell_size: 0.4,
            viewpoint: Vec3::new(0.0, 0.0, 10.0),
            cells: points
                .iter()
                .map(|&(position, intensity)| VoxelCell {
                    position,
                    intensity,
                    count: 1,
                })
                .collect(),
        };
        SurfaceCloud::new(cloud, 1.0)
    }

    fn bumpy(rng: &mut ChaCha8Rng) -> Vec<(Vec3, f64)> {
        (0..800)
            .map(|_| {
                let x = rng.random_range(-6.0..6.0);
                let y = rng.random_range(-6.0..6.0);
                let z = 0.5 * (x * 0.7f64).sin() + 0.3 * (y * 1.1f64).cos() + 0.02 * x * y;
                (Vec3::new(x, y, z), rng.random_range(0.0..1.0))
            })
            .collect()
    }

    #[test]
    fn lengths_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = surface(&bumpy(&mut rng));
        let d = describe_cell(&s, 0, DescriptorKind::Ishot, 7.0);
        assert_eq!(d.values.len(), 1344);
        assert!(d.usable);
        let g: f64 = d.geometric().iter().map(|v| v * v).sum();
        let i: f64 = d.intensity().unwrap().iter().map(|v| v * v).sum();
        assert!((g.sqrt() - 1.0).abs() < 1e-9 && (i.sqrt() - 1.0).abs() < 1e-9);
        let shot = describe_cell(&s, 0, DescriptorKind::Shot, 7.0);
        assert_eq!(shot.values.len(), 352);
        assert_eq!(&d.values[..352], &shot.values[..]);
    }

    #[test]
    fn lrf_is_right_handed_and_planar_z_is_normal() {
        let pts: Vec<(Vec3, f64)> = (0..400)
            .map(|k| (Vec3::new((k % 20) as f64 * 0.3, (k / 20) as f64 * 0.3, 0.0), 0.5))
            .collect();
        let s = surface(&pts);
        let lrf = compute_lrf(&s, &Vec3::new(2.7, 2.7, 0.0), 2.0).unwrap();
        assert!((lrf.axes * lrf.axes.transpose() - Matrix3::identity()).abs().max() < 1e-9);
        assert!((lrf.axes.determinant() - 1.0).abs() < 1e-9);
        assert!(lrf.z().z.abs() > 1.0 - 1e-6);
    }

    #[test]
    fn too_few_neighbors() {
        let pts: Vec<(Vec3, f64)> = (0..5).map(|k| (Vec3::new(k as f64 * 0.1, 0.0, 0.0), 0.5)).collect();
        let s = surface(&pts);
        assert!(matches!(
            compute_lrf(&s, &Vec3::zeros(), 2.0),
            Err(DescriptorError::InsufficientSupport { found: 4, .. })
        ));
    }

    #[test]
    fn uniform_intensity_lands_in_center_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(Vec3, f64)> = bumpy(&mut rng).into_iter().map(|(p, _)| (p, 0.4)).collect();
        let s = surface(&pts);
        let d = describe_cell(&s, 0, DescriptorKind::Ishot, 7.0);
        let cue = d.intensity().unwrap();
        for v in 0..VOLUMES {
            for b in 0..INTENSITY_BINS {
                if b != 15 {
                    assert_eq!(cue[v * INTENSITY_BINS + b], 0.0);
                }
            }
        }
    }

    #[test]
    fn tau_arithmetic_and_ties() {
        let mut idx = DescriptorIndex::new(2);
        idx.push(&[0.3, 0.0], 0, 0).unwrap();
        idx.push(&[0.0, 0.6], 1, 0).unwrap();
        let m = idx.nndr(&[0.0, 0.0], 0).unwrap();
        assert_eq!((m.nearest, m.second, m.place), (0, 1, 0));
        assert!((m.tau - 0.5).abs() < 1e-7);

        let mut dup = DescriptorIndex::new(2);
        dup.push(&[1.0, 0.0], 0, 0).unwrap();
        dup.push(&[1.0, 0.0], 3, 0).unwrap();
        let m = dup.nndr(&[0.0, 0.0], 0).unwrap();
        assert_eq!(m.tau, 1.0);
        assert_eq!(m.nearest, 0);
    }

    #[test]
    fn tiny_database_rejected() {
        let mut idx = DescriptorIndex::new(2);
        idx.push(&[1.0, 0.0], 0, 0).unwrap();
        assert_eq!(match_nndr(&[vec![0.0, 0.0]], &idx), Err(DescriptorError::DatabaseTooSmall(1)));
    }
}
