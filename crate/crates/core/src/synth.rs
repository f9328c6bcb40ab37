//! Synthetic worlds and a multi-beam LiDAR simulator with ground truth.
//!
//! The world is a textured ground plane plus boxes, cylinders and poles
//! drawn from a small set of sizes, so geometry repeats across the map
//! while reflectance textures do not.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{Point, Scan, NUM_BEAMS};
use crate::geometry::{RigidTransform, Vec3};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cannot place {requested} landmarks {separation} m apart in a {extent} m world (placed {placed})")]
    TooManyLandmarks {
        requested: usize,
        placed: usize,
        extent: f64,
        separation: f64,
    },
    #[error("invalid world parameter: {0}")]
    InvalidParameter(String),
    #[error("pose ({0:.1}, {1:.1}) lies outside the world")]
    OutsideWorld(f64, f64),
    #[error("scan {0} has no returns")]
    NoReturns(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

/// Reflectance as a function of primitive-local surface coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Texture {
    Uniform { value: f64 },
    /// Bands stacked along the height.
    HorizontalStripes { period: f64, values: Vec<f64> },
    /// Bands along the horizontal surface coordinate.
    VerticalStripes { period: f64, values: Vec<f64> },
    Checker { size: f64, values: [f64; 2] },
}

impl Texture {
    /// `u` runs horizontally along the surface, `h` is height above the base.
    pub fn eval(&self, u: f64, h: f64) -> f64 {
        let band = |coord: f64, period: f64, values: &[f64]| {
            let k = (coord / period).floor() as i64;
            values[k.rem_euclid(values.len() as i64) as usize]
        };
        match self {
            Texture::Uniform { value } => *value,
            Texture::HorizontalStripes { period, values } => band(h, *period, values),
            Texture::VerticalStripes { period, values } => band(u, *period, values),
            Texture::Checker { size, values } => {
                let k = (u / size).floor() as i64 + (h / size).floor() as i64;
                values[k.rem_euclid(2) as usize]
            }
        }
    }

    fn values(&self) -> Vec<f64> {
        match self {
            Texture::Uniform { value } => vec![*value],
            Texture::HorizontalStripes { values, .. } | Texture::VerticalStripes { values, .. } => values.clone(),
            Texture::Checker { values, .. } => values.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned in its own frame, rotated by `yaw` about the vertical
    /// through `base` (centre of the bottom face, on the ground).
    Box { base: [f64; 2], half: [f64; 3], yaw: f64 },
    /// Vertical cylinder standing on the ground.
    Cylinder { base: [f64; 2], radius: f64, height: f64 },
}

impl Shape {
    pub fn base(&self) -> [f64; 2] {
        match self {
            Shape::Box { base, .. } | Shape::Cylinder { base, .. } => *base,
        }
    }

    /// Horizontal radius of a bounding circle around `base`.
    pub fn footprint_radius(&self) -> f64 {
        match self {
            Shape::Box { half, .. } => (half[0] * half[0] + half[1] * half[1]).sqrt(),
            Shape::Cylinder { radius, .. } => *radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// Retro-reflective surfaces report their reflectance times 2.5, which
    /// lands above the diffuse range.
    #[serde(default)]
    pub retro_reflective: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    /// Side of the square world, centred on the origin (m).
    pub extent: f64,
    pub ground_tile: f64,
    pub ground_palette: Vec<f64>,
    pub primitives: Vec<Primitive>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldParams {
    pub extent: f64,
    pub num_landmarks: usize,
    pub min_separation: f64,
    pub ground_tile: f64,
    /// Landmarks are kept within this distance of `corridor` when it is
    /// non-empty (saves placing objects nobody will ever see).
    pub corridor_width: f64,
    pub retro_fraction: f64,
    /// Small uniformly coloured boxes scattered between the landmarks.
    #[serde(default)]
    pub num_clutter: usize,
    #[serde(default)]
    pub clutter_separation: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            extent: 400.0,
            num_landmarks: 250,
            min_separation: 6.0,
            ground_tile: 4.0,
            corridor_width: 30.0,
            retro_fraction: 0.0,
            num_clutter: 1000,
            clutter_separation: 2.5,
        }
    }
}

const GROUND_PALETTE: [f64; 5] = [12.0, 18.0, 24.0, 30.0, 36.0];
const LANDMARK_PALETTE: [f64; 9] = [5.0, 15.0, 25.0, 35.0, 45.0, 55.0, 65.0, 75.0, 85.0];
const BOX_SIZES: [[f64; 3]; 4] = [[1.0, 1.0, 1.2], [2.0, 1.0, 1.5], [1.5, 1.5, 2.5], [3.0, 0.6, 1.0]];
const CYLINDER_SIZES: [(f64, f64); 2] = [(0.6, 3.0), (1.0, 4.5)];
const POLE: (f64, f64) = (0.15, 6.0);

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl World {
    pub fn ground_reflectance(&self, x: f64, y: f64) -> f64 {
        let i = (x / self.ground_tile).floor() as i64;
        let j = (y / self.ground_tile).floor() as i64;
        let h = splitmix(self.seed ^ splitmix((i as u64).wrapping_mul(0x1000_0001) ^ (j as u64)));
        self.ground_palette[(h % self.ground_palette.len() as u64) as usize]
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.extent / 2.0 && y.abs() <= self.extent / 2.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        fs::write(path, self.to_json()).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| SynthError::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        // consecutive values differ so every band boundary has contrast
        let mut out: Vec<f64> = Vec::with_capacity(n);
        while out.len() < n {
            let v = *LANDMARK_PALETTE.choose(rng).unwrap();
            if out.last() != Some(&v) && (out.len() + 1 < n || out.first() != Some(&v)) {
                out.push(v);
            }
        }
        out
    };
    match rng.random_range(0..4) {
        0 => Texture::Uniform {
            value: *LANDMARK_PALETTE.choose(rng).unwrap(),
        },
        1 => {
            let n = rng.random_range(2..=4);
            Texture::HorizontalStripes {
                period: *[1.0, 1.6, 2.4].choose(rng).unwrap(),
                values: pick(rng, n),
            }
        }
        2 => {
            let n = rng.random_range(2..=4);
            Texture::VerticalStripes {
                period: *[1.2, 2.0, 3.0].choose(rng).unwrap(),
                values: pick(rng, n),
            }
        }
        _ => {
            let v = pick(rng, 2);
            Texture::Checker {
                size: *[1.6, 2.4].choose(rng).unwrap(),
                values: [v[0], v[1]],
            }
        }
    }
}

/// Deterministic world from `seed`. Landmarks are placed by rejection
/// sampling with `min_separation` between footprint centres; when
/// `corridor` is non-empty they are restricted to its neighbourhood.
pub fn generate_world(seed: u64, params: &WorldParams, corridor: &[Vec3]) -> Result<World, SynthError> {
    if !(params.extent > 0.0) {
        return Err(SynthError::InvalidParameter("extent must be positive".into()));
    }
    if !(params.ground_tile > 0.0) {
        return Err(SynthError::InvalidParameter("ground_tile must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = params.extent / 2.0;
    let mut bases: Vec<[f64; 2]> = Vec::new();
    let max_attempts = 2000 + 400 * params.num_landmarks;
    let mut attempts = 0;
    while bases.len() < params.num_landmarks && attempts < max_attempts {
        attempts += 1;
        let (x, y) = if corridor.is_empty() {
            (rng.random_range(-half..half), rng.random_range(-half..half))
        } else {
            let c = corridor[rng.random_range(0..corridor.len())];
            let r = params.corridor_width * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..TAU);
            (c.x + r * a.cos(), c.y + r * a.sin())
        };
        if !(x.abs() < half - 3.0 && y.abs() < half - 3.0) {
            continue;
        }
        if corridor.iter().any(|c| (c.x - x).hypot(c.y - y) < 4.0) {
            // keep the sensor's own position clear
            continue;
        }
        let sep2 = params.min_separation * params.min_separation;
        if bases.iter().all(|b| (b[0] - x).powi(2) + (b[1] - y).powi(2) >= sep2) {
            bases.push([x, y]);
        }
    }
    if bases.len() < params.num_landmarks {
        return Err(SynthError::TooManyLandmarks {
            requested: params.num_landmarks,
            placed: bases.len(),
            extent: params.extent,
            separation: params.min_separation,
        });
    }
    let mut primitives = Vec::with_capacity(bases.len());
    let mut used: Vec<Texture> = Vec::new();
    for base in bases {
        let shape = match rng.random_range(0..10) {
            0..=5 => Shape::Box {
                base,
                half: *BOX_SIZES.choose(&mut rng).unwrap(),
                yaw: rng.random_range(0.0..PI),
            },
            6..=8 => {
                let (radius, height) = *CYLINDER_SIZES.choose(&mut rng).unwrap();
                Shape::Cylinder { base, radius, height }
            }
            _ => Shape::Cylinder {
                base,
                radius: POLE.0,
                height: POLE.1,
            },
        };
        let texture = loop {
            let t = random_texture(&mut rng);
            if !used.contains(&t) {
                break t;
            }
        };
        used.push(texture.clone());
        primitives.push(Primitive {
            shape,
            texture,
            retro_reflective: rng.random::<f64>() < params.retro_fraction,
        });
    }
    scatter_clutter(seed, params, corridor, &mut primitives);
    Ok(World {
        seed,
        extent: params.extent,
        ground_tile: params.ground_tile,
        ground_palette: GROUND_PALETTE.to_vec(),
        primitives,
    })
}

/// Best effort: stops after a fixed number of rejected draws.
fn scatter_clutter(seed: u64, params: &WorldParams, corridor: &[Vec3], primitives: &mut Vec<Primitive>) {
    if params.num_clutter == 0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xc1u64));
    let half = params.extent / 2.0;
    let landmarks: Vec<([f64; 2], f64)> = primitives.iter().map(|p| (p.shape.base(), p.shape.footprint_radius())).collect();
    let mut placed: Vec<[f64; 2]> = Vec::new();
    let sep2 = params.clutter_separation * params.clutter_separation;
    let mut attempts = 0;
    while placed.len() < params.num_clutter && attempts < 100 * params.num_clutter {
        attempts += 1;
        let (x, y) = if corridor.is_empty() {
            (rng.random_range(-half..half), rng.random_range(-half..half))
        } else {
            let c = corridor[rng.random_range(0..corridor.len())];
            let r = params.corridor_width * rng.random::<f64>().sqrt();
            let a = rng.random_range(0.0..TAU);
            (c.x + r * a.cos(), c.y + r * a.sin())
        };
        if !(x.abs() < half - 1.0 && y.abs() < half - 1.0) || corridor.iter().any(|c| (c.x - x).hypot(c.y - y) < 3.0) {
            continue;
        }
        if landmarks.iter().any(|(b, r)| (b[0] - x).hypot(b[1] - y) < r + 1.5) {
            continue;
        }
        if placed.iter().any(|b| (b[0] - x).powi(2) + (b[1] - y).powi(2) < sep2) {
            continue;
        }
        placed.push([x, y]);
        primitives.push(Primitive {
            shape: Shape::Box {
                base: [x, y],
                half: [rng.random_range(0.25..0.6), rng.random_range(0.25..0.6), rng.random_range(0.2..0.6)],
                yaw: rng.random_range(0.0..PI),
            },
            texture: Texture::Uniform {
                value: *LANDMARK_PALETTE.choose(&mut rng).unwrap(),
            },
            retro_reflective: false,
        });
    }
}

/// Monotone per-beam response: `min(gain * I + offset, saturation)`,
/// clamped to `[0, 255]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResponse {
    pub gain: f64,
    pub offset: f64,
    pub saturation: f64,
}

impl BeamResponse {
    pub const IDENTITY: BeamResponse = BeamResponse {
        gain: 1.0,
        offset: 0.0,
        saturation: 255.0,
    };

    pub fn apply(&self, reflectance: f64) -> f64 {
        (self.gain * reflectance + self.offset).min(self.saturation).clamp(0.0, 255.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    /// Beam elevations (rad), one per beam id.
    pub beam_elevations: Vec<f64>,
    /// Extra tilt steps of the actuated mount; each is one full sweep (rad).
    pub sweep_offsets: Vec<f64>,
    pub rotations: usize,
    /// Additional elevation applied on every second rotation (rad).
    pub rotation_elevation_shift: f64,
    pub azimuth_step: f64,
    pub response: Vec<BeamResponse>,
    pub range_noise: f64,
    pub intensity_noise: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl SensorModel {
    /// 16 beams from −15° to +15°, identity responses, no noise.
    pub fn ideal() -> Self {
        Self {
            beam_elevations: (0..NUM_BEAMS).map(|l| (-15.0 + 2.0 * l as f64).to_radians()).collect(),
            sweep_offsets: [0.0, 0.5, 1.0, 1.5, -30.0, -29.5, -29.0, -28.5].iter().map(|d: &f64| d.to_radians()).collect(),
            rotations: 2,
            rotation_elevation_shift: 0.25f64.to_radians(),
            azimuth_step: 0.4f64.to_radians(),
            response: vec![BeamResponse::IDENTITY; NUM_BEAMS],
            range_noise: 0.0,
            intensity_noise: 0.0,
            min_range: 1.0,
            max_range: 40.0,
        }
    }

    /// Realistic defaults: per-beam affine-plus-saturation responses drawn
    /// from `seed`, small range and intensity noise.
    pub fn with_distortion(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x5e05));
        let mut s = Self::ideal();
        s.response = (0..NUM_BEAMS)
            .map(|_| BeamResponse {
                gain: rng.random_range(0.8..1.2),
                offset: rng.random_range(-6.0..6.0),
                saturation: rng.random_range(200.0..255.0),
            })
            .collect();
        s.range_noise = 0.01;
        s.intensity_noise = 1.0;
        s
    }

    pub fn num_beams(&self) -> usize {
        self.beam_elevations.len()
    }
}

/// A simulated scan in the sensor frame plus its sensor-to-world pose.
#[derive(Clone, Debug)]
pub struct SimulatedScan {
    pub scan: Scan,
    pub pose: RigidTransform,
}

/// Blank azimuth sector (sensor frame, radians): rays with azimuth in
/// `[start, start + width)` return nothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Occlusion {
    pub start: f64,
    pub width: f64,
}

impl Occlusion {
    pub fn blocks(&self, azimuth: f64) -> bool {
        (azimuth - self.start).rem_euclid(TAU) < self.width
    }
}

const SECTORS: usize = 720;

/// Primitives bucketed by the world azimuth range their footprint covers
/// as seen from the sensor. Every primitive stands on the ground, so a ray
/// can only hit it if its horizontal direction crosses the footprint.
struct AzimuthSectors {
    buckets: Vec<Vec<u32>>,
}

impl AzimuthSectors {
    fn new(prims: &[&Primitive], origin: &Vec3) -> Self {
        let mut buckets = vec![Vec::new(); SECTORS];
        let width = TAU / SECTORS as f64;
        for (i, p) in prims.iter().enumerate() {
            let b = p.shape.base();
            let (dx, dy) = (b[0] - origin.x, b[1] - origin.y);
            let d = dx.hypot(dy);
            let r = p.shape.footprint_radius() + 1e-6;
            if d <= r * 1.05 {
                buckets.iter_mut().for_each(|bk| bk.push(i as u32));
                continue;
            }
            let centre = dy.atan2(dx);
            let half = (r / d).asin();
            let lo = ((centre - half) / width).floor() as i64 - 1;
            let hi = ((centre + half) / width).floor() as i64 + 1;
            for k in lo..=hi {
                buckets[k.rem_euclid(SECTORS as i64) as usize].push(i as u32);
            }
        }
        Self { buckets }
    }

    fn candidates<'a>(&'a self, prims: &'a [&'a Primitive], dir: &Vec3) -> impl Iterator<Item = &'a Primitive> + 'a {
        let az = dir.y.atan2(dir.x);
        let vertical = dir.x.hypot(dir.y) < 1e-9;
        let k = ((az / (TAU / SECTORS as f64)).floor() as i64).rem_euclid(SECTORS as i64) as usize;
        let bucket: &'a [u32] = if vertical { &[] } else { &self.buckets[k] };
        let all = vertical.then(|| prims.iter().copied()).into_iter().flatten();
        bucket.iter().map(move |&i| prims[i as usize]).chain(all)
    }
}

/// Ray-cast hit: distance along the ray and surface reflectance.
fn cast<'a>(world: &World, prims: impl Iterator<Item = &'a Primitive>, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<(f64, f64, bool)> {
    let mut best: Option<(f64, f64, bool)> = None;
    let mut t_best = t_max;
    if dir.z < 0.0 {
        let t = -origin.z / dir.z;
        if t > 0.0 && t < t_best {
            let p = origin + dir * t;
            t_best = t;
            best = Some((t, world.ground_reflectance(p.x, p.y), false));
        }
    }
    for prim in prims {
        if let Some((t, refl)) = intersect(prim, origin, dir, t_best) {
            t_best = t;
            best = Some((t, refl, prim.retro_reflective));
        }
    }
    best
}

fn intersect(prim: &Primitive, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<(f64, f64)> {
    match &prim.shape {
        Shape::Box { base, half, yaw } => {
            let (s, c) = yaw.sin_cos();
            // world -> box frame (origin at base, z up from ground)
            let ox = origin.x - base[0];
            let oy = origin.y - base[1];
            let o = [c * ox + s * oy, -s * ox + c * oy, origin.z - half[2]];
            let d = [c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z];
            let mut t0 = 0.0f64;
            let mut t1 = t_max;
            let mut axis = usize::MAX;
            for k in 0..3 {
                if d[k].abs() < 1e-15 {
                    if o[k].abs() > half[k] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / d[k];
                let (mut a, mut b) = ((-half[k] - o[k]) * inv, (half[k] - o[k]) * inv);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t0 {
                    t0 = a;
                    axis = k;
                }
                t1 = t1.min(b);
                if t0 > t1 {
                    return None;
                }
            }
            if axis == usize::MAX || !(t0 > 0.0) || t0 >= t_max {
                return None;
            }
            let p = [o[0] + d[0] * t0, o[1] + d[1] * t0, o[2] + d[2] * t0];
            let h = p[2] + half[2];
            let u = match axis {
                0 => p[1],
                1 => p[0],
                _ => return Some((t0, prim.texture.values()[0])),
            };
            Some((t0, prim.texture.eval(u, h)))
        }
        Shape::Cylinder { base, radius, height } => {
            let ox = origin.x - base[0];
            let oy = origin.y - base[1];
            let mut hit: Option<(f64, f64)> = None;
            let a = dir.x * dir.x + dir.y * dir.y;
            if a > 1e-15 {
                let b = ox * dir.x + oy * dir.y;
                let cc = ox * ox + oy * oy - radius * radius;
                let disc = b * b - a * cc;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    if t > 0.0 && t < t_max {
                        let z = origin.z + dir.z * t;
                        if (0.0..=*height).contains(&z) {
                            let ang = (oy + dir.y * t).atan2(ox + dir.x * t);
                            hit = Some((t, prim.texture.eval(ang * radius, z)));
                        }
                    }
                }
            }
            if dir.z.abs() > 1e-15 {
                let t = (height - origin.z) / dir.z;
                let lim = hit.map_or(t_max, |h| h.0);
                if t > 0.0 && t < lim {
                    let x = ox + dir.x * t;
                    let y = oy + dir.y * t;
                    if x * x + y * y <= radius * radius {
                        hit = Some((t, prim.texture.values()[0]));
                    }
                }
            }
            hit
        }
    }
}

/// Simulates one scan from `pose` (sensor to world). Points are returned in
/// the sensor frame.
pub fn simulate_scan(
    world: &World,
    sensor: &SensorModel,
    pose: &RigidTransform,
    id: &str,
    seed: u64,
    occlusion: Option<Occlusion>,
) -> Result<SimulatedScan, SynthError> {
    let origin = pose.translation;
    if !world.contains(origin.x, origin.y) {
        return Err(SynthError::OutsideWorld(origin.x, origin.y));
    }
    let reach = sensor.max_range + 1.0;
    let prims: Vec<&Primitive> = world
        .primitives
        .iter()
        .filter(|p| {
            let b = p.shape.base();
            (b[0] - origin.x).hypot(b[1] - origin.y) <= reach + p.shape.footprint_radius()
        })
        .collect();
    let sectors = AzimuthSectors::new(&prims, &origin);
    let n_az = (TAU / sensor.azimuth_step).round() as usize;
    let rows: Vec<(usize, usize, usize)> = (0..sensor.rotations)
        .flat_map(|rot| {
            (0..sensor.sweep_offsets.len())
                .flat_map(move |sw| (0..sensor.beam_elevations.len()).map(move |beam| (rot, sw, beam)))
        })
        .collect();
    let range_noise = Normal::new(0.0, sensor.range_noise.max(0.0)).expect("finite sigma");
    let intensity_noise = Normal::new(0.0, sensor.intensity_noise.max(0.0)).expect("finite sigma");
    let rows_out: Vec<Vec<Point>> = rows
        .par_iter()
        .enumerate()
        .map(|(row_idx, &(rot, sw, beam))| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(row_idx as u64 + 1)));
            let elev = sensor.beam_elevations[beam]
                + sensor.sweep_offsets[sw]
                + if rot % 2 == 1 { sensor.rotation_elevation_shift } else { 0.0 };
            let az_shift = if rot % 2 == 1 { 0.5 * sensor.azimuth_step } else { 0.0 };
            let (se, ce) = elev.sin_cos();
            let mut pts = Vec::new();
            for k in 0..n_az {
                let az = k as f64 * sensor.azimuth_step + az_shift;
                if occlusion.is_some_and(|o| o.blocks(az)) {
                    continue;
                }
                let (sa, ca) = az.sin_cos();
                let local_dir = Vec3::new(ce * ca, ce * sa, se);
                let dir = pose.apply_vector(&local_dir);
                let Some((t, refl, retro)) = cast(world, sectors.candidates(&prims, &dir), &origin, &dir, sensor.max_range) else {
                    continue;
                };
                if t < sensor.min_range {
                    continue;
                }
                let noisy_t = t + if sensor.range_noise > 0.0 { range_noise.sample(&mut rng) } else { 0.0 };
                let true_i = if retro { refl * 2.5 } else { refl };
                let measured = sensor.response[beam].apply(true_i)
                    + if sensor.intensity_noise > 0.0 { intensity_noise.sample(&mut rng) } else { 0.0 };
                let raw = measured.round().clamp(0.0, 255.0) as u8;
                let time = rot as f64 * 0.1 + sw as f64 * 0.2 + az / TAU * 0.1;
                pts.push(Point::new(local_dir * noisy_t, raw, beam as u8, time));
            }
            pts
        })
        .collect();
    let points: Vec<Point> = rows_out.into_iter().flatten().collect();
    if points.is_empty() {
        return Err(SynthError::NoReturns(id.to_string()));
    }
    Ok(SimulatedScan {
        scan: Scan::new(id, Vec3::zeros(), points),
        pose: *pose,
    })
}

/// Open serpentine path: `lanes` parallel passes of `lane_length` joined at
/// alternating ends, sampled every `step` metres at `height`.
pub fn serpentine_trajectory(lanes: usize, lane_length: f64, lane_spacing: f64, step: f64, height: f64) -> Vec<Vec3> {
    let mut corners = Vec::new();
    let y0 = -(lanes.saturating_sub(1) as f64) * lane_spacing / 2.0;
    for lane in 0..lanes {
        let y = y0 + lane as f64 * lane_spacing;
        let (a, b) = if lane % 2 == 0 {
            (-lane_length / 2.0, lane_length / 2.0)
        } else {
            (lane_length / 2.0, -lane_length / 2.0)
        };
        corners.push(Vec3::new(a, y, height));
        corners.push(Vec3::new(b, y, height));
    }
    resample_polyline(&corners, step)
}

/// Points every `step` metres of arc length along a polyline, including the start.
pub fn resample_polyline(corners: &[Vec3], step: f64) -> Vec<Vec3> {
    let mut out = Vec::new();
    if corners.is_empty() {
        return out;
    }
    out.push(corners[0]);
    let mut carry = 0.0;
    for w in corners.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if len == 0.0 {
            continue;
        }
        let mut s = step - carry;
        while s <= len + 1e-9 {
            out.push(w[0] + seg * (s / len));
            s += step;
        }
        carry = len - (s - step);
    }
    out
}

/// Point at arc length `s` along a polyline (clamped to its ends), with the
/// local heading.
pub fn point_at_arc(path: &[Vec3], s: f64) -> (Vec3, f64) {
    let mut acc = 0.0;
    for w in path.windows(2) {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if len > 0.0 && acc + len >= s {
            let f = ((s - acc) / len).clamp(0.0, 1.0);
            return (w[0] + seg * f, seg.y.atan2(seg.x));
        }
        acc += len;
    }
    let last = *path.last().expect("non-empty path");
    let heading = if path.len() >= 2 {
        let seg = path[path.len() - 1] - path[path.len() - 2];
        seg.y.atan2(seg.x)
    } else {
        0.0
    };
    (last, heading)
}

pub fn path_length(path: &[Vec3]) -> f64 {
    path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Ground-truth sidecar: `scan_id qw qx qy qz tx ty tz` per line.
/// One `x y z` line per trajectory vertex.
pub fn format_trajectory(path: &[Vec3]) -> String {
    let mut out = String::new();
    for p in path {
        let _ = writeln!(out, "{} {} {}", p.x, p.y, p.z);
    }
    out
}

pub fn parse_trajectory(text: &str, path: &str) -> Result<Vec<Vec3>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = t
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SynthError::Parse {
                path: path.to_string(),
                msg: format!("line {}: {e}", i + 1),
            })?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(SynthError::Parse {
                path: path.to_string(),
                msg: format!("line {}: expected three finite numbers", i + 1),
            });
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

pub fn format_ground_truth(entries: &[(String, RigidTransform)]) -> String {
    let mut out = String::from("# scan_id qw qx qy qz tx ty tz\n");
    for (id, pose) in entries {
        let q = pose.quaternion();
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            id, q.w, q.i, q.j, q.k, pose.translation.x, pose.translation.y, pose.translation.z
        );
    }
    out
}

pub fn parse_ground_truth(text: &str, path: &str) -> Result<Vec<(String, RigidTransform)>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        let err = |msg: String| SynthError::Parse {
            path: path.to_string(),
            msg: format!("line {}: {msg}", i + 1),
        };
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let v: Vec<f64> = f[1..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("bad number '{s}'"))))
            .collect::<Result<_, _>>()?;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
        out.push((f[0].to_string(), RigidTransform::from_quaternion(&q, Vec3::new(v[4], v[5], v[6]))));
    }
    Ok(out)
}
