//! Seeded end-to-end experiments on synthetic worlds: map survey, place
//! database, voting training data and query sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::calib::{fit_calibration, CalibError, CalibrationTable};
use crate::cloud::{CloudError, Scan, VoxelCloud};
use crate::descriptors::{describe_cells, match_nndr, DescriptorError, DescriptorKind};
use crate::geometry::{RigidTransform, Vec3};
use crate::mapdb::{build_database, merge_survey, partition_places, place_clouds, windowed_place_clouds, MapDbError, PlaceDatabase};
use crate::params::{parse, ParamError, PipelineParams};
use crate::pipeline::{prepare_scan, PipelineError};
use crate::synth::{
    generate_world, path_length, point_at_arc, serpentine_trajectory, simulate_scan, Occlusion, SensorModel, SimulatedScan, SynthError,
    World, WorldParams,
};
use crate::voting::{fit_precision_model, PrecisionModel, VotingError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    MapDb(#[from] MapDbError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Voting(#[from] VotingError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioParams {
    pub world: WorldParams,
    pub lanes: usize,
    pub lane_length: f64,
    pub lane_spacing: f64,
    pub sensor_height: f64,
    /// Survey scans are taken every `map_scan_spacing` metres of arc,
    /// starting `map_scan_offset` into the path.
    pub map_scan_spacing: f64,
    pub map_scan_offset: f64,
    /// Per-beam response distortion of the survey and query sensor.
    pub distorted: bool,
    /// Survey scans are merged at this cell size before places are cut.
    pub map_voxel_size: f64,
    /// Each place only takes measurements from survey scans recorded within
    /// this distance (m) of its centre; `None` cuts every place from the
    /// full merged map.
    pub place_window: Option<f64>,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            world: WorldParams::default(),
            lanes: 2,
            lane_length: 180.0,
            lane_spacing: 60.0,
            sensor_height: 1.8,
            map_scan_spacing: 10.0,
            map_scan_offset: 0.0,
            distorted: false,
            map_voxel_size: 0.2,
            place_window: Some(5.0),
        }
    }
}

impl ScenarioParams {
    /// Every parameter as `(key, value)`; keys are prefixed `scenario.` or
    /// `world.` so they can share a config file with the pipeline keys.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let w = &self.world;
        vec![
            ("scenario.lanes", self.lanes.to_string()),
            ("scenario.lane_length", self.lane_length.to_string()),
            ("scenario.lane_spacing", self.lane_spacing.to_string()),
            ("scenario.sensor_height", self.sensor_height.to_string()),
            ("scenario.map_scan_spacing", self.map_scan_spacing.to_string()),
            ("scenario.map_scan_offset", self.map_scan_offset.to_string()),
            ("scenario.distorted", self.distorted.to_string()),
            ("scenario.map_voxel_size", self.map_voxel_size.to_string()),
            (
                "scenario.place_window",
                self.place_window.map_or_else(|| "none".to_string(), |w| w.to_string()),
            ),
            ("world.extent", w.extent.to_string()),
            ("world.num_landmarks", w.num_landmarks.to_string()),
            ("world.min_separation", w.min_separation.to_string()),
            ("world.ground_tile", w.ground_tile.to_string()),
            ("world.corridor_width", w.corridor_width.to_string()),
            ("world.retro_fraction", w.retro_fraction.to_string()),
            ("world.num_clutter", w.num_clutter.to_string()),
            ("world.clutter_separation", w.clutter_separation.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ParamError> {
        let w = &mut self.world;
        match key {
            "scenario.lanes" => self.lanes = parse(key, value)?,
            "scenario.lane_length" => self.lane_length = parse(key, value)?,
            "scenario.lane_spacing" => self.lane_spacing = parse(key, value)?,
            "scenario.sensor_height" => self.sensor_height = parse(key, value)?,
            "scenario.map_scan_spacing" => self.map_scan_spacing = parse(key, value)?,
            "scenario.map_scan_offset" => self.map_scan_offset = parse(key, value)?,
            "scenario.distorted" => self.distorted = parse(key, value)?,
            "scenario.map_voxel_size" => self.map_voxel_size = parse(key, value)?,
            "scenario.place_window" => {
                self.place_window = match value.trim() {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "world.extent" => w.extent = parse(key, value)?,
            "world.num_landmarks" => w.num_landmarks = parse(key, value)?,
            "world.min_separation" => w.min_separation = parse(key, value)?,
            "world.ground_tile" => w.ground_tile = parse(key, value)?,
            "world.corridor_width" => w.corridor_width = parse(key, value)?,
            "world.retro_fraction" => w.retro_fraction = parse(key, value)?,
            "world.num_clutter" => w.num_clutter = parse(key, value)?,
            "world.clutter_separation" => w.clutter_separation = parse(key, value)?,
            _ => return Err(ParamError::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub seed: u64,
    pub params: ScenarioParams,
    pub world: World,
    pub trajectory: Vec<Vec3>,
    pub sensor: SensorModel,
}

/// A query set: poses with optional blanked sectors.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySpec {
    pub count: usize,
    /// Width (rad) of a blanked azimuth sector at a random start.
    pub occlusion: Option<f64>,
    /// Queries sit this far (m) from the place centre in a random direction.
    pub offset: f64,
    pub seed: u64,
}

/// `(scan, ground-truth pose)` pairs.
pub fn posed(scans: &[SimulatedScan]) -> Vec<(Scan, RigidTransform)> {
    scans.iter().map(|s| (s.scan.clone(), s.pose)).collect()
}

fn mix(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ stream.wrapping_mul(0xd1b5_4a32_d192_ed03)
}

impl Scenario {
    pub fn new(seed: u64, params: ScenarioParams) -> Result<Self, ScenarioError> {
        let trajectory = serpentine_trajectory(params.lanes, params.lane_length, params.lane_spacing, 1.0, params.sensor_height);
        let world = generate_world(seed, &params.world, &trajectory)?;
        Ok(Self::from_parts(seed, params, world, trajectory))
    }

    /// A scenario around an existing world, e.g. one loaded from disk.
    pub fn from_parts(seed: u64, params: ScenarioParams, world: World, trajectory: Vec<Vec3>) -> Self {
        let sensor = if params.distorted {
            SensorModel::with_distortion(mix(seed, 1))
        } else {
            SensorModel::ideal()
        };
        Self {
            seed,
            params,
            world,
            trajectory,
            sensor,
        }
    }

    pub fn simulate(&self, id: &str, pose: &RigidTransform, seed: u64, occlusion: Option<Occlusion>) -> Result<SimulatedScan, ScenarioError> {
        Ok(simulate_scan(&self.world, &self.sensor, pose, id, seed, occlusion)?)
    }

    pub fn map_poses(&self) -> Vec<RigidTransform> {
        let len = path_length(&self.trajectory);
        let step = self.params.map_scan_spacing;
        let mut out = Vec::new();
        let mut s = self.params.map_scan_offset;
        while s <= len {
            let (p, heading) = point_at_arc(&self.trajectory, s);
            out.push(RigidTransform::from_yaw(heading, p));
            s += step;
        }
        out
    }

    pub fn map_scans(&self) -> Result<Vec<SimulatedScan>, ScenarioError> {
        self.map_poses()
            .iter()
            .enumerate()
            .map(|(i, pose)| self.simulate(&format!("map_{i:03}"), pose, mix(self.seed, 1000 + i as u64), None))
            .collect()
    }

    /// Calibration from survey scans placed in the world frame by their
    /// ground-truth poses.
    pub fn calibrate(&self, scans: &[SimulatedScan], pipeline: &PipelineParams) -> Result<CalibrationTable, ScenarioError> {
        let world_scans: Vec<Scan> = scans.iter().map(|s| s.scan.transformed(&s.pose)).collect();
        Ok(fit_calibration(&world_scans, &pipeline.calib)?.table)
    }

    /// Merges calibrated survey scans into one world-frame cloud.
    pub fn map_cloud(&self, scans: &[SimulatedScan], table: &CalibrationTable, pipeline: &PipelineParams) -> Result<VoxelCloud, ScenarioError> {
        Ok(merge_survey(&posed(scans), table, pipeline.max_range, self.params.map_voxel_size)?)
    }

    pub fn build_database(
        &self,
        scans: &[SimulatedScan],
        table: &CalibrationTable,
        pipeline: &PipelineParams,
    ) -> Result<PlaceDatabase, ScenarioError> {
        let places = match self.params.place_window {
            None => {
                let map = self.map_cloud(scans, table, pipeline)?;
                place_clouds(&map, &self.trajectory, pipeline)?
            }
            Some(window) => windowed_place_clouds(
                &posed(scans),
                &self.trajectory,
                table,
                pipeline,
                self.params.map_voxel_size,
                window,
            )?,
        };
        Ok(build_database(places, table, pipeline)?)
    }

    /// Query scans near place centres, facing random directions.
    pub fn queries(&self, db: &PlaceDatabase, spec: &QuerySpec) -> Result<Vec<SimulatedScan>, ScenarioError> {
        let centers: Vec<Vec3> = db.places.iter().map(|p| p.center).collect();
        self.queries_at(&centers, spec)
    }

    /// Place centres the trajectory yields under `pipeline`.
    pub fn place_centers(&self, pipeline: &PipelineParams) -> Result<Vec<Vec3>, ScenarioError> {
        Ok(partition_places(&[], &self.trajectory, pipeline.min_place_distance, pipeline.place_radius)?
            .into_iter()
            .map(|(c, _)| c)
            .collect())
    }

    pub fn queries_at(&self, centers: &[Vec3], spec: &QuerySpec) -> Result<Vec<SimulatedScan>, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 2));
        let n = centers.len();
        let mut out = Vec::with_capacity(spec.count);
        for q in 0..spec.count {
            // spread queries evenly over the places
            let place = (q * n) / spec.count.max(1);
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let dir = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let occ_start = rng.random_range(0.0..std::f64::consts::TAU);
            let c = centers[place];
            let pos = Vec3::new(c.x + spec.offset * dir.cos(), c.y + spec.offset * dir.sin(), c.z);
            let pose = RigidTransform::from_yaw(yaw, pos);
            let occlusion = spec.occlusion.map(|width| Occlusion { start: occ_start, width });
            out.push(self.simulate(&format!("query_{q:03}"), &pose, mix(spec.seed, 3000 + q as u64), occlusion)?);
        }
        Ok(out)
    }

    /// Scans at random arc positions along the trajectory.
    pub fn training_scans(&self, count: usize, seed: u64) -> Result<Vec<SimulatedScan>, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 4));
        let len = path_length(&self.trajectory);
        (0..count)
            .map(|i| {
                let s = rng.random_range(0.0..len);
                let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let (p, _) = point_at_arc(&self.trajectory, s);
                let pose = RigidTransform::from_yaw(yaw, p);
                self.simulate(&format!("train_{i:03}"), &pose, mix(seed, 5000 + i as u64), None)
            })
            .collect()
    }
}

/// `(τ, distance from the voted place centre to the true position)` for
/// every described keypoint of every scan.
pub fn training_votes(db: &PlaceDatabase, scans: &[SimulatedScan]) -> Result<Vec<(f64, f64)>, ScenarioError> {
    let per_scan: Vec<Vec<(f64, f64)>> = scans
        .par_iter()
        .map(|s| -> Result<Vec<(f64, f64)>, ScenarioError> {
            let prepared = prepare_scan(&s.scan, &db.calibration, &db.params)?;
            let descs = describe_cells(
                &prepared.surface,
                &prepared.keypoint_cells(),
                DescriptorKind::Ishot,
                db.params.descriptor_radius,
            );
            let rows: Vec<Vec<f32>> = descs.iter().filter(|d| d.usable).map(|d| d.to_f32()).collect();
            let votes = match_nndr(&rows, &db.index)?;
            let truth = s.pose.translation;
            Ok(votes
                .iter()
                .map(|v| (v.tau, (db.places[v.place].center - truth).norm()))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(per_scan.into_iter().flatten().collect())
}

pub fn fit_voting_model(db: &PlaceDatabase, scans: &[SimulatedScan]) -> Result<PrecisionModel, ScenarioError> {
    let votes = training_votes(db, scans)?;
    let v = &db.params.voting;
    Ok(fit_precision_model(&votes, &v.tau_edges, db.d_max(), v.min_bin_samples)?)
}
