//! Batched keypoint voting followed by candidate verification.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cloud::Scan;
use crate::descriptors::{describe_cells, match_nndr, DescriptorError, DescriptorKind, SHOT_LEN};
use crate::geometry::Vec3;
use crate::mapdb::PlaceDatabase;
use crate::pipeline::{prepare_scan, PipelineError, PreparedCloud};
use crate::registration::{verify_candidate, PlaceFeatures, RegistrationError, RegistrationParams, RigidTransform, ScanFeatures, Verification};
use crate::voting::{update_posterior, PlacePosterior, ProbabilityTable, VotingError, VotingParams};

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error("scan has no keypoints")]
    NoKeypoints,
    #[error("all {} candidates were rejected", .0.candidates.len())]
    AllCandidatesRejected(Box<LocalizationResult>),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Voting(#[from] VotingError),
}

/// Wall time per stage; file I/O is not included.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub preprocess: Duration,
    pub describe: Duration,
    pub matching: Duration,
    pub verify: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.preprocess + self.describe + self.matching + self.verify
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub keypoints_consumed: usize,
    pub best_place: usize,
    pub best_probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateOutcome {
    pub place: usize,
    pub probability: f64,
    pub result: Result<Verification, RegistrationError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationResult {
    /// Scan frame to map frame, when a candidate was accepted.
    pub pose: Option<RigidTransform>,
    pub place: Option<usize>,
    pub residual: Option<f64>,
    pub posterior: PlacePosterior,
    pub trace: Vec<TraceEntry>,
    pub keypoints_consumed: usize,
    pub total_keypoints: usize,
    /// True when voting stopped on the posterior threshold.
    pub threshold_hit: bool,
    pub candidates: Vec<CandidateOutcome>,
    pub timings: StageTimings,
}

impl LocalizationResult {
    pub fn accepted(&self) -> bool {
        self.pose.is_some()
    }
}

/// Lazily filled SHOT rows of every scan keypoint.
struct ScanShot {
    rows: Vec<Option<Vec<f32>>>,
}

/// Localizes a raw scan against the database. The scan is cropped,
/// calibrated with the database table and voxelized using the database
/// parameters.
pub fn localize(
    scan: &Scan,
    db: &PlaceDatabase,
    table: &ProbabilityTable,
    voting: &VotingParams,
    registration: &RegistrationParams,
    seed: u64,
) -> Result<LocalizationResult, LocalizeError> {
    let t0 = Instant::now();
    let prepared = prepare_scan(scan, &db.calibration, &db.params)?;
    let preprocess = t0.elapsed();
    let mut result = localize_prepared(&prepared, db, table, voting, registration, seed);
    match &mut result {
        Ok(r) => r.timings.preprocess = preprocess,
        Err(LocalizeError::AllCandidatesRejected(r)) => r.timings.preprocess = preprocess,
        Err(_) => {}
    }
    result
}

pub fn localize_prepared(
    prepared: &PreparedCloud,
    db: &PlaceDatabase,
    table: &ProbabilityTable,
    voting: &VotingParams,
    registration: &RegistrationParams,
    seed: u64,
) -> Result<LocalizationResult, LocalizeError> {
    if voting.batch_size == 0 || voting.k_candidates == 0 {
        return Err(VotingError::InvalidParameter("batch_size and k_candidates must be positive".into()).into());
    }
    let n_kp = prepared.keypoints.len();
    if n_kp == 0 {
        return Err(LocalizeError::NoKeypoints);
    }
    if table.num_places != db.num_places() {
        return Err(VotingError::DimensionMismatch {
            expected: db.num_places(),
            found: table.num_places,
        }
        .into());
    }
    let radius = db.params.descriptor_radius;
    let surface = &prepared.surface;
    let mut order: Vec<usize> = (0..n_kp).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut timings = StageTimings::default();
    let mut posterior = PlacePosterior::uniform(db.num_places());
    let mut trace = Vec::new();
    let mut shot = ScanShot { rows: vec![None; n_kp] };
    let mut consumed = 0;
    let mut threshold_hit = false;
    for batch in order.chunks(voting.batch_size) {
        let t = Instant::now();
        let cells: Vec<usize> = batch.iter().map(|&k| prepared.keypoints[k].cell).collect();
        let descs = describe_cells(surface, &cells, DescriptorKind::Ishot, radius);
        let mut rows = Vec::new();
        for (&k, d) in batch.iter().zip(&descs) {
            if d.usable {
                let row = d.to_f32();
                shot.rows[k] = Some(row[..SHOT_LEN].to_vec());
                rows.push(row);
            }
        }
        timings.describe += t.elapsed();

        let t = Instant::now();
        let votes = match_nndr(&rows, &db.index)?;
        update_posterior(&mut posterior, &votes, table)?;
        timings.matching += t.elapsed();

        consumed += batch.len();
        let probs = posterior.probabilities();
        let best = posterior.ranking()[0];
        trace.push(TraceEntry {
            keypoints_consumed: consumed,
            best_place: best,
            best_probability: probs[best],
        });
        if probs[best] >= voting.xi {
            threshold_hit = true;
            break;
        }
    }

    // candidates in posterior order; the first is the threshold winner
    let probs = posterior.probabilities();
    let ranking = posterior.ranking();
    let t = Instant::now();
    let (scan_rows, scan_kps) = complete_shot(prepared, &mut shot, radius);
    let scan_features = ScanFeatures {
        cloud: &surface.cloud,
        keypoints: &scan_kps,
        shot: &scan_rows,
    };
    let mut candidates = Vec::new();
    let mut accepted = None;
    for &place in ranking.iter().take(voting.k_candidates) {
        let p = &db.places[place];
        let place_index = db.place_shot_index(place);
        let place_kps: Vec<Vec3> = p.keypoints.iter().map(|k| k.position).collect();
        let features = PlaceFeatures {
            surface: &p.surface,
            keypoints: &place_kps,
            shot: &place_index,
        };
        let outcome = verify_candidate(&scan_features, &features, registration);
        let ok = outcome.is_ok();
        candidates.push(CandidateOutcome {
            place,
            probability: probs[place],
            result: outcome,
        });
        if ok {
            accepted = Some(candidates.len() - 1);
            break;
        }
    }
    timings.verify = t.elapsed();

    let (pose, place, residual) = match accepted {
        Some(i) => {
            let v = candidates[i].result.as_ref().expect("accepted candidate");
            (Some(v.transform), Some(candidates[i].place), Some(v.icp.residual))
        }
        None => (None, None, None),
    };
    let result = LocalizationResult {
        pose,
        place,
        residual,
        posterior,
        trace,
        keypoints_consumed: consumed,
        total_keypoints: n_kp,
        threshold_hit,
        candidates,
        timings,
    };
    if result.accepted() {
        Ok(result)
    } else {
        Err(LocalizeError::AllCandidatesRejected(Box::new(result)))
    }
}

/// SHOT rows for all scan keypoints: rows already cut from voting ISHOT
/// descriptors are reused, the rest are computed now.
fn complete_shot(prepared: &PreparedCloud, shot: &mut ScanShot, radius: f64) -> (Vec<Vec<f32>>, Vec<Vec3>) {
    let missing: Vec<usize> = (0..shot.rows.len()).filter(|&k| shot.rows[k].is_none()).collect();
    let cells: Vec<usize> = missing.iter().map(|&k| prepared.keypoints[k].cell).collect();
    let descs = describe_cells(&prepared.surface, &cells, DescriptorKind::Shot, radius);
    for (&k, d) in missing.iter().zip(descs) {
        if d.usable {
            shot.rows[k] = Some(d.to_f32());
        }
    }
    let mut rows = Vec::new();
    let mut kps = Vec::new();
    for (k, r) in shot.rows.iter().enumerate() {
        if let Some(r) = r {
            rows.push(r.clone());
            kps.push(prepared.keypoints[k].position);
        }
    }
    (rows, kps)
}
