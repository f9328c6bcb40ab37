use std::sync::OnceLock;

use lpr_core::descriptors::{describe_cells, DescriptorIndex, DescriptorKind};
use lpr_core::eval::{eval_pipeline, scans_csv};
use lpr_core::geometry::Vec3;
use lpr_core::localize::{localize, LocalizeError};
use lpr_core::mapdb::PlaceDatabase;
use lpr_core::params::PipelineParams;
use lpr_core::pipeline::prepare_scan;
use lpr_core::registration::{verify_candidate, PlaceFeatures, RegistrationParams, ScanFeatures};
use lpr_core::scenario::{fit_voting_model, posed, QuerySpec, Scenario, ScenarioParams};
use lpr_core::synth::{SimulatedScan, WorldParams};
use lpr_core::voting::{ProbabilityTable, VotingParams};

struct Fixture {
    db: PlaceDatabase,
    table: ProbabilityTable,
    queries: Vec<SimulatedScan>,
}

fn small_params() -> ScenarioParams {
    ScenarioParams {
        world: WorldParams {
            extent: 160.0,
            num_landmarks: 40,
            num_clutter: 150,
            ..WorldParams::default()
        },
        lanes: 1,
        lane_length: 100.0,
        ..ScenarioParams::default()
    }
}

/// One straight 100 m lane: 11 places, 8 queries at the place centres.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let scenario = Scenario::new(3, small_params()).unwrap();
        let pp = PipelineParams::default();
        let scans = scenario.map_scans().unwrap();
        let calib = scenario.calibrate(&scans, &pp).unwrap();
        let db = scenario.build_database(&scans, &calib, &pp).unwrap();
        let train = scenario.training_scans(8, 17).unwrap();
        let model = fit_voting_model(&db, &train).unwrap();
        let table = db.probability_table(&model).unwrap();
        let queries = scenario
            .queries(
                &db,
                &QuerySpec {
                    count: 8,
                    occlusion: None,
                    offset: 0.0,
                    seed: 5,
                },
            )
            .unwrap();
        Fixture {
            db,
            table,
            queries,
        }
    })
}

#[test]
fn queries_localize_near_truth() {
    let f = fixture();
    assert_eq!(f.db.num_places(), 11);
    let report = eval_pipeline(
        "small",
        &f.db,
        &f.table,
        &posed(&f.queries),
        &VotingParams::default(),
        &RegistrationParams::default(),
        3.0,
        1,
    );
    assert!(report.success_rate() >= 0.75, "{:?}", report.outcomes);
    for o in report.outcomes.iter().filter(|o| o.success) {
        assert!(o.translation_error.unwrap() <= 3.0);
        assert!(o.keypoints_consumed <= o.total_keypoints);
    }
    let csv = scans_csv(std::slice::from_ref(&report));
    assert_eq!(csv.lines().count(), 1 + f.queries.len());
}

#[test]
fn zero_threshold_stops_after_one_batch() {
    let f = fixture();
    let voting = VotingParams {
        xi: 0.0,
        ..VotingParams::default()
    };
    let r = match localize(&f.queries[0].scan, &f.db, &f.table, &voting, &RegistrationParams::default(), 4) {
        Ok(r) => r,
        Err(LocalizeError::AllCandidatesRejected(r)) => *r,
        Err(e) => panic!("{e}"),
    };
    assert!(r.threshold_hit);
    assert_eq!(r.trace.len(), 1);
    assert_eq!(r.keypoints_consumed, voting.batch_size.min(r.total_keypoints));
}

#[test]
fn same_seed_same_result() {
    let f = fixture();
    let run = |seed| {
        let mut r = localize(&f.queries[1].scan, &f.db, &f.table, &VotingParams::default(), &RegistrationParams::default(), seed).unwrap();
        r.timings = Default::default();
        r
    };
    assert_eq!(run(9), run(9));
}

#[test]
fn scan_from_another_world_is_rejected() {
    let f = fixture();
    let other = Scenario::new(99, small_params()).unwrap();
    let pose = other.map_poses()[4];
    let scan = other.simulate("elsewhere", &pose, 1, None).unwrap().scan;
    match localize(&scan, &f.db, &f.table, &VotingParams::default(), &RegistrationParams::default(), 2) {
        Err(LocalizeError::AllCandidatesRejected(r)) => {
            assert_eq!(r.candidates.len(), VotingParams::default().k_candidates);
            assert!(r.pose.is_none());
        }
        other => panic!("expected rejection, got {other:?}"),
    }
}

#[test]
fn distant_places_fail_verification() {
    let f = fixture();
    let params = &f.db.params;
    let (mut tried, mut rejected) = (0, 0);
    for q in &f.queries {
        let prepared = prepare_scan(&q.scan, &f.db.calibration, params).unwrap();
        let descs = describe_cells(&prepared.surface, &prepared.keypoint_cells(), DescriptorKind::Shot, params.descriptor_radius);
        let (mut kps, mut rows) = (Vec::new(), Vec::new());
        for (kp, d) in prepared.keypoints.iter().zip(&descs) {
            if d.usable {
                kps.push(kp.position);
                rows.push(d.to_f32());
            }
        }
        let scan = ScanFeatures {
            cloud: &prepared.surface.cloud,
            keypoints: &kps,
            shot: &rows,
        };
        for (i, p) in f.db.places.iter().enumerate() {
            if (p.center - q.pose.translation).norm() < 25.0 {
                continue;
            }
            let index: DescriptorIndex = f.db.place_shot_index(i);
            let place_kps: Vec<Vec3> = p.keypoints.iter().map(|k| k.position).collect();
            let place = PlaceFeatures {
                surface: &p.surface,
                keypoints: &place_kps,
                shot: &index,
            };
            tried += 1;
            if verify_candidate(&scan, &place, &RegistrationParams::default()).is_err() {
                rejected += 1;
            }
        }
    }
    assert!(tried > 40);
    assert!(rejected as f64 >= 0.95 * tried as f64, "{rejected}/{tried}");
}
