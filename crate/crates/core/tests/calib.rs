use lpr_core::calib::{apply_calibration, cross_beam_variance, fit_calibration, CalibError, CalibrationParams, CalibrationTable};
use lpr_core::cloud::{Point, Scan};
use lpr_core::geometry::Vec3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ground cells 0.25 m apart, each seen several times by every beam in
/// `responses`, with a random true intensity in `[5, 95]`.
fn shared_cells<F: Fn(usize, f64) -> f64>(seed: u64, beams: usize, responses: F) -> Scan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    for cell in 0..600 {
        let truth: f64 = rng.random_range(5.0..95.0);
        let (x, y) = ((cell % 30) as f64 * 0.25 + 0.125, (cell / 30) as f64 * 0.25 + 0.125);
        for beam in 0..beams {
            for k in 0..3 {
                let raw = responses(beam, truth).round().clamp(0.0, 255.0) as u8;
                let jitter = 0.01 * k as f64;
                pts.push(Point::new(Vec3::new(x + jitter, y, 0.0), raw, beam as u8, 0.0));
            }
        }
    }
    Scan::new("cells", Vec3::new(3.0, 2.5, 1.0), pts)
}

#[test]
fn distorted_beams_agree_after_calibration() {
    let scan = shared_cells(11, 2, |beam, i| if beam == 0 { 0.8 * i } else { (1.2 * i).min(255.0) });
    let params = CalibrationParams::default();
    let fit = fit_calibration(std::slice::from_ref(&scan), &params).unwrap();
    let before = cross_beam_variance(std::slice::from_ref(&scan), params.voxel_size, 30.0, |_, raw| raw as f64).unwrap();
    let after = cross_beam_variance(std::slice::from_ref(&scan), params.voxel_size, 30.0, |b, raw| fit.table.lookup(b, raw)).unwrap();
    assert!(after * 5.0 <= before, "before {before} after {after}");
}

#[test]
fn objective_never_increases() {
    let scan = shared_cells(5, 3, |beam, i| [0.7 * i + 4.0, i, (1.3 * i).min(120.0)][beam]);
    let fit = fit_calibration(&[scan], &CalibrationParams::default()).unwrap();
    assert!(fit.objective.len() >= 2);
    for w in fit.objective.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.objective);
    }
}

#[test]
fn fitted_tables_are_monotone_and_bounded() {
    let scan = shared_cells(8, 4, |beam, i| (0.6 + 0.2 * beam as f64) * i + beam as f64);
    let fit = fit_calibration(&[scan], &CalibrationParams::default()).unwrap();
    for row in &fit.table.mapping {
        for w in row.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!(row.iter().all(|v| (0.0..=255.0).contains(v)));
    }
}

#[test]
fn single_beam_data_has_no_overlap() {
    let scan = shared_cells(1, 1, |_, i| i);
    assert!(matches!(
        fit_calibration(&[scan], &CalibrationParams::default()),
        Err(CalibError::NoCrossBeamOverlap)
    ));
}

#[test]
fn file_round_trip() {
    let scan = shared_cells(3, 2, |beam, i| if beam == 0 { 0.9 * i } else { i + 3.0 });
    let table = fit_calibration(&[scan], &CalibrationParams::default()).unwrap().table;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("calibration.txt");
    table.save(&path).unwrap();
    assert_eq!(CalibrationTable::load(&path).unwrap(), table);
}

#[test]
fn rescaling_examples() {
    let t = CalibrationTable::identity(16, 30.0);
    let pts = vec![
        Point::new(Vec3::new(1.0, 0.0, 0.0), 100, 0, 0.0),
        Point::new(Vec3::new(1.0, 0.0, 0.0), 255, 1, 0.0),
        Point::new(Vec3::new(1.0, 0.0, 0.0), 50, 2, 0.0),
    ];
    let out = apply_calibration(&Scan::new("s", Vec3::zeros(), pts), &t).unwrap();
    let v: Vec<f64> = out.points.iter().map(|p| p.calibrated_intensity.unwrap()).collect();
    assert_eq!(v, vec![1.0, 1.0, 0.5]);

    let bad = Scan::new("s", Vec3::zeros(), vec![Point::new(Vec3::new(1.0, 0.0, 0.0), 10, 3, 0.0)]);
    assert!(matches!(
        apply_calibration(&bad, &CalibrationTable::identity(2, 30.0)),
        Err(CalibError::BeamIdOutOfRange { beam: 3, .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_response_recovers_identity(seed in 0u64..1000, beams in 2usize..6) {
        let scan = shared_cells(seed, beams, |_, i| i);
        let fit = fit_calibration(&[scan], &CalibrationParams::default()).unwrap();
        for (beam, row) in fit.table.mapping.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                if fit.observed[beam][a] {
                    prop_assert!((v - a as f64).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn calibrated_values_are_unit_range_and_monotone(
        gain in 0.2..3.0f64,
        offset in -30.0..30.0f64,
        ranges in prop::collection::vec(0.5..60.0f64, 256),
    ) {
        let mut table = CalibrationTable::identity(1, 30.0);
        for (a, v) in table.mapping[0].iter_mut().enumerate() {
            *v = (gain * a as f64 + offset).clamp(0.0, 255.0);
        }
        let pts: Vec<Point> = (0..256u32)
            .map(|a| Point::new(Vec3::new(ranges[a as usize], 0.0, 0.0), a as u8, 0, 0.0))
            .collect();
        let out = apply_calibration(&Scan::new("s", Vec3::zeros(), pts), &table).unwrap();
        let mut prev_near = f64::NEG_INFINITY;
        for p in &out.points {
            let c = p.calibrated_intensity.unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(p.uncalibrated, p.range > 30.0);
            if !p.uncalibrated {
                prop_assert!(c >= prev_near);
                prev_near = c;
            }
        }
    }
}

#[test]
fn relabelled_beams_give_identical_intensities() {
    let scan = shared_cells(4, 3, |beam, i| [0.7 * i + 4.0, i, (1.3 * i).min(120.0)][beam]);
    let table = fit_calibration(std::slice::from_ref(&scan), &CalibrationParams::default()).unwrap().table;
    // permute beam ids in the data and the rows of the table alike
    let perm = [2u8, 0, 1];
    let mut relabelled = scan.clone();
    for p in &mut relabelled.points {
        p.beam_id = perm[p.beam_id as usize];
    }
    let mut permuted = table.clone();
    for (old, &new) in perm.iter().enumerate() {
        permuted.mapping[new as usize] = table.mapping[old];
    }
    let a = apply_calibration(&scan, &table).unwrap();
    let b = apply_calibration(&relabelled, &permuted).unwrap();
    for (x, y) in a.points.iter().zip(&b.points) {
        assert_eq!(x.calibrated_intensity, y.calibrated_intensity);
    }
}
