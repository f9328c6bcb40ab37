use lpr_core::descriptors::VoteMatch;
use lpr_core::voting::{
    build_probability_table, default_tau_edges, fit_mixture, fit_precision_model, mixture_cdf, mixture_pdf, update_posterior, BinFit, PlacePosterior,
    PrecisionModel, ProbabilityTable, VotingError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Half-normal / uniform mixture written out independently of the library.
fn direct_pdf(d: f64, sigma: f64, lambda: f64, d_max: f64) -> f64 {
    let hn = (2.0 / std::f64::consts::PI).sqrt() / sigma * (-0.5 * (d / sigma).powi(2)).exp();
    lambda * hn + (1.0 - lambda) / d_max
}

fn sample_mixture(seed: u64, n: usize, sigma: f64, lambda: f64, d_max: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).unwrap();
    (0..n)
        .map(|_| {
            if rng.random_bool(lambda) {
                f64::abs(normal.sample(&mut rng))
            } else {
                rng.random_range(0.0..d_max)
            }
        })
        .collect()
}

fn single_bin_model(sigma: f64, lambda: f64, d_max: f64) -> PrecisionModel {
    PrecisionModel {
        tau_edges: vec![0.0, 1.0],
        d_max,
        bins: vec![BinFit {
            sigma,
            lambda,
            n_samples: 100,
            residual: 0.0,
            fitted: true,
        }],
    }
}

fn distance_matrix(centers: &[(f64, f64)]) -> Vec<f64> {
    let n = centers.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            d[i * n + j] = (centers[i].0 - centers[j].0).hypot(centers[i].1 - centers[j].1);
        }
    }
    d
}

fn vote(place: usize, tau: f64) -> VoteMatch {
    VoteMatch {
        query_index: 0,
        nearest: 0,
        second: 1,
        nearest_dist: tau,
        second_dist: 1.0,
        tau,
        place,
    }
}

#[test]
fn pdf_examples() {
    for d in [0.0, 1.0, 55.0, 399.0] {
        assert_eq!(mixture_pdf(d, 5.0, 0.0, 400.0).unwrap(), 1.0 / 400.0);
    }
    let peak = mixture_pdf(0.0, 5.0, 1.0, 400.0).unwrap();
    assert!((peak - 2f64.sqrt() / (5.0 * std::f64::consts::PI.sqrt())).abs() < 1e-15);
    assert!((peak - 0.15958).abs() < 1e-5);
    // the cdf is the integral of the pdf: compare against Simpson quadrature
    let (sigma, lambda, d_max) = (5.0, 1.0, 400.0);
    let h = 1e-3;
    let mut quad = 0.0;
    let steps = 10_000;
    for k in 0..steps {
        let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
        quad += h / 6.0 * (direct_pdf(a, sigma, lambda, d_max) + 4.0 * direct_pdf((a + b) / 2.0, sigma, lambda, d_max) + direct_pdf(b, sigma, lambda, d_max));
    }
    assert!((quad - mixture_cdf(10.0, sigma, lambda, d_max).unwrap()).abs() < 1e-9);
}

#[test]
fn invalid_parameters_rejected() {
    assert!(matches!(mixture_pdf(1.0, 0.0, 0.5, 10.0), Err(VotingError::InvalidParameter(_))));
    assert!(matches!(mixture_pdf(1.0, 1.0, 1.5, 10.0), Err(VotingError::InvalidParameter(_))));
    assert!(matches!(mixture_cdf(-1.0, 1.0, 0.5, 10.0), Err(VotingError::InvalidParameter(_))));
    assert!(matches!(mixture_cdf(1.0, 1.0, 0.5, 0.0), Err(VotingError::InvalidParameter(_))));
}

#[test]
fn mixture_fit_recovers_parameters() {
    let mut good = 0;
    for seed in 0..10 {
        let samples = sample_mixture(seed, 5000, 5.0, 0.7, 400.0);
        let (sigma, lambda, _) = fit_mixture(&samples, 400.0).unwrap();
        if (sigma - 5.0).abs() <= 0.5 && (lambda - 0.7).abs() <= 0.05 {
            good += 1;
        }
    }
    assert!(good >= 9, "{good}/10 seeds recovered");
}

#[test]
fn degenerate_fits() {
    let (sigma, lambda, _) = fit_mixture(&vec![0.0; 500], 400.0).unwrap();
    assert!(lambda > 0.999 && sigma < 0.2, "σ {sigma} λ {lambda}");
    let uniform = sample_mixture(3, 5000, 5.0, 0.0, 400.0);
    let (_, lambda, _) = fit_mixture(&uniform, 400.0).unwrap();
    assert!(lambda <= 0.05, "λ {lambda}");
}

#[test]
fn sparse_bins_borrow_from_neighbours() {
    // every vote lands in the lowest bin
    let votes: Vec<(f64, f64)> = sample_mixture(1, 400, 8.0, 0.6, 300.0).into_iter().map(|d| (0.3, d)).collect();
    let model = fit_precision_model(&votes, &default_tau_edges(), 300.0, 30).unwrap();
    assert!(model.bins[0].fitted);
    for b in &model.bins[1..] {
        assert!(!b.fitted);
        assert_eq!((b.sigma, b.lambda), (model.bins[0].sigma, model.bins[0].lambda));
    }
    assert!(matches!(
        fit_precision_model(&votes[..10], &default_tau_edges(), 300.0, 30),
        Err(VotingError::InsufficientSamples { .. })
    ));
}

#[test]
fn model_file_round_trip() {
    let votes: Vec<(f64, f64)> = sample_mixture(2, 2000, 6.0, 0.5, 250.0)
        .into_iter()
        .enumerate()
        .map(|(i, d)| (0.45 + (i % 11) as f64 * 0.05, d))
        .collect();
    let model = fit_precision_model(&votes, &default_tau_edges(), 250.0, 30).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.txt");
    model.save(&path).unwrap();
    // the file keeps edges, σ, λ and counts
    let back = PrecisionModel::load(&path).unwrap();
    assert_eq!((&back.tau_edges, back.d_max), (&model.tau_edges, model.d_max));
    for (a, b) in back.bins.iter().zip(&model.bins) {
        assert_eq!((a.sigma, a.lambda, a.n_samples), (b.sigma, b.lambda, b.n_samples));
    }
    assert!(std::fs::read_to_string(&path).unwrap().starts_with("# tau_bins 6 250"));
}

#[test]
fn lambda_zero_gives_exactly_uniform_rows() {
    let centers: Vec<(f64, f64)> = (0..7).map(|i| (i as f64 * 13.0, (i * i) as f64)).collect();
    let table = build_probability_table(&single_bin_model(4.0, 0.0, 200.0), &distance_matrix(&centers), &[50; 7]).unwrap();
    for v in 0..7 {
        assert!(table.row(0, v).iter().all(|&p| p == 1.0 / 7.0));
    }
}

#[test]
fn narrow_sigma_peaks_on_the_voted_place() {
    let centers: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 10.0, 0.0)).collect();
    let table = build_probability_table(&single_bin_model(0.1, 1.0, 50.0), &distance_matrix(&centers), &[20; 6]).unwrap();
    for v in 0..6 {
        let row = table.row(0, v);
        let best = (0..6).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(best, v);
    }
}

#[test]
fn line_map_matches_direct_evaluation() {
    let centers: Vec<(f64, f64)> = (0..9).map(|i| (i as f64 * 10.0, 0.0)).collect();
    let (sigma, lambda, d_max) = (10.0, 0.8, 80.0);
    let table = build_probability_table(&single_bin_model(sigma, lambda, d_max), &distance_matrix(&centers), &[40; 9]).unwrap();
    for v in 0..9 {
        let raw: Vec<f64> = (0..9).map(|i| direct_pdf(10.0 * (i as f64 - v as f64).abs(), sigma, lambda, d_max)).collect();
        let sum: f64 = raw.iter().sum();
        for (i, p) in table.row(0, v).iter().enumerate() {
            assert!((p - raw[i] / sum).abs() < 1e-12);
        }
        for i in 0..9 {
            for j in 0..9 {
                if (i as i64 - v as i64).abs() < (j as i64 - v as i64).abs() {
                    assert!(table.row(0, v)[i] > table.row(0, v)[j]);
                }
            }
        }
    }
}

#[test]
fn density_correction_favours_sparse_places() {
    let centers = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0)];
    let table = build_probability_table(&single_bin_model(4.0, 0.0, 50.0), &distance_matrix(&centers), &[10, 20, 40]).unwrap();
    // uniform mixture, so only the 1/count weights remain
    let w = [1.0 / 10.0, 1.0 / 20.0, 1.0 / 40.0];
    let s: f64 = w.iter().sum();
    for (p, wi) in table.row(0, 1).iter().zip(w) {
        assert!((p - wi / s).abs() < 1e-12);
    }
}

/// Hand-specified 5-place table with one bin.
fn hand_table() -> ProbabilityTable {
    let rows = [
        [0.40, 0.30, 0.15, 0.10, 0.05],
        [0.25, 0.35, 0.20, 0.10, 0.10],
        [0.10, 0.20, 0.40, 0.20, 0.10],
        [0.05, 0.10, 0.15, 0.60, 0.10],
        [0.05, 0.10, 0.15, 0.30, 0.40],
    ];
    let tables: Vec<f64> = rows.iter().flatten().cloned().collect();
    ProbabilityTable {
        num_places: 5,
        tau_edges: vec![0.0, 1.0],
        log_tables: vec![tables.iter().map(|p| p.ln()).collect()],
        tables: vec![tables],
    }
}

#[test]
fn two_votes_for_place_three() {
    let table = hand_table();
    let mut post = PlacePosterior::uniform(5);
    update_posterior(&mut post, &[vote(3, 0.7), vote(3, 0.9)], &table).unwrap();
    // P(i) ∝ 0.05², 0.10², 0.15², 0.60², 0.10²
    let sq = [0.0025, 0.01, 0.0225, 0.36, 0.01];
    let eta: f64 = sq.iter().sum();
    let p = post.probabilities();
    for (a, b) in p.iter().zip(sq) {
        assert!((a - b / eta).abs() < 1e-9);
    }
    assert_eq!(post.ranking()[0], 3);
    assert_eq!(post.votes_consumed, 2);
}

#[test]
fn uniform_rows_and_empty_batches_change_nothing() {
    let table = build_probability_table(&single_bin_model(4.0, 0.0, 100.0), &distance_matrix(&[(0.0, 0.0), (5.0, 0.0), (9.0, 0.0)]), &[7; 3]).unwrap();
    let mut post = PlacePosterior::uniform(3);
    update_posterior(&mut post, &[vote(0, 0.2), vote(2, 0.95), vote(1, 0.6)], &table).unwrap();
    assert_eq!(post.probabilities(), vec![1.0 / 3.0; 3]);
    let before = post.clone();
    update_posterior(&mut post, &[], &table).unwrap();
    assert_eq!(post, before);
    let mut wrong = PlacePosterior::uniform(4);
    assert!(matches!(update_posterior(&mut wrong, &[vote(0, 0.5)], &table), Err(VotingError::DimensionMismatch { .. })));
}

#[test]
fn long_vote_streams_stay_finite() {
    let table = hand_table();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut post = PlacePosterior::uniform(5);
    for _ in 0..625 {
        let batch: Vec<VoteMatch> = (0..16).map(|_| vote(rng.random_range(0..5), rng.random_range(0.0..1.0))).collect();
        update_posterior(&mut post, &batch, &table).unwrap();
        let p = post.probabilities();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert_eq!(post.votes_consumed, 10_000);
}

fn model_strategy() -> impl Strategy<Value = PrecisionModel> {
    prop::collection::vec((0.2..50.0f64, 0.0..1.0f64), 6).prop_map(|params| PrecisionModel {
        tau_edges: default_tau_edges(),
        d_max: 300.0,
        bins: params
            .into_iter()
            .map(|(sigma, lambda)| BinFit {
                sigma,
                lambda,
                n_samples: 50,
                residual: 0.0,
                fitted: true,
            })
            .collect(),
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdf_is_monotone(sigma in 0.1..100.0f64, lambda in 0.0..1.0f64, d_max in 1.0..500.0f64) {
        let mut prev = 0.0;
        prop_assert_eq!(mixture_cdf(0.0, sigma, lambda, d_max).unwrap(), 0.0);
        for k in 0..1000 {
            let c = mixture_cdf(d_max * k as f64 / 999.0, sigma, lambda, d_max).unwrap();
            prop_assert!(c >= prev);
            prev = c;
        }
        let end = lambda * libm::erf(d_max / (sigma * std::f64::consts::SQRT_2)) + (1.0 - lambda);
        prop_assert!((prev - end).abs() < 1e-12);
    }

    #[test]
    fn tables_are_row_stochastic(
        model in model_strategy(),
        centers in prop::collection::vec((-150.0..150.0f64, -150.0..150.0f64), 1..25),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts: Vec<usize> = centers.iter().map(|_| rng.random_range(1..400)).collect();
        let table = build_probability_table(&model, &distance_matrix(&centers), &counts).unwrap();
        for b in 0..model.bins.len() {
            for v in 0..centers.len() {
                let row = table.row(b, v);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if model.bins[b].lambda < 1.0 {
                    prop_assert!(row.iter().all(|&p| p > 0.0));
                }
            }
        }
    }

    #[test]
    fn vote_order_does_not_matter(
        model in model_strategy(),
        votes in prop::collection::vec((0usize..8, 0.0..1.0f64), 0..60),
        seed in 0u64..1000,
    ) {
        let centers: Vec<(f64, f64)> = (0..8).map(|i| (i as f64 * 12.0, (i % 3) as f64 * 7.0)).collect();
        let table = build_probability_table(&model, &distance_matrix(&centers), &[30, 10, 50, 30, 20, 60, 40, 30]).unwrap();
        let batch: Vec<VoteMatch> = votes.iter().map(|&(p, t)| vote(p, t)).collect();
        let mut shuffled = batch.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let mut a = PlacePosterior::uniform(8);
        let mut b = PlacePosterior::uniform(8);
        // one batch against one vote at a time
        update_posterior(&mut a, &batch, &table).unwrap();
        for v in &shuffled {
            update_posterior(&mut b, std::slice::from_ref(v), &table).unwrap();
            prop_assert!((b.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (x, y) in a.probabilities().iter().zip(b.probabilities()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
