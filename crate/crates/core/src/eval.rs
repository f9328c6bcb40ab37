//! Descriptor precision/recall benchmark and pipeline success rates.

use std::fmt::Write as _;
use std::time::Duration;

use rayon::prelude::*;
use thiserror::Error;

use crate::cloud::Scan;
use crate::descriptors::{describe_cells, match_nndr, DescriptorError, DescriptorKind};
use crate::geometry::RigidTransform;
use crate::localize::{localize, LocalizationResult, LocalizeError, StageTimings};
use crate::mapdb::PlaceDatabase;
use crate::pipeline::{prepare_scan, PipelineError};
use crate::registration::RegistrationParams;
use crate::voting::{ProbabilityTable, VotingParams};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ground truth for scan '{0}'")]
    NoGroundTruth(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

/// τ thresholds 0.5, 0.6, ..., 1.0.
pub fn default_tau_sweep() -> Vec<f64> {
    (5..=10).map(|k| k as f64 / 10.0).collect()
}

/// Pairs scans with their ground-truth poses by id.
pub fn attach_ground_truth(scans: Vec<Scan>, truth: &[(String, RigidTransform)]) -> Result<Vec<(Scan, RigidTransform)>, EvalError> {
    scans
        .into_iter()
        .map(|s| {
            let pose = truth
                .iter()
                .find(|(id, _)| *id == s.id)
                .map(|(_, p)| *p)
                .ok_or_else(|| EvalError::NoGroundTruth(s.id.clone()))?;
            Ok((s, pose))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorEval {
    pub kind: DescriptorKind,
    pub curve: Vec<PrPoint>,
    pub auc: f64,
    /// Described query keypoints over all scans.
    pub total_queries: usize,
}

/// `(τ, correct)` per described query keypoint; a vote is correct when the
/// voted place centre lies within `tp_radius` of the true position.
pub fn descriptor_votes(
    db: &PlaceDatabase,
    scans: &[(Scan, RigidTransform)],
    kind: DescriptorKind,
    tp_radius: f64,
) -> Result<Vec<(f64, bool)>, EvalError> {
    let index = db.descriptor_index(kind);
    let per_scan: Vec<Vec<(f64, bool)>> = scans
        .par_iter()
        .map(|(scan, truth)| -> Result<Vec<(f64, bool)>, EvalError> {
            let prepared = prepare_scan(scan, &db.calibration, &db.params)?;
            let descs = describe_cells(&prepared.surface, &prepared.keypoint_cells(), kind, db.params.descriptor_radius);
            let rows: Vec<Vec<f32>> = descs.iter().filter(|d| d.usable).map(|d| d.to_f32()).collect();
            let votes = match_nndr(&rows, &index)?;
            Ok(votes
                .iter()
                .map(|v| (v.tau, (db.places[v.place].center - truth.translation).norm() <= tp_radius))
                .collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(per_scan.into_iter().flatten().collect())
}

/// One point per threshold: a vote counts as a match when its τ is at most
/// the threshold. Recall is relative to all queries.
pub fn pr_curve(votes: &[(f64, bool)], thresholds: &[f64]) -> Vec<PrPoint> {
    let total = votes.len().max(1) as f64;
    thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp) = (0, 0);
            for &(tau, ok) in votes {
                if tau <= t {
                    if ok {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            PrPoint {
                tau: t,
                precision: if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 1.0 },
                recall: tp as f64 / total,
                true_positives: tp,
                false_positives: fp,
            }
        })
        .collect()
}

/// Trapezoidal area under the precision/recall polyline. The curve is
/// extended flat to recall 0 and drops to precision 0 after its largest
/// recall.
pub fn pr_auc(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve
        .iter()
        .filter(|p| p.true_positives + p.false_positives > 0)
        .map(|p| (p.recall, p.precision))
        .collect();
    if pts.is_empty() {
        return 0.0;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.insert(0, (0.0, pts[0].1));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

pub fn eval_descriptor_auc(
    db: &PlaceDatabase,
    scans: &[(Scan, RigidTransform)],
    kind: DescriptorKind,
    thresholds: &[f64],
    tp_radius: f64,
) -> Result<DescriptorEval, EvalError> {
    let votes = descriptor_votes(db, scans, kind, tp_radius)?;
    let curve = pr_curve(&votes, thresholds);
    Ok(DescriptorEval {
        kind,
        auc: pr_auc(&curve),
        curve,
        total_queries: votes.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutcome {
    pub scan_id: String,
    pub success: bool,
    pub place: Option<usize>,
    pub translation_error: Option<f64>,
    pub residual: Option<f64>,
    pub keypoints_consumed: usize,
    pub total_keypoints: usize,
    pub candidates_tried: usize,
    pub timings: StageTimings,
    /// Set when localization stopped with an error other than rejection.
    pub error: Option<String>,
}

impl ScanOutcome {
    fn from_result(scan_id: &str, truth: &RigidTransform, r: &LocalizationResult, success_radius: f64) -> Self {
        let err = r.pose.map(|p| (p.translation - truth.translation).norm());
        Self {
            scan_id: scan_id.to_string(),
            success: err.is_some_and(|e| e <= success_radius),
            place: r.place,
            translation_error: err,
            residual: r.residual,
            keypoints_consumed: r.keypoints_consumed,
            total_keypoints: r.total_keypoints,
            candidates_tried: r.candidates.len(),
            timings: r.timings,
            error: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineReport {
    pub dataset: String,
    pub outcomes: Vec<ScanOutcome>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl PipelineReport {
    pub fn success_rate(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().filter(|o| o.success).count() as f64 / self.outcomes.len() as f64
    }

    pub fn mean_ms(&self) -> f64 {
        if self.outcomes.is_empty() {
            return 0.0;
        }
        self.outcomes.iter().map(|o| ms(o.timings.total())).sum::<f64>() / self.outcomes.len() as f64
    }

    pub fn median_ms(&self) -> f64 {
        median(self.outcomes.iter().map(|o| ms(o.timings.total())).collect())
    }

    pub fn keypoints_consumed_median(&self) -> f64 {
        median(self.outcomes.iter().map(|o| o.keypoints_consumed as f64).collect())
    }

    /// Median over scans of consumed / total keypoints.
    pub fn consumed_fraction_median(&self) -> f64 {
        median(
            self.outcomes
                .iter()
                .filter(|o| o.total_keypoints > 0)
                .map(|o| o.keypoints_consumed as f64 / o.total_keypoints as f64)
                .collect(),
        )
    }
}

/// Per-scan localization seed derived from the run seed.
pub fn scan_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[allow(clippy::too_many_arguments)]
pub fn eval_pipeline(
    dataset: &str,
    db: &PlaceDatabase,
    table: &ProbabilityTable,
    scans: &[(Scan, RigidTransform)],
    voting: &VotingParams,
    registration: &RegistrationParams,
    success_radius: f64,
    seed: u64,
) -> PipelineReport {
    let outcomes = scans
        .iter()
        .enumerate()
        .map(|(i, (scan, truth))| match localize(scan, db, table, voting, registration, scan_seed(seed, i)) {
            Ok(r) => ScanOutcome::from_result(&scan.id, truth, &r, success_radius),
            Err(LocalizeError::AllCandidatesRejected(r)) => ScanOutcome::from_result(&scan.id, truth, &r, success_radius),
            Err(e) => ScanOutcome {
                scan_id: scan.id.clone(),
                success: false,
                place: None,
                translation_error: None,
                residual: None,
                keypoints_consumed: 0,
                total_keypoints: 0,
                candidates_tried: 0,
                timings: StageTimings::default(),
                error: Some(e.to_string()),
            },
        })
        .collect();
    PipelineReport {
        dataset: dataset.to_string(),
        outcomes,
    }
}

pub fn pr_curve_csv(evals: &[(String, DescriptorEval)]) -> String {
    let mut out = String::from("descriptor,dataset,tau,precision,recall\n");
    for (dataset, e) in evals {
        for p in &e.curve {
            let _ = writeln!(out, "{},{},{},{},{}", e.kind.name(), dataset, p.tau, p.precision, p.recall);
        }
    }
    out
}

pub fn auc_csv(evals: &[(String, DescriptorEval)]) -> String {
    let mut out = String::from("descriptor,dataset,auc\n");
    for (dataset, e) in evals {
        let _ = writeln!(out, "{},{},{}", e.kind.name(), dataset, e.auc);
    }
    out
}

pub fn pipeline_csv(reports: &[PipelineReport]) -> String {
    let mut out = String::from("dataset,success_rate,mean_ms,median_ms,keypoints_consumed_median\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{:.3},{:.3},{}",
            r.dataset,
            r.success_rate(),
            r.mean_ms(),
            r.median_ms(),
            r.keypoints_consumed_median()
        );
    }
    out
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, T::to_string)
}

pub fn scans_csv(reports: &[PipelineReport]) -> String {
    let mut out =
        String::from("dataset,scan_id,success,place,translation_error,residual,keypoints_consumed,total_keypoints,candidates,error\n");
    for r in reports {
        for o in &r.outcomes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.dataset,
                o.scan_id,
                o.success as u8,
                opt(&o.place),
                opt(&o.translation_error),
                opt(&o.residual),
                o.keypoints_consumed,
                o.total_keypoints,
                o.candidates_tried,
                o.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
    }
    out
}

/// Per-scan wall time of the four stages.
pub fn timing_csv(reports: &[PipelineReport]) -> String {
    let mut out = String::from("dataset,scan_id,preprocess_ms,describe_ms,match_ms,verify_ms\n");
    for r in reports {
        for o in &r.outcomes {
            let t = &o.timings;
            let _ = writeln!(
                out,
                "{},{},{:.3},{:.3},{:.3},{:.3}",
                r.dataset,
                o.scan_id,
                ms(t.preprocess),
                ms(t.describe),
                ms(t.matching),
                ms(t.verify)
            );
        }
    }
    out
}
