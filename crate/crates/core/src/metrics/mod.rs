//! Pose-set evaluation: greedy prediction-to-truth assignment, thresholded
//! recall and precision, average precision, MPJPE and stage timings.
//!
//! Distances are mean per-joint Euclidean distances in millimetres over the
//! joints present in both poses. A prediction with absent joints is never
//! counted as correct, though its present joints still enter MPJPE.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::lifter::{PartialPose, Pose3D};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction {index} of frame {frame} has no confidence")]
    MissingConfidence { frame: usize, index: usize },
    #[error("no matched prediction/truth pairs")]
    NoMatches,
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
    #[error("prediction has {found} joints, truth has {expected}")]
    JointCount { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Strictly increasing distance thresholds in millimetres.
    pub thresholds: Vec<f64>,
    /// Leading frames left out of timing means.
    pub warmup_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![25.0, 50.0, 75.0, 100.0, 125.0, 150.0],
            warmup_frames: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.thresholds.is_empty() {
            return Err(MetricsError::InvalidThresholds("at least one threshold is required".into()));
        }
        if self.thresholds.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(MetricsError::InvalidThresholds("thresholds must be positive".into()));
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricsError::InvalidThresholds("thresholds must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One predicted person.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedPose {
    pub pose: PartialPose,
    pub confidence: Option<f64>,
}

/// Predictions and ground truth of one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameEval {
    pub predictions: Vec<PredictedPose>,
    pub truth: Vec<Pose3D>,
}

/// Mean distance over joints present in both poses, with the joint count.
pub fn joint_distance(pred: &PartialPose, truth: &Pose3D) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut n = 0;
    for (p, t) in pred.joints.iter().zip(truth.joints()) {
        if let Some(p) = p {
            sum += (p - t).norm();
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64, n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub pred: usize,
    pub truth: usize,
    /// Mean per-joint distance over shared joints.
    pub distance: f64,
    /// Sum of per-joint distances and the number of joints behind it.
    pub distance_sum: f64,
    pub joints: usize,
    /// Whether the prediction has every joint.
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Assignment {
    pub pairs: Vec<MatchedPair>,
    pub num_predicted: usize,
    pub num_truth: usize,
}

impl Assignment {
    /// Pairs counted correct at `threshold`: complete and strictly closer.
    pub fn correct(&self, threshold: f64) -> usize {
        self.pairs.iter().filter(|p| p.complete && p.distance < threshold).count()
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.distance).sum()
    }
}

/// Greedy one-to-one assignment by ascending mean joint distance; ties go
/// to the lower prediction index, then the lower truth index.
pub fn match_poses(predicted: &[PartialPose], truth: &[Pose3D]) -> Assignment {
    let mut candidates = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if let Some((d, n)) = joint_distance(p, t) {
                candidates.push((d, i, j, n));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; predicted.len()];
    let mut truth_used = vec![false; truth.len()];
    let mut pairs = Vec::new();
    for (d, i, j, n) in candidates {
        if pred_used[i] || truth_used[j] {
            continue;
        }
        pred_used[i] = true;
        truth_used[j] = true;
        pairs.push(MatchedPair {
            pred: i,
            truth: j,
            distance: d,
            distance_sum: d * n as f64,
            joints: n,
            complete: predicted[i].is_complete() && predicted[i].len() == truth[j].len(),
        });
    }
    pairs.sort_by_key(|p| p.pred);
    Assignment {
        pairs,
        num_predicted: predicted.len(),
        num_truth: truth.len(),
    }
}

/// Recall (percent of truths) and precision (percent of predictions)
/// counted correct at `threshold`. Recall is undefined when there is no
/// truth but there are predictions; precision is 100 for two empty sets
/// and 0 when only the predictions are empty.
pub fn recall_precision(assignment: &Assignment, threshold: f64) -> (Option<f64>, f64) {
    counts_to_percent(assignment.correct(threshold), assignment.num_truth, assignment.num_predicted)
}

fn counts_to_percent(correct: usize, truth: usize, predicted: usize) -> (Option<f64>, f64) {
    let recall = match (truth, predicted) {
        (0, 0) => Some(100.0),
        (0, _) => None,
        (t, _) => Some(100.0 * correct as f64 / t as f64),
    };
    let precision = match (predicted, truth) {
        (0, 0) => 100.0,
        (0, _) => 0.0,
        (p, _) => 100.0 * correct as f64 / p as f64,
    };
    (recall, precision)
}

/// Area under the all-point interpolated precision-recall curve, in
/// percent. Predictions of all frames are swept by descending confidence
/// (ties by frame, then index); each takes the nearest unconsumed truth of
/// its frame and is a true positive when it is complete and that truth lies
/// strictly within `threshold`. `None` when there is no truth at all.
pub fn average_precision(frames: &[FrameEval], threshold: f64) -> Result<Option<f64>, MetricsError> {
    let mut order = Vec::new();
    for (f, frame) in frames.iter().enumerate() {
        for (i, p) in frame.predictions.iter().enumerate() {
            let c = p.confidence.ok_or(MetricsError::MissingConfidence { frame: f, index: i })?;
            order.push((c, f, i));
        }
    }
    let total_truth: usize = frames.iter().map(|f| f.truth.len()).sum();
    if total_truth == 0 {
        return Ok(None);
    }
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut consumed: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.truth.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (k, &(_, f, i)) in order.iter().enumerate() {
        let pred = &frames[f].predictions[i].pose;
        let nearest = frames[f]
            .truth
            .iter()
            .enumerate()
            .filter(|(j, _)| !consumed[f][*j])
            .filter_map(|(j, t)| joint_distance(pred, t).map(|(d, _)| (d, j)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((d, j)) = nearest {
            if d < threshold && pred.is_complete() {
                consumed[f][j] = true;
                tp += 1;
            }
        }
        curve.push((tp as f64 / total_truth as f64, tp as f64 / (k + 1) as f64));
    }
    Ok(Some(100.0 * area_all_point(&curve)))
}

/// All-point interpolation over `(recall, precision)` points in sweep order.
fn area_all_point(curve: &[(f64, f64)]) -> f64 {
    let mut best = vec![0.0; curve.len()];
    let mut running: f64 = 0.0;
    for k in (0..curve.len()).rev() {
        running = running.max(curve[k].1);
        best[k] = running;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        area += (r - prev_recall) * best[k];
        prev_recall = r;
    }
    area
}

/// Mean Euclidean distance over every shared joint of every matched pair.
pub fn mpjpe(assignments: &[Assignment]) -> Result<f64, MetricsError> {
    let (sum, n) = assignments
        .iter()
        .flat_map(|a| &a.pairs)
        .fold((0.0, 0usize), |(s, n), p| (s + p.distance_sum, n + p.joints));
    if n == 0 {
        return Err(MetricsError::NoMatches);
    }
    Ok(sum / n as f64)
}

/// Wall-clock cost of one frame's stages, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub matching_ms: f64,
    pub lifting_ms: f64,
    pub persons: usize,
}

/// Mean proposal time per frame, 3D estimation time per frame, and 3D
/// estimation time per person, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub t_pp: f64,
    #[serde(rename = "t_3Dg")]
    pub t_3dg: f64,
    #[serde(rename = "t_3Di")]
    pub t_3di: f64,
    pub frames: usize,
}

/// Timing means after dropping the first `warmup` frames. `None` when no
/// frame remains.
pub fn timing_report(frames: &[FrameTiming], warmup: usize) -> Option<TimingReport> {
    let kept = frames.get(warmup..).filter(|k| !k.is_empty())?;
    let n = kept.len() as f64;
    let t_pp = kept.iter().map(|f| f.matching_ms).sum::<f64>() / n;
    let t_3dg = kept.iter().map(|f| f.lifting_ms).sum::<f64>() / n;
    let persons: usize = kept.iter().map(|f| f.persons).sum();
    let t_3di = if persons == 0 {
        0.0
    } else {
        kept.iter().map(|f| f.lifting_ms).sum::<f64>() / persons as f64
    };
    Some(TimingReport {
        t_pp,
        t_3dg,
        t_3di,
        frames: kept.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub recall: Vec<Option<f64>>,
    pub precision: Vec<f64>,
    pub ap: Vec<Option<f64>>,
    pub mpjpe: Option<f64>,
    pub frames: usize,
    pub predictions: usize,
    pub truths: usize,
    /// Predictions missing at least one joint.
    pub incomplete_predictions: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub timing: Option<TimingReport>,
}

/// Aggregates every metric over a set of frames. Counts are pooled across
/// frames before forming percentages.
pub fn evaluate(frames: &[FrameEval], config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    config.validate()?;
    let mut assignments = Vec::with_capacity(frames.len());
    for f in frames {
        for p in &f.predictions {
            if let Some(t) = f.truth.first() {
                if p.pose.len() != t.len() {
                    return Err(MetricsError::JointCount {
                        expected: t.len(),
                        found: p.pose.len(),
                    });
                }
            }
        }
        let preds: Vec<PartialPose> = f.predictions.iter().map(|p| p.pose.clone()).collect();
        assignments.push(match_poses(&preds, &f.truth));
    }
    let predictions: usize = frames.iter().map(|f| f.predictions.len()).sum();
    let truths: usize = frames.iter().map(|f| f.truth.len()).sum();
    let has_confidence = frames.iter().flat_map(|f| &f.predictions).all(|p| p.confidence.is_some());
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    let mut ap = Vec::new();
    for &th in &config.thresholds {
        let correct: usize = assignments.iter().map(|a| a.correct(th)).sum();
        let (r, p) = counts_to_percent(correct, truths, predictions);
        recall.push(r);
        precision.push(p);
        ap.push(if has_confidence { average_precision(frames, th)? } else { None });
    }
    Ok(EvalReport {
        thresholds: config.thresholds.clone(),
        recall,
        precision,
        ap,
        mpjpe: mpjpe(&assignments).ok(),
        frames: frames.len(),
        predictions,
        truths,
        incomplete_predictions: frames
            .iter()
            .flat_map(|f| &f.predictions)
            .filter(|p| !p.pose.is_complete())
            .count(),
        timing: None,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.2}"))
}

impl EvalReport {
    /// Table with one column per threshold; single-valued rows fill the
    /// first column only.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric");
        for t in &self.thresholds {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        let pad = ",".repeat(self.thresholds.len().saturating_sub(1));
        let mut row = |name: &str, values: Vec<String>| {
            let _ = writeln!(s, "{name},{}", values.join(","));
        };
        row("Recall", self.recall.iter().map(|v| cell(*v)).collect());
        row("Precision", self.precision.iter().map(|v| cell(Some(*v))).collect());
        row("AP", self.ap.iter().map(|v| cell(*v)).collect());
        row("MPJPE", vec![cell(self.mpjpe) + &pad]);
        if let Some(t) = &self.timing {
            row("t_pp", vec![cell(Some(t.t_pp)) + &pad]);
            row("t_3Dg", vec![cell(Some(t.t_3dg)) + &pad]);
            row("t_3Di", vec![cell(Some(t.t_3di)) + &pad]);
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}
