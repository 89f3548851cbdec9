//! Frame-level inference: group detections into persons with the matcher,
//! then estimate each person's joints.

use std::io::{self, BufRead, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::geometry::{Point3D, Rig};
use crate::lifter::{build_lift_input, triangulation_baseline, LifterError, LifterModel, PartialPose, Pose3D};
use crate::matcher::{build_graph, group_views, MatcherError, MatcherModel};
use crate::metrics::{FrameEval, FrameTiming, PredictedPose};
use crate::scene_forge::{FrameSample, SkeletonDetection};

#[derive(thiserror::Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Matcher(#[from] MatcherError),
    #[error(transparent)]
    Lifter(#[from] LifterError),
    #[error("frame {frame}: {reason}")]
    Frame { frame: u64, reason: String },
}

/// How a grouped person becomes a 3D pose.
#[derive(Debug, Clone, Copy)]
pub enum Estimator<'a> {
    Lifter(&'a LifterModel),
    /// Per-joint triangulation; joints seen by fewer than two cameras stay
    /// absent and persons without any triangulated joint are dropped.
    Triangulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonPrediction {
    /// `(camera_id, detection index)` pairs.
    pub group: Vec<(String, usize)>,
    pub confidence: f64,
    /// Millimetres; `null` for joints the estimator could not place.
    pub joints: Vec<Option<[f64; 3]>>,
}

impl PersonPrediction {
    pub fn pose(&self) -> PartialPose {
        PartialPose {
            joints: self.joints.iter().map(|j| j.map(|[x, y, z]| Point3D::new(x, y, z))).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FramePrediction {
    pub frame_id: u64,
    pub persons: Vec<PersonPrediction>,
}

fn joints_of(pose: &PartialPose) -> Vec<Option<[f64; 3]>> {
    pose.joints.iter().map(|j| j.map(|p| [p.x, p.y, p.z])).collect()
}

/// Runs matching and estimation on one frame and times both stages.
pub fn predict_frame(
    sample: &FrameSample,
    rig: &Rig,
    matcher: &MatcherModel,
    threshold: f64,
    estimator: Estimator,
) -> Result<(FramePrediction, FrameTiming), PipelineError> {
    let mut timing = FrameTiming {
        matching_ms: 0.0,
        lifting_ms: 0.0,
        persons: 0,
    };
    let mut prediction = FramePrediction {
        frame_id: sample.frame_id,
        persons: Vec::new(),
    };
    if sample.num_detections() == 0 {
        return Ok((prediction, timing));
    }
    let nk = sample.num_keypoints().expect("frame has detections");
    sample.check_against(rig, nk).map_err(|reason| PipelineError::Frame {
        frame: sample.frame_id,
        reason,
    })?;

    let start = Instant::now();
    let mut graph = build_graph(sample, rig)?;
    matcher.score(&mut graph)?;
    let groups = group_views(&graph, threshold);
    timing.matching_ms = start.elapsed().as_secs_f64() * 1e3;

    let start = Instant::now();
    for group in &groups {
        let views: Vec<(usize, &SkeletonDetection)> = group
            .cameras
            .iter()
            .zip(&group.detections)
            .map(|(&c, r)| (c, sample.detection(*r)))
            .collect();
        let pose = match estimator {
            Estimator::Lifter(model) => {
                let input = build_lift_input(&views, rig, nk)?;
                PartialPose::from(model.lift(&input)?)
            }
            Estimator::Triangulation => {
                let pose = triangulation_baseline(&views, rig, nk)?;
                if pose.num_present() == 0 {
                    continue;
                }
                pose
            }
        };
        prediction.persons.push(PersonPrediction {
            group: group.members.clone(),
            confidence: group.confidence,
            joints: joints_of(&pose),
        });
    }
    timing.lifting_ms = start.elapsed().as_secs_f64() * 1e3;
    timing.persons = prediction.persons.len();
    Ok((prediction, timing))
}

/// Pairs a prediction with the ground truth carried by its frame.
pub fn frame_eval(prediction: &FramePrediction, sample: &FrameSample) -> FrameEval {
    FrameEval {
        predictions: prediction
            .persons
            .iter()
            .map(|p| PredictedPose {
                pose: p.pose(),
                confidence: Some(p.confidence),
            })
            .collect(),
        truth: sample
            .ground_truth
            .iter()
            .flatten()
            .map(|g| g.pose.clone())
            .collect::<Vec<Pose3D>>(),
    }
}

/// One JSON object per line.
pub fn write_predictions<W: Write>(predictions: &[FramePrediction], mut out: W) -> io::Result<()> {
    for p in predictions {
        serde_json::to_writer(&mut out, p)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_predictions<R: BufRead>(input: R) -> Result<Vec<FramePrediction>, String> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
