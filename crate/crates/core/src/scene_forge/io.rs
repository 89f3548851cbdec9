//! JSON-lines detections files, one [`FrameSample`] per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraView, FrameSample, GroundTruthPose, Keypoint2D, SkeletonDetection};
use crate::geometry::Point3D;
use crate::lifter::Pose3D;

#[derive(thiserror::Error, Debug)]
pub enum SchemaError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: `{path}`: {message}")]
    Invalid { line: usize, path: String, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frame_id: u64,
    views: Vec<RawView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gt: Option<Vec<RawPose>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawView {
    camera_id: String,
    skeletons: Vec<RawSkeleton>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSkeleton {
    #[serde(skip_serializing_if = "Option::is_none")]
    person_id: Option<u32>,
    kps: Vec<(u8, f64, f64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPose {
    person_id: u32,
    joints: Vec<[f64; 3]>,
}

fn to_raw(sample: &FrameSample) -> RawFrame {
    RawFrame {
        frame_id: sample.frame_id,
        views: sample
            .views
            .iter()
            .map(|v| RawView {
                camera_id: v.camera_id.clone(),
                skeletons: v
                    .skeletons
                    .iter()
                    .map(|s| RawSkeleton {
                        person_id: s.person_id,
                        kps: s.keypoints.iter().map(|k| (k.visible as u8, k.u, k.v, k.confidence)).collect(),
                    })
                    .collect(),
            })
            .collect(),
        gt: sample.ground_truth.as_ref().map(|gt| {
            gt.iter()
                .map(|g| RawPose {
                    person_id: g.person_id,
                    joints: g.pose.joints().iter().map(|p| [p.x, p.y, p.z]).collect(),
                })
                .collect()
        }),
    }
}

fn from_raw(raw: RawFrame, line: usize) -> Result<FrameSample, SchemaError> {
    let invalid = |path: String, message: String| SchemaError::Invalid { line, path, message };
    let mut views = Vec::with_capacity(raw.views.len());
    for (vi, rv) in raw.views.into_iter().enumerate() {
        let mut skeletons = Vec::with_capacity(rv.skeletons.len());
        for (si, rs) in rv.skeletons.into_iter().enumerate() {
            let mut keypoints = Vec::with_capacity(rs.kps.len());
            for (ki, (vis, u, v, c)) in rs.kps.into_iter().enumerate() {
                let path = format!("views[{vi}].skeletons[{si}].kps[{ki}]");
                if !(u.is_finite() && v.is_finite() && c.is_finite()) {
                    return Err(invalid(path, "non-finite value".into()));
                }
                match vis {
                    0 => {
                        if u != 0.0 || v != 0.0 || c != 0.0 {
                            return Err(invalid(path, "invisible keypoint must be [0, 0, 0, 0]".into()));
                        }
                        keypoints.push(Keypoint2D::HIDDEN);
                    }
                    1 => {
                        if !(c > 0.0 && c <= 1.0) {
                            return Err(invalid(
                                format!("{path}[3]"),
                                format!("confidence {c} outside (0, 1] for a visible keypoint"),
                            ));
                        }
                        keypoints.push(Keypoint2D::seen(u, v, c));
                    }
                    other => return Err(invalid(format!("{path}[0]"), format!("visibility flag {other} is not 0 or 1"))),
                }
            }
            skeletons.push(SkeletonDetection {
                person_id: rs.person_id,
                keypoints,
            });
        }
        views.push(CameraView {
            camera_id: rv.camera_id,
            skeletons,
        });
    }
    let ground_truth = match raw.gt {
        None => None,
        Some(gt) => {
            let mut out = Vec::with_capacity(gt.len());
            for (gi, g) in gt.into_iter().enumerate() {
                if g.joints.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(invalid(format!("gt[{gi}].joints"), "non-finite coordinate".into()));
                }
                let pose = Pose3D::new(g.joints.iter().map(|j| Point3D::new(j[0], j[1], j[2])).collect());
                out.push(GroundTruthPose {
                    person_id: g.person_id,
                    pose,
                });
            }
            Some(out)
        }
    };
    let sample = FrameSample {
        frame_id: raw.frame_id,
        views,
        ground_truth,
    };
    if let Some(n) = sample.num_keypoints() {
        let ragged = sample.detections().find(|(_, _, s)| s.keypoints.len() != n);
        if let Some((r, _, s)) = ragged {
            return Err(invalid(
                format!("views[{}].skeletons[{}].kps", r.view, r.index),
                format!("{} keypoints, other entries have {n}", s.keypoints.len()),
            ));
        }
        if let Some((gi, g)) = sample.ground_truth.iter().flatten().enumerate().find(|(_, g)| g.pose.len() != n) {
            return Err(invalid(format!("gt[{gi}].joints"), format!("{} joints, expected {n}", g.pose.len())));
        }
    }
    Ok(sample)
}

/// Parses JSON-lines text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_detections(text: &str) -> Result<Vec<FrameSample>, SchemaError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(sample) = parse_line(line, i + 1)? {
            out.push(sample);
        }
    }
    Ok(out)
}

fn parse_line(line: &str, number: usize) -> Result<Option<FrameSample>, SchemaError> {
    if line.trim().is_empty() {
        return Ok(None);
    }
    let de = &mut serde_json::Deserializer::from_str(line);
    let raw: RawFrame = serde_path_to_error::deserialize(de).map_err(|e| SchemaError::Invalid {
        line: number,
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    from_raw(raw, number).map(Some)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<FrameSample>, SchemaError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        if let Some(sample) = parse_line(&line?, i + 1)? {
            out.push(sample);
        }
    }
    Ok(out)
}

pub fn write_detections<W: Write>(samples: &[FrameSample], mut writer: W) -> std::io::Result<()> {
    for s in samples {
        serde_json::to_writer(&mut writer, &to_raw(s))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_detections(samples: &[FrameSample], path: impl AsRef<Path>) -> std::io::Result<()> {
    write_detections(samples, BufWriter::new(File::create(path)?))
}
