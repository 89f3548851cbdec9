//! Training and evaluation data: detection types, the JSON-lines detections
//! format, a synthetic articulated-walker generator with exact ground truth,
//! and view-removal augmentation of single-person samples.

mod augment;
pub mod body;
mod io;
mod synth;

pub use augment::{apply_view_subset, augment_views, view_subsets, SubsetPolicy};
pub use io::{load_detections, parse_detections, save_detections, write_detections, SchemaError};
pub use synth::{generate_rig, generate_scene, generate_track, BodyRanges, SynthConfig, SynthError};

use crate::geometry::Rig;
use crate::lifter::Pose3D;

/// One 2D keypoint of a detected skeleton. Invisible keypoints carry zeros.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint2D {
    pub visible: bool,
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

impl Keypoint2D {
    pub const HIDDEN: Self = Self {
        visible: false,
        u: 0.0,
        v: 0.0,
        confidence: 0.0,
    };

    pub fn seen(u: f64, v: f64, confidence: f64) -> Self {
        Self {
            visible: true,
            u,
            v,
            confidence,
        }
    }
}

/// One person's keypoints as seen by one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDetection {
    /// Known only for synthetic and single-person data.
    pub person_id: Option<u32>,
    pub keypoints: Vec<Keypoint2D>,
}

impl SkeletonDetection {
    pub fn num_visible(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }

    pub fn any_visible(&self) -> bool {
        self.keypoints.iter().any(|k| k.visible)
    }

    pub fn hide_all(&mut self) {
        self.keypoints.iter_mut().for_each(|k| *k = Keypoint2D::HIDDEN);
    }
}

/// All skeletons reported by one camera in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub camera_id: String,
    pub skeletons: Vec<SkeletonDetection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPose {
    pub person_id: u32,
    pub pose: Pose3D,
}

/// Every detection from every camera at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSample {
    pub frame_id: u64,
    pub views: Vec<CameraView>,
    pub ground_truth: Option<Vec<GroundTruthPose>>,
}

/// Reference to one detection inside a [`FrameSample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DetectionRef {
    pub view: usize,
    pub index: usize,
}

impl FrameSample {
    pub fn num_detections(&self) -> usize {
        self.views.iter().map(|v| v.skeletons.len()).sum()
    }

    /// Detections in view order, then skeleton order.
    pub fn detections(&self) -> impl Iterator<Item = (DetectionRef, &CameraView, &SkeletonDetection)> {
        self.views.iter().enumerate().flat_map(|(vi, view)| {
            view.skeletons
                .iter()
                .enumerate()
                .map(move |(si, s)| (DetectionRef { view: vi, index: si }, view, s))
        })
    }

    pub fn detection(&self, r: DetectionRef) -> &SkeletonDetection {
        &self.views[r.view].skeletons[r.index]
    }

    /// Keypoint count shared by every skeleton and ground-truth pose, if any.
    pub fn num_keypoints(&self) -> Option<usize> {
        self.detections()
            .map(|(_, _, s)| s.keypoints.len())
            .chain(self.ground_truth.iter().flatten().map(|g| g.pose.len()))
            .next()
    }

    /// Checks that every camera exists in the rig and every skeleton and
    /// ground-truth pose has exactly `num_keypoints` entries.
    pub fn check_against(&self, rig: &Rig, num_keypoints: usize) -> Result<(), String> {
        for (vi, view) in self.views.iter().enumerate() {
            if rig.index_of(&view.camera_id).is_none() {
                return Err(format!("views[{vi}].camera_id `{}` is not in the rig", view.camera_id));
            }
            for (si, s) in view.skeletons.iter().enumerate() {
                if s.keypoints.len() != num_keypoints {
                    return Err(format!(
                        "views[{vi}].skeletons[{si}].kps has {} keypoints, expected {num_keypoints}",
                        s.keypoints.len()
                    ));
                }
            }
        }
        for (gi, g) in self.ground_truth.iter().flatten().enumerate() {
            if g.pose.len() != num_keypoints {
                return Err(format!("gt[{gi}].joints has {} joints, expected {num_keypoints}", g.pose.len()));
            }
        }
        Ok(())
    }
}

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum TrackError {
    #[error("frame {frame} has {count} detections in camera `{camera}`")]
    MultipleDetections { frame: u64, camera: String, count: usize },
    #[error("frame {frame} mixes person ids")]
    MixedPersons { frame: u64 },
}

/// Frames of one person moving alone through the rig.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonTrack {
    person_id: u32,
    frames: Vec<FrameSample>,
}

impl PersonTrack {
    pub fn new(person_id: u32, frames: Vec<FrameSample>) -> Result<Self, TrackError> {
        for f in &frames {
            for view in &f.views {
                if view.skeletons.len() > 1 {
                    return Err(TrackError::MultipleDetections {
                        frame: f.frame_id,
                        camera: view.camera_id.clone(),
                        count: view.skeletons.len(),
                    });
                }
                if view.skeletons.iter().any(|s| s.person_id.is_some_and(|p| p != person_id)) {
                    return Err(TrackError::MixedPersons { frame: f.frame_id });
                }
            }
            if f.ground_truth.iter().flatten().any(|g| g.person_id != person_id) {
                return Err(TrackError::MixedPersons { frame: f.frame_id });
            }
        }
        Ok(Self { person_id, frames })
    }

    /// Builds a track from loaded frames, taking the person id from the
    /// first tagged detection or ground-truth entry.
    pub fn from_frames(frames: Vec<FrameSample>) -> Result<Self, TrackError> {
        let id = frames
            .iter()
            .flat_map(|f| {
                f.detections()
                    .filter_map(|(_, _, s)| s.person_id)
                    .chain(f.ground_truth.iter().flatten().map(|g| g.person_id))
                    .collect::<Vec<_>>()
            })
            .next()
            .unwrap_or(0);
        Self::new(id, frames)
    }

    pub fn person_id(&self) -> u32 {
        self.person_id
    }

    pub fn frames(&self) -> &[FrameSample] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn into_frames(self) -> Vec<FrameSample> {
        self.frames
    }
}
