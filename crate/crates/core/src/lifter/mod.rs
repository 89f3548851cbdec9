//! Per-person 3D lifting: input assembly with a triangulation prior, the
//! MLP regressor, the self-supervised reprojection loss and its training
//! loop, plus the plain triangulation baseline.

mod input;
mod loss;
mod model;
mod train;

pub use input::{build_lift_input, triangulation_baseline, LiftInput, LIFT_SLOTS};
pub use loss::{reprojection_loss, LossReport, ReprojectionLoss, Supervision, BARRIER_WEIGHT, MIN_LOSS_DEPTH};
pub use model::{ArchProfile, LifterArch, LifterModel};
pub use train::{train_lifter, LifterSample, LifterTrainConfig, SampleId, TrainedLifter};

use serde::{Deserialize, Serialize};

use crate::diffcore::{CheckpointError, DiffError};
use crate::geometry::Point3D;

/// `N_k` world-frame joints in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose3D {
    joints: Vec<Point3D>,
}

impl Pose3D {
    pub fn new(joints: Vec<Point3D>) -> Self {
        Self { joints }
    }

    pub fn joints(&self) -> &[Point3D] {
        &self.joints
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn into_joints(self) -> Vec<Point3D> {
        self.joints
    }
}

/// A pose with per-joint absence, as produced by triangulation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialPose {
    pub joints: Vec<Option<Point3D>>,
}

impl PartialPose {
    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn num_present(&self) -> usize {
        self.joints.iter().flatten().count()
    }

    pub fn is_complete(&self) -> bool {
        self.joints.iter().all(Option::is_some)
    }

    pub fn to_complete(&self) -> Option<Pose3D> {
        self.joints.iter().copied().collect::<Option<Vec<_>>>().map(Pose3D::new)
    }
}

impl From<Pose3D> for PartialPose {
    fn from(p: Pose3D) -> Self {
        Self {
            joints: p.joints.into_iter().map(Some).collect(),
        }
    }
}

#[derive(thiserror::Error, Debug)]
pub enum LifterError {
    #[error("person group has no views")]
    EmptyGroup,
    #[error("camera index {0} appears twice in one group")]
    DuplicateCamera(usize),
    #[error("input has {found} values, model expects {expected}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("detection has {found} keypoints, expected {expected}")]
    KeypointCount { expected: usize, found: usize },
    #[error("non-finite loss {loss} at sample {sample}")]
    NonFiniteLoss { sample: String, loss: f64 },
    #[error("invalid lifter configuration: {0}")]
    InvalidConfig(String),
    #[error("no usable training samples")]
    NoTrainingData,
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
