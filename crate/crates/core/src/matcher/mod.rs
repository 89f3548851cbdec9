//! Cross-camera association: a head/edge node graph over every detection
//! of a frame, a graph attention network scoring each cross-camera pair,
//! and greedy grouping of the scored pairs into persons.

pub mod features;
mod graph;
mod group;
mod model;
mod train;

pub use graph::{build_graph, synthesize_training_graph, MatchGraph, NodeKind};
pub use group::{group_views, partition_by_person, recovers_partition, PersonGroup};
pub use model::{MatcherArch, MatcherModel};
pub use train::{batch_graphs, edge_accuracy, train_matcher, GraphBatch, MatcherTrainConfig, TrainedMatcher};

use crate::diffcore::{CheckpointError, DiffError};

/// Default score threshold for grouping.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(thiserror::Error, Debug)]
pub enum MatcherError {
    #[error("frame {0} has no detections")]
    EmptyFrame(u64),
    #[error("camera `{0}` is not in the rig")]
    UnknownCamera(String),
    #[error("detection has {found} keypoints, expected {expected}")]
    KeypointCount { expected: usize, found: usize },
    #[error("node features have width {found}, model expects {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("no track has a frame with visible keypoints")]
    InsufficientTracks,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("invalid matcher configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}
