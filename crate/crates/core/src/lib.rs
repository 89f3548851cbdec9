//! Multi-camera, multi-person 3D human pose estimation from 2D keypoint
//! detections.
//!
//! The pipeline has two learned stages on top of calibrated pinhole
//! geometry:
//!
//! * [`matcher`] builds a head/edge node graph over every detection in a
//!   frame and scores cross-camera pairs with a graph attention network,
//!   then groups detections into persons.
//! * [`lifter`] regresses all 3D joints of one person from the grouped
//!   detections with an MLP trained only by reprojecting its output into
//!   each camera.
//!
//! [`scene_forge`] synthesizes articulated walkers with exact ground truth,
//! [`metrics`] scores predictions, [`pipeline`] runs both stages on a
//! frame, and [`diffcore`] is the small autodiff engine both networks run
//! on.

pub mod diffcore;
pub mod geometry;
pub mod lifter;
pub mod matcher;
pub mod metrics;
pub mod pipeline;
pub mod scene_forge;

pub use geometry::{CameraModel, Point2D, Point3D, Ray3D, Rig};
