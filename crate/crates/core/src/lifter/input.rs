use std::collections::BTreeSet;

use super::{LifterError, PartialPose};
use crate::geometry::{triangulate_multiview, Point2D, Point3D, Rig};
use crate::matcher::features::{write_detection, VIEW_SLOTS};
use crate::scene_forge::SkeletonDetection;

/// Slots per keypoint and camera: the matcher's view block, then the
/// triangulated position in metres and its availability flag.
pub const LIFT_SLOTS: usize = VIEW_SLOTS + 4;

/// Flat `14 · N_c · N_k` network input for one person.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftInput {
    values: Vec<f64>,
    num_keypoints: usize,
    num_cameras: usize,
}

impl LiftInput {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    #[cfg(test)]
    pub(crate) fn zeros_for_test(num_keypoints: usize, num_cameras: usize) -> Self {
        Self {
            values: vec![0.0; LIFT_SLOTS * num_keypoints * num_cameras],
            num_keypoints,
            num_cameras,
        }
    }

    /// The slots of keypoint `k` in camera `c`.
    pub fn block(&self, k: usize, c: usize) -> &[f64] {
        let start = (k * self.num_cameras + c) * LIFT_SLOTS;
        &self.values[start..start + LIFT_SLOTS]
    }

    /// Triangulation prior of keypoint `k` in millimetres, if available.
    pub fn triangulation(&self, k: usize) -> Option<Point3D> {
        let b = self.block(k, 0);
        (b[VIEW_SLOTS + 3] == 1.0).then(|| Point3D::new(b[VIEW_SLOTS], b[VIEW_SLOTS + 1], b[VIEW_SLOTS + 2]) * 1000.0)
    }
}

fn check_views(views: &[(usize, &SkeletonDetection)], rig: &Rig, num_keypoints: usize) -> Result<(), LifterError> {
    if views.is_empty() {
        return Err(LifterError::EmptyGroup);
    }
    let mut seen = BTreeSet::new();
    for &(c, det) in views {
        if c >= rig.len() {
            return Err(LifterError::ShapeMismatch {
                expected: rig.len(),
                found: c + 1,
            });
        }
        if !seen.insert(c) {
            return Err(LifterError::DuplicateCamera(c));
        }
        if det.keypoints.len() != num_keypoints {
            return Err(LifterError::KeypointCount {
                expected: num_keypoints,
                found: det.keypoints.len(),
            });
        }
    }
    Ok(())
}

fn triangulate_keypoint(views: &[(usize, &SkeletonDetection)], rig: &Rig, k: usize) -> Option<Point3D> {
    triangulate_multiview(views.iter().filter_map(|&(c, det)| {
        let kp = det.keypoints[k];
        kp.visible.then(|| (rig.get(c), Point2D::new(kp.u, kp.v)))
    }))
}

/// Assembles the lifter input for one person. `views` pairs a rig camera
/// index with that camera's detection of the person.
pub fn build_lift_input(
    views: &[(usize, &SkeletonDetection)],
    rig: &Rig,
    num_keypoints: usize,
) -> Result<LiftInput, LifterError> {
    check_views(views, rig, num_keypoints)?;
    let nc = rig.len();
    let mut values = vec![0.0; LIFT_SLOTS * nc * num_keypoints];
    for &(c, det) in views {
        write_detection(&mut values, LIFT_SLOTS, nc, c, rig.get(c), det);
    }
    for k in 0..num_keypoints {
        if let Some(p) = triangulate_keypoint(views, rig, k) {
            for c in 0..nc {
                let start = (k * nc + c) * LIFT_SLOTS + VIEW_SLOTS;
                values[start..start + 4].copy_from_slice(&[p.x / 1000.0, p.y / 1000.0, p.z / 1000.0, 1.0]);
            }
        }
    }
    Ok(LiftInput {
        values,
        num_keypoints,
        num_cameras: nc,
    })
}

/// Per-joint triangulation centroid in millimetres; joints seen by fewer
/// than two cameras stay absent.
pub fn triangulation_baseline(
    views: &[(usize, &SkeletonDetection)],
    rig: &Rig,
    num_keypoints: usize,
) -> Result<PartialPose, LifterError> {
    check_views(views, rig, num_keypoints)?;
    Ok(PartialPose {
        joints: (0..num_keypoints).map(|k| triangulate_keypoint(views, rig, k)).collect(),
    })
}
