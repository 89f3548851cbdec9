//! Per-keypoint, per-camera feature blocks shared by both networks.
//!
//! Layout is keypoint-major: the block of keypoint `k` seen by rig camera
//! `c` starts at `(k * num_cameras + c) * stride`.

use crate::diffcore::{Matrix, ParamId, ParamSet};
use crate::geometry::{backproject_ray, CameraModel, Point2D};
use crate::scene_forge::{Keypoint2D, SkeletonDetection};

/// Slots per keypoint and camera: detected flag, normalized u and v,
/// confidence, ray origin (metres), ray direction.
pub const VIEW_SLOTS: usize = 10;

/// Length of a matcher node feature, kind one-hot included.
pub fn node_feature_len(num_keypoints: usize, num_cameras: usize) -> usize {
    num_keypoints * num_cameras * VIEW_SLOTS + 2
}

/// Fills the first [`VIEW_SLOTS`] entries of `block`. Undetected keypoints
/// leave the block untouched (zero).
pub fn write_view_block(block: &mut [f64], camera: &CameraModel, kp: &Keypoint2D) {
    if !kp.visible {
        return;
    }
    let ray = backproject_ray(camera, &Point2D::new(kp.u, kp.v));
    let (o, d) = (ray.origin(), ray.direction());
    block[..VIEW_SLOTS].copy_from_slice(&[
        1.0,
        kp.u / camera.width() as f64,
        kp.v / camera.height() as f64,
        kp.confidence,
        o.x / 1000.0,
        o.y / 1000.0,
        o.z / 1000.0,
        d.x,
        d.y,
        d.z,
    ]);
}

/// Writes every keypoint of one detection into `out`, using `stride` slots
/// per block (10 for the matcher, 14 for the lifter).
pub fn write_detection(
    out: &mut [f64],
    stride: usize,
    num_cameras: usize,
    camera_index: usize,
    camera: &CameraModel,
    detection: &SkeletonDetection,
) {
    for (k, kp) in detection.keypoints.iter().enumerate() {
        let start = (k * num_cameras + camera_index) * stride;
        write_view_block(&mut out[start..start + VIEW_SLOTS], camera, kp);
    }
}

/// Gate column of every feature column: view slots are gated by their
/// block's detected flag, `extra` slots `[VIEW_SLOTS, stride - 1)` by the
/// block's last slot. Flags and trailing columns are ungated.
pub fn block_gates(num_keypoints: usize, num_cameras: usize, stride: usize, trailing: usize) -> Vec<Option<usize>> {
    let mut gates = Vec::with_capacity(num_keypoints * num_cameras * stride + trailing);
    for b in 0..num_keypoints * num_cameras {
        let start = b * stride;
        gates.push(None);
        gates.extend((1..VIEW_SLOTS).map(|_| Some(start)));
        if stride > VIEW_SLOTS {
            gates.extend((VIEW_SLOTS..stride - 1).map(|_| Some(start + stride - 1)));
            gates.push(None);
        }
    }
    gates.extend((0..trailing).map(|_| None));
    gates
}

/// Fixed standardization of gated feature columns: column `j` with gate
/// `g` maps to `(x_j - mean_j * x_g) / scale_j`, so entries of absent
/// blocks stay zero. The statistics live in the network's parameter set
/// (never on the tape) so checkpoints carry them.
#[derive(Debug, Clone)]
pub struct FeatureScaler {
    gates: Vec<Option<usize>>,
    mean: ParamId,
    scale: ParamId,
}

impl FeatureScaler {
    /// Registers identity statistics under `input.mean` and `input.scale`.
    pub fn new(params: &mut ParamSet, gates: Vec<Option<usize>>) -> Self {
        let n = gates.len();
        let mean = params.add("input.mean", Matrix::zeros((1, n)));
        let scale = params.add("input.scale", Matrix::ones((1, n)));
        Self { gates, mean, scale }
    }

    pub fn is_input_param(&self, id: ParamId) -> bool {
        id == self.mean || id == self.scale
    }

    /// Sets mean and standard deviation of each gated column over the rows
    /// whose gate is non-zero. Near-constant columns keep unit scale.
    pub fn fit<'a>(&self, params: &mut ParamSet, rows: impl IntoIterator<Item = &'a [f64]>) {
        let n = self.gates.len();
        let (mut count, mut sum, mut sq) = (vec![0usize; n], vec![0.0; n], vec![0.0; n]);
        for row in rows {
            for (j, g) in self.gates.iter().enumerate() {
                if let Some(g) = *g {
                    if row[g] != 0.0 {
                        count[j] += 1;
                        sum[j] += row[j];
                        sq[j] += row[j] * row[j];
                    }
                }
            }
        }
        for j in 0..n {
            let (m, s) = if count[j] == 0 {
                (0.0, 1.0)
            } else {
                let m = sum[j] / count[j] as f64;
                let var = (sq[j] / count[j] as f64 - m * m).max(0.0);
                (m, if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() })
            };
            params.value_mut(self.mean)[(0, j)] = m;
            params.value_mut(self.scale)[(0, j)] = s;
        }
    }

    pub fn apply(&self, params: &ParamSet, x: &Matrix) -> Matrix {
        let mean = params.value(self.mean);
        let scale = params.value(self.scale);
        let mut out = x.clone();
        for (mut o, r) in out.outer_iter_mut().zip(x.outer_iter()) {
            for (j, g) in self.gates.iter().enumerate() {
                if let Some(g) = *g {
                    o[j] = (r[j] - mean[(0, j)] * r[g]) / scale[(0, j)];
                }
            }
        }
        out
    }
}

