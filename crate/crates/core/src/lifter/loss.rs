use nalgebra::{Matrix3x4, Vector3};

use super::{LifterError, Pose3D};
use crate::diffcore::{CustomOp, DiffError, Matrix};
use crate::geometry::Rig;
use crate::scene_forge::SkeletonDetection;

/// Depth (mm) below which projection switches to the soft clamp.
pub const MIN_LOSS_DEPTH: f64 = 1.0;
/// Weight of the squared depth violation added to `e` below [`MIN_LOSS_DEPTH`].
pub const BARRIER_WEIGHT: f64 = 1.0;

/// Detected keypoints of a seed sample: `(camera index, keypoint, u, v)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Supervision {
    observations: Vec<(usize, usize, f64, f64)>,
}

impl Supervision {
    pub fn new(observations: Vec<(usize, usize, f64, f64)>) -> Self {
        Self { observations }
    }

    /// Every visible keypoint of every view; invisible ones are skipped.
    pub fn from_views(views: &[(usize, &SkeletonDetection)]) -> Self {
        let mut observations = Vec::new();
        for &(c, det) in views {
            for (k, kp) in det.keypoints.iter().enumerate() {
                if kp.visible {
                    observations.push((c, k, kp.u, kp.v));
                }
            }
        }
        Self { observations }
    }

    pub fn observations(&self) -> &[(usize, usize, f64, f64)] {
        &self.observations
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Projection error per sample, the batch loss `Σ e² / BS`, and each
/// camera's share of `Σ e` over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub per_sample: Vec<f64>,
    pub loss: f64,
    pub per_camera: Vec<f64>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `e` for one pose given in millimetres (`joints[3k..3k+3]`). When `grad`
/// is given, `de/dX` is accumulated into it.
fn sample_error(
    joints: &[f64],
    sup: &Supervision,
    projections: &[Matrix3x4<f64>],
    per_camera: &mut [f64],
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let mut e = 0.0;
    for &(c, k, du, dv) in &sup.observations {
        let p = &projections[c];
        let x = Vector3::new(joints[3 * k], joints[3 * k + 1], joints[3 * k + 2]);
        let row = |r: usize| p[(r, 0)] * x.x + p[(r, 1)] * x.y + p[(r, 2)] * x.z + p[(r, 3)];
        let (nu, nv, z) = (row(0), row(1), row(2));
        let (z_eff, dz_eff, barrier) = if z >= MIN_LOSS_DEPTH {
            (z, 1.0, 0.0)
        } else {
            // z_min² / (2·z_min - z): positive, and C¹ with the identity at z_min.
            let ze = MIN_LOSS_DEPTH * MIN_LOSS_DEPTH / (2.0 * MIN_LOSS_DEPTH - z);
            (ze, (ze / MIN_LOSS_DEPTH).powi(2), BARRIER_WEIGHT * (MIN_LOSS_DEPTH - z).powi(2))
        };
        let (u, v) = (nu / z_eff, nv / z_eff);
        let term = (u - du).abs() + (v - dv).abs() + barrier;
        e += term;
        per_camera[c] += term;
        if let Some(g) = grad.as_deref_mut() {
            let (su, sv) = (sign(u - du), sign(v - dv));
            // d(nu/z_eff) = (dnu - u·dz_eff·dz) / z_eff
            let dbarrier = if z >= MIN_LOSS_DEPTH {
                0.0
            } else {
                -2.0 * BARRIER_WEIGHT * (MIN_LOSS_DEPTH - z)
            };
            let dz = -(su * u + sv * v) * dz_eff / z_eff + dbarrier;
            for j in 0..3 {
                g[3 * k + j] += (su * p[(0, j)] + sv * p[(1, j)]) / z_eff + dz * p[(2, j)];
            }
        }
    }
    e
}

fn projections(rig: &Rig) -> Vec<Matrix3x4<f64>> {
    rig.cameras().iter().map(|c| *c.projection()).collect()
}

fn check_pairing(poses: usize, sups: usize) -> Result<(), LifterError> {
    if poses != sups {
        return Err(LifterError::ShapeMismatch {
            expected: poses,
            found: sups,
        });
    }
    Ok(())
}

/// Evaluates the loss for poses in millimetres against their seed samples.
pub fn reprojection_loss(poses: &[Pose3D], supervision: &[Supervision], rig: &Rig) -> Result<LossReport, LifterError> {
    check_pairing(poses.len(), supervision.len())?;
    let proj = projections(rig);
    let mut per_camera = vec![0.0; rig.len()];
    let mut per_sample = Vec::with_capacity(poses.len());
    for (pose, sup) in poses.iter().zip(supervision) {
        let flat: Vec<f64> = pose.joints().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        check_supervision(sup, pose.len(), rig.len())?;
        per_sample.push(sample_error(&flat, sup, &proj, &mut per_camera, None));
    }
    let loss = if per_sample.is_empty() {
        0.0
    } else {
        per_sample.iter().map(|e| e * e).sum::<f64>() / per_sample.len() as f64
    };
    Ok(LossReport {
        per_sample,
        loss,
        per_camera,
    })
}

fn check_supervision(sup: &Supervision, num_keypoints: usize, num_cameras: usize) -> Result<(), LifterError> {
    if let Some(&(c, k, _, _)) = sup.observations.iter().find(|&&(c, k, _, _)| c >= num_cameras || k >= num_keypoints) {
        return Err(LifterError::ShapeMismatch {
            expected: num_keypoints.min(num_cameras),
            found: c.max(k),
        });
    }
    Ok(())
}

/// Tape operation mapping a `BS × 3N_k` pose batch in metres to the `1 × 1`
/// loss `Σ e² / BS`.
pub struct ReprojectionLoss {
    projections: Vec<Matrix3x4<f64>>,
    supervision: Vec<Supervision>,
    num_keypoints: usize,
    /// Per-sample `e` and `2e/BS · de/dpose` from the last forward pass.
    cache: Option<(Vec<f64>, Matrix)>,
}

impl ReprojectionLoss {
    pub fn new(rig: &Rig, supervision: Vec<Supervision>, num_keypoints: usize) -> Result<Self, LifterError> {
        for s in &supervision {
            check_supervision(s, num_keypoints, rig.len())?;
        }
        Ok(Self {
            projections: projections(rig),
            supervision,
            num_keypoints,
            cache: None,
        })
    }
}

impl CustomOp for ReprojectionLoss {
    fn name(&self) -> &str {
        "reprojection_loss"
    }

    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix, DiffError> {
        let pose = inputs[0];
        let (bs, width) = pose.dim();
        if width != 3 * self.num_keypoints || bs != self.supervision.len() {
            return Err(DiffError::ShapeMismatch {
                op: "reprojection_loss",
                expected: vec![self.supervision.len(), 3 * self.num_keypoints],
                found: vec![bs, width],
            });
        }
        let mut errors = Vec::with_capacity(bs);
        let mut grads = Matrix::zeros((bs, width));
        let mut per_camera = vec![0.0; self.projections.len()];
        let mut mm = vec![0.0; width];
        for (b, sup) in self.supervision.iter().enumerate() {
            for (dst, &src) in mm.iter_mut().zip(pose.row(b)) {
                *dst = src * 1000.0;
            }
            let mut g = grads.row_mut(b);
            let gs = g.as_slice_mut().expect("row-major rows are contiguous");
            let e = sample_error(&mm, sup, &self.projections, &mut per_camera, Some(gs));
            let factor = 2.0 * e / bs as f64 * 1000.0;
            gs.iter_mut().for_each(|x| *x *= factor);
            errors.push(e);
        }
        let loss = errors.iter().map(|e| e * e).sum::<f64>() / bs.max(1) as f64;
        self.cache = Some((errors, grads));
        Ok(Matrix::from_elem((1, 1), loss))
    }

    fn backward(&self, _inputs: &[&Matrix], _output: &Matrix, grad_output: &Matrix) -> Vec<Option<Matrix>> {
        let (_, grads) = self.cache.as_ref().expect("forward runs before backward");
        vec![Some(grads * grad_output[(0, 0)])]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tape;
    use crate::geometry::{project, CameraModel, Point3D};
    use nalgebra::Matrix3;

    fn rig() -> Rig {
        let cam = CameraModel::from_parts("a", 1920, 1080, (1000.0, 1000.0, 960.0, 540.0), Matrix3::identity(), Vector3::zeros()).unwrap();
        Rig::new(vec![cam]).unwrap()
    }

    #[test]
    fn manhattan_five_gives_loss_25() {
        let rig = rig();
        // (3, -2) px off the detection at (100, 100) when projected.
        let z = 2000.0;
        let p = Point3D::new((103.0 - 960.0) * z / 1000.0, (98.0 - 540.0) * z / 1000.0, z);
        assert_eq!(project(rig.get(0), &p).unwrap(), crate::geometry::Point2D::new(103.0, 98.0));
        let sup = Supervision::new(vec![(0, 0, 100.0, 100.0)]);
        let report = reprojection_loss(&[Pose3D::new(vec![p])], std::slice::from_ref(&sup), &rig).unwrap();
        assert!((report.per_sample[0] - 5.0).abs() < 1e-9);
        assert!((report.loss - 25.0).abs() < 1e-9);
    }

    #[test]
    fn exact_reprojection_is_zero() {
        let rig = rig();
        let p = Point3D::new(100.0, -50.0, 3000.0);
        let px = project(rig.get(0), &p).unwrap();
        let sup = Supervision::new(vec![(0, 0, px.u, px.v)]);
        let r = reprojection_loss(&[Pose3D::new(vec![p])], &[sup], &rig).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn behind_camera_is_finite_and_penalized() {
        let rig = rig();
        let sup = Supervision::new(vec![(0, 0, 960.0, 540.0)]);
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_shape_vec((1, 3), vec![0.01, 0.0, -0.5]).unwrap(), true);
        let op = ReprojectionLoss::new(&rig, vec![sup], 1).unwrap();
        let l = tape.custom(Box::new(op), &[x]).unwrap();
        assert!(tape.scalar(l).is_finite() && tape.scalar(l) > 1e5);
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        // Moving forward along the optical axis lowers the loss.
        assert!(g[(0, 2)] < 0.0);
    }
}
