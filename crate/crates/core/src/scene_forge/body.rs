//! Articulated stick-figure body: joint layout, bone lengths, gait-driven
//! joint angles and forward kinematics.
//!
//! Body frame: x forward, y to the person's left, z up, origin at the
//! pelvis. Left and right limbs share one set of lengths.

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::Point3D;
use crate::lifter::Pose3D;

pub const HEAD: usize = 0;
pub const NECK: usize = 1;
pub const PELVIS: usize = 2;
pub const L_SHOULDER: usize = 3;
pub const L_ELBOW: usize = 4;
pub const L_WRIST: usize = 5;
pub const R_SHOULDER: usize = 6;
pub const R_ELBOW: usize = 7;
pub const R_WRIST: usize = 8;
pub const L_HIP: usize = 9;
pub const L_KNEE: usize = 10;
pub const L_ANKLE: usize = 11;
pub const R_HIP: usize = 12;
pub const R_KNEE: usize = 13;
pub const R_ANKLE: usize = 14;

pub const JOINT_NAMES: [&str; 25] = [
    "head",
    "neck",
    "pelvis",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
    "l_hip",
    "l_knee",
    "l_ankle",
    "r_hip",
    "r_knee",
    "r_ankle",
    "l_eye",
    "r_eye",
    "l_ear",
    "r_ear",
    "l_big_toe",
    "l_small_toe",
    "l_heel",
    "r_big_toe",
    "r_small_toe",
    "r_heel",
];

/// Joint counts the body model can emit.
pub const SUPPORTED_KEYPOINTS: [usize; 2] = [15, 25];

/// Mirror-image bone pairs `((left_a, left_b), (right_a, right_b))`.
pub const SYMMETRIC_BONES: [((usize, usize), (usize, usize)); 6] = [
    ((NECK, L_SHOULDER), (NECK, R_SHOULDER)),
    ((L_SHOULDER, L_ELBOW), (R_SHOULDER, R_ELBOW)),
    ((L_ELBOW, L_WRIST), (R_ELBOW, R_WRIST)),
    ((PELVIS, L_HIP), (PELVIS, R_HIP)),
    ((L_HIP, L_KNEE), (R_HIP, R_KNEE)),
    ((L_KNEE, L_ANKLE), (R_KNEE, R_ANKLE)),
];

/// Bones drawn in plots, restricted to joints `< num_keypoints`.
pub fn bones(num_keypoints: usize) -> Vec<(usize, usize)> {
    const ALL: [(usize, usize); 24] = [
        (HEAD, NECK),
        (NECK, PELVIS),
        (NECK, L_SHOULDER),
        (L_SHOULDER, L_ELBOW),
        (L_ELBOW, L_WRIST),
        (NECK, R_SHOULDER),
        (R_SHOULDER, R_ELBOW),
        (R_ELBOW, R_WRIST),
        (PELVIS, L_HIP),
        (L_HIP, L_KNEE),
        (L_KNEE, L_ANKLE),
        (PELVIS, R_HIP),
        (R_HIP, R_KNEE),
        (R_KNEE, R_ANKLE),
        (HEAD, 15),
        (HEAD, 16),
        (15, 17),
        (16, 18),
        (L_ANKLE, 19),
        (19, 20),
        (L_ANKLE, 21),
        (R_ANKLE, 22),
        (22, 23),
        (R_ANKLE, 24),
    ];
    ALL.iter().copied().filter(|&(a, b)| a < num_keypoints && b < num_keypoints).collect()
}

/// Bone lengths in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyShape {
    pub torso: f64,
    pub neck: f64,
    pub shoulder_half_width: f64,
    pub hip_half_width: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
}

impl BodyShape {
    fn head_radius(&self) -> f64 {
        0.45 * self.neck
    }

    fn foot_length(&self) -> f64 {
        0.4 * self.shin
    }

    fn ankle_height(&self) -> f64 {
        0.18 * self.shin
    }
}

/// Joint angles in radians. Index 0 is the left side, 1 the right.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointAngles {
    pub lean: f64,
    pub head_pitch: f64,
    pub shoulder_flex: [f64; 2],
    pub shoulder_abduct: [f64; 2],
    pub elbow: [f64; 2],
    pub hip_flex: [f64; 2],
    pub hip_abduct: [f64; 2],
    pub knee: [f64; 2],
}

impl JointAngles {
    /// Clamps every angle into its anatomical range.
    pub fn clamp(mut self) -> Self {
        self.lean = self.lean.clamp(-0.2, 0.4);
        self.head_pitch = self.head_pitch.clamp(-0.4, 0.4);
        for s in 0..2 {
            self.shoulder_flex[s] = self.shoulder_flex[s].clamp(-1.0, 1.6);
            self.shoulder_abduct[s] = self.shoulder_abduct[s].clamp(0.0, 1.2);
            self.elbow[s] = self.elbow[s].clamp(0.0, 2.3);
            self.hip_flex[s] = self.hip_flex[s].clamp(-0.6, 1.3);
            self.hip_abduct[s] = self.hip_abduct[s].clamp(0.0, 0.5);
            self.knee[s] = self.knee[s].clamp(0.0, 2.0);
        }
        self
    }
}

/// Unit limb direction: `flex` swings forward from straight down, `abduct`
/// swings outward to `side` (+1 left, -1 right).
fn limb_dir(flex: f64, abduct: f64, side: f64) -> Vector3<f64> {
    Vector3::new(flex.sin() * abduct.cos(), side * abduct.sin(), -flex.cos() * abduct.cos())
}

/// Joint positions in the body frame with the pelvis at the origin.
pub fn body_frame_joints(shape: &BodyShape, angles: &JointAngles, num_keypoints: usize) -> Vec<Vector3<f64>> {
    let mut j = vec![Vector3::zeros(); num_keypoints.max(15)];
    let spine = Vector3::new(angles.lean.sin(), 0.0, angles.lean.cos());
    j[PELVIS] = Vector3::zeros();
    j[NECK] = spine * shape.torso;
    let head_dir = Vector3::new((angles.lean + angles.head_pitch).sin(), 0.0, (angles.lean + angles.head_pitch).cos());
    j[HEAD] = j[NECK] + head_dir * shape.neck;
    let sides = [(1.0, L_SHOULDER, L_ELBOW, L_WRIST, L_HIP, L_KNEE, L_ANKLE), (-1.0, R_SHOULDER, R_ELBOW, R_WRIST, R_HIP, R_KNEE, R_ANKLE)];
    for (s, &(side, sh, el, wr, hip, knee, ankle)) in sides.iter().enumerate() {
        j[sh] = j[NECK] + Vector3::new(0.0, side * shape.shoulder_half_width, 0.0);
        j[el] = j[sh] + limb_dir(angles.shoulder_flex[s], angles.shoulder_abduct[s], side) * shape.upper_arm;
        j[wr] = j[el] + limb_dir(angles.shoulder_flex[s] + angles.elbow[s], angles.shoulder_abduct[s], side) * shape.forearm;
        j[hip] = Vector3::new(0.0, side * shape.hip_half_width, 0.0);
        j[knee] = j[hip] + limb_dir(angles.hip_flex[s], angles.hip_abduct[s], side) * shape.thigh;
        j[ankle] = j[knee] + limb_dir(angles.hip_flex[s] - angles.knee[s], angles.hip_abduct[s], side) * shape.shin;
    }
    if num_keypoints >= 25 {
        let r = shape.head_radius();
        let (fx, fz) = (head_dir.x, head_dir.z);
        let forward = Vector3::new(fz, 0.0, -fx);
        for (s, side) in [1.0, -1.0].into_iter().enumerate() {
            j[15 + s] = j[HEAD] + forward * (0.85 * r) + Vector3::new(0.0, side * 0.35 * r, 0.0) + head_dir * (0.2 * r);
            j[17 + s] = j[HEAD] + Vector3::new(0.0, side * r, 0.0);
        }
        let (foot, drop) = (shape.foot_length(), shape.ankle_height());
        for (base, ankle, side) in [(19, L_ANKLE, 1.0), (22, R_ANKLE, -1.0)] {
            j[base] = j[ankle] + Vector3::new(0.8 * foot, -side * 0.1 * foot, -drop);
            j[base + 1] = j[ankle] + Vector3::new(0.65 * foot, side * 0.25 * foot, -drop);
            j[base + 2] = j[ankle] + Vector3::new(-0.2 * foot, 0.0, -drop);
        }
    }
    j.truncate(num_keypoints);
    j
}

/// World-frame pose: heading rotates the body about z, the pelvis sits at
/// `(x, y)` at the height that puts the lower ankle at ankle height.
pub fn place(shape: &BodyShape, angles: &JointAngles, x: f64, y: f64, heading: f64, num_keypoints: usize) -> Pose3D {
    let local = body_frame_joints(shape, angles, num_keypoints);
    let lowest_ankle = local[L_ANKLE].z.min(local[R_ANKLE].z);
    let pelvis_height = shape.ankle_height() - lowest_ankle;
    let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), heading);
    let offset = Vector3::new(x, y, pelvis_height);
    Pose3D::new(local.iter().map(|p| Point3D::from(rot * p + offset)).collect())
}

/// Root and gait state of one walking person.
#[derive(Debug, Clone)]
pub struct Walker {
    pub shape: BodyShape,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// mm/s
    pub speed: f64,
    pub phase: f64,
    jitter: [f64; 14],
}

const MAX_SPEED: f64 = 1500.0;

impl Walker {
    pub fn new(shape: BodyShape, x: f64, y: f64, heading: f64, rng: &mut impl Rng) -> Self {
        Self {
            shape,
            x,
            y,
            heading,
            speed: rng.random_range(0.0..MAX_SPEED),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            jitter: [0.0; 14],
        }
    }

    /// Gait-cycle angles plus mean-reverting per-joint jitter.
    pub fn angles(&self) -> JointAngles {
        let a = self.speed / MAX_SPEED;
        let s = self.phase.sin();
        let j = &self.jitter;
        let swing = |p: f64| (self.phase + p).sin().max(0.0);
        JointAngles {
            lean: 0.08 * a + 0.5 * j[0],
            head_pitch: j[1],
            shoulder_flex: [-0.5 * a * s + j[2], 0.5 * a * s + j[3]],
            shoulder_abduct: [0.15 + j[4].abs(), 0.15 + j[5].abs()],
            elbow: [0.2 + 0.4 * a + j[6].abs() * 2.0, 0.2 + 0.4 * a + j[7].abs() * 2.0],
            hip_flex: [0.45 * a * s + 0.5 * j[8], -0.45 * a * s + 0.5 * j[9]],
            hip_abduct: [0.05 + 0.3 * j[10].abs(), 0.05 + 0.3 * j[11].abs()],
            knee: [
                0.05 + 0.9 * a * swing(0.8) + 0.5 * j[12].abs(),
                0.05 + 0.9 * a * swing(0.8 + std::f64::consts::PI) + 0.5 * j[13].abs(),
            ],
        }
        .clamp()
    }

    pub fn pose(&self, num_keypoints: usize) -> Pose3D {
        place(&self.shape, &self.angles(), self.x, self.y, self.heading, num_keypoints)
    }

    /// Where the root would be after advancing `dt` seconds.
    pub fn proposed_position(&self, dt: f64) -> (f64, f64) {
        (
            self.x + self.speed * dt * self.heading.cos(),
            self.y + self.speed * dt * self.heading.sin(),
        )
    }

    /// Random-walks heading, speed and jitter, steering back into the square
    /// `|x|, |y| <= half_extent`. Position advances only if `may_move`.
    pub fn advance(&mut self, dt: f64, half_extent: f64, may_move: bool, rng: &mut impl Rng) {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let scale = (dt / 0.1).sqrt();
        self.heading += 0.15 * scale * unit.sample(rng);
        let (nx, ny) = self.proposed_position(dt);
        if nx.abs() > half_extent || ny.abs() > half_extent {
            let to_centre = (-self.y).atan2(-self.x);
            let diff = (to_centre - self.heading + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                - std::f64::consts::PI;
            self.heading += diff.clamp(-0.6, 0.6);
        }
        self.speed = (self.speed + 150.0 * scale * unit.sample(rng)).clamp(0.0, MAX_SPEED);
        if may_move {
            let (nx, ny) = self.proposed_position(dt);
            self.x = nx.clamp(-half_extent, half_extent);
            self.y = ny.clamp(-half_extent, half_extent);
        } else {
            self.heading += std::f64::consts::FRAC_PI_2 * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
        let cadence = 0.8 + 0.4 * self.speed / MAX_SPEED;
        self.phase = (self.phase + std::f64::consts::TAU * cadence * dt).rem_euclid(std::f64::consts::TAU);
        for j in &mut self.jitter {
            *j = (0.93 * *j + 0.04 * scale * unit.sample(rng)).clamp(-0.35, 0.35);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape() -> BodyShape {
        BodyShape {
            torso: 520.0,
            neck: 200.0,
            shoulder_half_width: 185.0,
            hip_half_width: 100.0,
            upper_arm: 290.0,
            forearm: 255.0,
            thigh: 430.0,
            shin: 405.0,
        }
    }

    #[test]
    fn neutral_pose_proportions() {
        let angles = JointAngles::default();
        let pose = place(&shape(), &angles, 0.0, 0.0, 0.0, 15);
        let j = pose.joints();
        assert!((j[L_ANKLE].z - 0.18 * 405.0).abs() < 1e-9);
        assert!((j[PELVIS].z - (0.18 * 405.0 + 835.0)).abs() < 1e-9);
        assert!((j[HEAD].z - j[PELVIS].z - 720.0).abs() < 1e-9);
        assert!(j[L_SHOULDER].y > 0.0 && j[R_SHOULDER].y < 0.0);
    }

    #[test]
    fn walking_limbs_stay_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Walker::new(shape(), 0.0, 0.0, 0.3, &mut rng);
        for _ in 0..300 {
            w.advance(0.1, 2000.0, true, &mut rng);
            for nk in SUPPORTED_KEYPOINTS {
                let pose = w.pose(nk);
                let p = pose.joints();
                for ((la, lb), (ra, rb)) in SYMMETRIC_BONES {
                    let l = (p[la] - p[lb]).norm();
                    let r = (p[ra] - p[rb]).norm();
                    assert!((l - r).abs() < 1e-9, "{l} vs {r}");
                }
            }
            assert!(w.x.abs() <= 2000.0 && w.y.abs() <= 2000.0);
        }
    }

    #[test]
    fn extended_layout_has_25_joints() {
        let pose = place(&shape(), &JointAngles::default(), 0.0, 0.0, 1.0, 25);
        assert_eq!(pose.len(), 25);
        assert_eq!(bones(25).len(), 24);
        assert_eq!(bones(15).len(), 14);
    }
}
