use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::body::{BodyShape, Walker, SUPPORTED_KEYPOINTS};
use super::{CameraView, FrameSample, GroundTruthPose, Keypoint2D, PersonTrack, SkeletonDetection};
use crate::geometry::{project, CameraModel, Point3D, Rig};
use crate::lifter::Pose3D;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("could not place {requested} persons {separation} mm apart")]
    Crowded { requested: usize, separation: f64 },
}

fn invalid(field: &str, reason: impl Into<String>) -> SynthError {
    SynthError::InvalidConfig {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Bone-length ranges in millimetres, sampled uniformly per body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BodyRanges {
    pub torso: [f64; 2],
    pub neck: [f64; 2],
    pub shoulder_half_width: [f64; 2],
    pub hip_half_width: [f64; 2],
    pub upper_arm: [f64; 2],
    pub forearm: [f64; 2],
    pub thigh: [f64; 2],
    pub shin: [f64; 2],
}

impl Default for BodyRanges {
    fn default() -> Self {
        Self {
            torso: [460.0, 560.0],
            neck: [180.0, 230.0],
            shoulder_half_width: [160.0, 210.0],
            hip_half_width: [85.0, 115.0],
            upper_arm: [260.0, 320.0],
            forearm: [230.0, 280.0],
            thigh: [390.0, 470.0],
            shin: [370.0, 440.0],
        }
    }
}

impl BodyRanges {
    fn fields(&self) -> [(&'static str, [f64; 2]); 8] {
        [
            ("torso", self.torso),
            ("neck", self.neck),
            ("shoulder_half_width", self.shoulder_half_width),
            ("hip_half_width", self.hip_half_width),
            ("upper_arm", self.upper_arm),
            ("forearm", self.forearm),
            ("thigh", self.thigh),
            ("shin", self.shin),
        ]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> BodyShape {
        let mut draw = |r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
        BodyShape {
            torso: draw(self.torso),
            neck: draw(self.neck),
            shoulder_half_width: draw(self.shoulder_half_width),
            hip_half_width: draw(self.hip_half_width),
            upper_arm: draw(self.upper_arm),
            forearm: draw(self.forearm),
            thigh: draw(self.thigh),
            shin: draw(self.shin),
        }
    }
}

/// Synthetic rig, body and sensor-noise settings. Distances are millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cameras: usize,
    pub rig_radius: [f64; 2],
    pub rig_height: [f64; 2],
    pub focal: [f64; 2],
    pub image_size: [u32; 2],
    /// Persons walk inside `|x|, |y| <= area_half_extent`.
    pub area_half_extent: f64,
    pub num_keypoints: usize,
    pub body: BodyRanges,
    /// Pixel noise standard deviation; samples are truncated at 5σ.
    pub pixel_noise: f64,
    pub drop_prob: f64,
    pub occlusion_prob: f64,
    /// Minimum pelvis distance between persons of one mixed scene.
    pub min_separation: f64,
    /// Seconds between consecutive track frames.
    pub frame_interval: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cameras: 5,
            rig_radius: [4500.0, 5500.0],
            rig_height: [2000.0, 2600.0],
            focal: [650.0, 750.0],
            image_size: [1280, 1024],
            area_half_extent: 2000.0,
            num_keypoints: 15,
            body: BodyRanges::default(),
            pixel_noise: 1.0,
            drop_prob: 0.05,
            occlusion_prob: 0.05,
            min_separation: 600.0,
            frame_interval: 0.1,
            seed: 0,
        }
    }
}

fn check_range(field: &str, r: [f64; 2], min_exclusive: f64) -> Result<(), SynthError> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] <= min_exclusive || r[0] > r[1] {
        return Err(invalid(field, format!("need {min_exclusive} < lo <= hi, got [{}, {}]", r[0], r[1])));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.cameras == 0 {
            return Err(invalid("cameras", "at least one camera is required"));
        }
        check_range("rig_radius", self.rig_radius, 0.0)?;
        check_range("rig_height", self.rig_height, 0.0)?;
        check_range("focal", self.focal, 0.0)?;
        if self.image_size.contains(&0) {
            return Err(invalid("image_size", "width and height must be positive"));
        }
        if !(self.area_half_extent.is_finite() && self.area_half_extent > 0.0) {
            return Err(invalid("area_half_extent", "must be positive"));
        }
        if self.rig_radius[0] <= self.area_half_extent * std::f64::consts::SQRT_2 {
            return Err(invalid("rig_radius", "cameras must stand outside the walking area"));
        }
        if !SUPPORTED_KEYPOINTS.contains(&self.num_keypoints) {
            return Err(invalid("num_keypoints", format!("supported values are {SUPPORTED_KEYPOINTS:?}")));
        }
        for (name, r) in self.body.fields() {
            check_range(&format!("body.{name}"), r, 0.0)?;
        }
        if !(self.pixel_noise.is_finite() && self.pixel_noise >= 0.0) {
            return Err(invalid("pixel_noise", "must be finite and >= 0"));
        }
        for (name, p) in [("drop_prob", self.drop_prob), ("occlusion_prob", self.occlusion_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(name, format!("probability {p} outside [0, 1]")));
            }
        }
        if !(self.min_separation.is_finite() && self.min_separation >= 0.0) {
            return Err(invalid("min_separation", "must be finite and >= 0"));
        }
        if !(self.frame_interval.is_finite() && self.frame_interval > 0.0) {
            return Err(invalid("frame_interval", "must be positive"));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const RIG_STREAM: u64 = 0;
const TRACK_STREAM: u64 = 1;
const SCENE_STREAM: u64 = 1 << 40;

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// A ring of cameras around the walking area, all looking at its centre at
/// roughly chest height. Camera `i` is named `cam{i}`.
pub fn generate_rig(config: &SynthConfig) -> Result<Rig, SynthError> {
    config.validate()?;
    let mut rng = config.rng(RIG_STREAM);
    let n = config.cameras;
    let mut cams = Vec::with_capacity(n);
    for i in 0..n {
        let angle = std::f64::consts::TAU * i as f64 / n as f64 + rng.random_range(-0.2..0.2);
        let radius = uniform(&mut rng, config.rig_radius);
        let height = uniform(&mut rng, config.rig_height);
        let f = uniform(&mut rng, config.focal);
        let fy = f * rng.random_range(0.99..1.01);
        let eye = Point3D::new(radius * angle.cos(), radius * angle.sin(), height);
        let target = Point3D::new(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0), 1000.0);
        let cam = CameraModel::look_at(
            format!("cam{i}"),
            config.image_size[0],
            config.image_size[1],
            (f, fy),
            eye,
            target,
            Vector3::z(),
        )
        .map_err(|e| invalid("cameras", e.to_string()))?;
        cams.push(cam);
    }
    Rig::new(cams).map_err(|e| invalid("cameras", e.to_string()))
}

/// Projects one pose into one camera, applying occlusion, keypoint drop,
/// image bounds and truncated Gaussian pixel noise.
fn observe(config: &SynthConfig, cam: &CameraModel, pose: &Pose3D, person_id: u32, rng: &mut impl Rng) -> SkeletonDetection {
    let occluded = rng.random_bool(config.occlusion_prob);
    let noise = Normal::new(0.0, config.pixel_noise).expect("validated sigma");
    let sigma = config.pixel_noise;
    let truncated = |rng: &mut dyn rand::RngCore| -> f64 {
        if sigma == 0.0 {
            return 0.0;
        }
        loop {
            let x = noise.sample(rng);
            if x.abs() <= 5.0 * sigma {
                return x;
            }
        }
    };
    let keypoints = pose
        .joints()
        .iter()
        .map(|joint| {
            let dropped = rng.random_bool(config.drop_prob);
            let px = match project(cam, joint) {
                Ok(px) if cam.in_bounds(&px) => px,
                _ => return Keypoint2D::HIDDEN,
            };
            let du = truncated(rng);
            let dv = truncated(rng);
            let conf = rng.random_range(0.5..=1.0);
            if occluded || dropped {
                Keypoint2D::HIDDEN
            } else {
                Keypoint2D::seen(px.u + du, px.v + dv, conf)
            }
        })
        .collect();
    SkeletonDetection {
        person_id: Some(person_id),
        keypoints,
    }
}

/// One person walking alone for `length` frames. Every frame has one
/// skeleton per camera (possibly with no visible keypoints) and the exact
/// ground-truth pose. Each `person_id` draws from its own random stream.
pub fn generate_track(
    config: &SynthConfig,
    rig: &Rig,
    person_id: u32,
    length: usize,
) -> Result<(PersonTrack, Vec<Pose3D>), SynthError> {
    config.validate()?;
    if length == 0 {
        return Err(invalid("frames", "track length must be at least 1"));
    }
    let mut rng = config.rng(TRACK_STREAM + person_id as u64);
    let half = config.area_half_extent;
    let shape = config.body.sample(&mut rng);
    let (x, y) = (rng.random_range(-half..half), rng.random_range(-half..half));
    let mut walker = Walker::new(shape, x, y, rng.random_range(0.0..std::f64::consts::TAU), &mut rng);
    let mut frames = Vec::with_capacity(length);
    let mut poses = Vec::with_capacity(length);
    for t in 0..length {
        if t > 0 {
            walker.advance(config.frame_interval, half, true, &mut rng);
        }
        let pose = walker.pose(config.num_keypoints);
        let views = rig
            .cameras()
            .iter()
            .map(|cam| CameraView {
                camera_id: cam.id().to_string(),
                skeletons: vec![observe(config, cam, &pose, person_id, &mut rng)],
            })
            .collect();
        frames.push(FrameSample {
            frame_id: t as u64,
            views,
            ground_truth: Some(vec![GroundTruthPose {
                person_id,
                pose: pose.clone(),
            }]),
        });
        poses.push(pose);
    }
    let track = PersonTrack::new(person_id, frames).expect("one tagged skeleton per camera");
    Ok((track, poses))
}

/// A mixed scene with `num_persons` people at least `min_separation` apart.
/// Persons invisible to a camera are omitted from that view and each view's
/// skeleton order is shuffled. Deterministic in `(seed, frame_id)`.
pub fn generate_scene(config: &SynthConfig, rig: &Rig, num_persons: usize, frame_id: u64) -> Result<FrameSample, SynthError> {
    config.validate()?;
    let mut rng = config.rng(SCENE_STREAM + frame_id);
    let half = config.area_half_extent;
    let mut walkers: Vec<Walker> = Vec::with_capacity(num_persons);
    let mut attempts = 0;
    while walkers.len() < num_persons {
        attempts += 1;
        if attempts > 10_000 {
            return Err(SynthError::Crowded {
                requested: num_persons,
                separation: config.min_separation,
            });
        }
        let shape = config.body.sample(&mut rng);
        let (x, y) = (rng.random_range(-half..half), rng.random_range(-half..half));
        let mut w = Walker::new(shape, x, y, rng.random_range(0.0..std::f64::consts::TAU), &mut rng);
        for _ in 0..rng.random_range(10..40) {
            w.advance(config.frame_interval, half, true, &mut rng);
        }
        let clear = walkers
            .iter()
            .all(|o| (o.x - w.x).hypot(o.y - w.y) >= config.min_separation);
        if clear {
            walkers.push(w);
        }
    }
    let poses: Vec<Pose3D> = walkers.iter().map(|w| w.pose(config.num_keypoints)).collect();
    let views = rig
        .cameras()
        .iter()
        .map(|cam| {
            let mut skeletons: Vec<SkeletonDetection> = poses
                .iter()
                .enumerate()
                .map(|(p, pose)| observe(config, cam, pose, p as u32, &mut rng))
                .filter(|s| s.any_visible())
                .collect();
            skeletons.shuffle(&mut rng);
            CameraView {
                camera_id: cam.id().to_string(),
                skeletons,
            }
        })
        .collect();
    let ground_truth = poses
        .into_iter()
        .enumerate()
        .map(|(p, pose)| GroundTruthPose {
            person_id: p as u32,
            pose,
        })
        .collect();
    Ok(FrameSample {
        frame_id,
        views,
        ground_truth: Some(ground_truth),
    })
}
