//! Pinhole camera mathematics: projection, back-projected rays and
//! ray-midpoint triangulation.
//!
//! World units are millimetres. Extrinsics follow the world-to-camera
//! convention `x_cam = R * X_world + t`. No lens distortion is modelled;
//! detections are assumed to be undistorted already.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

pub type Point3D = nalgebra::Point3<f64>;

/// Minimum camera-frame depth (mm) for a point to be projectable.
pub const MIN_DEPTH: f64 = 1e-6;
/// Rays whose directions satisfy `|sin(angle)| < PARALLEL_SIN` are not triangulated.
pub const PARALLEL_SIN: f64 = 1e-6;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point at depth {depth} mm is at or behind the optical centre")]
    DegenerateDepth { depth: f64 },
    #[error("rays are nearly parallel (|sin| = {sin})")]
    NearParallel { sin: f64 },
    #[error("invalid camera `{id}`: {reason}")]
    InvalidCamera { id: String, reason: String },
}

#[derive(thiserror::Error, Debug)]
pub enum CalibrationError {
    #[error("failed to read calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed calibration at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("calibration is missing required field `{0}`")]
    MissingField(&'static str),
    #[error("unsupported {field} `{value}`")]
    Unsupported { field: &'static str, value: String },
    #[error(transparent)]
    Camera(#[from] GeometryError),
    #[error("duplicate camera id `{0}`")]
    DuplicateId(String),
}

/// A pixel position. May lie outside the image bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub u: f64,
    pub v: f64,
}

impl Point2D {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// A world-frame line through a camera's optical centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray3D {
    origin: Point3D,
    direction: Vector3<f64>,
}

impl Ray3D {
    /// Builds a ray, normalizing `direction`. Returns `None` for a zero or
    /// non-finite direction.
    pub fn new(origin: Point3D, direction: Vector3<f64>) -> Option<Self> {
        let norm = direction.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return None;
        }
        Some(Self {
            origin,
            direction: direction / norm,
        })
    }

    pub fn origin(&self) -> &Point3D {
        &self.origin
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn point_at(&self, s: f64) -> Point3D {
        self.origin + self.direction * s
    }

    /// Perpendicular distance from `p` to the infinite line.
    pub fn distance_to(&self, p: &Point3D) -> f64 {
        let w = p - self.origin;
        (w - self.direction * w.dot(&self.direction)).norm()
    }
}

/// One calibrated pinhole camera.
///
/// The projection matrix is derived from the other fields on construction
/// and on every mutation, so it always equals `K * [R | t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    id: String,
    width: u32,
    height: u32,
    intrinsics: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    projection: Matrix3x4<f64>,
    // Cached inverses used by back-projection.
    intrinsics_inv: Matrix3<f64>,
    centre: Point3D,
}

impl CameraModel {
    pub fn new(
        id: impl Into<String>,
        width: u32,
        height: u32,
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let id = id.into();
        validate(&id, width, height, &intrinsics, &rotation, &translation)?;
        let mut cam = Self {
            id,
            width,
            height,
            intrinsics,
            rotation,
            translation,
            projection: Matrix3x4::zeros(),
            intrinsics_inv: Matrix3::identity(),
            centre: Point3D::origin(),
        };
        cam.refresh();
        Ok(cam)
    }

    /// Convenience constructor from focal lengths and principal point.
    pub fn from_parts(
        id: impl Into<String>,
        width: u32,
        height: u32,
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(id, width, height, k, rotation, translation)
    }

    /// A camera at `eye` looking at `target`, with world `up` pointing
    /// towards negative image v.
    pub fn look_at(
        id: impl Into<String>,
        width: u32,
        height: u32,
        focal: (f64, f64),
        eye: Point3D,
        target: Point3D,
        up: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        let id = id.into();
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(GeometryError::InvalidCamera {
                id,
                reason: "viewing direction parallel to up vector".into(),
            });
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye.coords);
        let (w, h) = (width as f64, height as f64);
        Self::from_parts(id, width, height, (focal.0, focal.1, w / 2.0, h / 2.0), rotation, translation)
    }

    fn refresh(&mut self) {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        self.projection = self.intrinsics * rt;
        self.intrinsics_inv = self
            .intrinsics
            .try_inverse()
            .expect("validated intrinsics are invertible");
        self.centre = Point3D::from(-(self.rotation.transpose() * self.translation));
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `K * [R | t]`, mapping homogeneous world millimetres to homogeneous pixels.
    pub fn projection(&self) -> &Matrix3x4<f64> {
        &self.projection
    }

    /// Optical centre in world coordinates, `-Rᵀ t`.
    pub fn centre(&self) -> &Point3D {
        &self.centre
    }

    pub fn set_pose(&mut self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<(), GeometryError> {
        validate(&self.id, self.width, self.height, &self.intrinsics, &rotation, &translation)?;
        self.rotation = rotation;
        self.translation = translation;
        self.refresh();
        Ok(())
    }

    pub fn set_intrinsics(&mut self, intrinsics: Matrix3<f64>) -> Result<(), GeometryError> {
        validate(&self.id, self.width, self.height, &intrinsics, &self.rotation, &self.translation)?;
        self.intrinsics = intrinsics;
        self.refresh();
        Ok(())
    }

    /// Depth of a world point along the optical axis, in millimetres.
    pub fn depth(&self, point: &Point3D) -> f64 {
        (self.rotation * point.coords + self.translation).z
    }

    pub fn in_bounds(&self, p: &Point2D) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }
}

fn validate(
    id: &str,
    width: u32,
    height: u32,
    k: &Matrix3<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Result<(), GeometryError> {
    let bad = |reason: String| GeometryError::InvalidCamera {
        id: id.to_string(),
        reason,
    };
    if width == 0 || height == 0 {
        return Err(bad("image size must be positive".into()));
    }
    if k.iter().chain(r.iter()).chain(t.iter()).any(|x| !x.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    let (fx, fy, cx, cy) = (k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)]);
    if !(fx > 0.0 && fy > 0.0) {
        return Err(bad(format!("focal lengths must be positive (fx={fx}, fy={fy})")));
    }
    if !(cx > 0.0 && cx < width as f64 && cy > 0.0 && cy < height as f64) {
        return Err(bad(format!("principal point ({cx}, {cy}) outside the image")));
    }
    if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
        return Err(bad("intrinsics must be [[fx,0,cx],[0,fy,cy],[0,0,1]]".into()));
    }
    let ortho = (r.transpose() * r - Matrix3::identity()).abs().max();
    if ortho >= 1e-9 {
        return Err(bad(format!("rotation is not orthonormal (|RᵀR - I| = {ortho:e})")));
    }
    if r.determinant() <= 0.0 {
        return Err(bad("rotation has negative determinant".into()));
    }
    Ok(())
}

/// Projects a world point to pixels. The result is not clipped to the image.
pub fn project(camera: &CameraModel, point: &Point3D) -> Result<Point2D, GeometryError> {
    let depth = camera.depth(point);
    if !(depth > MIN_DEPTH) {
        return Err(GeometryError::DegenerateDepth { depth });
    }
    let p = camera.projection * point.to_homogeneous();
    Ok(Point2D::new(p.x / p.z, p.y / p.z))
}

/// The world-frame ray through the optical centre and `pixel`.
pub fn backproject_ray(camera: &CameraModel, pixel: &Point2D) -> Ray3D {
    let cam_dir = camera.intrinsics_inv * Vector3::new(pixel.u, pixel.v, 1.0);
    let dir = camera.rotation.transpose() * cam_dir;
    Ray3D::new(camera.centre, dir).expect("K⁻¹[u v 1]ᵀ has a unit third component")
}

/// Midpoint of the common perpendicular between two rays.
pub fn triangulate_pair(a: &Ray3D, b: &Ray3D) -> Result<Point3D, GeometryError> {
    let cos = a.direction.dot(&b.direction);
    let sin2 = 1.0 - cos * cos;
    let sin = sin2.max(0.0).sqrt();
    if sin < PARALLEL_SIN {
        return Err(GeometryError::NearParallel { sin });
    }
    let w0 = a.origin - b.origin;
    let d = a.direction.dot(&w0);
    let e = b.direction.dot(&w0);
    let s = (cos * e - d) / sin2;
    let t = (e - cos * d) / sin2;
    let pa = a.point_at(s);
    let pb = b.point_at(t);
    Ok(Point3D::from((pa.coords + pb.coords) * 0.5))
}

/// Centroid of all pairwise triangulations. `None` when fewer than two
/// observations are given or every pair is degenerate.
pub fn triangulate_multiview<'a, I>(observations: I) -> Option<Point3D>
where
    I: IntoIterator<Item = (&'a CameraModel, Point2D)>,
{
    let rays: Vec<Ray3D> = observations
        .into_iter()
        .map(|(cam, px)| backproject_ray(cam, &px))
        .collect();
    if rays.len() < 2 {
        return None;
    }
    let mut sum = Vector3::zeros();
    let mut count = 0usize;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            if let Ok(p) = triangulate_pair(&rays[i], &rays[j]) {
                sum += p.coords;
                count += 1;
            }
        }
    }
    (count > 0).then(|| Point3D::from(sum / count as f64))
}

/// An ordered set of calibrated cameras. Camera order defines the feature
/// block layout used by the networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    cameras: Vec<CameraModel>,
}

impl Rig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self, CalibrationError> {
        for (i, c) in cameras.iter().enumerate() {
            if cameras[..i].iter().any(|o| o.id == c.id) {
                return Err(CalibrationError::DuplicateId(c.id.clone()));
            }
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, index: usize) -> &CameraModel {
        &self.cameras[index]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.cameras.iter().map(|c| c.id.clone()).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: CalibrationFile = serde_path_to_error::deserialize(de).map_err(|e| CalibrationError::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        let convention = file.convention.ok_or(CalibrationError::MissingField("convention"))?;
        let unit = file.unit.ok_or(CalibrationError::MissingField("unit"))?;
        if convention != CONVENTION {
            return Err(CalibrationError::Unsupported {
                field: "convention",
                value: convention,
            });
        }
        if unit != UNIT {
            return Err(CalibrationError::Unsupported { field: "unit", value: unit });
        }
        let cameras = file
            .cameras
            .into_iter()
            .map(|c| {
                let k = Matrix3::from_fn(|r, col| c.k[r][col]);
                let rot = Matrix3::from_fn(|r, col| c.r[r][col]);
                CameraModel::new(c.id, c.width, c.height, k, rot, Vector3::from(c.t))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(cameras)
    }

    pub fn to_json(&self) -> String {
        let file = CalibrationFile {
            convention: Some(CONVENTION.into()),
            unit: Some(UNIT.into()),
            cameras: self
                .cameras
                .iter()
                .map(|c| CameraEntry {
                    id: c.id.clone(),
                    width: c.width,
                    height: c.height,
                    k: rows(&c.intrinsics),
                    r: rows(&c.rotation),
                    t: [c.translation.x, c.translation.y, c.translation.z],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("calibration serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }
}

const CONVENTION: &str = "world_to_camera";
const UNIT: &str = "mm";

fn rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [0, 1, 2].map(|r| [m[(r, 0)], m[(r, 1)], m[(r, 2)]])
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibrationFile {
    convention: Option<String>,
    unit: Option<String>,
    cameras: Vec<CameraEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraEntry {
    id: String,
    width: u32,
    height: u32,
    #[serde(rename = "K")]
    k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    r: [[f64; 3]; 3],
    t: [f64; 3],
}
