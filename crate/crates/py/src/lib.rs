//! Python bindings. Frames, predictions and reports cross the boundary as
//! the same JSON documents the command-line tool reads and writes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mvpose_core::diffcore::Checkpoint;
use mvpose_core::geometry::{project, triangulate_multiview};
use mvpose_core::lifter::{build_lift_input, triangulation_baseline, LifterModel};
use mvpose_core::matcher::MatcherModel;
use mvpose_core::metrics::{evaluate as evaluate_frames, EvalConfig};
use mvpose_core::pipeline::{frame_eval, predict_frame, read_predictions, write_predictions, Estimator, FramePrediction};
use mvpose_core::scene_forge::{
    generate_rig, generate_scene, generate_track, parse_detections, write_detections, FrameSample, Keypoint2D,
    SkeletonDetection, SynthConfig,
};
use mvpose_core::{Point2D, Point3D, Rig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Xyz = (f64, f64, f64);
/// `(camera index, keypoints)`, each keypoint `(u, v, confidence)` or `None`.
type PyView = (usize, Vec<Option<Xyz>>);

fn detections(views: &[PyView]) -> Vec<(usize, SkeletonDetection)> {
    views
        .iter()
        .map(|(c, kps)| {
            let keypoints = kps
                .iter()
                .map(|k| k.map_or(Keypoint2D::HIDDEN, |(u, v, conf)| Keypoint2D::seen(u, v, conf)))
                .collect();
            (
                *c,
                SkeletonDetection {
                    person_id: None,
                    keypoints,
                },
            )
        })
        .collect()
}

fn xyz(p: &Point3D) -> Xyz {
    (p.x, p.y, p.z)
}

/// Calibrated camera rig.
#[pyclass(name = "Rig", module = "mvpose", frozen)]
struct PyRig {
    inner: Rig,
}

#[pymethods]
impl PyRig {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Rig::load(path).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Rig::from_json(text).map_err(value_err)?,
        })
    }

    /// Cameras on a ring around the capture area, as `mvpose synth` places them.
    #[staticmethod]
    #[pyo3(signature = (seed = 0, cameras = 5))]
    fn synthetic(seed: u64, cameras: usize) -> PyResult<Self> {
        let cfg = SynthConfig {
            seed,
            cameras,
            ..SynthConfig::default()
        };
        Ok(Self {
            inner: generate_rig(&cfg).map_err(value_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn camera_ids(&self) -> Vec<String> {
        self.inner.ids()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Pixel of a world point (mm) in camera `camera`.
    fn project(&self, camera: usize, point: Xyz) -> PyResult<(f64, f64)> {
        if camera >= self.inner.len() {
            return Err(value_err(format!("camera index {camera} out of range")));
        }
        let p = project(self.inner.get(camera), &Point3D::new(point.0, point.1, point.2)).map_err(value_err)?;
        Ok((p.u, p.v))
    }

    /// Least-squares intersection of `(camera, u, v)` rays; `None` for
    /// fewer than two usable observations.
    fn triangulate(&self, observations: Vec<(usize, f64, f64)>) -> PyResult<Option<Xyz>> {
        if let Some((c, _, _)) = observations.iter().find(|(c, _, _)| *c >= self.inner.len()) {
            return Err(value_err(format!("camera index {c} out of range")));
        }
        let obs = observations.iter().map(|&(c, u, v)| (self.inner.get(c), Point2D::new(u, v)));
        Ok(triangulate_multiview(obs).as_ref().map(xyz))
    }

    fn __repr__(&self) -> String {
        format!("Rig({:?})", self.inner.ids())
    }
}

fn load_ckpt(path: &PathBuf) -> PyResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
}

/// Trained view-matching network.
#[pyclass(name = "Matcher", module = "mvpose", frozen)]
struct PyMatcher {
    inner: MatcherModel,
}

#[pymethods]
impl PyMatcher {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: MatcherModel::from_checkpoint(&load_ckpt(&path)?).map_err(value_err)?,
        })
    }

    #[getter]
    fn num_keypoints(&self) -> usize {
        self.inner.arch().num_keypoints
    }
}

/// Trained 3D lifter.
#[pyclass(name = "Lifter", module = "mvpose", frozen)]
struct PyLifter {
    inner: LifterModel,
}

#[pymethods]
impl PyLifter {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: LifterModel::from_checkpoint(&load_ckpt(&path)?).map_err(value_err)?,
        })
    }

    #[getter]
    fn num_keypoints(&self) -> usize {
        self.inner.num_keypoints()
    }

    /// Every joint of one person (mm) from its views.
    fn lift(&self, rig: &PyRig, views: Vec<PyView>) -> PyResult<Vec<Xyz>> {
        self.inner.arch().check_rig(&rig.inner).map_err(value_err)?;
        let dets = detections(&views);
        let refs: Vec<(usize, &SkeletonDetection)> = dets.iter().map(|(c, d)| (*c, d)).collect();
        let input = build_lift_input(&refs, &rig.inner, self.inner.num_keypoints()).map_err(value_err)?;
        let pose = self.inner.lift(&input).map_err(value_err)?;
        Ok(pose.joints().iter().map(xyz).collect())
    }
}

/// Per-joint triangulation of one person; joints seen once stay `None`.
#[pyfunction]
fn triangulate_person(rig: &PyRig, views: Vec<PyView>) -> PyResult<Vec<Option<Xyz>>> {
    let dets = detections(&views);
    let nk = dets.first().map_or(0, |(_, d)| d.keypoints.len());
    let refs: Vec<(usize, &SkeletonDetection)> = dets.iter().map(|(c, d)| (*c, d)).collect();
    let pose = triangulation_baseline(&refs, &rig.inner, nk).map_err(value_err)?;
    Ok(pose.joints.iter().map(|j| j.as_ref().map(xyz)).collect())
}

fn to_jsonl(samples: &[FrameSample]) -> PyResult<String> {
    let mut buf = Vec::new();
    write_detections(samples, &mut buf).map_err(|e| PyIOError::new_err(e.to_string()))?;
    String::from_utf8(buf).map_err(value_err)
}

/// Multi-person evaluation frames as detection JSON lines with ground
/// truth; frame `i` holds `1 + i % max_persons` people.
#[pyfunction]
#[pyo3(signature = (rig, frames, max_persons = 4, seed = 0))]
fn synth_frames(rig: &PyRig, frames: u64, max_persons: usize, seed: u64) -> PyResult<String> {
    if max_persons == 0 {
        return Err(value_err("max_persons must be at least 1"));
    }
    let cfg = SynthConfig {
        seed,
        cameras: rig.inner.len(),
        ..SynthConfig::default()
    };
    let samples = (0..frames)
        .map(|f| generate_scene(&cfg, &rig.inner, 1 + (f as usize % max_persons), f))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    to_jsonl(&samples)
}

/// One person walking alone, as detection JSON lines.
#[pyfunction]
#[pyo3(signature = (rig, person_id, frames, seed = 0))]
fn synth_track(rig: &PyRig, person_id: u32, frames: usize, seed: u64) -> PyResult<String> {
    let cfg = SynthConfig {
        seed,
        cameras: rig.inner.len(),
        ..SynthConfig::default()
    };
    let (track, _) = generate_track(&cfg, &rig.inner, person_id, frames).map_err(value_err)?;
    to_jsonl(track.frames())
}

/// Groups and estimates every frame of `detections` (JSON lines) and
/// returns predictions as JSON lines. Without a lifter, joints are
/// triangulated.
#[pyfunction]
#[pyo3(signature = (rig, matcher, detections, lifter = None, threshold = 0.5))]
fn predict(rig: &PyRig, matcher: &PyMatcher, detections: &str, lifter: Option<&PyLifter>, threshold: f64) -> PyResult<String> {
    matcher.inner.arch().check_rig(&rig.inner).map_err(value_err)?;
    if let Some(l) = lifter {
        l.inner.arch().check_rig(&rig.inner).map_err(value_err)?;
    }
    let samples = parse_detections(detections).map_err(value_err)?;
    let estimator = lifter.map_or(Estimator::Triangulation, |l| Estimator::Lifter(&l.inner));
    let predictions = samples
        .iter()
        .map(|s| predict_frame(s, &rig.inner, &matcher.inner, threshold, estimator).map(|(p, _)| p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(value_err)?;
    let mut buf = Vec::new();
    write_predictions(&predictions, &mut buf).map_err(|e| PyIOError::new_err(e.to_string()))?;
    String::from_utf8(buf).map_err(value_err)
}

/// Scores prediction JSON lines against ground-truth frames; returns the
/// report as JSON.
#[pyfunction]
fn evaluate(predictions: &str, ground_truth: &str) -> PyResult<String> {
    let preds = read_predictions(predictions.as_bytes()).map_err(value_err)?;
    let truth = parse_detections(ground_truth).map_err(value_err)?;
    let by_id: BTreeMap<u64, &FramePrediction> = preds.iter().map(|p| (p.frame_id, p)).collect();
    let frames: Vec<_> = truth
        .iter()
        .map(|s| {
            let empty = FramePrediction {
                frame_id: s.frame_id,
                persons: Vec::new(),
            };
            frame_eval(by_id.get(&s.frame_id).copied().unwrap_or(&empty), s)
        })
        .collect();
    let report = evaluate_frames(&frames, &EvalConfig::default()).map_err(value_err)?;
    Ok(report.to_json())
}

#[pymodule]
fn mvpose(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRig>()?;
    m.add_class::<PyMatcher>()?;
    m.add_class::<PyLifter>()?;
    m.add_function(wrap_pyfunction!(triangulate_person, m)?)?;
    m.add_function(wrap_pyfunction!(synth_frames, m)?)?;
    m.add_function(wrap_pyfunction!(synth_track, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
