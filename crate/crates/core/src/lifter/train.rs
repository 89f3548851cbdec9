use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{reprojection_loss, ReprojectionLoss, Supervision};
use super::model::rows_to_poses;
use super::{build_lift_input, LifterArch, LifterError, LifterModel, LIFT_SLOTS};
use crate::diffcore::{AdamConfig, AdamState, CurvePoint, Matrix, ParamSet, Tape};
use crate::geometry::Rig;
use crate::scene_forge::{view_subsets, FrameSample, Keypoint2D, PersonTrack, SkeletonDetection, SubsetPolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifterTrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optimizer steps per epoch; defaults to one pass over the seeds.
    pub steps_per_epoch: Option<usize>,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Share of tracks held out for validation.
    pub val_fraction: f64,
    pub max_val_samples: usize,
    pub policy: SubsetPolicy,
    /// Fewest views an augmented input keeps (seeds with fewer views are
    /// used whole).
    pub min_views: usize,
    /// Probability of hiding a joint in every kept view of a training input;
    /// the loss still sees it through the seed sample.
    pub joint_dropout: f64,
    pub seed: u64,
}

impl Default for LifterTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            batch_size: 64,
            max_epochs: 200,
            steps_per_epoch: None,
            patience: 20,
            val_fraction: 0.1,
            max_val_samples: 512,
            policy: SubsetPolicy::Auto,
            min_views: 2,
            joint_dropout: 0.25,
            seed: 0,
        }
    }
}

impl LifterTrainConfig {
    fn validate(&self) -> Result<(), LifterError> {
        let bad = |m: &str| Err(LifterError::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.min_views == 0 {
            return bad("min_views must be at least 1");
        }
        if !(0.0..1.0).contains(&self.joint_dropout) {
            return bad("joint_dropout must lie in [0, 1)");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("adam.lr must be positive");
        }
        Ok(())
    }
}

/// Where a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleId {
    pub track: usize,
    pub frame: u64,
}

impl fmt::Display for SampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "track {} frame {}", self.track, self.frame)
    }
}

/// A seed sample: one person's detections in every camera of one frame.
#[derive(Debug, Clone)]
pub struct LifterSample {
    pub id: SampleId,
    /// `(rig camera index, detection)` for cameras with a visible keypoint.
    pub views: Vec<(usize, SkeletonDetection)>,
    pub supervision: Supervision,
}

impl LifterSample {
    /// `None` when the person is invisible to every camera.
    pub fn from_frame(id: SampleId, frame: &FrameSample, rig: &Rig) -> Option<Self> {
        let views: Vec<(usize, SkeletonDetection)> = frame
            .views
            .iter()
            .filter_map(|v| {
                let s = v.skeletons.first()?;
                let c = rig.index_of(&v.camera_id)?;
                s.any_visible().then(|| (c, s.clone()))
            })
            .collect();
        if views.is_empty() {
            return None;
        }
        let refs: Vec<_> = views.iter().map(|(c, s)| (*c, s)).collect();
        let supervision = Supervision::from_views(&refs);
        Some(Self { id, views, supervision })
    }

    fn view_refs(&self, keep: &[bool]) -> Vec<(usize, &SkeletonDetection)> {
        self.views
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|((c, s), _)| (*c, s))
            .collect()
    }
}

pub struct TrainedLifter {
    pub model: LifterModel,
    pub curve: Vec<CurvePoint>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub steps: u64,
}

struct Pair<'a> {
    seed: &'a LifterSample,
    keep: Vec<bool>,
    /// Joints removed from every kept view.
    hidden: Vec<usize>,
}

impl<'a> Pair<'a> {
    fn new(seed: &'a LifterSample, keep: Vec<bool>) -> Self {
        Self {
            seed,
            keep,
            hidden: Vec::new(),
        }
    }
}

fn batch_matrix(pairs: &[Pair], rig: &Rig, num_keypoints: usize) -> Result<Matrix, LifterError> {
    let width = LIFT_SLOTS * rig.len() * num_keypoints;
    let mut flat = Vec::with_capacity(pairs.len() * width);
    for p in pairs {
        let views = p.seed.view_refs(&p.keep);
        let input = if p.hidden.is_empty() {
            build_lift_input(&views, rig, num_keypoints)?
        } else {
            let masked: Vec<(usize, SkeletonDetection)> = views
                .iter()
                .map(|&(c, d)| {
                    let mut d = d.clone();
                    for &k in &p.hidden {
                        d.keypoints[k] = Keypoint2D::HIDDEN;
                    }
                    (c, d)
                })
                .collect();
            let refs: Vec<_> = masked.iter().map(|(c, d)| (*c, d)).collect();
            build_lift_input(&refs, rig, num_keypoints)?
        };
        flat.extend_from_slice(input.values());
    }
    Ok(Matrix::from_shape_vec((pairs.len(), width), flat).expect("rows of equal width"))
}

fn evaluate(model: &LifterModel, pairs: &[Pair], rig: &Rig) -> Result<f64, LifterError> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(128) {
        let x = batch_matrix(chunk, rig, model.num_keypoints())?;
        let poses = rows_to_poses(&model.predict(&x)?);
        let sups: Vec<Supervision> = chunk.iter().map(|p| p.seed.supervision.clone()).collect();
        let report = reprojection_loss(&poses, &sups, rig)?;
        total += report.loss * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn first_non_finite(model: &LifterModel, pairs: &[Pair], rig: &Rig) -> Result<(String, f64), LifterError> {
    let x = batch_matrix(pairs, rig, model.num_keypoints())?;
    let poses = rows_to_poses(&model.predict(&x)?);
    let sups: Vec<Supervision> = pairs.iter().map(|p| p.seed.supervision.clone()).collect();
    let report = reprojection_loss(&poses, &sups, rig)?;
    let (i, e) = report
        .per_sample
        .iter()
        .enumerate()
        .find(|(_, e)| !e.is_finite())
        .map(|(i, e)| (i, *e))
        .unwrap_or((0, f64::NAN));
    Ok((pairs[i].seed.id.to_string(), e))
}

/// View-removal masks that keep at least `min_views` views (or all of them).
fn augment_masks(views: usize, config: &LifterTrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let least = config.min_views.min(views);
    let mut masks = view_subsets(views, config.policy, rng);
    masks.retain(|m| m.iter().filter(|&&k| k).count() >= least);
    masks
}

fn split_tracks(tracks: &[PersonTrack], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = tracks.len();
    let n_val = if n >= 2 && fraction > 0.0 {
        ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
    } else {
        0
    };
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}

/// Trains on single-person tracks with view-removal augmentation: each
/// augmented input is scored against the detections of its seed sample.
/// Validation uses whole held-out tracks (or the last tenth of the frames
/// when only one track is given) and keeps the best-scoring parameters.
pub fn train_lifter(
    tracks: &[PersonTrack],
    rig: &Rig,
    arch: LifterArch,
    config: &LifterTrainConfig,
) -> Result<TrainedLifter, LifterError> {
    config.validate()?;
    arch.check_rig(rig)?;
    let nk = arch.num_keypoints;
    let mut model = LifterModel::new(arch, config.seed)?;
    let samples_of = |ti: usize, frames: &[FrameSample]| -> Vec<LifterSample> {
        frames
            .iter()
            .filter_map(|f| LifterSample::from_frame(SampleId { track: ti, frame: f.frame_id }, f, rig))
            .filter(|s| s.views.iter().all(|(_, d)| d.keypoints.len() == nk))
            .collect()
    };
    let (train_idx, val_idx) = split_tracks(tracks, config.val_fraction);
    let mut train: Vec<LifterSample> = train_idx.iter().flat_map(|&i| samples_of(i, tracks[i].frames())).collect();
    let mut val: Vec<LifterSample> = val_idx.iter().flat_map(|&i| samples_of(i, tracks[i].frames())).collect();
    if val.is_empty() && config.val_fraction > 0.0 && train.len() >= 2 {
        let cut = train.len() - (train.len() / 10).max(1);
        val = train.split_off(cut);
    }
    if train.is_empty() {
        return Err(LifterError::NoTrainingData);
    }
    if val.is_empty() {
        val = train.clone();
    }
    let full: Vec<Pair> = train
        .iter()
        .map(|s| Pair::new(s, vec![true; s.views.len()]))
        .collect();
    let rows = batch_matrix(&full, rig, nk)?;
    model.fit_input(rows.as_slice().expect("standard layout").chunks_exact(rows.ncols()));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let stride = (val.len() / config.max_val_samples.max(1)).max(1);
    let val_pairs: Vec<Pair> = val
        .iter()
        .step_by(stride)
        .take(config.max_val_samples.max(1))
        .map(|s| {
            let masks = augment_masks(s.views.len(), config, &mut rng);
            let keep = masks.choose(&mut rng).expect("at least the full mask").clone();
            Pair::new(s, keep)
        })
        .collect();

    let initial_val_loss = evaluate(&model, &val_pairs, rig)?;
    let mut best_val_loss = initial_val_loss;
    let mut best_params: ParamSet = model.params().clone();
    let mut adam = AdamState::new(model.params(), config.adam);
    let steps_per_epoch = config
        .steps_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(config.batch_size));
    let mut curve = Vec::new();
    let mut stale = 0;
    rng.set_stream(2);
    for epoch in 1..=config.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..steps_per_epoch {
            let pairs: Vec<Pair> = (0..config.batch_size)
                .map(|_| {
                    let seed = &train[rng.random_range(0..train.len())];
                    let masks = augment_masks(seed.views.len(), config, &mut rng);
                    let keep = masks[rng.random_range(0..masks.len())].clone();
                    let mut pair = Pair::new(seed, keep);
                    if config.joint_dropout > 0.0 {
                        pair.hidden = (0..nk).filter(|_| rng.random_bool(config.joint_dropout)).collect();
                    }
                    pair
                })
                .collect();
            let x = batch_matrix(&pairs, rig, nk)?;
            let sups = pairs.iter().map(|p| p.seed.supervision.clone()).collect();
            let mut tape = Tape::new();
            let input = tape.constant(x);
            let out = model.forward(&mut tape, input)?;
            let op = ReprojectionLoss::new(rig, sups, nk)?;
            let loss = tape.custom(Box::new(op), &[out])?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                let (sample, loss) = first_non_finite(&model, &pairs, rig)?;
                return Err(LifterError::NonFiniteLoss { sample, loss });
            }
            tape.backward(loss)?;
            tape.accumulate_param_grads(model.params_mut());
            adam.step(model.params_mut());
            model.params_mut().zero_grads();
            epoch_loss += value;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;
        let val_loss = evaluate(&model, &val_pairs, rig)?;
        if !val_loss.is_finite() {
            return Err(LifterError::NonFiniteLoss {
                sample: "validation set".into(),
                loss: val_loss,
            });
        }
        log::info!("lifter epoch {epoch}: train loss {train_loss:.4e}, val loss {val_loss:.4e}");
        curve.push(CurvePoint {
            epoch,
            loss: train_loss,
            val_metric: val_loss,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_params = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainedLifter {
        model,
        curve,
        initial_val_loss,
        best_val_loss,
        steps: adam.step_count(),
    })
}
