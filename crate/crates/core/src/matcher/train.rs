use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::combine_tracks;
use super::{build_graph, MatchGraph, MatcherArch, MatcherError, MatcherModel};
use crate::diffcore::{sigmoid, Adjacency, AdamConfig, AdamState, CurvePoint, Matrix, Tape};
use crate::geometry::Rig;
use crate::scene_forge::{FrameSample, PersonTrack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherTrainConfig {
    pub adam: AdamConfig,
    /// Graphs joined into one disjoint union per optimizer step.
    pub graphs_per_batch: usize,
    pub max_steps: usize,
    /// Optimizer steps between validation passes.
    pub eval_every: usize,
    /// Validation passes without improvement before stopping.
    pub patience: usize,
    pub max_persons: usize,
    /// Share of each track's frames (its tail) held out for validation.
    pub val_fraction: f64,
    pub val_graphs: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for MatcherTrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            graphs_per_batch: 4,
            max_steps: 5000,
            eval_every: 50,
            patience: 20,
            max_persons: 10,
            val_fraction: 0.2,
            val_graphs: 100,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl MatcherTrainConfig {
    fn validate(&self) -> Result<(), MatcherError> {
        let bad = |m: &str| Err(MatcherError::InvalidConfig(m.to_string()));
        if self.graphs_per_batch == 0 || self.max_steps == 0 || self.eval_every == 0 || self.val_graphs == 0 {
            return bad("graphs_per_batch, max_steps, eval_every and val_graphs must be positive");
        }
        if self.max_persons == 0 {
            return bad("max_persons must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad("adam.lr must be positive");
        }
        Ok(())
    }
}

pub struct TrainedMatcher {
    pub model: MatcherModel,
    pub curve: Vec<CurvePoint>,
    /// BCE of the first optimizer batch, before any update.
    pub first_batch_loss: f64,
    pub best_val_accuracy: f64,
    pub steps: u64,
    pub warnings: Vec<String>,
}

/// Disjoint union of graphs: stacked features, shifted adjacency, and the
/// rows and labels of every edge node.
pub struct GraphBatch {
    pub features: Matrix,
    pub adjacency: Rc<Adjacency>,
    pub targets: Vec<(usize, f64)>,
}

pub fn batch_graphs(graphs: &[MatchGraph]) -> GraphBatch {
    let width = graphs.first().map_or(0, |g| g.features.ncols());
    let total: usize = graphs.iter().map(MatchGraph::num_nodes).sum();
    let mut features = Matrix::zeros((total, width));
    let mut neighbors = Vec::with_capacity(total);
    let mut targets = Vec::new();
    let mut offset = 0;
    for g in graphs {
        let n = g.num_nodes();
        features.slice_mut(ndarray::s![offset..offset + n, ..]).assign(&g.features);
        for i in 0..n {
            neighbors.push(g.adjacency.neighbors(i).iter().map(|&j| j + offset).collect());
        }
        if let Some(labels) = &g.labels {
            targets.extend(labels.iter().enumerate().map(|(e, &l)| (offset + g.edge_node(e), l)));
        }
        offset += n;
    }
    GraphBatch {
        features,
        adjacency: Rc::new(Adjacency::new(neighbors).expect("shifted graphs stay valid")),
        targets,
    }
}

/// Fraction of labelled edge nodes whose score falls on the right side of
/// `threshold`.
pub fn edge_accuracy(model: &MatcherModel, graphs: &[MatchGraph], threshold: f64) -> Result<f64, MatcherError> {
    let (mut right, mut total) = (0usize, 0usize);
    for chunk in graphs.chunks(8) {
        let batch = batch_graphs(chunk);
        if batch.targets.is_empty() {
            continue;
        }
        let logits = model.logits(&batch.features, &batch.adjacency)?;
        for &(row, label) in &batch.targets {
            let positive = sigmoid(logits[(row, 0)]) >= threshold;
            right += usize::from(positive == (label == 1.0));
            total += 1;
        }
    }
    Ok(if total == 0 { 1.0 } else { right as f64 / total as f64 })
}

fn graph_from(tracks: &[&[FrameSample]], rig: &Rig, max_persons: usize, rng: &mut ChaCha8Rng) -> Result<MatchGraph, MatcherError> {
    let sample = combine_tracks(tracks, rig, max_persons, rng).ok_or(MatcherError::InsufficientTracks)?;
    build_graph(&sample, rig)
}

/// Supervised BCE training on edge nodes of graphs assembled on the fly
/// from single-person tracks. Each track's last `val_fraction` of frames
/// feeds a fixed validation set; the best validation edge accuracy wins.
pub fn train_matcher(
    tracks: &[PersonTrack],
    rig: &Rig,
    arch: MatcherArch,
    config: &MatcherTrainConfig,
) -> Result<TrainedMatcher, MatcherError> {
    config.validate()?;
    arch.check_rig(rig)?;
    let mut warnings = Vec::new();
    let usable = tracks.iter().filter(|t| !t.is_empty()).count();
    if usable == 0 {
        return Err(MatcherError::InsufficientTracks);
    }
    if usable < 2 || config.max_persons == 1 {
        let w = "DataImbalance: every training graph holds one person, so all edge labels are positive".to_string();
        log::warn!("{w}");
        warnings.push(w);
    }
    let mut train_parts: Vec<&[FrameSample]> = Vec::new();
    let mut val_parts: Vec<&[FrameSample]> = Vec::new();
    for t in tracks.iter().filter(|t| !t.is_empty()) {
        let frames = t.frames();
        let n_val = ((frames.len() as f64 * config.val_fraction).round() as usize).min(frames.len() - 1);
        let (train, val) = frames.split_at(frames.len() - n_val);
        train_parts.push(train);
        if !val.is_empty() {
            val_parts.push(val);
        }
    }
    if val_parts.is_empty() {
        val_parts = train_parts.clone();
    }

    let mut model = MatcherModel::new(arch, config.seed)?;
    let mut head_rows = Vec::new();
    for part in &train_parts {
        for frame in part.iter().filter(|f| f.num_detections() > 0) {
            let g = build_graph(frame, rig)?;
            head_rows.extend(g.features.outer_iter().take(g.heads.len()).map(|r| r.to_vec()));
        }
    }
    model.fit_input(head_rows.iter().map(Vec::as_slice));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let val: Vec<MatchGraph> = (0..config.val_graphs)
        .map(|_| graph_from(&val_parts, rig, config.max_persons, &mut rng))
        .collect::<Result<_, _>>()?;
    rng.set_stream(2);

    let mut adam = AdamState::new(model.params(), config.adam);
    let mut best_acc = edge_accuracy(&model, &val, config.threshold)?;
    let mut best_params = model.params().clone();
    let mut curve = Vec::new();
    let mut first_batch_loss = f64::NAN;
    let (mut window_loss, mut window_steps, mut stale) = (0.0, 0usize, 0usize);
    for step in 1..=config.max_steps {
        let graphs: Vec<MatchGraph> = (0..config.graphs_per_batch)
            .map(|_| graph_from(&train_parts, rig, config.max_persons, &mut rng))
            .collect::<Result<_, _>>()?;
        let batch = batch_graphs(&graphs);
        if batch.targets.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let x = tape.constant(batch.features);
        let logits = model.forward(&mut tape, x, &batch.adjacency)?;
        let loss = tape.bce_with_logits(logits, batch.targets)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(MatcherError::NonFiniteLoss { step, loss: value });
        }
        if first_batch_loss.is_nan() {
            first_batch_loss = value;
        }
        tape.backward(loss)?;
        tape.accumulate_param_grads(model.params_mut());
        adam.step(model.params_mut());
        model.params_mut().zero_grads();
        window_loss += value;
        window_steps += 1;

        if step % config.eval_every == 0 || step == config.max_steps {
            let acc = edge_accuracy(&model, &val, config.threshold)?;
            let loss = window_loss / window_steps.max(1) as f64;
            log::info!("matcher step {step}: train bce {loss:.4}, val edge accuracy {acc:.4}");
            curve.push(CurvePoint {
                epoch: curve.len() + 1,
                loss,
                val_metric: acc,
            });
            (window_loss, window_steps) = (0.0, 0);
            if acc > best_acc {
                best_acc = acc;
                best_params = model.params().clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    *model.params_mut() = best_params;
    Ok(TrainedMatcher {
        model,
        curve,
        first_batch_loss,
        best_val_accuracy: best_acc,
        steps: adam.step_count(),
        warnings,
    })
}
