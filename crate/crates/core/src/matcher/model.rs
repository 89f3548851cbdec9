use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{block_gates, node_feature_len, FeatureScaler, VIEW_SLOTS};
use super::{MatchGraph, MatcherError};
use crate::diffcore::{
    sigmoid, Activation, Adjacency, Checkpoint, CheckpointError, GraphAttentionLayer, HeadCombine, Matrix, ParamSet,
    Tape, Var, ATTENTION_SLOPE, LEAKY_SLOPE,
};
use crate::geometry::Rig;

/// Architecture block stored in matcher checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherArch {
    pub kind: String,
    pub num_keypoints: usize,
    pub num_cameras: usize,
    pub camera_ids: Vec<String>,
    pub hidden: Vec<usize>,
    pub heads: Vec<usize>,
    pub leaky_slope: f64,
    pub attention_slope: f64,
}

impl MatcherArch {
    /// Four hidden layers of `[40, 40, 40, 30]` units per head with
    /// `[10, 10, 8, 5]` heads, then a single-unit output layer.
    pub fn new(rig: &Rig, num_keypoints: usize) -> Self {
        Self {
            kind: "matcher".into(),
            num_keypoints,
            num_cameras: rig.len(),
            camera_ids: rig.ids(),
            hidden: vec![40, 40, 40, 30],
            heads: vec![10, 10, 8, 5],
            leaky_slope: LEAKY_SLOPE,
            attention_slope: ATTENTION_SLOPE,
        }
    }

    pub fn input_len(&self) -> usize {
        node_feature_len(self.num_keypoints, self.num_cameras)
    }

    pub fn check_rig(&self, rig: &Rig) -> Result<(), CheckpointError> {
        if rig.ids() != self.camera_ids {
            return Err(CheckpointError::ArchMismatch {
                expected: format!("{:?}", rig.ids()),
                found: format!("{:?}", self.camera_ids),
            });
        }
        Ok(())
    }
}

/// Graph attention network producing one logit per node.
#[derive(Debug, Clone)]
pub struct MatcherModel {
    arch: MatcherArch,
    params: ParamSet,
    scaler: FeatureScaler,
    layers: Vec<GraphAttentionLayer>,
}

impl MatcherModel {
    pub fn new(arch: MatcherArch, seed: u64) -> Result<Self, MatcherError> {
        if arch.hidden.len() != arch.heads.len() || arch.hidden.contains(&0) || arch.heads.contains(&0) {
            return Err(MatcherError::InvalidConfig(format!(
                "hidden {:?} and heads {:?} must be non-zero and of equal length",
                arch.hidden, arch.heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let gates = block_gates(arch.num_keypoints, arch.num_cameras, VIEW_SLOTS, 2);
        let scaler = FeatureScaler::new(&mut params, gates);
        let mut layers = Vec::new();
        let mut width = arch.input_len();
        for (i, (&units, &heads)) in arch.hidden.iter().zip(&arch.heads).enumerate() {
            let mut layer = GraphAttentionLayer::new(
                &mut params,
                &format!("gat{i}"),
                width,
                units,
                heads,
                HeadCombine::Concat,
                Activation::LeakyRelu(arch.leaky_slope),
                &mut rng,
            )?;
            layer.attention_slope = arch.attention_slope;
            width = layer.outputs();
            layers.push(layer);
        }
        let mut out = GraphAttentionLayer::new(&mut params, "output", width, 1, 1, HeadCombine::Mean, Activation::Linear, &mut rng)?;
        out.attention_slope = arch.attention_slope;
        layers.push(out);
        Ok(Self {
            arch,
            params,
            scaler,
            layers,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, MatcherError> {
        let arch: MatcherArch = serde_json::from_value(ckpt.arch.clone()).map_err(|e| CheckpointError::ArchMismatch {
            expected: "a matcher architecture".into(),
            found: format!("{} ({e})", ckpt.arch),
        })?;
        let mut model = Self::new(arch, 0)?;
        ckpt.restore(&model.arch_json(), &mut model.params)?;
        Ok(model)
    }

    pub fn arch(&self) -> &MatcherArch {
        &self.arch
    }

    pub fn arch_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.arch).expect("arch serializes")
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.arch_json(), &self.params)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Fits the input standardization to head-node feature rows.
    pub fn fit_input<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        self.scaler.fit(&mut self.params, rows);
    }

    /// Whether `id` holds input statistics rather than trained weights.
    pub fn is_input_param(&self, id: crate::diffcore::ParamId) -> bool {
        self.scaler.is_input_param(id)
    }

    /// Records the network on `tape`; returns `N × 1` logits. The features
    /// enter as a constant after standardization.
    pub fn forward(&self, tape: &mut Tape, features: Var, adjacency: &Rc<Adjacency>) -> Result<Var, MatcherError> {
        let width = tape.value(features).ncols();
        if width != self.arch.input_len() {
            return Err(MatcherError::FeatureWidth {
                expected: self.arch.input_len(),
                found: width,
            });
        }
        let mut x = tape.constant(self.scaler.apply(&self.params, tape.value(features)));
        for layer in &self.layers {
            x = layer.forward(tape, &self.params, x, adjacency)?;
        }
        Ok(x)
    }

    /// Logits for every node of a feature matrix.
    pub fn logits(&self, features: &Matrix, adjacency: &Rc<Adjacency>) -> Result<Matrix, MatcherError> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let out = self.forward(&mut tape, x, adjacency)?;
        Ok(tape.value(out).clone())
    }

    /// Fills `graph.scores` with the sigmoid output at each edge node.
    pub fn score(&self, graph: &mut MatchGraph) -> Result<(), MatcherError> {
        if graph.edges.is_empty() {
            graph.scores = Some(Vec::new());
            return Ok(());
        }
        let logits = self.logits(&graph.features, &graph.adjacency)?;
        let h = graph.heads.len();
        graph.scores = Some((0..graph.edges.len()).map(|e| sigmoid(logits[(h + e, 0)])).collect());
        Ok(())
    }
}
