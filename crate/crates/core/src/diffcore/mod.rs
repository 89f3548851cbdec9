//! Minimal reverse-mode differentiable compute core: a recording tape,
//! dense and graph-attention layers, and an adaptive-moment optimizer.

mod checkpoint;
mod layers;
mod optim;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointError, FORMAT_VERSION};
pub use layers::{forward_dense, forward_gat, Activation, DenseLayer, GraphAttentionLayer, HeadCombine};
pub use optim::{adam_step, write_curve_csv, AdamConfig, AdamState, CurvePoint};
pub use tape::{sigmoid, CustomOp, ParamId, ParamSet, Tape, Tensor, Var};

/// Dense row-major matrix; the only value type on a tape.
pub type Matrix = ndarray::Array2<f64>;

/// LeakyReLU slope of hidden activations.
pub const LEAKY_SLOPE: f64 = 0.01;
/// LeakyReLU slope inside attention scoring.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("node {node} has no self-loop")]
    MissingSelfLoop { node: usize },
    #[error("index {index} out of range for {op} (len {len})")]
    IndexOutOfRange { op: &'static str, index: usize, len: usize },
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardTwice,
    #[error("backward requires a 1x1 loss, found {found:?}")]
    NotScalar { found: Vec<usize> },
    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),
}

/// Neighbour lists of a graph, self-loops included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Result<Self, DiffError> {
        let n = neighbors.len();
        for (i, nb) in neighbors.iter().enumerate() {
            if let Some(&j) = nb.iter().find(|&&j| j >= n) {
                return Err(DiffError::IndexOutOfRange {
                    op: "adjacency",
                    index: j,
                    len: n,
                });
            }
            if !nb.contains(&i) {
                return Err(DiffError::MissingSelfLoop { node: i });
            }
        }
        Ok(Self { neighbors })
    }

    /// Graph of `n` nodes whose only edges are self-loops.
    pub fn self_loops(n: usize) -> Self {
        Self {
            neighbors: (0..n).map(|i| vec![i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}
