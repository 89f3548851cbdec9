use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LiftInput, LifterError, Pose3D, LIFT_SLOTS};
use crate::diffcore::{
    Activation, Checkpoint, CheckpointError, DenseLayer, Matrix, ParamId, ParamSet, Tape, Var, LEAKY_SLOPE,
};
use crate::matcher::features::{block_gates, FeatureScaler, VIEW_SLOTS};
use crate::geometry::{Point3D, Rig};

/// Hidden-layer size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ArchProfile {
    #[default]
    Paper,
    Small,
}

impl ArchProfile {
    pub fn lifter_hidden(self) -> Vec<usize> {
        match self {
            ArchProfile::Paper => vec![3072, 3072, 2048, 2048, 1024, 1024, 1024],
            ArchProfile::Small => vec![512, 512, 256, 256, 128, 128, 128],
        }
    }
}

impl std::str::FromStr for ArchProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "small" => Ok(Self::Small),
            other => Err(format!("unknown profile `{other}` (expected paper or small)")),
        }
    }
}

/// Architecture block stored in lifter checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifterArch {
    pub kind: String,
    pub num_keypoints: usize,
    pub num_cameras: usize,
    pub camera_ids: Vec<String>,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl LifterArch {
    pub fn new(rig: &Rig, num_keypoints: usize, hidden: Vec<usize>) -> Self {
        Self {
            kind: "lifter".into(),
            num_keypoints,
            num_cameras: rig.len(),
            camera_ids: rig.ids(),
            hidden,
            leaky_slope: LEAKY_SLOPE,
        }
    }

    pub fn input_len(&self) -> usize {
        LIFT_SLOTS * self.num_cameras * self.num_keypoints
    }

    pub fn output_len(&self) -> usize {
        3 * self.num_keypoints
    }

    /// Fails unless `rig` has exactly the cameras the model was built for.
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

/// Per-joint starting point the network output is added to: the joint's
/// triangulation when available, otherwise the mean of the available
/// triangulations, otherwise the origin. Rows of `input` are raw lift inputs.
pub fn triangulation_prior(input: &Matrix, num_keypoints: usize, num_cameras: usize) -> Matrix {
    let mut out = Matrix::zeros((input.nrows(), 3 * num_keypoints));
    for (row, mut prior) in input.outer_iter().zip(out.outer_iter_mut()) {
        let (mut sum, mut n) = ([0.0; 3], 0usize);
        for k in 0..num_keypoints {
            let b = k * num_cameras * LIFT_SLOTS + VIEW_SLOTS;
            if row[b + 3] == 1.0 {
                for j in 0..3 {
                    prior[3 * k + j] = row[b + j];
                    sum[j] += row[b + j];
                }
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        for k in 0..num_keypoints {
            if row[k * num_cameras * LIFT_SLOTS + VIEW_SLOTS + 3] != 1.0 {
                for j in 0..3 {
                    prior[3 * k + j] = sum[j] / n as f64;
                }
            }
        }
    }
    out
}

/// Copy of `input` with every available triangulation expressed relative
/// to the row's triangulation centroid.
fn centre_triangulations(input: &Matrix, num_keypoints: usize, num_cameras: usize) -> Matrix {
    let prior = triangulation_prior(input, num_keypoints, num_cameras);
    let mut out = input.clone();
    for (mut row, prior) in out.outer_iter_mut().zip(prior.outer_iter()) {
        let (mut centre, mut n) = ([0.0; 3], 0usize);
        for k in 0..num_keypoints {
            if row[k * num_cameras * LIFT_SLOTS + VIEW_SLOTS + 3] == 1.0 {
                for j in 0..3 {
                    centre[j] += prior[3 * k + j];
                }
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        for k in 0..num_keypoints {
            for c in 0..num_cameras {
                let b = (k * num_cameras + c) * LIFT_SLOTS + VIEW_SLOTS;
                if row[b + 3] == 1.0 {
                    for j in 0..3 {
                        row[b + j] -= centre[j] / n as f64;
                    }
                }
            }
        }
    }
    out
}

/// MLP from a [`LiftInput`] to `3·N_k` coordinates in metres, added to the
/// [`triangulation_prior`] of the input.
#[derive(Debug, Clone)]
pub struct LifterModel {
    arch: LifterArch,
    params: ParamSet,
    scaler: FeatureScaler,
    layers: Vec<DenseLayer>,
}

impl LifterModel {
    pub fn new(arch: LifterArch, seed: u64) -> Result<Self, LifterError> {
        if arch.num_keypoints == 0 || arch.num_cameras == 0 || arch.hidden.contains(&0) {
            return Err(LifterError::InvalidConfig(format!("degenerate architecture {arch:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let scaler = FeatureScaler::new(&mut params, block_gates(arch.num_keypoints, arch.num_cameras, LIFT_SLOTS, 0));
        let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
        let mut width = arch.input_len();
        for (i, &h) in arch.hidden.iter().enumerate() {
            layers.push(DenseLayer::new(&mut params, &format!("hidden{i}"), width, h, Activation::LeakyRelu(arch.leaky_slope), &mut rng)?);
            width = h;
        }
        layers.push(DenseLayer::new(&mut params, "output", width, arch.output_len(), Activation::Linear, &mut rng)?);
        Ok(Self {
            arch,
            params,
            scaler,
            layers,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, LifterError> {
        let arch: LifterArch = serde_json::from_value(ckpt.arch.clone()).map_err(|e| {
            CheckpointError::ArchMismatch {
                expected: "a lifter architecture".into(),
                found: format!("{} ({e})", ckpt.arch),
            }
        })?;
        let mut model = Self::new(arch, 0)?;
        ckpt.restore(&model.arch_json(), &mut model.params)?;
        Ok(model)
    }

    pub fn arch(&self) -> &LifterArch {
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

    pub fn num_keypoints(&self) -> usize {
        self.arch.num_keypoints
    }

    /// Fits the input standardization to raw input rows.
    pub fn fit_input<'a>(&mut self, rows: impl IntoIterator<Item = &'a [f64]>) {
        let flat: Vec<f64> = rows.into_iter().flatten().copied().collect();
        let n = self.arch.input_len();
        let raw = Matrix::from_shape_vec((flat.len() / n, n), flat).expect("rows of input length");
        let centred = self.centred(&raw);
        self.scaler.fit(&mut self.params, centred.outer_iter().map(|r| r.to_slice().expect("contiguous rows")));
    }

    fn centred(&self, input: &Matrix) -> Matrix {
        centre_triangulations(input, self.arch.num_keypoints, self.arch.num_cameras)
    }

    /// Whether `id` holds input statistics rather than trained weights.
    pub fn is_input_param(&self, id: ParamId) -> bool {
        self.scaler.is_input_param(id)
    }

    /// Records the forward pass of a `BS × input_len` batch. The input
    /// enters as a constant after standardization.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, LifterError> {
        let raw = tape.value(input);
        let prior = triangulation_prior(raw, self.arch.num_keypoints, self.arch.num_cameras);
        let scaled = self.scaler.apply(&self.params, &self.centred(raw));
        let prior = tape.constant(prior);
        let mut x = tape.constant(scaled);
        for layer in &self.layers {
            x = layer.forward(tape, &self.params, x)?;
        }
        Ok(tape.add(x, prior)?)
    }

    /// Tape-free forward pass over a batch; outputs are metres.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix, LifterError> {
        if input.ncols() != self.arch.input_len() {
            return Err(LifterError::ShapeMismatch {
                expected: self.arch.input_len(),
                found: input.ncols(),
            });
        }
        let mut x = self.scaler.apply(&self.params, &self.centred(input));
        for layer in &self.layers {
            let w = self.params.value(layer.weight);
            let b = self.params.value(layer.bias);
            x = x.dot(&w.t()) + b;
            if let Activation::LeakyRelu(s) = layer.activation {
                x.mapv_inplace(|v| if v > 0.0 { v } else { s * v });
            }
        }
        Ok(x + triangulation_prior(input, self.arch.num_keypoints, self.arch.num_cameras))
    }

    /// All `N_k` joints of one person, in millimetres.
    pub fn lift(&self, input: &LiftInput) -> Result<Pose3D, LifterError> {
        let row = Matrix::from_shape_vec((1, input.len()), input.values().to_vec()).expect("one row");
        Ok(rows_to_poses(&self.predict(&row)?).remove(0))
    }

    pub fn lift_batch(&self, inputs: &[LiftInput]) -> Result<Vec<Pose3D>, LifterError> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.arch.input_len();
        if let Some(bad) = inputs.iter().find(|i| i.len() != n) {
            return Err(LifterError::ShapeMismatch {
                expected: n,
                found: bad.len(),
            });
        }
        let flat: Vec<f64> = inputs.iter().flat_map(|i| i.values().iter().copied()).collect();
        let batch = Matrix::from_shape_vec((inputs.len(), n), flat).expect("rows of equal length");
        Ok(rows_to_poses(&self.predict(&batch)?))
    }
}

/// Converts rows of metres into poses in millimetres.
pub(crate) fn rows_to_poses(rows: &Matrix) -> Vec<Pose3D> {
    rows.outer_iter()
        .map(|r| {
            Pose3D::new(
                r.as_slice()
                    .expect("contiguous rows")
                    .chunks_exact(3)
                    .map(|c| Point3D::new(c[0] * 1000.0, c[1] * 1000.0, c[2] * 1000.0))
                    .collect(),
            )
        })
        .collect()
}
