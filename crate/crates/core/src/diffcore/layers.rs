use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Adjacency, DiffError, ParamId, ParamSet, Tape, Var, ATTENTION_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Linear,
}

impl Activation {
    fn validate(self) -> Result<(), DiffError> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => {
                Err(DiffError::InvalidLayer(format!("leaky slope {s} outside (0, 1)")))
            }
            _ => Ok(()),
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Linear => x,
        }
    }
}

/// Symmetric uniform initialization with bound `1/sqrt(fan_in)`.
fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

/// Fully connected layer `activation(x · Wᵀ + b)`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    inputs: usize,
    outputs: usize,
}

impl DenseLayer {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        activation.validate()?;
        let weight = params.add(format!("{name}.weight"), uniform(rng, outputs, inputs, inputs));
        let bias = params.add(format!("{name}.bias"), uniform(rng, 1, outputs, inputs));
        Ok(Self {
            weight,
            bias,
            activation,
            inputs,
            outputs,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: Var) -> Result<Var, DiffError> {
        forward_dense(self, tape, params, input)
    }
}

pub fn forward_dense(layer: &DenseLayer, tape: &mut Tape, params: &ParamSet, input: Var) -> Result<Var, DiffError> {
    let w = tape.param(params, layer.weight);
    let b = tape.param(params, layer.bias);
    let xw = tape.matmul_t(input, w)?;
    let y = tape.add_row(xw, b)?;
    Ok(layer.activation.apply(tape, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadCombine {
    Concat,
    Mean,
}

/// Multi-head graph attention layer.
#[derive(Debug, Clone)]
pub struct GraphAttentionLayer {
    pub weight: ParamId,
    pub attention: ParamId,
    pub bias: ParamId,
    pub heads: usize,
    pub width: usize,
    pub combine: HeadCombine,
    pub activation: Activation,
    pub attention_slope: f64,
    inputs: usize,
}

impl GraphAttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        width: usize,
        heads: usize,
        combine: HeadCombine,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self, DiffError> {
        if heads == 0 || width == 0 {
            return Err(DiffError::InvalidLayer("heads and width must be positive".into()));
        }
        activation.validate()?;
        let weight = params.add(format!("{name}.weight"), uniform(rng, heads * width, inputs, inputs));
        let attention = params.add(format!("{name}.attention"), uniform(rng, heads, 2 * width, 2 * width));
        let out = match combine {
            HeadCombine::Concat => heads * width,
            HeadCombine::Mean => width,
        };
        let bias = params.add(format!("{name}.bias"), Array2::zeros((1, out)));
        Ok(Self {
            weight,
            attention,
            bias,
            heads,
            width,
            combine,
            activation,
            attention_slope: ATTENTION_SLOPE,
            inputs,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        match self.combine {
            HeadCombine::Concat => self.heads * self.width,
            HeadCombine::Mean => self.width,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        nodes: Var,
        adjacency: &Rc<Adjacency>,
    ) -> Result<Var, DiffError> {
        forward_gat(self, tape, params, nodes, adjacency)
    }
}

pub fn forward_gat(
    layer: &GraphAttentionLayer,
    tape: &mut Tape,
    params: &ParamSet,
    nodes: Var,
    adjacency: &Rc<Adjacency>,
) -> Result<Var, DiffError> {
    let w = tape.param(params, layer.weight);
    let a = tape.param(params, layer.attention);
    let b = tape.param(params, layer.bias);
    let z = tape.matmul_t(nodes, w)?;
    let mut h = tape.graph_attention(z, a, Rc::clone(adjacency), layer.heads, layer.attention_slope)?;
    if layer.combine == HeadCombine::Mean {
        h = tape.mean_heads(h, layer.heads)?;
    }
    let h = tape.add_row(h, b)?;
    Ok(layer.activation.apply(tape, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Matrix, LEAKY_SLOPE};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference relative error of `d(sum(w ⊙ f))` for every
    /// parameter scalar and every input scalar.
    fn check_gradients(params: &mut ParamSet, input: &Matrix, f: &dyn Fn(&mut Tape, &ParamSet, Var) -> Var) -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let weights = {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let y = f(&mut tape, params, x);
            let d = tape.value(y).dim();
            random(&mut r, d.0, d.1)
        };
        let objective = |tape: &mut Tape, params: &ParamSet, x: Var| {
            let y = f(tape, params, x);
            let w = tape.constant(weights.clone());
            let p = tape.mul(y, w).unwrap();
            tape.sum(p)
        };
        let eval = |params: &ParamSet, input: &Matrix| {
            let mut tape = Tape::new();
            let x = tape.constant(input.clone());
            let l = objective(&mut tape, params, x);
            tape.scalar(l)
        };
        params.zero_grads();
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let l = objective(&mut tape, params, x);
        tape.backward(l).unwrap();
        tape.accumulate_param_grads(params);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-6);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            for k in 0..params.value(id).len() {
                let orig = params.value(id).as_slice().unwrap()[k];
                params.value_mut(id).as_slice_mut().unwrap()[k] = orig + h;
                let fp = eval(params, input);
                params.value_mut(id).as_slice_mut().unwrap()[k] = orig - h;
                let fm = eval(params, input);
                params.value_mut(id).as_slice_mut().unwrap()[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                worst = worst.max(rel(params.grad(id).as_slice().unwrap()[k], numeric));
            }
        }
        let analytic = tape.grad(x).unwrap().clone();
        for k in 0..input.len() {
            let mut xp = input.clone();
            xp.as_slice_mut().unwrap()[k] += h;
            let mut xm = input.clone();
            xm.as_slice_mut().unwrap()[k] -= h;
            let numeric = (eval(params, &xp) - eval(params, &xm)) / (2.0 * h);
            worst = worst.max(rel(analytic.as_slice().unwrap()[k], numeric));
        }
        worst
    }

    #[test]
    fn identity_dense_layer() {
        let mut params = ParamSet::new();
        let layer = DenseLayer::new(&mut params, "d", 3, 3, Activation::Linear, &mut rng()).unwrap();
        *params.value_mut(layer.weight) = Array2::eye(3);
        params.value_mut(layer.bias).fill(0.0);
        let mut tape = Tape::new();
        let input = array![[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]];
        let x = tape.constant(input.clone());
        let y = layer.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[-1.0, 2.0]]);
        let y = tape.leaky_relu(x, LEAKY_SLOPE);
        assert_eq!(tape.value(y), &array![[-0.01, 2.0]]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut params = ParamSet::new();
        let layer = DenseLayer::new(&mut params, "d", 4, 2, Activation::Linear, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Array2::zeros((1, 3)));
        assert!(matches!(layer.forward(&mut tape, &params, x), Err(DiffError::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_bad_slope() {
        let mut params = ParamSet::new();
        assert!(DenseLayer::new(&mut params, "d", 2, 2, Activation::LeakyRelu(1.5), &mut rng()).is_err());
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut r = rng();
        for act in [Activation::LeakyRelu(LEAKY_SLOPE), Activation::Sigmoid, Activation::Linear] {
            let mut params = ParamSet::new();
            let layer = DenseLayer::new(&mut params, "d", 5, 4, act, &mut r).unwrap();
            let input = random(&mut r, 3, 5);
            let err = check_gradients(&mut params, &input, &|t, p, x| layer.forward(t, p, x).unwrap());
            assert!(err < 1e-4, "{act:?}: {err}");
        }
    }

    #[test]
    fn single_node_attention_is_linear_map() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let layer =
            GraphAttentionLayer::new(&mut params, "g", 3, 2, 2, HeadCombine::Concat, Activation::Linear, &mut r)
                .unwrap();
        let adj = Rc::new(Adjacency::self_loops(1));
        let input = array![[0.3, -0.7, 1.1]];
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let y = layer.forward(&mut tape, &params, x, &adj).unwrap();
        let expected = input.dot(&params.value(layer.weight).t());
        for (a, b) in tape.value(y).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn isolated_nodes_do_not_interact() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let layer = GraphAttentionLayer::new(
            &mut params,
            "g",
            3,
            4,
            3,
            HeadCombine::Concat,
            Activation::LeakyRelu(LEAKY_SLOPE),
            &mut r,
        )
        .unwrap();
        let adj = Rc::new(Adjacency::self_loops(2));
        let run = |input: Matrix| {
            let mut tape = Tape::new();
            let x = tape.constant(input);
            let y = layer.forward(&mut tape, &params, x, &adj).unwrap();
            tape.value(y).row(0).to_owned()
        };
        let a = run(array![[0.1, 0.2, 0.3], [1.0, 1.0, 1.0]]);
        let b = run(array![[0.1, 0.2, 0.3], [-5.0, 7.0, 0.5]]);
        assert_eq!(a, b);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut params = ParamSet::new();
        let mut r = rng();
        let layer =
            GraphAttentionLayer::new(&mut params, "g", 4, 3, 2, HeadCombine::Concat, Activation::Linear, &mut r)
                .unwrap();
        let adj = Rc::new(Adjacency::new(vec![vec![0, 1, 2], vec![1, 0], vec![2, 0, 3], vec![3, 2]]).unwrap());
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut r, 4, 4));
        let w = tape.param(&params, layer.weight);
        let a = tape.param(&params, layer.attention);
        let z = tape.matmul_t(x, w).unwrap();
        let h = tape.graph_attention(z, a, adj, 2, ATTENTION_SLOPE).unwrap();
        for head in tape.attention_weights(h).unwrap() {
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adjacency_validation() {
        assert!(matches!(
            Adjacency::new(vec![vec![0, 1], vec![0]]),
            Err(DiffError::MissingSelfLoop { node: 1 })
        ));
        assert!(matches!(Adjacency::new(vec![vec![0, 5]]), Err(DiffError::IndexOutOfRange { .. })));
    }

    #[test]
    fn gat_gradients_match_finite_differences() {
        let mut r = rng();
        let adj = Rc::new(
            Adjacency::new(vec![
                vec![0, 3, 4],
                vec![1, 3],
                vec![2, 4, 5],
                vec![3, 0, 1],
                vec![4, 0, 2],
                vec![5, 2],
            ])
            .unwrap(),
        );
        for combine in [HeadCombine::Concat, HeadCombine::Mean] {
            let mut params = ParamSet::new();
            let layer = GraphAttentionLayer::new(
                &mut params,
                "g",
                4,
                3,
                2,
                combine,
                Activation::LeakyRelu(LEAKY_SLOPE),
                &mut r,
            )
            .unwrap();
            // Non-zero bias so the output layer is exercised away from the origin.
            params.value_mut(layer.bias).mapv_inplace(|_| 0.1);
            let input = random(&mut r, 6, 4);
            let err = check_gradients(&mut params, &input, &|t, p, x| layer.forward(t, p, x, &adj).unwrap());
            assert!(err < 1e-4, "{combine:?}: {err}");
        }
    }
}
