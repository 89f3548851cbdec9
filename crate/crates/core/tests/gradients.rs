//! Analytic gradients against central finite differences.

use std::rc::Rc;

use mvpose_core::diffcore::{
    Activation, Adjacency, DenseLayer, GraphAttentionLayer, HeadCombine, Matrix, ParamSet, Tape, Var,
};
use mvpose_core::lifter::{ReprojectionLoss, Supervision};
use mvpose_core::matcher::{build_graph, MatcherArch, MatcherModel};
use mvpose_core::scene_forge::{generate_rig, generate_scene, SynthConfig};
use mvpose_core::Rig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Relative error between tape gradients and central differences of the
/// scalar built by `f` with respect to every entry of every input.
fn check_inputs(inputs: &[Matrix], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        analytic.extend(tape.grad(*v).unwrap().iter().copied());
        for j in 0..inputs[i].len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[i].as_slice_mut().unwrap()[j] += delta;
                let mut t = Tape::new();
                let vs: Vec<Var> = moved.into_iter().map(|m| t.constant(m)).collect();
                let o = f(&mut t, &vs);
                t.scalar(o)
            };
            numeric.push((eval(STEP) - eval(-STEP)) / (2.0 * STEP));
        }
    }
    rel_error(&analytic, &numeric)
}

/// Weighted sum reduces any output to a scalar with a non-trivial gradient.
fn project_to_scalar(tape: &mut Tape, out: Var, weights: &Matrix) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

#[test]
fn elementwise_and_linear_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let (n, m, k) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let x = random(&mut rng, n, k);
        let w = random(&mut rng, m, k);
        let b = random(&mut rng, 1, m);
        let y = random(&mut rng, n, m);
        let proj = random(&mut rng, n, m);
        let err = check_inputs(&[x, w, b, y], &|t, v| {
            let xw = t.matmul_t(v[0], v[1]).unwrap();
            let h = t.add_row(xw, v[2]).unwrap();
            let l = t.leaky_relu(h, 0.01);
            let s = t.sigmoid(v[3]);
            let p = t.mul(l, s).unwrap();
            let q = t.add(p, v[3]).unwrap();
            let r = t.scale(q, 0.7);
            project_to_scalar(t, r, &proj)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn head_mean_and_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let heads = rng.random_range(1..4);
        let n = rng.random_range(1..5);
        let x = random(&mut rng, n, heads);
        let targets: Vec<(usize, f64)> = (0..n).filter_map(|r| rng.random_bool(0.7).then(|| (r, f64::from(rng.random_bool(0.5))))).collect();
        let err = check_inputs(&[x], &|t, v| {
            let m = t.mean_heads(v[0], heads).unwrap();
            let m = t.scale(m, 3.0);
            t.bce_with_logits(m, targets.clone()).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}

#[test]
fn attention_over_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.random_range(1..5);
        let heads = rng.random_range(1..3);
        let width = rng.random_range(1..3);
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut nb = vec![i];
                nb.extend((0..n).filter(|&j| j != i && rng.random_bool(0.5)));
                nb
            })
            .collect();
        let adj = Rc::new(Adjacency::new(neighbors).unwrap());
        let z = random(&mut rng, n, heads * width);
        let a = random(&mut rng, heads, 2 * width);
        let proj = random(&mut rng, n, heads * width);
        let err = check_inputs(&[z, a], &|t, v| {
            let h = t.graph_attention(v[0], v[1], Rc::clone(&adj), heads, 0.2).unwrap();
            project_to_scalar(t, h, &proj)
        });
        assert!(err < 1e-4, "relative error {err}");
    }
}

/// Gradient of the scalar built by `f` with respect to every parameter.
fn check_params(params: &mut ParamSet, f: &dyn Fn(&mut Tape, &ParamSet) -> Var) -> f64 {
    let mut tape = Tape::new();
    let out = f(&mut tape, params);
    tape.backward(out).unwrap();
    tape.accumulate_param_grads(params);
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        analytic.extend(params.grad(id).iter().copied());
        for j in 0..params.value(id).len() {
            let mut eval = |delta: f64| {
                params.value_mut(id).as_slice_mut().unwrap()[j] += delta;
                let mut t = Tape::new();
                let o = f(&mut t, params);
                params.value_mut(id).as_slice_mut().unwrap()[j] -= delta;
                t.scalar(o)
            };
            let (hi, lo) = (eval(STEP), eval(-STEP));
            numeric.push((hi - lo) / (2.0 * STEP));
        }
    }
    params.zero_grads();
    rel_error(&analytic, &numeric)
}

#[test]
fn dense_and_gat_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for trial in 0..100 {
        let n = rng.random_range(1..4);
        let fin = rng.random_range(1..4);
        let mut params = ParamSet::new();
        let dense = DenseLayer::new(&mut params, "d", fin, 3, Activation::LeakyRelu(0.01), &mut rng).unwrap();
        let combine = if trial % 2 == 0 { HeadCombine::Concat } else { HeadCombine::Mean };
        let gat = GraphAttentionLayer::new(&mut params, "g", 3, 2, 2, combine, Activation::Sigmoid, &mut rng).unwrap();
        let x = random(&mut rng, n, fin);
        let adj = Rc::new(Adjacency::new((0..n).map(|i| (0..n).filter(|&j| j == i || (i + j) % 2 == 1).collect()).collect()).unwrap());
        let proj = random(&mut rng, n, gat.outputs());
        let err = check_params(&mut params, &|t, p| {
            let input = t.constant(x.clone());
            let h = dense.forward(t, p, input).unwrap();
            let o = gat.forward(t, p, h, &adj).unwrap();
            project_to_scalar(t, o, &proj)
        });
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

fn small_rig(seed: u64) -> Rig {
    generate_rig(&SynthConfig {
        cameras: 3,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn reprojection_loss_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let nk = 3;
    for trial in 0..100 {
        let rig = small_rig(trial);
        let bs = rng.random_range(1..4);
        let poses = Matrix::from_shape_fn((bs, 3 * nk), |(_, j)| match j % 3 {
            2 => rng.random_range(0.2..1.8),
            _ => rng.random_range(-1.0..1.0),
        });
        // Detections well away from the projections keep |u - du| off zero.
        let sups: Vec<Supervision> = (0..bs)
            .map(|_| {
                Supervision::new(
                    (0..rig.len())
                        .flat_map(|c| (0..nk).map(move |k| (c, k)))
                        .filter_map(|(c, k)| {
                            rng.random_bool(0.8)
                                .then(|| (c, k, rng.random_range(0.0..1280.0), rng.random_range(0.0..1024.0)))
                        })
                        .collect(),
                )
            })
            .collect();
        let err = check_inputs(&[poses], &|t, v| {
            let op = ReprojectionLoss::new(&rig, sups.clone(), nk).unwrap();
            t.custom(Box::new(op), &[v[0]]).unwrap()
        });
        assert!(err < 1e-4, "trial {trial}: relative error {err}");
    }
}

#[test]
fn reprojection_loss_behind_the_camera() {
    let rig = small_rig(3);
    let centre = rig.get(0).centre();
    // A joint just behind camera 0, in metres.
    let behind = (centre - (nalgebra::Point3::new(0.0, 0.0, 1000.0) - centre) * 1e-4) / 1000.0;
    let poses = Matrix::from_shape_vec((1, 3), vec![behind.x, behind.y, behind.z]).unwrap();
    let sups = vec![Supervision::new(vec![(0, 0, 640.0, 512.0)])];
    let err = check_inputs(&[poses], &|t, v| {
        let op = ReprojectionLoss::new(&rig, sups.clone(), 1).unwrap();
        t.custom(Box::new(op), &[v[0]]).unwrap()
    });
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn matcher_on_a_three_node_graph() {
    let cfg = SynthConfig {
        cameras: 2,
        pixel_noise: 0.0,
        ..SynthConfig::default()
    };
    let rig = generate_rig(&cfg).unwrap();
    let scene = generate_scene(&cfg, &rig, 1, 0).unwrap();
    let graph = build_graph(&scene, &rig).unwrap();
    assert_eq!(graph.num_nodes(), 3);
    let mut model = MatcherModel::new(MatcherArch::new(&rig, 15), 4).unwrap();
    let targets = vec![(2, 1.0)];

    let loss = |tape: &mut Tape, model: &MatcherModel| {
        let x = tape.constant(graph.features.clone());
        let logits = model.forward(tape, x, &graph.adjacency).unwrap();
        tape.bce_with_logits(logits, targets.clone()).unwrap()
    };
    let mut tape = Tape::new();
    let out = loss(&mut tape, &model);
    tape.backward(out).unwrap();
    tape.accumulate_param_grads(model.params_mut());

    // Every trained tensor, sampled at up to 40 entries.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ids: Vec<_> = model.params().ids().filter(|id| !model.is_input_param(*id)).collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for id in ids {
        let len = model.params().value(id).len();
        for _ in 0..40.min(len) {
            let j = rng.random_range(0..len);
            analytic.push(model.params().grad(id).as_slice().unwrap()[j]);
            let mut eval = |delta: f64| {
                model.params_mut().value_mut(id).as_slice_mut().unwrap()[j] += delta;
                let mut t = Tape::new();
                let o = loss(&mut t, &model);
                model.params_mut().value_mut(id).as_slice_mut().unwrap()[j] -= delta;
                t.scalar(o)
            };
            let (hi, lo) = (eval(STEP), eval(-STEP));
            numeric.push((hi - lo) / (2.0 * STEP));
        }
    }
    let err = rel_error(&analytic, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}
