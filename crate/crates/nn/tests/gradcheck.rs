//! Central finite-difference checks for every differentiable op, 64-bit.

use nn::{BatchNormMode, BnRunning, ConvGeom, NnError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds a scalar loss from leaf inputs; returns (loss, leaf vars).
type Build<'a> = dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>), NnError> + 'a;

fn loss_value(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let (loss, _) = build(&mut tape, inputs).unwrap();
    tape.value(loss).item().unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Compares analytic gradients of every input against central differences.
fn check(name: &str, build: &Build, inputs: Vec<Tensor<f64>>) {
    let mut tape = Tape::new();
    let (loss, vars) = build(&mut tape, &inputs).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("gradient missing").data().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (loss_value(build, &plus) - loss_value(build, &minus)) / (2.0 * H);
        }
        let e = rel_err(&analytic, &numeric);
        assert!(e <= TOL, "{name}: input {k} rel err {e:e}");
    }
}

fn target_mse(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead);
    let shape = tape.value(y).shape().to_vec();
    let tgt = tape.constant(rand_tensor(&mut rng, &shape));
    tape.mse(y, tgt)
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, 8, 8]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let w = tape.param(inp[1].clone());
            let b = tape.param(inp[2].clone());
            let y = tape.conv2d(x, w, b, ConvGeom::HALVING)?;
            Ok((target_mse(tape, y, seed)?, vec![x, w, b]))
        };
        check("conv2d", &build, inputs);
    }
}

#[test]
fn conv2d_single_channel_input_gradient() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let inputs = vec![rand_tensor(&mut rng, &[1, 1, 8, 8])];
        let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let wv = tape.constant(w.clone());
            let b = tape.constant(Tensor::zeros(&[1]));
            let y = tape.conv2d(x, wv, b, ConvGeom::HALVING)?;
            Ok((target_mse(tape, y, seed)?, vec![x]))
        };
        check("conv2d/1x8x8", &build, inputs);
    }
}

#[test]
fn deconv2d_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 3, 3]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[2]),
        ];
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let w = tape.param(inp[1].clone());
            let b = tape.param(inp[2].clone());
            let y = tape.deconv2d(x, w, b, ConvGeom::HALVING)?;
            Ok((target_mse(tape, y, seed)?, vec![x, w, b]))
        };
        check("deconv2d", &build, inputs);
    }
}

#[test]
fn batch_norm_gradients_both_modes() {
    for mode in [BatchNormMode::Train, BatchNormMode::Eval] {
        for seed in SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 20);
            let inputs = vec![
                rand_tensor(&mut rng, &[3, 2, 2, 2]),
                rand_tensor(&mut rng, &[2]),
                rand_tensor(&mut rng, &[2]),
            ];
            let running = BnRunning {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.3],
            };
            let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
                let x = tape.param(inp[0].clone());
                let g = tape.param(inp[1].clone());
                let b = tape.param(inp[2].clone());
                let (y, _) = tape.batch_norm(x, g, b, &running, mode)?;
                Ok((target_mse(tape, y, seed)?, vec![x, g, b]))
            };
            check("batch_norm", &build, inputs);
        }
    }
}

#[test]
fn batch_norm_on_features() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
        let inputs = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3]), rand_tensor(&mut rng, &[3])];
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let g = tape.param(inp[1].clone());
            let b = tape.param(inp[2].clone());
            let (y, _) = tape.batch_norm(x, g, b, &BnRunning::new(3), BatchNormMode::Train)?;
            Ok((target_mse(tape, y, seed)?, vec![x, g, b]))
        };
        check("batch_norm/2d", &build, inputs);
    }
}

#[test]
fn linear_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 40);
        let inputs = vec![rand_tensor(&mut rng, &[3, 11]), rand_tensor(&mut rng, &[5, 11]), rand_tensor(&mut rng, &[5])];
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let w = tape.param(inp[1].clone());
            let b = tape.param(inp[2].clone());
            let y = tape.linear(x, w, b)?;
            Ok((target_mse(tape, y, seed)?, vec![x, w, b]))
        };
        check("linear", &build, inputs);
    }
}

#[test]
fn pointwise_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        // keep relu inputs away from the kink
        let x = Tensor::from_fn(&[2, 7], |_| {
            let v: f64 = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) { v } else { -v }
        });
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let a = tape.relu(x)?;
            let b = tape.sigmoid(x)?;
            let c = tape.tanh(x)?;
            let ab = tape.add(a, b)?;
            let abc = tape.add(ab, c)?;
            let s = tape.scale(abc, 0.7)?;
            Ok((target_mse(tape, s, seed)?, vec![x]))
        };
        check("relu+sigmoid+tanh+scale", &build, vec![x]);
    }
}

#[test]
fn sigmoid_gradient_tight() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 60);
        let inputs = vec![Tensor::from_fn(&[9], |_| rng.random_range(-4.0..4.0))];
        let build = |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let x = tape.param(inp[0].clone());
            let y = tape.sigmoid(x)?;
            Ok((tape.sum(y)?, vec![x]))
        };
        let mut tape = Tape::new();
        let (loss, vars) = build(&mut tape, &inputs).unwrap();
        let g = tape.backward(loss).unwrap();
        let an = g.get(vars[0]).unwrap().data().to_vec();
        for (i, a) in an.iter().enumerate() {
            let (mut p, mut m) = (inputs.clone(), inputs.clone());
            p[0].data_mut()[i] += H;
            m[0].data_mut()[i] -= H;
            let n = (loss_value(&build, &p) - loss_value(&build, &m)) / (2.0 * H);
            assert!((a - n).abs() / a.abs().max(1e-12) <= 1e-6);
        }
    }
}

#[test]
fn structural_ops_gradients() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 70);
        let inputs = vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[2, 5]), rand_tensor(&mut rng, &[2, 8])];
        let build = move |tape: &mut Tape<f64>, inp: &[Tensor<f64>]| {
            let a = tape.param(inp[0].clone());
            let b = tape.param(inp[1].clone());
            let tgt = tape.param(inp[2].clone());
            let c = tape.concat(&[a, b])?;
            let r = tape.reshape(c, &[2, 2, 2, 2])?;
            let back = tape.reshape(r, &[2, 8])?;
            let l = tape.mse(back, tgt)?;
            let s = tape.sum(a)?;
            let l2 = tape.add(l, s)?;
            Ok((l2, vec![a, b, tgt]))
        };
        check("concat/reshape/mse/sum", &build, inputs);
    }
}

fn inner(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_and_deconv_are_adjoint() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 80);
        let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, &[2, cin, 8, 8]);
        let y = rand_tensor(&mut rng, &[2, cout, 4, 4]);
        let w = rand_tensor(&mut rng, &[cout, cin, 3, 3]);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let wv = tape.constant(w);
        let b_out = tape.constant(Tensor::zeros(&[cout]));
        let b_in = tape.constant(Tensor::zeros(&[cin]));
        let cx = tape.conv2d(xv, wv, b_out, ConvGeom::HALVING).unwrap();
        // the same weight tensor read as [in = cout, out = cin]
        let dy = tape.deconv2d(yv, wv, b_in, ConvGeom::HALVING).unwrap();
        let lhs = inner(tape.value(cx).data(), y.data());
        let rhs = inner(x.data(), tape.value(dy).data());
        assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::<f32>::new();
        let x = tape.param(Tensor::from_fn(&[3, 2, 8, 8], |_| rng.random_range(-1.0..1.0)));
        let w = tape.param(Tensor::from_fn(&[4, 2, 3, 3], |_| rng.random_range(-1.0..1.0)));
        let b = tape.param(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, ConvGeom::HALVING).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        (tape.value(y).clone(), g.get(w).unwrap().clone(), g.get(x).unwrap().clone())
    };
    assert_eq!(run(), run());
}
