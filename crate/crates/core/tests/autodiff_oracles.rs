use cipher_vit::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data)
        .unwrap()
        .with_requires_grad(true)
}

/// Records `op` on fresh leaves and reduces its output with fixed random
/// weights, so that every output element contributes to the scalar.
fn weighted_loss(
    inputs: &[Tensor<f64>],
    weights_seed: u64,
    grad: bool,
    op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = op(&mut tape, &leaves);
    let shape = tape.shape(out).to_vec();
    let mut wrng = ChaCha8Rng::seed_from_u64(weights_seed);
    let n: usize = shape.iter().product();
    let w = (0..n).map(|_| wrng.random_range(-1.0..1.0)).collect();
    let w = tape.constant(shape, w).unwrap();
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let value = tape.value(loss)[0];
    if !grad {
        return (value, Vec::new());
    }
    let grads = tape.backward(loss).unwrap();
    (
        value,
        leaves
            .iter()
            .map(|&v| grads.get(v).map(<[f64]>::to_vec))
            .collect(),
    )
}

/// Central differences on every input coordinate.
fn check_op(name: &str, inputs: Vec<Tensor<f64>>, op: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let h = 1e-5;
    let (_, analytic) = weighted_loss(&inputs, 99, true, op);
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let a = analytic[i]
            .clone()
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for k in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[k] -= h;
            let numeric = (weighted_loss(&plus, 99, false, op).0
                - weighted_loss(&minus, 99, false, op).0)
                / (2.0 * h);
            let err = (a[k] - numeric).abs() / a[k].abs().max(numeric.abs()).max(1e-6);
            assert!(
                err < 1e-6,
                "{name}: input {i} coord {k}: analytic {} numeric {numeric}",
                a[k]
            );
            probes += 1;
        }
    }
    assert!(probes > 0, "{name}: nothing probed");
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (m, k, n) = (3, 5, 4);
    let a = random(&mut rng, &[m, k]);
    let b = random(&mut rng, &[k, n]);
    let mut tape = Tape::no_grad();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let c = tape.matmul(va, vb).unwrap();
    let ct = {
        let bt: Vec<f64> = (0..n * k).map(|i| b.data()[(i % k) * n + i / k]).collect();
        let vbt = tape.constant(vec![n, k], bt).unwrap();
        tape.matmul_t(va, vbt).unwrap()
    };
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            assert!((tape.value(c)[i * n + j] - s).abs() < 1e-14);
            assert!((tape.value(ct)[i * n + j] - s).abs() < 1e-14);
        }
    }
}

#[test]
fn finite_differences_on_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut r = |shape: &[usize]| random(&mut rng, shape);

    check_op("matmul", vec![r(&[3, 4]), r(&[4, 2])], &|t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check_op("matmul_t", vec![r(&[3, 4]), r(&[5, 4])], &|t, v| {
        t.matmul_t(v[0], v[1]).unwrap()
    });
    check_op("add", vec![r(&[2, 3]), r(&[2, 3])], &|t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_op("add_row", vec![r(&[4, 3]), r(&[3])], &|t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check_op("mul", vec![r(&[2, 3]), r(&[2, 3])], &|t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check_op("scale", vec![r(&[2, 3])], &|t, v| t.scale(v[0], -1.7));
    check_op("softmax rows", vec![r(&[3, 4])], &|t, v| {
        t.softmax(v[0], 1).unwrap()
    });
    check_op("softmax cols", vec![r(&[3, 4])], &|t, v| {
        t.softmax(v[0], 0).unwrap()
    });
    check_op("layer_norm", vec![r(&[3, 5]), r(&[5]), r(&[5])], &|t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap()
    });
    check_op("gelu", vec![r(&[4, 3])], &|t, v| t.gelu(v[0]));
    check_op("cross_entropy", vec![r(&[1, 5])], &|t, v| {
        t.cross_entropy(v[0], 3).unwrap()
    });
    check_op("sum", vec![r(&[3, 2])], &|t, v| t.sum(v[0]));
    check_op(
        "add_n",
        vec![r(&[2, 2]), r(&[2, 2]), r(&[2, 2])],
        &|t, v| t.add_n(v).unwrap(),
    );
    check_op("slice_cols", vec![r(&[3, 6])], &|t, v| {
        t.slice_cols(v[0], 2, 5).unwrap()
    });
    check_op("concat_cols", vec![r(&[3, 2]), r(&[3, 4])], &|t, v| {
        t.concat_cols(v).unwrap()
    });
    check_op("concat_rows", vec![r(&[1, 3]), r(&[4, 3])], &|t, v| {
        t.concat_rows(v).unwrap()
    });
    check_op("row", vec![r(&[4, 3])], &|t, v| t.row(v[0], 2).unwrap());
}

#[test]
fn frozen_leaf_gets_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 2]);
    let b = random(&mut rng, &[2, 2]).with_requires_grad(false);
    let (_, grads) = weighted_loss(&[a, b], 1, true, &|t, v| t.matmul(v[0], v[1]).unwrap());
    assert!(grads[0].is_some());
    assert!(grads[1].is_none());
}

#[test]
fn adam_matches_hand_computation() {
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
    };
    let mut p = vec![1.0f64, -2.0];
    let mut state = AdamState::zeros(2);
    let grads = [[0.5, -1.0], [0.25, 3.0], [-1.0, 0.0]];
    let (mut m, mut v, mut q) = ([0.0f64; 2], [0.0f64; 2], [1.0f64, -2.0]);
    for (t, g) in grads.iter().enumerate() {
        adam_step(&mut p, g, &mut state, &cfg).unwrap();
        let t = (t + 1) as i32;
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            q[i] -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        for i in 0..2 {
            assert!(
                (p[i] - q[i]).abs() < 1e-12,
                "step {t}: {} vs {}",
                p[i],
                q[i]
            );
        }
    }
    assert_eq!(state.step_count, 3);
}
