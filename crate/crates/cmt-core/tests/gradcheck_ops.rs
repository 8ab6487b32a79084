//! Finite-difference validation of every differentiable tape operation.
//!
//! Each case projects the op output onto a fixed pseudo-random direction to
//! get a scalar that is sensitive to every output element, then compares the
//! tape's analytic gradients against central differences.

use cmt_core::gradcheck::{check_gradients, REL_TOL};
use cmt_core::tape::{PoolMode, Tape, Var};
use cmt_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic projection direction so the scalar depends on all outputs.
fn direction(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| {
        ((i.wrapping_mul(2654435761) % 1000) as f64) / 1000.0 - 0.37
    })
}

/// Run the FD check for an op under the projection scalarization and assert
/// the worst relative error over all inputs is below the shared tolerance.
fn check_op(label: &str, inputs: &[Tensor], build: &dyn Fn(&Tape, &[Var]) -> Result<Var>) {
    // one pass to learn the output shape for the projection direction
    let dir = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = build(&tape, &vars).unwrap();
        direction(&tape.shape(out))
    };
    let mut forward = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let out = build(&tape, &vars)?;
        let s = tape.project(out, &dir)?;
        tape.value(s).item()
    };
    let analytic = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let out = build(&tape, &vars)?;
        let s = tape.project(out, &dir)?;
        let grads = tape.backward(s)?;
        Ok(vars
            .iter()
            .zip(xs)
            .map(|(v, x)| grads.get(*v, x.shape()))
            .collect())
    };
    let worst = check_gradients(&mut forward, &analytic, inputs).unwrap();
    assert!(worst < REL_TOL, "{}: relative error {}", label, worst);
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values bounded away from zero, for kink-free relu checks.
fn rand_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub fn check_elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for shape in [vec![5], vec![3, 4], vec![2, 3, 4]] {
        let a = rand_tensor(&shape, &mut rng);
        let b = rand_tensor(&shape, &mut rng);
        check_op("add", &[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]));
        check_op("sub", &[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]));
        check_op("mul", &[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]));
        check_op("scale", &[a.clone()], &|t, v| t.scale(v[0], -1.7));
        check_op("sigmoid", &[a.clone()], &|t, v| t.sigmoid(v[0]));
        let c = rand_away_from_zero(&shape, &mut rng);
        check_op("relu", &[c], &|t, v| t.relu(v[0]));
    }
}

pub fn check_bias_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for shape in [vec![4, 3], vec![2, 5, 3]] {
        let x = rand_tensor(&shape, &mut rng);
        let b = rand_tensor(&[*shape.last().unwrap()], &mut rng);
        check_op("add_bias", &[x.clone(), b], &|t, v| t.add_bias(v[0], v[1]));
    }
    // sum_all produces the scalar directly; skip the projection wrapper
    let x = rand_tensor(&[3, 4], &mut rng);
    let mut forward = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(xs[0].clone())?;
        tape.value(tape.sum_all(v)?).item()
    };
    let analytic = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let v = tape.leaf(xs[0].clone())?;
        let s = tape.sum_all(v)?;
        let g = tape.backward(s)?;
        Ok(vec![g.get(v, xs[0].shape())])
    };
    let worst = check_gradients(&mut forward, &analytic, &[x]).unwrap();
    assert!(worst < REL_TOL, "sum_all: {}", worst);
}

pub fn check_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[2, 3, 4], &mut rng);
    check_op("reshape", &[x.clone()], &|t, v| t.reshape(v[0], &[4, 6]));
    check_op("permute", &[x.clone()], &|t, v| t.permute(v[0], &[2, 0, 1]));
    check_op("upsample", &[x], &|t, v| t.upsample_nearest(v[0], 2));
}

pub fn check_matmul_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cases: [(&[usize], &[usize]); 3] = [
        (&[3, 4], &[4, 5]),
        (&[2, 3, 4], &[2, 4, 5]),
        (&[2, 3, 4], &[4, 5]), // rank-2 rhs broadcast over the batch
    ];
    for (sa, sb) in cases {
        let a = rand_tensor(sa, &mut rng);
        let b = rand_tensor(sb, &mut rng);
        check_op("matmul", &[a, b], &|t, v| t.matmul(v[0], v[1]));
    }
}

pub fn check_softmax_axes() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[3, 4], &mut rng);
    check_op("softmax ax0", &[x.clone()], &|t, v| t.softmax(v[0], 0));
    check_op("softmax ax1", &[x], &|t, v| t.softmax(v[0], 1));
    let y = rand_tensor(&[2, 3, 5], &mut rng);
    check_op("softmax ax2", &[y], &|t, v| t.softmax(v[0], 2));
}

pub fn check_conv_and_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for (stride, padding) in [(1, 0), (2, 1)] {
        let x = rand_tensor(&[2, 6, 6], &mut rng);
        let k = rand_tensor(&[3, 2, 3, 3], &mut rng);
        check_op("conv2d", &[x, k], &move |t, v| {
            t.conv2d(v[0], v[1], stride, padding)
        });
    }
    let x = rand_tensor(&[2, 6, 6], &mut rng); // random draws: ties negligible
    check_op("max pool", &[x.clone()], &|t, v| {
        t.pool2d(v[0], 2, 2, PoolMode::Max)
    });
    check_op("avg pool", &[x.clone()], &|t, v| {
        t.pool2d(v[0], 2, 2, PoolMode::Average)
    });
    check_op("gap", &[x.clone()], &|t, v| t.global_avg_pool(v[0]));
    let s = rand_tensor(&[2], &mut rng);
    check_op("scale_channels", &[x, s], &|t, v| t.scale_channels(v[0], v[1]));
}

pub fn check_normalization_and_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rand_tensor(&[3, 4, 4], &mut rng);
    let gamma = rand_tensor(&[3], &mut rng);
    let beta = rand_tensor(&[3], &mut rng);
    check_op("layer_norm", &[x, gamma, beta], &|t, v| {
        t.layer_norm(v[0], v[1], v[2])
    });

    // BCE maps to a scalar itself; check it without the projection
    let probs = Tensor::from_fn(&[5], |i| 0.1 + 0.15 * i as f64);
    let targets = Tensor::new(vec![5], vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    let t2 = targets.clone();
    let mut forward = move |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(xs[0].clone())?;
        tape.value(tape.bce_loss(v, &t2)?).item()
    };
    let analytic = |xs: &[Tensor]| -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let v = tape.leaf(xs[0].clone())?;
        let loss = tape.bce_loss(v, &targets)?;
        let g = tape.backward(loss)?;
        Ok(vec![g.get(v, xs[0].shape())])
    };
    let worst = check_gradients(&mut forward, &analytic, &[probs]).unwrap();
    assert!(worst < REL_TOL, "bce_loss: {}", worst);
}

pub fn check_composed_chain() {
    // conv -> relu-free path -> pool -> matmul -> softmax -> projection,
    // exercising gradient flow across op boundaries
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&[2, 4, 4], &mut rng);
    let k = rand_tensor(&[2, 2, 3, 3], &mut rng);
    let w = rand_tensor(&[2, 3], &mut rng);
    check_op("composed", &[x, k, w], &|t, v| {
        let c = t.conv2d(v[0], v[1], 1, 1)?;
        let p = t.pool2d(c, 2, 2, PoolMode::Average)?;
        let flat = t.reshape(p, &[2, 4])?;
        let tok = t.permute(flat, &[1, 0])?;
        let m = t.matmul(tok, v[2])?;
        t.softmax(m, 1)
    });
}

// test wrappers over the public checks so this file also runs standalone
#[test]
fn elementwise_ops() {
    check_elementwise_ops();
}
#[test]
fn bias_and_reductions() {
    check_bias_and_reductions();
}
#[test]
fn shape_ops() {
    check_shape_ops();
}
#[test]
fn matmul_shapes() {
    check_matmul_shapes();
}
#[test]
fn softmax_axes() {
    check_softmax_axes();
}
#[test]
fn conv_and_pool() {
    check_conv_and_pool();
}
#[test]
fn normalization_and_loss() {
    check_normalization_and_loss();
}
#[test]
fn composed_chain() {
    check_composed_chain();
}
