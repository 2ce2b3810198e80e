//! Finite-difference checks of every graph op and every loss, 64-bit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stream4d::geometry::CameraPose;
use stream4d::gradcheck::check;
use stream4d::losses::{camera_loss, depth_loss, pointmap_loss, total_loss, track_loss, LossParts, LossWeights};
use stream4d::{Graph, Result, Tensor, Var};

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

type Rng8 = ChaCha8Rng;

fn randn(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Normal values pushed away from zero so kinks at 0 are never straddled.
fn away_from_zero(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    randn(shape, rng).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng8) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Reduces to a scalar through random weights so every output element
/// contributes a distinct amount.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = randn(&shape, &mut Rng8::seed_from_u64(seed ^ 0x5eed));
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn run<G, F>(name: &str, make: G, f: F)
where
    G: Fn(&mut Rng8) -> Vec<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var>,
{
    for seed in 0..INSTANCES {
        let mut rng = Rng8::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs = make(&mut rng);
        let errs = check(&inputs, |g, v| f(g, v, seed)).unwrap();
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < TOL, "{name} instance {seed} input {i}: rel err {e:e}");
        }
    }
}

macro_rules! unary_op {
    ($test:ident, $gen:expr, $op:ident) => {
        #[test]
        fn $test() {
            run(
                stringify!($op),
                |r| vec![$gen(&[3, 4], r)],
                |g, v, s| {
                    let y = g.$op(v[0]);
                    weighted_sum(g, y, s)
                },
            );
        }
    };
}

unary_op!(gelu, randn, gelu);
unary_op!(exp, randn, exp);
unary_op!(abs, away_from_zero, abs);
unary_op!(softplus, randn, softplus);
unary_op!(sigmoid, randn, sigmoid);

#[test]
fn log() {
    run("log", |r| vec![uniform(&[3, 4], 0.2, 3.0, r)], |g, v, s| {
        let y = g.log(v[0]);
        weighted_sum(g, y, s)
    });
}

#[test]
fn huber() {
    run("huber", |r| vec![randn(&[4, 5], r).map(|x| 2.0 * x)], |g, v, s| {
        let y = g.huber(v[0], 1.0);
        weighted_sum(g, y, s)
    });
}

#[test]
fn matmul() {
    run("matmul", |r| vec![randn(&[3, 4], r), randn(&[4, 2], r)], |g, v, s| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn add_sub_mul() {
    run("add_sub_mul", |r| vec![randn(&[2, 3], r), randn(&[2, 3], r), randn(&[2, 3], r)], |g, v, s| {
        let a = g.add(v[0], v[1])?;
        let b = g.sub(a, v[2])?;
        let c = g.mul(b, v[1])?;
        weighted_sum(g, c, s)
    });
}

#[test]
fn scale_and_add_scalar() {
    run("scale", |r| vec![randn(&[3, 3], r)], |g, v, s| {
        let a = g.scale(v[0], -1.7);
        let b = g.add_scalar(a, 0.3);
        let c = g.mul(b, v[0])?;
        weighted_sum(g, c, s)
    });
}

#[test]
fn scale_by() {
    run("scale_by", |r| vec![randn(&[3, 2], r), randn(&[1], r)], |g, v, s| {
        let y = g.scale_by(v[0], v[1])?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn add_row() {
    run("add_row", |r| vec![randn(&[4, 3], r), randn(&[3], r)], |g, v, s| {
        let y = g.add_row(v[0], v[1])?;
        let y = g.gelu(y);
        weighted_sum(g, y, s)
    });
}

#[test]
fn softmax_unmasked() {
    run("softmax", |r| vec![randn(&[3, 5], r)], |g, v, s| {
        let y = g.softmax(v[0], None)?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn softmax_masked() {
    let mask = Tensor::from_fn(vec![4, 4], |i| if i % 4 <= i / 4 { 0.0 } else { f64::NEG_INFINITY });
    run("softmax_masked", |r| vec![randn(&[4, 4], r)], |g, v, s| {
        let y = g.softmax(v[0], Some(&mask))?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn layernorm() {
    run("layernorm", |r| vec![randn(&[3, 6], r), randn(&[6], r), randn(&[6], r)], |g, v, s| {
        let y = g.layernorm(v[0], v[1], v[2])?;
        weighted_sum(g, y, s)
    });
}

#[test]
fn concat_and_slice() {
    run("concat", |r| vec![randn(&[2, 3], r), randn(&[1, 3], r), randn(&[3, 2], r)], |g, v, s| {
        let rows = g.concat_rows(&[v[0], v[1]])?;
        let cols = g.concat_cols(&[rows, v[2]])?;
        let a = g.slice_rows(cols, 1, 2)?;
        let b = g.slice_cols(a, 2, 3)?;
        weighted_sum(g, b, s)
    });
}

#[test]
fn transpose_reshape_gather() {
    let index = Arc::new(vec![5, 0, 3, 3, 1, 4, 2, 5]);
    run("transpose", |r| vec![randn(&[2, 3], r)], |g, v, s| {
        let t = g.transpose(v[0])?;
        let t = g.reshape(t, vec![6])?;
        let t = g.gather(t, Arc::clone(&index), vec![2, 4])?;
        weighted_sum(g, t, s)
    });
}

#[test]
fn max_lastdim() {
    run("max", |r| vec![randn(&[4, 5], r)], |g, v, s| {
        let m = g.max_lastdim(v[0])?;
        weighted_sum(g, m, s)
    });
}

#[test]
fn normalize_rows() {
    run("normalize", |r| vec![randn(&[3, 4], r)], |g, v, s| {
        let n = g.normalize_rows(v[0])?;
        weighted_sum(g, n, s)
    });
}

fn random_pose(rng: &mut Rng8) -> CameraPose {
    let axis = nalgebra::Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let r = nalgebra::Rotation3::new(axis * 0.5).into_inner();
    let t = nalgebra::Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    CameraPose::from_rt(&r, &t, [rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)])
}

fn mask(shape: &[usize], rng: &mut Rng8) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| if rng.random_bool(0.8) { 1.0 } else { 0.0 })
}

#[test]
fn camera_loss_gradient() {
    for seed in 0..INSTANCES {
        let mut rng = Rng8::seed_from_u64(seed);
        let targets: Vec<_> = (0..3).map(|_| random_pose(&mut rng)).collect();
        let pred = randn(&[3, 9], &mut rng).map(|x| 1.5 * x);
        let errs = check(&[pred], |g, v| camera_loss(g, v[0], &targets, 1.0)).unwrap();
        assert!(errs[0] < TOL, "instance {seed}: {:e}", errs[0]);
    }
}

#[test]
fn depth_loss_gradient() {
    for seed in 0..INSTANCES {
        let mut rng = Rng8::seed_from_u64(100 + seed);
        let target = uniform(&[4, 5], 0.5, 4.0, &mut rng);
        let valid = mask(&[4, 5], &mut rng);
        let pred = uniform(&[4, 5], 0.5, 4.0, &mut rng);
        let conf = uniform(&[4, 5], 1.1, 3.0, &mut rng);
        let errs = check(&[pred, conf], |g, v| depth_loss(g, v[0], v[1], &target, &valid, 0.2)).unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "instance {seed}: {errs:?}");
    }
}

#[test]
fn pointmap_loss_gradient() {
    for seed in 0..INSTANCES {
        let mut rng = Rng8::seed_from_u64(200 + seed);
        let target = randn(&[3, 3, 4], &mut rng);
        let valid = mask(&[3, 4], &mut rng);
        let pred = randn(&[3, 3, 4], &mut rng);
        let conf = uniform(&[3, 4], 1.1, 3.0, &mut rng);
        let errs = check(&[pred, conf], |g, v| pointmap_loss(g, v[0], v[1], &target, &valid, 0.2)).unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "instance {seed}: {errs:?}");
    }
}

#[test]
fn track_loss_gradient() {
    for seed in 0..INSTANCES {
        let mut rng = Rng8::seed_from_u64(300 + seed);
        let target = uniform(&[5, 2], 0.0, 31.0, &mut rng);
        let vis = uniform(&[5], 0.0, 1.0, &mut rng);
        let pred = uniform(&[5, 2], 0.0, 31.0, &mut rng);
        let logits = randn(&[5, 1], &mut rng).map(|x| 3.0 * x);
        let errs = check(&[pred, logits], |g, v| track_loss(g, v[0], &target, v[1], &vis)).unwrap();
        assert!(errs.iter().all(|&e| e < TOL), "instance {seed}: {errs:?}");
    }
}

#[test]
fn total_loss_gradient() {
    let w = LossWeights::default();
    run("total", |r| (0..4).map(|_| randn(&[1], r)).collect(), |g, v, _| {
        let parts = LossParts {
            camera: v[0],
            depth: v[1],
            pmap: v[2],
            track: v[3],
        };
        Ok(total_loss(g, &parts, &w)?.0)
    });
}
