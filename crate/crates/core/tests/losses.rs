use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stream4d::geometry::CameraPose;
use stream4d::losses::{camera_loss, depth_loss, pointmap_loss, total_loss, track_loss, LossParts, LossWeights};
use stream4d::{Error, Graph, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn scalar(g: &Graph<f64>, v: stream4d::Var) -> f64 {
    g.value(v).data()[0]
}

fn eval_depth(pred: &Tensor<f64>, conf: &Tensor<f64>, target: &Tensor<f64>, valid: &Tensor<f64>, alpha: f64) -> f64 {
    let mut g = Graph::inference();
    let (p, c) = (g.constant(pred.clone()), g.constant(conf.clone()));
    let l = depth_loss(&mut g, p, c, target, valid, alpha).unwrap();
    scalar(&g, l)
}

/// Straight-line reimplementation of one confidence-weighted map term.
fn oracle_map(pred: &[f64], conf: &[f64], target: &[f64], valid: &[f64], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if valid[i] == 0.0 {
                continue;
            }
            s += conf[i] * (pred[i] - target[i]).abs();
            if x + 1 < w && valid[i + 1] != 0.0 {
                s += conf[i] * ((pred[i + 1] - pred[i]) - (target[i + 1] - target[i])).abs();
            }
            if y + 1 < h && valid[i + w] != 0.0 {
                s += conf[i] * ((pred[i + w] - pred[i]) - (target[i + w] - target[i])).abs();
            }
        }
    }
    s
}

fn oracle_log(conf: &[f64], valid: &[f64], alpha: f64) -> f64 {
    -alpha * conf.iter().zip(valid).filter(|(_, &v)| v != 0.0).map(|(c, _)| c.ln()).sum::<f64>()
}

#[test]
fn depth_loss_trivial_cases() {
    let ones = Tensor::full(vec![2, 2], 1.0);
    let d = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(eval_depth(&d, &ones, &d, &ones, 0.7), 0.0);
    let shifted = d.map(|v| v + 0.1);
    let l = eval_depth(&shifted, &ones, &d, &ones, 0.7);
    assert!((l - 0.4).abs() < 1e-12, "{l}");
}

#[test]
fn depth_loss_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let pred = uniform(&[4, 4], 0.1, 5.0, &mut rng);
        let target = uniform(&[4, 4], 0.1, 5.0, &mut rng);
        let conf = uniform(&[4, 4], 1.0, 4.0, &mut rng);
        let valid = Tensor::from_fn(vec![4, 4], |_| if rng.random_bool(0.75) { 1.0 } else { 0.0 });
        let want = oracle_map(pred.data(), conf.data(), target.data(), valid.data(), 4, 4)
            + oracle_log(conf.data(), valid.data(), 0.2);
        let got = eval_depth(&pred, &conf, &target, &valid, 0.2);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn pointmap_loss_matches_oracle_and_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ones = Tensor::full(vec![2, 2], 1.0);
    let eval = |pred: &Tensor<f64>, conf: &Tensor<f64>, target: &Tensor<f64>, valid: &Tensor<f64>| {
        let mut g = Graph::inference();
        let (p, c) = (g.constant(pred.clone()), g.constant(conf.clone()));
        let l = pointmap_loss(&mut g, p, c, target, valid, 0.2).unwrap();
        scalar(&g, l)
    };
    let p = uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
    assert_eq!(eval(&p, &ones, &p, &ones), 0.0);
    let l = eval(&p.map(|v| v + 0.1), &ones, &p, &ones);
    assert!((l - 1.2).abs() < 1e-12, "{l}");

    for _ in 0..20 {
        let pred = uniform(&[3, 4, 4], -3.0, 3.0, &mut rng);
        let target = uniform(&[3, 4, 4], -3.0, 3.0, &mut rng);
        let conf = uniform(&[4, 4], 1.0, 4.0, &mut rng);
        let valid = Tensor::from_fn(vec![4, 4], |_| if rng.random_bool(0.75) { 1.0 } else { 0.0 });
        let mut want = oracle_log(conf.data(), valid.data(), 0.2);
        for c in 0..3 {
            let r = c * 16..(c + 1) * 16;
            want += oracle_map(&pred.data()[r.clone()], conf.data(), &target.data()[r], valid.data(), 4, 4);
        }
        let got = eval(&pred, &conf, &target, &valid);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn low_confidence_is_a_contract_violation() {
    let d = Tensor::full(vec![2, 2], 1.0);
    let conf = t(&[2, 2], vec![1.0, 0.99, 1.0, 1.0]);
    let mut g = Graph::inference();
    let (p, c) = (g.constant(d.clone()), g.constant(conf));
    assert!(matches!(depth_loss(&mut g, p, c, &d, &d, 0.2), Err(Error::Contract(_))));
}

#[test]
fn masked_pixels_contribute_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = uniform(&[3, 3], 1.0, 2.0, &mut rng);
    let pred = uniform(&[3, 3], 1.0, 2.0, &mut rng);
    let conf = uniform(&[3, 3], 1.0, 2.0, &mut rng);
    let mut valid = Tensor::full(vec![3, 3], 1.0);
    valid.data_mut()[4] = 0.0;

    let mut g = Graph::new();
    let (p, c) = (g.leaf(pred.clone()), g.leaf(conf.clone()));
    let l = depth_loss(&mut g, p, c, &target, &valid, 0.2).unwrap();
    let base = scalar(&g, l);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(p).unwrap().data()[4], 0.0);
    assert_eq!(grads.get(c).unwrap().data()[4], 0.0);

    let mut moved = pred.clone();
    moved.data_mut()[4] += 100.0;
    assert_eq!(eval_depth(&moved, &conf, &target, &valid, 0.2), base);
}

#[test]
fn confidence_optimum_matches_closed_form() {
    // For a residual r the per-pixel objective Σ·r − α·log Σ is minimised at
    // Σ = α / r, clamped to 1.
    let alpha = 0.2;
    for &r in &[0.01, 0.05, 0.1, 0.19, 0.5, 2.0] {
        let target = Tensor::full(vec![1, 1], 1.0);
        let pred = Tensor::full(vec![1, 1], 1.0 + r);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=20000 {
            let s = 1.0 + k as f64 * 0.001;
            let l = eval_depth(&pred, &Tensor::full(vec![1, 1], s), &target, &Tensor::full(vec![1, 1], 1.0), alpha);
            if l < best.0 {
                best = (l, s);
            }
        }
        let want = (alpha / r).max(1.0);
        assert!((best.1 - want).abs() < 2e-3, "r={r}: {} vs {want}", best.1);
    }
}

#[test]
fn camera_loss_cases() {
    let fov = [1.0, 1.0];
    let target = CameraPose::identity(fov);
    let eval = |pred: [f64; 9]| {
        let mut g = Graph::inference();
        let p = g.constant(t(&[1, 9], pred.to_vec()));
        let l = camera_loss(&mut g, p, &[target], 1.0).unwrap();
        scalar(&g, l)
    };
    assert_eq!(eval(target.to_vec()), 0.0);
    let mut off = target.to_vec();
    off[0] += 0.5;
    assert!((eval(off) - 0.125).abs() < 1e-15);
    // q and −q are the same rotation.
    let mut flipped = target.to_vec();
    flipped[6] = -1.0;
    assert_eq!(eval(flipped), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let pred: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = nalgebra::Rotation3::from_euler_angles(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.3);
        let tgt = CameraPose::from_rt(r.matrix(), &nalgebra::Vector3::new(0.1, 0.2, 0.3), fov);
        let mut tv = tgt.to_vec();
        let dot: f64 = (3..7).map(|i| pred[i] * tv[i]).sum();
        if dot < 0.0 {
            (3..7).for_each(|i| tv[i] = -tv[i]);
        }
        let want: f64 = pred
            .iter()
            .zip(&tv)
            .map(|(a, b)| {
                let d = (a - b).abs();
                if d <= 1.0 { 0.5 * d * d } else { d - 0.5 }
            })
            .sum();
        let mut g = Graph::inference();
        let p = g.constant(t(&[1, 9], pred.clone()));
        let l = camera_loss(&mut g, p, &[tgt], 1.0).unwrap();
        assert!((scalar(&g, l) - want).abs() < 1e-6);
    }

    let mut g = Graph::<f64>::inference();
    let p = g.constant(Tensor::zeros(vec![2, 9]));
    assert!(camera_loss(&mut g, p, &[target], 1.0).is_err());
}

#[test]
fn track_loss_cases() {
    let eval = |pred: Tensor<f64>, target: &Tensor<f64>, logits: Tensor<f64>, vis: &Tensor<f64>| {
        let mut g = Graph::inference();
        let (p, l) = (g.constant(pred), g.constant(logits));
        let v = track_loss(&mut g, p, target, l, vis).unwrap();
        scalar(&g, v)
    };
    let target = t(&[2, 2], vec![3.0, 4.0, 10.0, 1.0]);
    let vis = t(&[2], vec![1.0, 0.0]);
    let logits = t(&[2, 1], vec![10.0, -10.0]);
    assert!(eval(target.clone(), &target, logits.clone(), &vis) < 1e-4);

    let mut off = target.clone();
    off.data_mut()[0] += 3.0;
    off.data_mut()[1] -= 4.0;
    // The second point is invisible so its error is ignored.
    off.data_mut()[2] += 50.0;
    let bce = eval(target.clone(), &target, logits.clone(), &vis);
    assert!((eval(off, &target, logits, &vis) - bce - 7.0).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let pred = uniform(&[4, 2], 0.0, 31.0, &mut rng);
        let tgt = uniform(&[4, 2], 0.0, 31.0, &mut rng);
        let z = uniform(&[4, 1], -5.0, 5.0, &mut rng);
        let y = Tensor::from_fn(vec![4], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let mut want = 0.0;
        for j in 0..4 {
            want += y.data()[j] * ((pred.data()[2 * j] - tgt.data()[2 * j]).abs() + (pred.data()[2 * j + 1] - tgt.data()[2 * j + 1]).abs());
            let p = 1.0 / (1.0 + (-z.data()[j]).exp());
            want -= y.data()[j] * p.ln() + (1.0 - y.data()[j]) * (1.0 - p).ln();
        }
        let got = eval(pred, &tgt, z, &y);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn total_loss_is_the_weighted_sum_and_names_bad_parts() {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let vals: Vec<f64> = (0..4).map(|_| rng.random_range(-10.0..10.0)).collect();
        let mut g = Graph::inference();
        let v: Vec<_> = vals.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let parts = LossParts { camera: v[0], depth: v[1], pmap: v[2], track: v[3] };
        let (l, rec) = total_loss(&mut g, &parts, &w).unwrap();
        let want = vals[0] + vals[1] + vals[2] + w.lambda_track * vals[3];
        assert_eq!(scalar(&g, l), want);
        assert_eq!(rec.total, want);
    }

    let mut g = Graph::inference();
    let z = g.constant(Tensor::scalar(0.0));
    let parts = LossParts { camera: z, depth: z, pmap: z, track: z };
    let (l, _) = total_loss(&mut g, &parts, &w).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let nan = g.constant(Tensor::scalar(f64::NAN));
    let parts = LossParts { camera: z, depth: z, pmap: nan, track: z };
    let err = total_loss(&mut g, &parts, &w).unwrap_err().to_string();
    assert!(err.contains("L_pmap"), "{err}");
}

#[test]
fn zero_lambda_cuts_track_gradients() {
    let w = LossWeights { lambda_track: 0.0, ..LossWeights::default() };
    let mut g = Graph::new();
    let pred = g.leaf(t(&[1, 2], vec![1.0, 2.0]));
    let logits = g.leaf(t(&[1, 1], vec![0.3]));
    let track = track_loss(&mut g, pred, &t(&[1, 2], vec![5.0, 5.0]), logits, &t(&[1], vec![1.0])).unwrap();
    let z = g.constant(Tensor::scalar(1.0));
    let parts = LossParts { camera: z, depth: z, pmap: z, track };
    let (l, _) = total_loss(&mut g, &parts, &w).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(pred).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(grads.get(logits).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    assert!(LossWeights { alpha: 0.0, ..Default::default() }.validate().is_err());
    assert!(LossWeights { huber_delta: -1.0, ..Default::default() }.validate().is_err());
}
