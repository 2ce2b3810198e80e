use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stream4d::model::{read_checkpoint, write_checkpoint, AttnMode, Model, ModelConfig};
use stream4d::{Error, Tensor};

fn small() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        patch_size: 4,
        dim: 16,
        layers: 2,
        heads: 2,
        max_frames: 12,
        mlp_ratio: 2,
        head_channels: 8,
        track_dim: 4,
        camera_hidden: 16,
    }
}

fn images(cfg: &ModelConfig, t: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t)
        .map(|_| Tensor::randn(vec![3, cfg.image_height, cfg.image_width], 0.5, &mut rng))
        .collect()
}

const QUERIES: [[f64; 2]; 3] = [[0.0, 0.0], [7.5, 3.25], [15.0, 15.0]];

#[test]
fn streaming_matches_full_causal_decode() {
    let cfg = small();
    let model = Model::<f32>::new(cfg.clone(), 3).unwrap();
    let imgs = images(&cfg, 5, 4);
    let (tokens, full) = model
        .predict_sequence_with_tokens(&imgs, &QUERIES, AttnMode::Causal)
        .unwrap();
    let mut session = model.session(&QUERIES).unwrap();
    for (t, img) in imgs.iter().enumerate() {
        let step = session.step(img).unwrap();
        assert!(step.tokens.max_abs_diff(&tokens[t]) < 1e-5, "frame {t}");
        let (a, b) = (&step.prediction, &full[t]);
        assert!(a.point_map.max_abs_diff(&b.point_map) < 1e-4);
        assert!(a.depth.max_abs_diff(&b.depth) < 1e-4);
        assert!(a.tracks.max_abs_diff(&b.tracks) < 1e-4);
        let pa = a.pose.to_vec();
        let pb = b.pose.to_vec();
        assert!(pa.iter().zip(pb).all(|(x, y)| (x - y).abs() < 1e-4));
    }
    assert_eq!(session.frames_seen(), 5);
}

#[test]
fn decode_streaming_matches_decode_training() {
    let cfg = small();
    let model = Model::<f32>::new(cfg.clone(), 5).unwrap();
    let frames: Vec<_> = images(&cfg, 3, 6)
        .iter()
        .enumerate()
        .map(|(i, img)| model.encode(img, i + 1).unwrap())
        .collect();
    let full = model.decode_training(&frames, AttnMode::Causal).unwrap();
    let mut cache = model.new_cache();
    for (f, want) in frames.iter().zip(&full) {
        let got = model.decode_streaming(f, &mut cache).unwrap();
        assert!(got.max_abs_diff(want) < 1e-5);
    }
    assert_eq!(cache.frames(), 3);
    // Out-of-order frames are refused and leave the cache untouched.
    assert!(model.decode_streaming(&frames[0], &mut cache).is_err());
    assert_eq!(cache.frames(), 3);
}

#[test]
fn student_is_causal_and_teacher_is_not() {
    let cfg = small();
    let model = Model::<f32>::new(cfg.clone(), 7).unwrap();
    let base = images(&cfg, 4, 8);
    let mut changed = base.clone();
    changed[3] = images(&cfg, 1, 99).remove(0);
    for (mode, causal) in [(AttnMode::Causal, true), (AttnMode::Global, false)] {
        let (a, _) = model.predict_sequence_with_tokens(&base, &QUERIES, mode).unwrap();
        let (b, _) = model.predict_sequence_with_tokens(&changed, &QUERIES, mode).unwrap();
        for t in 0..3 {
            assert_eq!(a[t].bit_eq(&b[t]), causal, "{mode:?} frame {t}");
        }
        assert!(!a[3].bit_eq(&b[3]));
    }
}

#[test]
fn outputs_satisfy_head_contracts() {
    let cfg = small();
    let model = Model::<f32>::new(cfg.clone(), 9).unwrap();
    let preds = model
        .predict_sequence(&images(&cfg, 2, 10), &QUERIES, AttnMode::Causal)
        .unwrap();
    for p in &preds {
        p.pose.validate().unwrap();
        assert_eq!(p.point_map.shape(), &[3, 16, 16]);
        assert_eq!(p.depth.shape(), &[16, 16]);
        assert!(p.point_conf.data().iter().all(|&c| c >= 1.0));
        assert!(p.depth_conf.data().iter().all(|&c| c >= 1.0));
        assert!(p.depth.data().iter().all(|&d| d > 0.0));
        assert_eq!(p.tracks.shape(), &[3, 2]);
        assert_eq!(p.visibility_logits.shape(), &[3]);
        assert!(p.tracks.data().iter().all(|&c| (0.0..=15.0).contains(&c)));
    }
    let none = model
        .predict_sequence(&images(&cfg, 1, 10), &[], AttnMode::Causal)
        .unwrap();
    assert_eq!(none[0].tracks.shape(), &[0, 2]);
}

#[test]
fn encode_validates_inputs() {
    let cfg = small();
    let model = Model::<f32>::new(cfg.clone(), 1).unwrap();
    let img = images(&cfg, 1, 1).remove(0);
    assert!(matches!(model.encode(&img, 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(model.encode(&img, 13), Err(Error::InvalidArgument(_))));
    assert!(model.encode(&img, 12).is_ok());
    let wrong = Tensor::zeros(vec![3, 16, 12]);
    assert!(matches!(model.encode(&wrong, 1), Err(Error::Shape { .. })));
    assert!(model.session(&[[16.0, 0.0]]).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig { patch_size: 3, ..small() },
        ModelConfig { image_width: 18, ..small() },
        ModelConfig { heads: 3, ..small() },
        ModelConfig { layers: 0, ..small() },
    ];
    for cfg in bad {
        assert!(Model::<f32>::new(cfg, 0).is_err());
    }
}

#[test]
fn same_seed_same_weights() {
    let a = Model::<f32>::new(small(), 42).unwrap();
    let b = Model::<f32>::new(small(), 42).unwrap();
    let c = Model::<f32>::new(small(), 43).unwrap();
    let same = |x: &Model, y: &Model| x.params().iter().zip(y.params().iter()).all(|((_, s), (_, t))| s.bit_eq(t));
    assert!(same(&a, &b));
    assert!(!same(&a, &c));
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let model = Model::<f32>::new(small(), 11).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model, &mut buf).unwrap();
    let back: Model = read_checkpoint(&mut buf.as_slice()).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.params().len(), model.params().len());
    for ((n1, t1), (n2, t2)) in model.params().iter().zip(back.params().iter()) {
        assert_eq!(n1, n2);
        assert!(t1.bit_eq(t2), "{n1}");
    }
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(buf, again);

    assert!(matches!(
        read_checkpoint::<f32, _>(&mut &buf[..buf.len() - 1]),
        Err(Error::Format(_))
    ));
    let mut bad = buf.clone();
    bad[1] = b'?';
    assert!(matches!(read_checkpoint::<f32, _>(&mut bad.as_slice()), Err(Error::Format(_))));
}

#[test]
fn config_text_round_trip() {
    let cfg = small();
    assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    assert!(ModelConfig::from_kv("depth=3\n").is_err());
    assert!(ModelConfig::from_kv("dim=x\n").is_err());
}
