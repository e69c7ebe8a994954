use groupmix::backbone::{drop_path, Activation, EncoderBlock, Ffn, Stem};
use groupmix::{
    build_model, Error, GmaConfig, Mode, ModelConfig, ParamStore, Preset, SeededRng, StageConfig,
    Tape, Tensor,
};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
}

fn shape_of(store: &ParamStore, name: &str) -> Vec<usize> {
    store.get(name).unwrap().value.shape().to_vec()
}

#[test]
fn presets_match_the_architecture_table() {
    let dims = |p| ModelConfig::preset(p).stages.map(|s: StageConfig| s.dim);
    let depths = |p| ModelConfig::preset(p).stages.map(|s: StageConfig| s.depth);
    assert_eq!(dims(Preset::M), [40, 80, 160, 160]);
    assert_eq!(dims(Preset::T), [80, 160, 200, 240]);
    assert_eq!(dims(Preset::L), [240, 320, 360, 480]);
    assert_eq!(depths(Preset::L), [8, 10, 30, 10]);
    for p in Preset::ALL {
        ModelConfig::preset(p).validate().unwrap();
        assert_eq!(p.name().parse::<Preset>().unwrap(), p);
    }
    assert!("Q".parse::<Preset>().is_err());
}

#[test]
fn ffn_hidden_widths() {
    let (store, _) = build_model(&ModelConfig::preset(Preset::M), 0).unwrap();
    assert_eq!(shape_of(&store, "stages.0.blocks.0.ffn.fc1.weight"), [40, 160]);
    let (store, _) = build_model(&ModelConfig::preset(Preset::B), 0).unwrap();
    assert_eq!(shape_of(&store, "stages.0.blocks.0.ffn.fc1.weight"), [200, 400]);
}

#[test]
fn ffn_with_zero_weights_is_zero() {
    let mut store = ParamStore::new();
    let ffn = Ffn::new(&mut store, "ffn", 10, 40, Activation::Gelu, &mut SeededRng::new(0)).unwrap();
    for (_, p) in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(random(&[2, 5, 10], 1));
    let y = ffn.forward(&mut tape, &p, x).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_output_size() {
    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, "stem", 3, 20, &mut SeededRng::new(0)).unwrap();
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let x = tape.constant(random(&[1, 3, 32, 32], 2));
    let y = stem.forward(&mut tape, &p, x).unwrap();
    assert_eq!(tape.shape(y), &[1, 20, 8, 8]);
    let bad = tape.constant(Tensor::zeros(&[1, 3, 30, 32]));
    assert!(matches!(stem.forward(&mut tape, &p, bad), Err(Error::Config(_))));
}

#[test]
fn stem_is_translation_equivariant_away_from_borders() {
    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, "stem", 3, 10, &mut SeededRng::new(3)).unwrap();
    let img = random(&[1, 3, 64, 64], 4);
    // Shift right by 4 pixels, filling the vacated columns with zeros.
    let shifted = Tensor::from_fn(img.shape(), |i| {
        let x = i % 64;
        if x < 4 {
            0.0
        } else {
            img.data()[i - 4]
        }
    });
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let (a, b) = (tape.constant(img), tape.constant(shifted));
    let fa = stem.forward(&mut tape, &p, a).unwrap();
    let fb = stem.forward(&mut tape, &p, b).unwrap();
    let (fa, fb) = (tape.value(fa), tape.value(fb));
    for c in 0..10 {
        for y in 0..16 {
            for x in 3..13 {
                let d = (fa.at(&[0, c, y, x]) - fb.at(&[0, c, y, x + 1])).abs();
                assert!(d < 1e-12, "token ({y},{x}) differs by {d}");
            }
        }
    }
}

#[test]
fn drop_path_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(random(&[4, 3, 2], 5));
    let r = tape.constant(random(&[4, 3, 2], 6));
    let sum = tape.add(x, r).unwrap();
    let mut rng = SeededRng::new(7);
    for (rate, mode) in [(0.0, Mode::Train), (0.0, Mode::Eval), (0.5, Mode::Eval)] {
        let y = drop_path(&mut tape, x, r, rate, mode, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(sum));
    }
    assert!(matches!(
        drop_path(&mut tape, x, r, 1.0, Mode::Train, &mut rng),
        Err(Error::Config(_))
    ));
}

#[test]
fn drop_path_is_unbiased_in_training() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 2], 1.0));
    let r = tape.constant(Tensor::new(&[1, 2], vec![2.0, -3.0]).unwrap());
    let mut rng = SeededRng::new(8);
    let mut acc = [0.0; 2];
    let draws = 10_000;
    for _ in 0..draws {
        let y = drop_path(&mut tape, x, r, 0.3, Mode::Train, &mut rng).unwrap();
        for (a, v) in acc.iter_mut().zip(tape.value(y).data()) {
            *a += v;
        }
    }
    for (a, want) in acc.iter().zip([3.0, -2.0]) {
        let mean = a / draws as f64;
        assert!(((mean - want) / want).abs() < 0.05, "{mean} vs {want}");
    }
}

#[test]
fn zeroed_block_is_a_pure_shortcut() {
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(
        &mut store,
        "blk",
        GmaConfig::new(10, 2),
        40,
        Activation::Gelu,
        0.0,
        &mut SeededRng::new(0),
    )
    .unwrap();
    for (_, p) in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
    let x = random(&[2, 16, 10], 9);
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let mut rng = SeededRng::new(0);
    let y = block.forward(&mut tape, &p, xv, 4, 4, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn drop_rates_ramp_linearly() {
    let cfg = ModelConfig::preset(Preset::T);
    let rates = cfg.drop_path_rates();
    assert_eq!(rates.len(), cfg.total_blocks());
    assert_eq!(rates[0], 0.0);
    assert!((rates[rates.len() - 1] - 0.1).abs() < 1e-15);
    let step = rates[1] - rates[0];
    for w in rates.windows(2) {
        assert!((w[1] - w[0] - step).abs() < 1e-12);
    }
}

#[test]
fn rebuilding_is_bit_identical() {
    let cfg = ModelConfig::toy(20, 2, 2);
    let (a, _) = build_model(&cfg, 42).unwrap();
    let (b, _) = build_model(&cfg, 42).unwrap();
    let (c, _) = build_model(&cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn invalid_stage_is_named() {
    let mut cfg = ModelConfig::toy(20, 2, 2);
    cfg.stages[2].dim = 22;
    let msg = build_model(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("stage 3"), "{msg}");
    let mut cfg = ModelConfig::toy(20, 2, 2);
    cfg.stages[1].heads = 3;
    let msg = build_model(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("stage 2"), "{msg}");
}

#[test]
fn pyramid_and_logits_shapes() {
    let mut cfg = ModelConfig::toy(10, 2, 5);
    cfg.stages[1].dim = 20;
    cfg.stages[3].dim = 30;
    let (store, model) = build_model(&cfg, 1).unwrap();
    for side in [64, 96] {
        let (logits, feats) = model.predict(&store, &random(&[2, 3, side, side], 10)).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        for (i, f) in feats.iter().enumerate() {
            let s = side >> (i + 2);
            assert_eq!(f.shape(), &[2, cfg.stages[i].dim, s, s]);
        }
    }
    assert!(matches!(
        model.predict(&store, &Tensor::zeros(&[1, 3, 48, 64])),
        Err(Error::Config(_))
    ));
}

#[test]
fn forward_is_deterministic() {
    let mut cfg = ModelConfig::toy(10, 2, 2);
    cfg.drop_path_rate = 0.3;
    let (store, model) = build_model(&cfg, 2).unwrap();
    let img = random(&[2, 3, 32, 32], 11);
    let (a, _) = model.predict(&store, &img).unwrap();
    let (b, _) = model.predict(&store, &img).unwrap();
    assert_eq!(a, b);

    let train = |seed| {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(img.clone());
        let out = model
            .forward(&mut tape, &p, x, Mode::Train, &mut SeededRng::new(seed))
            .unwrap();
        tape.value(out.logits).clone()
    };
    assert_eq!(train(5), train(5));
}

#[test]
fn preset_t_pyramid_at_224() {
    let (store, model) = build_model(&ModelConfig::preset(Preset::T), 0).unwrap();
    let (logits, feats) = model.predict(&store, &random(&[1, 3, 224, 224], 12)).unwrap();
    assert_eq!(logits.shape(), &[1, 1000]);
    let want = [[80, 56], [160, 28], [200, 14], [240, 7]];
    for (f, [c, s]) in feats.iter().zip(want) {
        assert_eq!(f.shape(), &[1, c, s, s]);
    }
}
