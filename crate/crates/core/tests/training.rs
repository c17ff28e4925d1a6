use grucnn_core::data::{make_batch, preprocess_corpus, synth_toyset, LabeledImage, SnrChoice, SnrLevel};
use grucnn_core::train::checkpoint::{decode, encode};
use grucnn_core::train::{build_model, load_checkpoint, save_checkpoint, ModelSpec, SnrSet, TrainConfig, Trainer};
use grucnn_core::{Element, Error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(per_class: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let raw = synth_toyset(per_class, size, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    preprocess_corpus(&raw).unwrap().0
}

fn trainer<T: Element>(name: &str, cfg: TrainConfig, seed: u64) -> Trainer<T> {
    let spec = ModelSpec::builtin(name, 8, 0.125).unwrap();
    let model = build_model(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    Trainer::new(model, cfg, seed).unwrap()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 10,
        epochs: 1,
        frames: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn initial_loss_is_near_uniform() {
    let c = corpus(20, 16, 1);
    let idx: Vec<usize> = (0..200).collect();
    let b = make_batch::<f64>(&c, &idx, 4, SnrChoice::Fixed(SnrLevel::whole(1)), 3).unwrap();
    for name in ["ccnn", "grucnn"] {
        let mut total = 0.0;
        for seed in 0..4 {
            let spec = ModelSpec::builtin(name, 16, 0.25).unwrap();
            let mut m = build_model::<f64, _>(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let p = m.forward_sequence(&b, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            let nll: f64 = p
                .data()
                .chunks_exact(10)
                .enumerate()
                .map(|(i, row)| -row[b.labels[i / 4]].ln())
                .sum();
            total += nll / 800.0;
        }
        let mean = total / 4.0;
        assert!((mean - 10f64.ln()).abs() < 0.1, "{name}: initial loss {mean}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let c = corpus(5, 8, 2);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        ..small_cfg()
    };
    let mut t = trainer::<f32>("grucnn", cfg, 4);
    let before = t.model.params().to_vec();
    for _ in 0..3 {
        t.step(&c).unwrap();
    }
    assert_eq!(t.model.params(), before.as_slice());
}

/// One epoch over 50 images is five updates; the feedforward model's loss
/// falls from the first to the last logged step in at least 90% of seeds.
#[test]
fn one_epoch_reduces_loss_in_most_runs() {
    let c = corpus(5, 16, 3);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        snr_set: SnrSet::Levels(vec![SnrLevel::whole(64)]),
        ..small_cfg()
    };
    let runs = 40;
    let mut better = 0;
    for seed in 0..runs {
        let spec = ModelSpec::builtin("ccnn", 16, 0.25).unwrap();
        let model = build_model::<f32, _>(&spec, &mut ChaCha8Rng::seed_from_u64(100 + seed)).unwrap();
        let mut t = Trainer::new(model, cfg.clone(), 100 + seed).unwrap();
        let mut losses = Vec::new();
        t.run(&c, |row| Ok(losses.push(row.loss)), |_| Ok(())).unwrap();
        assert_eq!(losses.len(), 5);
        if losses.last() < losses.first() {
            better += 1;
        }
    }
    assert!(better * 10 >= runs * 9, "loss fell in only {better}/{runs} runs");
}

#[test]
fn identical_configs_give_identical_logs_and_checkpoints() {
    let c = corpus(3, 8, 4);
    let run = || {
        let mut t = trainer::<f64>("grucnn", small_cfg(), 7);
        let mut rows = Vec::new();
        t.run(&c, |r| Ok(rows.push((r.step, r.epoch, r.loss.to_bits(), r.lr.to_bits()))), |_| Ok(()))
            .unwrap();
        (rows, encode(&t))
    };
    let (a_rows, a_bytes) = run();
    let (b_rows, b_bytes) = run();
    assert_eq!(a_rows, b_rows);
    assert_eq!(a_bytes, b_bytes);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let c = corpus(3, 8, 5);
    let mut t = trainer::<f64>("lstmcnn", small_cfg(), 8);
    t.step(&c).unwrap();
    let bytes = encode(&t);
    let back = decode::<f64>(&bytes, Some(t.model.spec())).unwrap();
    assert_eq!(encode(&back), bytes);
    assert_eq!(back.counters, t.counters);

    let other = ModelSpec::builtin("grucnn", 8, 0.125).unwrap();
    assert!(matches!(decode::<f64>(&bytes, Some(&other)), Err(Error::CheckpointMismatch(_))));
    assert!(matches!(decode::<f32>(&bytes, None), Err(Error::CheckpointMismatch(_))));
    assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 3], None), Err(Error::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode::<f64>(&bad, None), Err(Error::Format { offset: 0, .. })));
}

#[test]
fn resumed_training_continues_bitwise() {
    let c = corpus(3, 8, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    for name in ["grucnn", "ccnn"] {
        let mut straight = trainer::<f64>(name, small_cfg(), 9);
        straight.step(&c).unwrap();
        straight.step(&c).unwrap();

        let mut first = trainer::<f64>(name, small_cfg(), 9);
        first.step(&c).unwrap();
        save_checkpoint(&first, &path).unwrap();
        drop(first);
        let mut resumed = load_checkpoint::<f64>(&path, None).unwrap();
        resumed.step(&c).unwrap();

        assert_eq!(resumed.model.params(), straight.model.params(), "{name}");
        assert_eq!(encode(&resumed), encode(&straight), "{name}");
    }
    assert!(matches!(load_checkpoint::<f64>(dir.path().join("absent.bin"), None), Err(Error::MissingPath(_))));
}

#[test]
fn divergence_aborts_and_keeps_parameters() {
    let c = corpus(3, 8, 7);
    let mut t = trainer::<f32>("ccnn", small_cfg(), 10);
    t.model.params_mut()[0].value.data_mut()[0] = f32::NAN;
    let before = t.model.params().to_vec();
    let err = t.step(&c).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    assert_eq!(t.counters.step, 0);
    let same = t
        .model
        .params()
        .iter()
        .zip(&before)
        .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(same);
}
