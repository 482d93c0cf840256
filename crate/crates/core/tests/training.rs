use std::collections::BTreeMap;

use meshdiff::diffusion::{v_target, NoiseSchedule};
use meshdiff::mesh::{bbox_diagonal, ArticulatedSample, Point, Upsampler};
use meshdiff::model::{params_on_tape, DiffusionModel, ModelConfig};
use meshdiff::numerics::{check_gradients_multi, Checkpoint, Tensor};
use meshdiff::synthetic::{generate_dataset, prolongations, SkeletonSpec};
use meshdiff::training::{
    loss_and_grads, loss_on_tape, resume, sampling_model, train, train_upsampler, unidiffuser_loss, upsampler_error, LossDraws,
    RunOutput, TrainConfig, TrainState, TrainingData, UpsamplerTrainConfig,
};
use meshdiff::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(n: usize, j: usize, hidden: usize, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::new(n, j);
    c.hidden = hidden;
    c.n_layers = layers;
    c
}

fn random_samples(n_samples: usize, n: usize, j: usize, seed: u64) -> Vec<ArticulatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = |k: usize| -> Vec<Point> { (0..k).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect() };
    (0..n_samples)
        .map(|_| ArticulatedSample {
            coarse: pts(n),
            joints: pts(j),
            normals: None,
        })
        .collect()
}

fn body_data(n: usize, seed: u64) -> (TrainingData, DiffusionModel) {
    let (bodies, topo) = generate_dataset(&SkeletonSpec::humanoid(), n, seed).unwrap();
    let samples: Vec<_> = bodies.iter().map(|b| b.articulated(false)).collect();
    let data = TrainingData::from_samples(&samples, false).unwrap();
    let model = DiffusionModel::new(small_config(topo.n_coarse, topo.n_joints(), 64, 2), 1, None).unwrap();
    (data, model)
}

#[test]
fn untrained_heads_give_mean_squared_target() {
    // output layers start at zero, so the prediction is identically zero
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let model = DiffusionModel::new(small_config(10, 3, 16, 1), 4, None).unwrap();
    let data = TrainingData::from_samples(&random_samples(3, 10, 3, 1), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = LossDraws::sample(3, data.nx, data.ny, 1000, &mut rng);
    let (loss, _) = loss_and_grads(&model, &s, &data.x, &data.y, &d, (1.0, 1.0)).unwrap();
    let mut vx = Vec::new();
    let mut vy = Vec::new();
    for i in 0..3 {
        let (xs, ys) = (i * 30..(i + 1) * 30, i * 9..(i + 1) * 9);
        vx.extend(v_target(&data.x[xs.clone()], &d.eps_x[xs], d.t_x[i], &s).unwrap());
        vy.extend(v_target(&data.y[ys.clone()], &d.eps_y[ys], d.t_y[i], &s).unwrap());
    }
    let ms = |v: &[f32]| v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>() / v.len() as f64;
    let want = ms(&vx) + ms(&vy);
    assert!((loss - want).abs() < 1e-5 * want, "{loss} vs {want}");
}

#[test]
fn repeated_sample_matches_single() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let mut model = DiffusionModel::new(small_config(8, 2, 16, 2), 7, None).unwrap();
    perturb(&mut model, 0.05, 1);
    let data = TrainingData::from_samples(&random_samples(1, 8, 2, 5), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let one = LossDraws::sample(1, data.nx, data.ny, 1000, &mut rng);
    let k = 4;
    let rep = one.permuted(&vec![0; k], data.nx, data.ny);
    let (x, y) = data.gather(&vec![0; k]);
    let (a, _) = loss_and_grads(&model, &s, &data.x, &data.y, &one, (1.0, 1.0)).unwrap();
    let (b, _) = loss_and_grads(&model, &s, &x, &y, &rep, (1.0, 1.0)).unwrap();
    assert!((a - b).abs() < 1e-6 * a, "{a} vs {b}");
}

#[test]
fn loss_ignores_order_within_batch() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let mut model = DiffusionModel::new(small_config(8, 2, 16, 2), 7, None).unwrap();
    perturb(&mut model, 0.05, 2);
    let data = TrainingData::from_samples(&random_samples(5, 8, 2, 6), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = LossDraws::sample(5, data.nx, data.ny, 1000, &mut rng);
    let order = [3, 0, 4, 1, 2];
    let (x, y) = data.gather(&order);
    let (a, _) = loss_and_grads(&model, &s, &data.x, &data.y, &d, (1.0, 1.0)).unwrap();
    let (b, _) = loss_and_grads(&model, &s, &x, &y, &d.permuted(&order, data.nx, data.ny), (1.0, 1.0)).unwrap();
    assert!((a - b).abs() < 1e-6 * a);
}

#[test]
fn empty_batch_is_rejected() {
    let s = NoiseSchedule::default_sigmoid(100).unwrap();
    let model = DiffusionModel::new(small_config(8, 2, 16, 1), 7, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(unidiffuser_loss(&model, &s, &[], &mut rng).is_err());
}

fn perturb(model: &mut DiffusionModel, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params.values_mut() {
        let noise = Tensor::randn(t.shape(), std, &mut rng);
        t.axpy(1.0, &noise).unwrap();
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let mut model = DiffusionModel::new(small_config(5, 2, 8, 1), 3, None).unwrap();
    model.config.time_features = 8;
    model = DiffusionModel::new(model.config.clone(), 3, None).unwrap();
    perturb(&mut model, 0.2, 9);
    let data = TrainingData::from_samples(&random_samples(2, 5, 2, 8), false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = LossDraws::sample(2, data.nx, data.ny, 1000, &mut rng);
    let names: Vec<String> = model.params.keys().cloned().collect();
    let points: Vec<Tensor<f64>> = model.params.values().map(|t| t.cast()).collect();
    let report = check_gradients_multi(
        |tape, vars| {
            let p: BTreeMap<String, _> = names.iter().cloned().zip(vars.iter().copied()).collect();
            loss_on_tape(tape, &model, &p, &s, &data.x, &data.y, &d, (1.0, 1.0))
        },
        &points,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?} at {}", names[report.worst.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn loss_is_nonnegative(seed in 0u64..1000, b in 1usize..4) {
        let s = NoiseSchedule::default_sigmoid(1000).unwrap();
        let mut model = DiffusionModel::new(small_config(6, 2, 8, 1), seed, None).unwrap();
        perturb(&mut model, 0.1, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let loss = unidiffuser_loss(&model, &s, &random_samples(b, 6, 2, seed), &mut rng).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let (data, model) = body_data(6, 2);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 3,
        lr: 0.0,
        seed: 1,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model.clone(), &cfg);
    train(&mut state, &data, &s, &cfg, None, |_| {}).unwrap();
    assert_eq!(state.model.params, model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = LossDraws::sample(data.len(), data.nx, data.ny, 1000, &mut rng);
    let a = loss_and_grads(&model, &s, &data.x, &data.y, &d, (1.0, 1.0)).unwrap().0;
    let b = loss_and_grads(&state.model, &s, &data.x, &data.y, &d, (1.0, 1.0)).unwrap().0;
    assert_eq!(a, b);
}

#[test]
fn resume_is_bit_identical() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let (data, model) = body_data(10, 3);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 4,
        lr: 1e-3,
        seed: 11,
        checkpoint_every: 2,
        ema_decay: Some(0.9),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::new(dir.path());
    let mut out = out;
    out.extra.set_meta("note", "kept");
    let mut full = TrainState::new(model, &cfg);
    train(&mut full, &data, &s, &cfg, Some(&out), |_| {}).unwrap();

    let mut resumed = resume(&out.epoch_path(2), &cfg).unwrap();
    assert_eq!(resumed.epoch, 2);
    train(&mut resumed, &data, &s, &cfg, None, |_| {}).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.ema, full.ema);
    assert_eq!(resumed.history, full.history);
    let last = Checkpoint::load(out.last_path()).unwrap();
    assert_eq!(sampling_model(&last).unwrap().params, full.export_model().params);
    assert_ne!(full.export_model().params, full.model.params);
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("epoch,loss,lr\n"));
    assert_eq!(last.meta_str("note").unwrap(), "kept");
}

#[test]
fn non_finite_loss_aborts_and_keeps_checkpoint() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let (data, model) = body_data(4, 4);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 2,
        lr: 1e-3,
        seed: 1,
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput::new(dir.path());
    let mut state = TrainState::new(model, &cfg);
    train(&mut state, &data, &s, &cfg, Some(&out), |_| {}).unwrap();
    let good = Checkpoint::load(out.last_path()).unwrap();

    let poisoned = state.model.params.get_mut("vin.0.w").unwrap();
    poisoned.data_mut()[0] = f32::NAN;
    let before = state.model.params.clone();
    let cfg4 = TrainConfig { epochs: 4, ..cfg };
    let err = train(&mut state, &data, &s, &cfg4, Some(&out), |_| {}).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert_eq!(state.epoch, 2);
    assert!(state.model.params.iter().all(|(k, v)| v.data().iter().zip(before[k].data()).all(|(a, b)| a.to_bits() == b.to_bits())));
    assert_eq!(Checkpoint::load(out.last_path()).unwrap(), good);
}

#[test]
fn overfits_a_small_set() {
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let (data, model) = body_data(16, 5);
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 300,
        lr: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(model, &cfg);
    train(&mut state, &data, &s, &cfg, None, |_| {}).unwrap();
    let first = state.history[0].loss;
    let last = state.history.last().unwrap().loss;
    eprintln!("first {first} last {last}");
    assert!(last < 0.2 * first, "first {first}, last {last}");
    // the curve split into ten windows of 30 epochs
    let windows: Vec<f64> = state.history.chunks(30).map(|w| w.iter().map(|h| h.loss).sum::<f64>() / 30.0).collect();
    let upward = windows.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(upward <= 2, "{upward} upward windows: {windows:?}");
    assert_eq!(state.history[149].lr, 1e-3);
    assert!((state.history[150].lr - 1e-4).abs() < 1e-12);
}

fn planted(n: usize, mid: usize, m: usize, seed: u64) -> Upsampler {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Upsampler {
        w1: Tensor::randn(&[n, mid], 1.0 / (n as f64).sqrt(), &mut rng),
        b1: Tensor::zeros(&[mid]),
        w2: Tensor::randn(&[mid, m], 1.0 / (mid as f64).sqrt(), &mut rng),
        b2: Tensor::zeros(&[m]),
        trained: true,
    }
}

#[test]
fn upsampler_recovers_planted_map() {
    let truth = planted(6, 10, 16, 1);
    let coarse: Vec<Vec<Point>> = random_samples(30, 6, 1, 2).into_iter().map(|s| s.coarse).collect();
    let dense: Vec<Vec<Point>> = coarse.iter().map(|c| truth.upsample(c).unwrap()).collect();
    let init = planted(6, 10, 16, 99);
    let cfg = UpsamplerTrainConfig {
        max_iters: 20000,
        patience: 500,
        ..UpsamplerTrainConfig::default()
    };
    let before = upsampler_error(&init, &coarse, &dense).unwrap();
    let (up, report) = train_upsampler(init, &coarse, &dense, &cfg).unwrap();
    let after = upsampler_error(&up, &coarse, &dense).unwrap();
    let held: Vec<Vec<Point>> = random_samples(5, 6, 1, 3).into_iter().map(|s| s.coarse).collect();
    let held_dense: Vec<Vec<Point>> = held.iter().map(|c| truth.upsample(c).unwrap()).collect();
    let held_err = upsampler_error(&up, &held, &held_dense).unwrap();
    eprintln!("{before} -> {after}, held {held_err}, {report:?}");
    assert!(after < 1e-4 && held_err < 1e-4);
}

#[test]
fn upsampler_absorbs_translation() {
    let (bodies, _) = generate_dataset(&SkeletonSpec::humanoid(), 6, 7).unwrap();
    let (p1, p2) = prolongations(6).unwrap();
    let init = Upsampler::from_prolongations(&p1, &p2).unwrap();
    let coarse: Vec<Vec<Point>> = bodies.iter().map(|b| b.coarse.clone()).collect();
    let dense: Vec<Vec<Point>> = bodies.iter().map(|b| b.dense.clone()).collect();
    let shift = |v: &Vec<Point>| v.iter().map(|p| [p[0] + 0.5, p[1] - 0.25, p[2] + 1.0]).collect::<Vec<_>>();
    let coarse_s: Vec<_> = coarse.iter().map(shift).collect();
    let dense_s: Vec<_> = dense.iter().map(shift).collect();
    // rows of both prolongations sum to one, so translations pass straight through
    let a = upsampler_error(&init, &coarse, &dense).unwrap();
    let b = upsampler_error(&init, &coarse_s, &dense_s).unwrap();
    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
}

#[test]
fn upsampler_generalizes_to_held_out_poses() {
    let (bodies, _) = generate_dataset(&SkeletonSpec::humanoid(), 80, 21).unwrap();
    let (p1, p2) = prolongations(6).unwrap();
    let init = Upsampler::from_prolongations(&p1, &p2).unwrap();
    let (train_b, test_b) = bodies.split_at(60);
    let split = |b: &[meshdiff::synthetic::BodySample]| {
        (
            b.iter().map(|s| s.coarse.clone()).collect::<Vec<_>>(),
            b.iter().map(|s| s.dense.clone()).collect::<Vec<_>>(),
        )
    };
    let (tc, td) = split(train_b);
    let (vc, vd) = split(test_b);
    let before = upsampler_error(&init, &vc, &vd).unwrap();
    let (up, report) = train_upsampler(init, &tc, &td, &UpsamplerTrainConfig::default()).unwrap();
    let after = upsampler_error(&up, &vc, &vd).unwrap();
    let diag = bbox_diagonal(&vd[0]);
    eprintln!("held-out {before} -> {after} (diag {diag}), {report:?}");
    assert!(after < 0.02 * diag);
    assert!(after <= before);
}

#[test]
fn mismatched_pairs_are_rejected() {
    let init = planted(6, 10, 16, 1);
    let coarse: Vec<Vec<Point>> = random_samples(3, 6, 1, 2).into_iter().map(|s| s.coarse).collect();
    let dense = vec![vec![[0.0f32; 3]; 16]; 2];
    assert!(train_upsampler(init, &coarse, &dense, &UpsamplerTrainConfig::default()).is_err());
}

#[test]
fn checkpoint_round_trips_train_state() {
    let (_, model) = body_data(2, 1);
    let cfg = TrainConfig::default();
    let state = TrainState::new(model, &cfg);
    let s = NoiseSchedule::default_sigmoid(1000).unwrap();
    let ck = state.checkpoint(&s);
    let back = TrainState::read_from(&ck, &cfg).unwrap();
    assert_eq!(back.model, state.model);
    assert_eq!(back.epoch, 0);
    let _ = params_on_tape::<f32>;
}
