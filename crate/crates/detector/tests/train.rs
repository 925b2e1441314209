use fmamba_core::fusion::FmbConfig;
use fmamba_core::{Error, ParamStore, Shape, Tensor};
use fmamba_detector::dataset::synth_dataset;
use fmamba_detector::eval::evaluate;
use fmamba_detector::train::{clip_grad_norm, epoch_means, load_trained, loss_and_grads, loss_csv, train, Sgd, TrainConfig};
use fmamba_detector::model::Detector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        image_size: 64,
        fmb: FmbConfig {
            n_dssf: 2,
            state_dim: 4,
            ..FmbConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn defaults_follow_the_training_protocol() {
    let c = TrainConfig::default();
    assert_eq!(
        (c.lambda_coord, c.momentum, c.weight_decay, c.learning_rate, c.batch_size),
        (7.5, 0.9, 0.001, 0.01, 4)
    );
    assert_eq!(c.fmb.n_dssf, 8);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = synth_dataset(1, 4, 64, 2).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 2,
        batch_size: 2,
        ..small()
    };
    let trained = train(&cfg, &data, |_| {}).unwrap();
    let mut fresh = ParamStore::new();
    Detector::new(&mut fresh, cfg.detector(), &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(trained.log.len(), 4);
    for ((_, _, a), (_, _, b)) in trained.store.iter().zip(fresh.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn weight_decay_alone_shrinks_norms_monotonically() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, c, y, x| (c + y + x) as f32 - 1.7));
    store.add("v", Tensor::full(Shape::new(1, 1, 1, 5), -0.8));
    let zero: Vec<Tensor<f32>> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
    let mut opt = Sgd::new(&store, 0.01, 0.9, 0.001);
    let norm = |s: &ParamStore<f32>| s.iter().map(|(_, _, t)| t.norm_sq() as f64).sum::<f64>();
    let mut prev = norm(&store);
    for _ in 0..200 {
        opt.step(&mut store, &zero).unwrap();
        let n = norm(&store);
        assert!(n < prev, "{n} >= {prev}");
        prev = n;
    }
}

#[test]
fn loss_decreases_over_two_epochs() {
    let data = synth_dataset(7, 8, 64, 2).unwrap();
    let trained = train(&small(), &data, |_| {}).unwrap();
    let means = trained.epoch_means();
    assert_eq!(means.len(), 2);
    assert!(means[1] < means[0], "{means:?}");
}

#[test]
fn identical_runs_write_identical_logs() {
    let data = synth_dataset(3, 6, 64, 2).unwrap();
    let a = train(&small(), &data, |_| {}).unwrap();
    let b = train(&small(), &data, |_| {}).unwrap();
    assert_eq!(loss_csv(&a.log), loss_csv(&b.log));
    let other = train(&TrainConfig { seed: 1, ..small() }, &data, |_| {}).unwrap();
    assert_ne!(loss_csv(&a.log), loss_csv(&other.log));
}

#[test]
fn every_fusion_parameter_receives_gradient() {
    let data = synth_dataset(2, 1, 64, 2).unwrap();
    let cfg = small();
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, cfg.detector(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let (_, grads) = loss_and_grads(&det, &store, &[&data[0]], cfg.lambda_coord).unwrap();
    let mut count = 0;
    for (stage, ids) in det.fusion_ids() {
        for id in ids {
            assert!(grads[id.0].max_abs() > 0.0, "stage {stage}: {} has zero gradient", store.name(id));
            count += 1;
        }
    }
    assert!(count > 0);
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let mut data = synth_dataset(1, 2, 64, 2).unwrap();
    data[1].rgb.data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { batch_size: 1, ..small() };
    let mut steps = 0;
    let err = match train(&cfg, &data, |_| steps += 1) {
        Err(e) => e,
        Ok(_) => panic!("training on a NaN image succeeded"),
    };
    assert!(matches!(err, Error::Divergence(_)), "{err}");
    assert!(err.to_string().contains("step"), "{err}");
    assert!(steps < 2);
}

#[test]
fn invalid_config_is_rejected() {
    let data = synth_dataset(1, 1, 64, 2).unwrap();
    for cfg in [
        TrainConfig { epochs: 0, ..small() },
        TrainConfig { batch_size: 0, ..small() },
        TrainConfig { lambda_coord: 0.0, ..small() },
        TrainConfig { momentum: 1.0, ..small() },
        TrainConfig { image_size: 40, ..small() },
    ] {
        assert!(train(&cfg, &data, |_| {}).is_err(), "{cfg:?}");
    }
    assert!(train(&small(), &[], |_| {}).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_evaluation() {
    let data = synth_dataset(5, 4, 64, 2).unwrap();
    let cfg = TrainConfig { epochs: 1, ..small() };
    let trained = train(&cfg, &data, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    trained.store.save_checkpoint(dir.path()).unwrap();
    let (det, store) = load_trained(&cfg.detector(), dir.path()).unwrap();
    let a = evaluate(&trained.detector, &trained.store, &data).unwrap();
    let b = evaluate(&det, &store, &data).unwrap();
    assert_eq!(a, b);
    assert!(evaluate(&det, &store, &[]).is_err());
}

#[test]
fn loss_log_format() {
    let data = synth_dataset(1, 2, 64, 2).unwrap();
    let trained = train(&TrainConfig { epochs: 1, batch_size: 1, ..small() }, &data, |_| {}).unwrap();
    let csv = loss_csv(&trained.log);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,step,loss,coord,conf,class");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,") && lines[2].starts_with("1,2,"));
    assert_eq!(epoch_means(&trained.log).len(), 1);
}

#[test]
fn clipping_rescales_to_the_ceiling() {
    let grads = || {
        vec![
            Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![3.0f32, 0.0]).unwrap(),
            Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![4.0f32]).unwrap(),
        ]
    };
    let mut g = grads();
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert_eq!(g[0].data(), &[0.6, 0.0]);
    assert_eq!(g[1].data(), &[0.8]);

    let mut g = grads();
    assert_eq!(clip_grad_norm(&mut g, 0.0), 5.0);
    assert_eq!(g, grads());
    let mut g = grads();
    clip_grad_norm(&mut g, 10.0);
    assert_eq!(g, grads());
}
