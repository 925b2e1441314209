use fmamba_core::fusion::FmbConfig;
use fmamba_core::{ParamStore, Shape, Tape, Tensor};
use fmamba_detector::dataset::synth_dataset;
use fmamba_detector::model::{stride, Detector, DetectorConfig, BACKBONE_WIDTHS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_fmb() -> FmbConfig {
    FmbConfig {
        n_dssf: 2,
        state_dim: 4,
        ..FmbConfig::default()
    }
}

fn build(cfg: DetectorConfig, seed: u64) -> (Detector, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (det, store)
}

fn config(fmb: FmbConfig) -> DetectorConfig {
    DetectorConfig {
        image_size: 64,
        n_classes: 2,
        fmb,
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, c, s, s), |_, _, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn backbone_stage_shapes() {
    let (det, store) = build(config(small_fmb()), 0);
    let mut tape = Tape::<f32>::new();
    let bind = store.bind_constants(&mut tape);
    let x = tape.constant(Tensor::zeros(Shape::new(1, 3, 64, 64)));
    let stages = det.rgb.forward(&mut tape, &bind, x).unwrap();
    let shapes: Vec<Shape> = stages.iter().map(|&v| tape.shape(v)).collect();
    let expected: Vec<Shape> = (0..5).map(|i| Shape::new(1, BACKBONE_WIDTHS[i], 32 >> i, 32 >> i)).collect();
    assert_eq!(shapes, expected);
    assert!(BACKBONE_WIDTHS.iter().all(|c| c % 4 == 0));
}

#[test]
fn zero_image_and_biases_give_zero_features() {
    let (det, store) = build(config(small_fmb()), 0);
    let mut tape = Tape::<f32>::new();
    let bind = store.bind_constants(&mut tape);
    let x = tape.constant(Tensor::zeros(Shape::new(1, 1, 64, 64)));
    for v in det.ir.forward(&mut tape, &bind, x).unwrap() {
        assert_eq!(tape.value(v).max_abs(), 0.0);
    }
}

#[test]
fn visible_stream_ignores_thermal_input() {
    let (det, store) = build(config(small_fmb()), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rgb = random_image(&mut rng, 3, 64);
    let stream = |ir: Tensor<f32>| {
        let mut tape = Tape::<f32>::new();
        let bind = store.bind_constants(&mut tape);
        let r = tape.constant(rgb.clone());
        let _i = tape.constant(ir);
        let out = det.rgb.forward(&mut tape, &bind, r).unwrap();
        out.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
    };
    let a = stream(random_image(&mut rng, 1, 64));
    let b = stream(random_image(&mut rng, 1, 64));
    assert_eq!(a, b);

    // the full forward pass with a different thermal image changes only what follows fusion
    let ir1 = random_image(&mut rng, 1, 64);
    let ir2 = random_image(&mut rng, 1, 64);
    let p1 = det.infer(&store, &rgb, &ir1).unwrap();
    let p2 = det.infer(&store, &rgb, &ir2).unwrap();
    assert_ne!(p1[0].1, p2[0].1);
}

#[test]
fn prediction_count_covers_every_cell() {
    let (det, store) = build(config(small_fmb()), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let preds = det.predict(&store, &random_image(&mut rng, 3, 64), &random_image(&mut rng, 1, 64)).unwrap();
    let expected: usize = [3, 4, 5].iter().map(|&i| (64 / stride(i)).pow(2)).sum();
    assert_eq!(preds.len(), expected);
    for p in &preds {
        assert!((0.0..=1.0).contains(&p.confidence));
        assert!(p.class_scores.iter().all(|s| s.is_finite()));
        assert!(p.rect[0] <= p.rect[2] && p.rect[1] <= p.rect[3]);
        assert!(p.rect.iter().all(|&v| (0.0..=64.0).contains(&v)));
    }
}

#[test]
fn stage_set_selects_levels() {
    let fmb = FmbConfig {
        stages: vec![5, 2, 3],
        ..small_fmb()
    };
    let (det, store) = build(config(fmb), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let levels = det.infer(&store, &random_image(&mut rng, 3, 64), &random_image(&mut rng, 1, 64)).unwrap();
    let got: Vec<(usize, Shape)> = levels.iter().map(|(s, _, raw)| (*s, raw.shape())).collect();
    assert_eq!(
        got,
        vec![
            (2, Shape::new(1, 7, 16, 16)),
            (3, Shape::new(1, 7, 8, 8)),
            (5, Shape::new(1, 7, 2, 2))
        ]
    );
}

#[test]
fn forward_is_deterministic() {
    let data = synth_dataset(3, 1, 64, 2).unwrap();
    let (d1, s1) = build(config(small_fmb()), 9);
    let (d2, s2) = build(config(small_fmb()), 9);
    let a = d1.predict(&s1, &data[0].rgb, &data[0].ir).unwrap();
    let b = d2.predict(&s2, &data[0].rgb, &data[0].ir).unwrap();
    assert_eq!(a, b);
}

#[test]
fn addition_only_fusion_changes_predictions() {
    let data = synth_dataset(4, 1, 64, 2).unwrap();
    let full = config(small_fmb());
    let add = config(FmbConfig {
        use_sscs: false,
        use_dssf: false,
        ..small_fmb()
    });
    let (d1, s1) = build(full, 7);
    let (d2, s2) = build(add, 7);
    let a = d1.predict(&s1, &data[0].rgb, &data[0].ir).unwrap();
    let b = d2.predict(&s2, &data[0].rgb, &data[0].ir).unwrap();
    assert_eq!(a.len(), b.len());
    assert_ne!(a, b);
}

#[test]
fn rejects_bad_configuration() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad_size = DetectorConfig {
        image_size: 48,
        ..config(small_fmb())
    };
    assert!(Detector::new(&mut store, bad_size, &mut rng).is_err());
    let bad_stage = config(FmbConfig {
        stages: vec![6],
        ..small_fmb()
    });
    assert!(Detector::new(&mut store, bad_stage, &mut rng).is_err());

    let (det, store) = build(config(small_fmb()), 0);
    let wrong = Tensor::zeros(Shape::new(1, 3, 32, 32));
    assert!(det.infer(&store, &wrong, &Tensor::zeros(Shape::new(1, 1, 32, 32))).is_err());
}
