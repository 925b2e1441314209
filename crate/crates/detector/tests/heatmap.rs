use fmamba_core::fusion::FmbConfig;
use fmamba_core::{ParamStore, Shape, Tensor};
use fmamba_detector::dataset::synth_dataset;
use fmamba_detector::heatmap::{heatmap, pgm, sample_heatmap, write_pgm};
use fmamba_detector::model::{Detector, DetectorConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn constant_map_is_all_zero() {
    let (h, w, m) = heatmap(&Tensor::full(Shape::new(1, 8, 3, 5), 2.5f32));
    assert_eq!((h, w), (3, 5));
    assert!(m.iter().all(|&v| v == 0.0));
}

#[test]
fn non_constant_map_spans_unit_interval() {
    let t = Tensor::from_fn(Shape::new(1, 4, 4, 6), |_, c, y, x| (c as f32 - 1.5) * (y * 6 + x) as f32 - 3.0);
    let (_, _, m) = heatmap(&t);
    let max = m.iter().cloned().fold(f64::MIN, f64::max);
    let min = m.iter().cloned().fold(f64::MAX, f64::min);
    assert_eq!(max, 1.0);
    assert_eq!(min, 0.0);
}

#[test]
fn channel_mean_of_absolute_values() {
    let t = Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![1.0f32, -2.0, 3.0, -1.0, 0.0, -5.0]).unwrap();
    // means of |.|: 1, 1, 4
    let (_, _, m) = heatmap(&t);
    assert_eq!(m, vec![0.0, 0.0, 1.0]);
}

#[test]
fn pgm_layout() {
    let text = pgm(2, 3, &[0.0, 0.5, 1.0, 1.0, 0.25, 0.0]);
    assert_eq!(text, "P2\n3 2\n255\n0 128 255\n255 64 0\n");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    write_pgm(&path, 2, 3, &[0.0, 0.5, 1.0, 1.0, 0.25, 0.0]).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap(), text);
}

#[test]
fn model_heatmap_matches_stage_size() {
    let cfg = DetectorConfig {
        image_size: 64,
        n_classes: 2,
        fmb: FmbConfig {
            n_dssf: 1,
            state_dim: 4,
            ..FmbConfig::default()
        },
    };
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let data = synth_dataset(0, 1, 64, 2).unwrap();
    for (stage, side) in [(3, 8), (4, 4), (5, 2)] {
        let (h, w, m) = sample_heatmap(&det, &store, &data[0], stage).unwrap();
        assert_eq!((h, w, m.len()), (side, side, side * side));
    }
    assert!(sample_heatmap(&det, &store, &data[0], 2).is_err());
}
