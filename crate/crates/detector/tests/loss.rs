use fmamba_core::{Scalar, Shape, Tensor};
use fmamba_detector::boxes::GtBox;
use fmamba_detector::loss::{detection_loss, LossParts};
use fmamba_detector::model::{stride, OBJ_CHANNEL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn inv_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn gt(x0: f32, y0: f32, x1: f32, y1: f32, class: usize) -> GtBox {
    GtBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
        class,
    }
}

fn loss(raws: &[Tensor<f64>], stages: &[usize], targets: &[Vec<GtBox>], lambda: f64) -> (LossParts, Vec<Tensor<f64>>) {
    let refs: Vec<&Tensor<f64>> = raws.iter().collect();
    detection_loss(&refs, stages, targets, lambda).unwrap()
}

#[test]
fn single_cell_hand_computed() {
    // stage 5 of a 32x32 image: one cell centred at (16, 16)
    let target = gt(8.0, 0.0, 24.0, 32.0, 0);
    // predicted box [8, 8, 24, 24] sits inside the target with half its area: IoU 0.5
    let d = inv_softplus(8.0 / 32.0);
    let logits = [d, d, d, d, 1.3, 0.4, -0.2];
    let raw = Tensor::from_fn(Shape::new(1, 7, 1, 1), |_, c, _, _| logits[c]);
    let (parts, _) = loss(&[raw], &[5], &[vec![target]], 7.5);

    let bce = (1.0 + (-1.3f64).exp()).ln();
    let ce = (0.4f64.exp() + (-0.2f64).exp()).ln() - 0.4;
    let expected = 7.5 * 0.5 + bce + ce;
    assert!((parts.coord - 0.5).abs() < 1e-12, "{parts:?}");
    assert!((parts.conf - bce).abs() < 1e-12);
    assert!((parts.class - ce).abs() < 1e-12);
    assert!((parts.total - expected).abs() < 1e-12, "{} vs {expected}", parts.total);
}

fn perfect_raw(stage: usize, size: usize, boxes: &[GtBox], n_classes: usize) -> Tensor<f64> {
    let s = stride(stage);
    let n = size / s;
    let mut raw = Tensor::full(Shape::new(1, OBJ_CHANNEL + 1 + n_classes, n, n), -40.0);
    for b in boxes {
        let (cx, cy) = b.center();
        let (ix, iy) = ((cx / s as f32) as usize, (cy / s as f32) as usize);
        let (px, py) = ((ix as f64 + 0.5) * s as f64, (iy as f64 + 0.5) * s as f64);
        let d = [px - b.x_min as f64, py - b.y_min as f64, b.x_max as f64 - px, b.y_max as f64 - py];
        for (k, v) in d.iter().enumerate() {
            raw.set(0, k, iy, ix, inv_softplus(v / s as f64));
        }
        raw.set(0, OBJ_CHANNEL, iy, ix, 40.0);
        raw.set(0, OBJ_CHANNEL + 1 + b.class, iy, ix, 40.0);
    }
    raw
}

#[test]
fn perfect_predictions_have_zero_loss() {
    let boxes = vec![gt(3.0, 5.0, 22.0, 19.0, 1), gt(40.0, 36.0, 60.0, 62.0, 0)];
    let raw = perfect_raw(3, 64, &boxes, 2);
    let (parts, _) = loss(&[raw], &[3], &[boxes], 7.5);
    assert!(parts.total.abs() < 1e-9, "{parts:?}");
}

#[test]
fn coordinate_term_is_linear_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raws = random_raws(&mut rng, 2, 64);
    let targets = vec![
        vec![gt(4.0, 4.0, 30.0, 20.0, 0)],
        vec![gt(10.0, 30.0, 26.0, 50.0, 1), gt(33.0, 2.0, 63.0, 40.0, 0)],
    ];
    let (a, _) = loss(&raws, &[3, 4], &targets, 7.5);
    let (b, _) = loss(&raws, &[3, 4], &targets, 15.0);
    assert_eq!(a.coord, b.coord);
    assert_eq!(a.conf, b.conf);
    assert_eq!(a.class, b.class);
    assert!(((b.total - a.total) - 7.5 * a.coord).abs() < 1e-12);
}

#[test]
fn empty_targets_leave_only_background_objectness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let raws = random_raws(&mut rng, 1, 64);
    let (parts, _) = loss(&raws, &[3, 4], &[vec![]], 7.5);
    let expected: f64 = raws
        .iter()
        .flat_map(|r| r.channel(OBJ_CHANNEL).data().to_vec())
        .map(|x| x.softplus())
        .sum();
    assert_eq!(parts.coord, 0.0);
    assert_eq!(parts.class, 0.0);
    assert!((parts.conf - expected).abs() < 1e-9);
}

fn random_raws<R: Rng>(rng: &mut R, batch: usize, size: usize) -> Vec<Tensor<f64>> {
    [3, 4]
        .iter()
        .map(|&st| {
            let n = size / stride(st);
            Tensor::from_fn(Shape::new(batch, 7, n, n), |_, _, _, _| rng.gen_range(-2.0..2.0))
        })
        .collect()
}

#[test]
fn gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raws = random_raws(&mut rng, 2, 64);
    let targets = vec![
        vec![gt(4.5, 3.0, 29.0, 21.0, 0), gt(40.0, 41.0, 55.0, 52.0, 1)],
        vec![gt(12.0, 30.5, 35.0, 60.0, 1)],
    ];
    let (_, grads) = loss(&raws, &[3, 4], &targets, 7.5);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for j in 0..raws.len() {
        for i in 0..raws[j].len() {
            let mut up = raws.clone();
            let mut dn = raws.clone();
            up[j].data_mut()[i] += h;
            dn[j].data_mut()[i] -= h;
            let num = (loss(&up, &[3, 4], &targets, 7.5).0.total - loss(&dn, &[3, 4], &targets, 7.5).0.total) / (2.0 * h);
            let ana = grads[j].data()[i];
            worst = worst.max((num - ana).abs() / (1e-3 + ana.abs()));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst}");
}

#[test]
fn rejects_mismatched_inputs() {
    let raw = Tensor::<f64>::zeros(Shape::new(2, 7, 4, 4));
    assert!(detection_loss(&[&raw], &[4], &[vec![]], 7.5).is_err());
    assert!(detection_loss(&[&raw], &[4, 5], &[vec![], vec![]], 7.5).is_err());
    let bad_class = vec![vec![gt(0.0, 0.0, 8.0, 8.0, 2)], vec![]];
    assert!(detection_loss(&[&raw], &[4], &bad_class, 7.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_non_negative(seed in 0u64..10_000, lambda in 0.1f64..20.0, n_boxes in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raws: Vec<Tensor<f64>> = random_raws(&mut rng, 1, 64)
            .into_iter()
            .map(|t| t.map(|v| v * 5.0))
            .collect();
        let boxes: Vec<GtBox> = (0..n_boxes)
            .map(|_| {
                let x0 = rng.gen_range(0.0..50.0f32);
                let y0 = rng.gen_range(0.0..50.0f32);
                gt(x0, y0, x0 + rng.gen_range(2.0..14.0), y0 + rng.gen_range(2.0..14.0), rng.gen_range(0..2))
            })
            .collect();
        let (parts, _) = loss(&raws, &[3, 4], &[boxes], lambda);
        prop_assert!(parts.total >= 0.0 && parts.coord >= 0.0 && parts.conf >= 0.0 && parts.class >= 0.0);
    }
}
