//! Brute-force AP oracle and random evaluation instances, shared by test targets.

#![allow(dead_code)]

use fmamba_detector::boxes::{iou, BoxPrediction, GtBox};
use fmamba_detector::eval::{Detection, Truth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gt(r: [f32; 4], class: usize) -> GtBox {
    GtBox {
        x_min: r[0],
        y_min: r[1],
        x_max: r[2],
        y_max: r[3],
        class,
    }
}

pub fn pred(rect: [f32; 4], class: usize, n_classes: usize, confidence: f32) -> BoxPrediction {
    let mut class_scores = vec![0.0; n_classes];
    class_scores[class] = 1.0;
    BoxPrediction {
        rect,
        class_scores,
        confidence,
    }
}

/// Precision at every prefix of the ranking, each prefix matched from scratch,
/// then the maximum precision over prefixes reaching each recall level.
pub fn brute_force_ap(dets: &[Detection], truths: &[Truth], thr: f64) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut points = Vec::new();
    for k in 1..=order.len() {
        let mut used = vec![false; truths.len()];
        let mut tp = 0;
        for &d in &order[..k] {
            let candidates = (0..truths.len())
                .filter(|&t| !used[t] && truths[t].image == dets[d].image)
                .map(|t| (t, iou(&dets[d].rect, &truths[t].rect)))
                .filter(|&(_, o)| o >= thr);
            let mut best: Option<(usize, f64)> = None;
            for (t, o) in candidates {
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((t, o));
                }
            }
            if let Some((t, _)) = best {
                used[t] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / truths.len() as f64, tp as f64 / k as f64));
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            points
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / 101.0)
}

fn random_rect<R: Rng>(rng: &mut R) -> [f32; 4] {
    let x = rng.gen_range(0..24) as f32;
    let y = rng.gen_range(0..24) as f32;
    [x, y, x + rng.gen_range(2..9) as f32, y + rng.gen_range(2..9) as f32]
}

/// Random instance with at most ten boxes: truths and jittered or random detections.
pub fn random_instance(seed: u64) -> (Vec<Vec<BoxPrediction>>, Vec<Vec<GtBox>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_images = rng.gen_range(1..=3);
    let n_truth = rng.gen_range(1..=5);
    let n_det = rng.gen_range(0..=10 - n_truth);
    let mut truths = vec![Vec::new(); n_images];
    for _ in 0..n_truth {
        truths[rng.gen_range(0..n_images)].push(gt(random_rect(&mut rng), rng.gen_range(0..2)));
    }
    let all: Vec<(usize, GtBox)> = truths.iter().enumerate().flat_map(|(i, ts)| ts.iter().map(move |t| (i, *t))).collect();
    let mut preds = vec![Vec::new(); n_images];
    for _ in 0..n_det {
        // discrete scores make ties likely
        let conf = rng.gen_range(1..=5) as f32 / 5.0;
        if rng.gen_bool(0.6) {
            let (img, t) = all[rng.gen_range(0..all.len())];
            let mut r = t.rect();
            r.iter_mut().for_each(|v| *v += rng.gen_range(-2..=2) as f32);
            if r[0] < r[2] && r[1] < r[3] {
                let class = if rng.gen_bool(0.8) { t.class } else { 1 - t.class };
                preds[img].push(pred(r, class, 2, conf));
            }
        } else {
            preds[rng.gen_range(0..n_images)].push(pred(random_rect(&mut rng), rng.gen_range(0..2), 2, conf));
        }
    }
    (preds, truths)
}

pub fn brute_force_map(preds: &[Vec<BoxPrediction>], truths: &[Vec<GtBox>], thr: f64) -> f64 {
    let aps: Vec<f64> = (0..2)
        .filter_map(|c| {
            let dets: Vec<Detection> = preds
                .iter()
                .enumerate()
                .flat_map(|(i, ps)| {
                    ps.iter().filter(|p| p.class() == c).map(move |p| Detection {
                        image: i,
                        score: p.score(),
                        rect: p.rect,
                    })
                })
                .collect();
            let ts: Vec<Truth> = truths
                .iter()
                .enumerate()
                .flat_map(|(i, ts)| ts.iter().filter(|t| t.class == c).map(move |t| Truth { image: i, rect: t.rect() }))
                .collect();
            brute_force_ap(&dets, &ts, thr)
        })
        .collect();
    aps.iter().sum::<f64>() / aps.len() as f64
}
