//! Mean average precision with 101-point interpolated precision.

use fmamba_core::{Error, ParamStore, Result};

use crate::boxes::{iou, nms, BoxPrediction, GtBox, MAX_DETECTIONS, NMS_IOU, SCORE_FLOOR};
use crate::dataset::DetectionSample;
use crate::model::Detector;

/// One scored detection of a single class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub score: f32,
    pub rect: [f32; 4],
}

/// One ground-truth box of a single class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Truth {
    pub image: usize,
    pub rect: [f32; 4],
}

pub const RECALL_POINTS: usize = 101;

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Average precision of one class, or `None` when it has no ground truth.
///
/// Detections are ranked by score (ties keep input order); each takes the
/// unmatched same-image box it overlaps most, if that overlap is at least `iou_thr`.
pub fn average_precision(dets: &[Detection], truths: &[Truth], iou_thr: f64) -> Option<f64> {
    if truths.is_empty() {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; truths.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (k, &d) in order.iter().enumerate() {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if used[t] || truth.image != det.image {
                continue;
            }
            let o = iou(&det.rect, &truth.rect);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((t, o));
            }
        }
        if let Some((t, _)) = best {
            used[t] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / truths.len() as f64);
    }
    // precision envelope: best precision at this or any higher recall
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for i in 0..RECALL_POINTS {
        let r = i as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < r - 1e-12 {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub map50: f64,
    pub map75: f64,
    /// Mean over the IoU thresholds `0.50:0.05:0.95`.
    pub map50_95: f64,
    /// Per-class AP at IoU 0.5; `None` for classes without ground truth.
    pub ap50: Vec<Option<f64>>,
}

/// Mean AP over classes that have ground truth, at each threshold.
pub fn mean_ap(preds: &[Vec<BoxPrediction>], truths: &[Vec<GtBox>], n_classes: usize, thresholds: &[f64]) -> Result<Vec<f64>> {
    Ok(per_class(preds, truths, n_classes, thresholds)?.iter().map(|aps| class_mean(aps)).collect())
}

fn class_mean(aps: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = aps.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn per_class(
    preds: &[Vec<BoxPrediction>],
    truths: &[Vec<GtBox>],
    n_classes: usize,
    thresholds: &[f64],
) -> Result<Vec<Vec<Option<f64>>>> {
    if truths.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Usage(format!(
            "{} prediction lists for {} images",
            preds.len(),
            truths.len()
        )));
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); n_classes];
    let mut gts: Vec<Vec<Truth>> = vec![Vec::new(); n_classes];
    for (image, (ps, ts)) in preds.iter().zip(truths).enumerate() {
        for p in ps {
            if let Some(d) = dets.get_mut(p.class()) {
                d.push(Detection {
                    image,
                    score: p.score(),
                    rect: p.rect,
                });
            }
        }
        for t in ts {
            let g = gts
                .get_mut(t.class)
                .ok_or_else(|| Error::Usage(format!("ground-truth class {} out of range", t.class)))?;
            g.push(Truth { image, rect: t.rect() });
        }
    }
    Ok(thresholds
        .iter()
        .map(|&thr| (0..n_classes).map(|c| average_precision(&dets[c], &gts[c], thr)).collect())
        .collect())
}

/// mAP at 0.5, 0.75 and 0.50:0.95 plus per-class AP50 for already-suppressed predictions.
pub fn evaluate_predictions(preds: &[Vec<BoxPrediction>], truths: &[Vec<GtBox>], n_classes: usize) -> Result<EvalReport> {
    let aps = per_class(preds, truths, n_classes, &coco_thresholds())?;
    let means: Vec<f64> = aps.iter().map(|a| class_mean(a)).collect();
    Ok(EvalReport {
        map50: means[0],
        map75: means[5],
        map50_95: means.iter().sum::<f64>() / means.len() as f64,
        ap50: aps[0].clone(),
    })
}

/// Runs the model on every sample, applies NMS and scores the result.
pub fn evaluate(det: &Detector, store: &ParamStore<f32>, data: &[DetectionSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Usage("evaluation set is empty".into()));
    }
    let mut preds = Vec::with_capacity(data.len());
    for s in data {
        let p = det.predict(store, &s.rgb, &s.ir)?;
        preds.push(nms(p, NMS_IOU, SCORE_FLOOR, MAX_DETECTIONS));
    }
    let truths: Vec<Vec<GtBox>> = data.iter().map(|s| s.boxes.clone()).collect();
    evaluate_predictions(&preds, &truths, det.cfg.n_classes)
}
