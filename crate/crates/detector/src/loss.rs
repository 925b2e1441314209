//! Detection loss `L = λ·L_coord + L_conf + L_class` with center-cell matching.
//!
//! Each ground-truth box is assigned to one level, the one whose stride best
//! matches the box size, and there to the cell containing its centre. Per
//! sample, with `n` matched cells:
//!
//! * `L_coord = Σ_matched (1 − IoU) / n`
//! * `L_conf  = Σ_all cells BCE(objectness) / max(1, n)`
//! * `L_class = Σ_matched CE(class logits) / n`
//!
//! and the batch loss is the mean over samples. Gradients with respect to the
//! raw head maps are derived by hand and returned alongside the value.

use fmamba_core::{Error, Result, Scalar, Shape, Tensor};

use crate::boxes::GtBox;
use crate::model::{cell_center, decode_distances, softmax, stride, BOX_CHANNELS, OBJ_CHANNEL};

/// Boxes are matched to the level where `max side ≈ SIZE_PER_STRIDE · stride`.
pub const SIZE_PER_STRIDE: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    /// Index into the level list.
    pub level: usize,
    pub cy: usize,
    pub cx: usize,
    pub gt: GtBox,
}

/// Matches each box of one sample to `(level, cell)`. `levels` lists `(stage, h, w)`.
/// When two boxes land on the same cell the first one keeps it.
pub fn assign(levels: &[(usize, usize, usize)], boxes: &[GtBox]) -> Vec<Assignment> {
    let mut out: Vec<Assignment> = Vec::new();
    for gt in boxes {
        let side = gt.width().max(gt.height()) as f64;
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &(stage, _, _)) in levels.iter().enumerate() {
            let d = (side / (SIZE_PER_STRIDE * stride(stage) as f64)).log2().abs();
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        let (stage, h, w) = levels[best];
        let s = stride(stage) as f64;
        let (cx, cy) = gt.center();
        let cell_x = ((cx as f64 / s).floor() as usize).min(w - 1);
        let cell_y = ((cy as f64 / s).floor() as usize).min(h - 1);
        if !out.iter().any(|a| a.level == best && a.cy == cell_y && a.cx == cell_x) {
            out.push(Assignment {
                level: best,
                cy: cell_y,
                cx: cell_x,
                gt: *gt,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    /// `L_coord` before the `λ` weight.
    pub coord: f64,
    pub conf: f64,
    pub class: f64,
}

/// `softplus(x) − t·x`, the logit form of binary cross-entropy.
pub fn bce_with_logit(x: f64, t: f64) -> f64 {
    x.softplus() - t * x
}

/// `(IoU, ∂IoU/∂[l, t, r, b])` for a box spanning distances `d` around `(px, py)`.
pub fn iou_and_grad(px: f64, py: f64, d: [f64; 4], gt: &GtBox) -> (f64, [f64; 4]) {
    let [l, t, r, b] = d;
    let (x1, y1, x2, y2) = (px - l, py - t, px + r, py + b);
    let (gx1, gy1, gx2, gy2) = (gt.x_min as f64, gt.y_min as f64, gt.x_max as f64, gt.y_max as f64);
    let iw = x2.min(gx2) - x1.max(gx1);
    let ih = y2.min(gy2) - y1.max(gy1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let inter = iw * ih;
    let ap = (l + r) * (t + b);
    let ag = (gx2 - gx1) * (gy2 - gy1);
    let union = ap + ag - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_ap = -inter / (union * union);
    let on = |c: bool| if c { 1.0 } else { 0.0 };
    let di = [
        ih * on(x1 > gx1),
        iw * on(y1 > gy1),
        ih * on(x2 < gx2),
        iw * on(y2 < gy2),
    ];
    let dap = [t + b, l + r, t + b, l + r];
    (iou, std::array::from_fn(|k| d_inter * di[k] + d_ap * dap[k]))
}

/// Loss over a batch and its gradient with respect to every raw head map.
///
/// `raws[j]` is the `(B, 5 + K, H_j, W_j)` head output of stage `stages[j]`;
/// `targets[b]` are the boxes of sample `b`.
pub fn detection_loss<S: Scalar>(
    raws: &[&Tensor<S>],
    stages: &[usize],
    targets: &[Vec<GtBox>],
    lambda_coord: f64,
) -> Result<(LossParts, Vec<Tensor<S>>)> {
    if !(lambda_coord > 0.0) {
        return Err(Error::Config(format!("lambda_coord must be positive, got {lambda_coord}")));
    }
    if raws.len() != stages.len() || raws.is_empty() {
        return Err(Error::Dimension("one raw map per level is required".into()));
    }
    let batch = raws[0].shape().batch();
    if targets.len() != batch || raws.iter().any(|r| r.shape().batch() != batch) {
        return Err(Error::Dimension(format!(
            "{} target lists for a batch of {batch}",
            targets.len()
        )));
    }
    let ch = raws[0].shape().channels();
    if ch < OBJ_CHANNEL + 2 || raws.iter().any(|r| r.shape().channels() != ch) {
        return Err(Error::Dimension(format!("head maps need 5 + K channels, got {ch}")));
    }
    for t in targets.iter().flatten() {
        if t.class >= ch - OBJ_CHANNEL - 1 {
            return Err(Error::Usage(format!("target class {} out of range", t.class)));
        }
    }
    let levels: Vec<(usize, usize, usize)> = raws
        .iter()
        .zip(stages)
        .map(|(r, &s)| (s, r.shape().height(), r.shape().width()))
        .collect();
    let mut grads: Vec<Tensor<f64>> = raws.iter().map(|r| Tensor::zeros(r.shape())).collect();
    let mut parts = LossParts::default();
    let inv_b = 1.0 / batch as f64;

    for (b, boxes) in targets.iter().enumerate() {
        let matched = assign(&levels, boxes);
        let n = matched.len();
        let conf_norm = 1.0 / n.max(1) as f64;
        let mut coord = 0.0;
        let mut conf = 0.0;
        let mut class = 0.0;

        for (j, raw) in raws.iter().enumerate() {
            let Shape([_, _, h, w]) = raw.shape();
            for cy in 0..h {
                for cx in 0..w {
                    let t = if matched.iter().any(|a| a.level == j && a.cy == cy && a.cx == cx) {
                        1.0
                    } else {
                        0.0
                    };
                    let x = raw.at(b, OBJ_CHANNEL, cy, cx).f64();
                    conf += bce_with_logit(x, t);
                    let g = grads[j].at(b, OBJ_CHANNEL, cy, cx) + (x.sigmoid() - t) * conf_norm * inv_b;
                    grads[j].set(b, OBJ_CHANNEL, cy, cx, g);
                }
            }
        }

        for a in &matched {
            let raw = raws[a.level];
            let s = stride(levels[a.level].0);
            let at = |c: usize| raw.at(b, c, a.cy, a.cx).f64();
            let r = [at(0), at(1), at(2), at(3)];
            let d = decode_distances(r, s);
            let (px, py) = cell_center(a.cy, a.cx, s);
            let (iou, diou) = iou_and_grad(px, py, d, &a.gt);
            coord += 1.0 - iou;
            let g = &mut grads[a.level];
            for k in 0..BOX_CHANNELS {
                let dd_draw = s as f64 * r[k].sigmoid();
                let v = g.at(b, k, a.cy, a.cx) - lambda_coord * diou[k] * dd_draw / n as f64 * inv_b;
                g.set(b, k, a.cy, a.cx, v);
            }
            let logits: Vec<f64> = (OBJ_CHANNEL + 1..ch).map(at).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            class += lse - logits[a.gt.class];
            for (k, p) in softmax(&logits).into_iter().enumerate() {
                let c = OBJ_CHANNEL + 1 + k;
                let onehot = if k == a.gt.class { 1.0 } else { 0.0 };
                let v = g.at(b, c, a.cy, a.cx) + (p - onehot) / n as f64 * inv_b;
                g.set(b, c, a.cy, a.cx, v);
            }
        }

        let coord_b = if n > 0 { coord / n as f64 } else { 0.0 };
        let class_b = if n > 0 { class / n as f64 } else { 0.0 };
        let conf_b = conf * conf_norm;
        parts.coord += coord_b * inv_b;
        parts.conf += conf_b * inv_b;
        parts.class += class_b * inv_b;
    }
    parts.total = lambda_coord * parts.coord + parts.conf + parts.class;
    Ok((parts, grads.iter().map(Tensor::cast).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x0: f32, y0: f32, x1: f32, y1: f32, class: usize) -> GtBox {
        GtBox {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
            class,
        }
    }

    #[test]
    fn assignment_picks_level_by_size() {
        let levels = [(3, 8, 8), (4, 4, 4), (5, 2, 2)];
        let small = gt(0.0, 0.0, 20.0, 18.0, 0);
        let large = gt(0.0, 0.0, 60.0, 30.0, 1);
        let a = assign(&levels, &[small, large]);
        assert_eq!((a[0].level, a[0].cy, a[0].cx), (0, 1, 1));
        assert_eq!((a[1].level, a[1].cy, a[1].cx), (2, 0, 0));
    }

    #[test]
    fn iou_gradient_matches_differences() {
        let g = gt(3.0, 5.0, 20.0, 14.0, 0);
        let d = [6.3, 2.2, 9.1, 7.4];
        let (_, grad) = iou_and_grad(10.0, 9.0, d, &g);
        for k in 0..4 {
            let mut up = d;
            let mut dn = d;
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let num = (iou_and_grad(10.0, 9.0, up, &g).0 - iou_and_grad(10.0, 9.0, dn, &g).0) / 2e-6;
            assert!((num - grad[k]).abs() < 1e-8, "{k}: {num} vs {}", grad[k]);
        }
    }

    #[test]
    fn rejects_non_positive_lambda() {
        let raw = Tensor::<f64>::zeros(Shape::new(1, 7, 2, 2));
        assert!(detection_loss(&[&raw], &[4], &[vec![]], 0.0).is_err());
    }
}
