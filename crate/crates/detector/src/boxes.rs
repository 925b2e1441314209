//! Axis-aligned boxes in pixel coordinates, IoU and greedy NMS.

/// Ground-truth box: `x_min < x_max`, `y_min < y_max`, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    pub class: usize,
}

impl GtBox {
    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f32, f32) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn rect(&self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxPrediction {
    /// `[x_min, y_min, x_max, y_max]`
    pub rect: [f32; 4],
    /// Softmax class probabilities.
    pub class_scores: Vec<f32>,
    /// Objectness in `[0, 1]`.
    pub confidence: f32,
}

impl BoxPrediction {
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.class_scores.iter().enumerate() {
            if s > self.class_scores[best] {
                best = i;
            }
        }
        best
    }

    /// Ranking score: objectness times the top class probability.
    pub fn score(&self) -> f32 {
        self.confidence * self.class_scores.get(self.class()).copied().unwrap_or(0.0)
    }
}

pub fn area(r: &[f32; 4]) -> f64 {
    ((r[2] - r[0]).max(0.0) as f64) * ((r[3] - r[1]).max(0.0) as f64)
}

pub fn iou(a: &[f32; 4], b: &[f32; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub const NMS_IOU: f64 = 0.5;
pub const SCORE_FLOOR: f32 = 0.05;
pub const MAX_DETECTIONS: usize = 100;

/// Greedy per-class suppression: drops scores below `floor`, then keeps the
/// best-scoring box and removes same-class boxes overlapping it by more than `iou_thr`.
pub fn nms(mut preds: Vec<BoxPrediction>, iou_thr: f64, floor: f32, max_keep: usize) -> Vec<BoxPrediction> {
    preds.retain(|p| p.score() >= floor);
    preds.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut keep: Vec<BoxPrediction> = Vec::new();
    for p in preds {
        if keep.len() == max_keep {
            break;
        }
        let c = p.class();
        if keep.iter().all(|k| k.class() != c || iou(&k.rect, &p.rect) <= iou_thr) {
            keep.push(p);
        }
    }
    keep
}
