//! Activation heatmaps of fused feature maps, written as ASCII PGM.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fmamba_core::{Error, ParamStore, Result, Tensor};

use crate::dataset::DetectionSample;
use crate::model::Detector;

pub const PGM_LEVELS: u32 = 255;

/// Channel mean of `|P|` for sample 0, min-max normalised to `[0, 1]`.
/// A constant map normalises to all zeros. Returns `(height, width, values)`.
pub fn heatmap(fused: &Tensor<f32>) -> (usize, usize, Vec<f64>) {
    let s = fused.shape();
    let (c, h, w) = (s.channels(), s.height(), s.width());
    let mut m = vec![0.0f64; h * w];
    for ch in 0..c {
        for (acc, v) in m.iter_mut().zip(fused.plane(0, ch)) {
            *acc += v.abs() as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= c as f64);
    let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        m.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        m.iter_mut().for_each(|v| *v = 0.0);
    }
    (h, w, m)
}

/// Heatmap of the fused map at `stage` for one sample.
pub fn sample_heatmap(det: &Detector, store: &ParamStore<f32>, sample: &DetectionSample, stage: usize) -> Result<(usize, usize, Vec<f64>)> {
    let levels = det.infer(store, &sample.rgb, &sample.ir)?;
    let (_, fused, _) = levels.iter().find(|(s, _, _)| *s == stage).ok_or_else(|| {
        Error::Usage(format!(
            "stage {stage} is not fused; fused stages are {:?}",
            det.cfg.levels()
        ))
    })?;
    Ok(heatmap(fused))
}

/// ASCII PGM (`P2`) with values in `[0, 1]` scaled to `0..=255`.
pub fn pgm(h: usize, w: usize, values: &[f64]) -> String {
    let mut out = format!("P2\n{w} {h}\n{PGM_LEVELS}\n");
    for row in values.chunks(w.max(1)) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * PGM_LEVELS as f64).round() as u32).to_string())
            .collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    out
}

pub fn write_pgm(path: impl AsRef<Path>, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, pgm(h, w, values)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
