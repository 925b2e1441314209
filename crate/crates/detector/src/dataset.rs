//! Synthetic paired RGB/IR scenes in which every object is clearly visible in
//! exactly one modality, plus the on-disk dataset layout.
//!
//! A dataset directory holds, per sample id, `rgb_<id>.tns` (1x3xSxS),
//! `ir_<id>.tns` (1x1xSxS) and `boxes_<id>.txt` with one
//! `class x_min y_min x_max y_max` line per object.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fmamba_core::io::{read_tns, write_tns};
use fmamba_core::{Error, Result, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::GtBox;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionSample {
    pub id: usize,
    /// `(1, 3, S, S)`
    pub rgb: Tensor<f32>,
    /// `(1, 1, S, S)`
    pub ir: Tensor<f32>,
    pub boxes: Vec<GtBox>,
}

impl DetectionSample {
    pub fn image_size(&self) -> usize {
        self.rgb.shape().height()
    }
}

pub const MAX_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Visible,
    Thermal,
}

/// Class `k` is drawn as the `k`-th shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disc,
    Diamond,
    Ring,
}

impl ShapeKind {
    pub fn of_class(class: usize) -> ShapeKind {
        [ShapeKind::Rect, ShapeKind::Disc, ShapeKind::Diamond, ShapeKind::Ring][class]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthObject {
    pub gt: GtBox,
    pub shape: ShapeKind,
    pub modality: Modality,
}

impl SynthObject {
    /// Whether the pixel with top-left corner `(x, y)` is painted.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let g = &self.gt;
        if px < g.x_min || px >= g.x_max || py < g.y_min || py >= g.y_max {
            return false;
        }
        let (cx, cy) = g.center();
        let (rx, ry) = (0.5 * g.width(), 0.5 * g.height());
        let (u, v) = ((px - cx) / rx, (py - cy) / ry);
        match self.shape {
            ShapeKind::Rect => true,
            ShapeKind::Disc => u * u + v * v <= 1.0,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: DetectionSample,
    pub objects: Vec<SynthObject>,
}

/// Amplitude of the per-pixel uniform noise on both modalities.
pub const NOISE: f32 = 0.03;
/// Upper bound of the cross-modality leakage, as a fraction of the object's contrast.
pub const MAX_LEAKAGE: f32 = 0.1;

fn check_geometry(image_size: usize, n_classes: usize) -> Result<()> {
    if image_size == 0 || !image_size.is_multiple_of(32) {
        return Err(Error::Config(format!(
            "image size {image_size} is not a positive multiple of 32"
        )));
    }
    if n_classes == 0 || n_classes > MAX_CLASSES {
        return Err(Error::Config(format!(
            "n_classes must be in 1..={MAX_CLASSES}, got {n_classes}"
        )));
    }
    Ok(())
}

fn place_objects<R: Rng>(rng: &mut R, s: usize, n_classes: usize) -> Vec<SynthObject> {
    let count = rng.gen_range(1..=3);
    let (lo, hi) = (((s as f32) * 0.12).round() as usize, ((s as f32) * 0.4).round() as usize);
    let mut objects: Vec<SynthObject> = Vec::new();
    for _ in 0..count {
        for _attempt in 0..50 {
            let class = rng.gen_range(0..n_classes);
            let shape = ShapeKind::of_class(class);
            let w = rng.gen_range(lo..=hi);
            let h = if shape == ShapeKind::Rect {
                rng.gen_range(lo..=hi)
            } else {
                w
            };
            let x0 = rng.gen_range(0..=s - w);
            let y0 = rng.gen_range(0..=s - h);
            let gt = GtBox {
                x_min: x0 as f32,
                y_min: y0 as f32,
                x_max: (x0 + w) as f32,
                y_max: (y0 + h) as f32,
                class,
            };
            let margin = 2.0;
            let clear = objects.iter().all(|o| {
                gt.x_min >= o.gt.x_max + margin
                    || o.gt.x_min >= gt.x_max + margin
                    || gt.y_min >= o.gt.y_max + margin
                    || o.gt.y_min >= gt.y_max + margin
            });
            if clear {
                let modality = if rng.gen_bool(0.5) {
                    Modality::Visible
                } else {
                    Modality::Thermal
                };
                objects.push(SynthObject { gt, shape, modality });
                break;
            }
        }
    }
    objects
}

/// One deterministic scene for `(seed, id)`.
pub fn synth_scene(seed: u64, id: usize, image_size: usize, n_classes: usize) -> Result<Scene> {
    check_geometry(image_size, n_classes)?;
    let s = image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let objects = place_objects(&mut rng, s, n_classes);

    let bg_rgb: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.6));
    let bg_ir: f32 = rng.gen_range(0.2..0.4);
    let mut rgb = Tensor::from_fn(Shape::new(1, 3, s, s), |_, c, _, _| bg_rgb[c]);
    let mut ir = Tensor::full(Shape::new(1, 1, s, s), bg_ir);

    for o in &objects {
        let leak = rng.gen_range(0.0..=MAX_LEAKAGE);
        // per-channel RGB offset and IR offset of the painted pixels
        let (d_rgb, d_ir): ([f32; 3], f32) = match o.modality {
            Modality::Visible => {
                let d: [f32; 3] = std::array::from_fn(|c| {
                    let mag = rng.gen_range(0.3..0.4);
                    if bg_rgb[c] + mag <= 1.0 && rng.gen_bool(0.5) {
                        mag
                    } else {
                        -mag.min(bg_rgb[c])
                    }
                });
                let contrast = d.iter().map(|v| v.abs()).sum::<f32>() / 3.0;
                (d, leak * contrast)
            }
            Modality::Thermal => {
                let d = rng.gen_range(0.35..0.55);
                ([leak * d; 3], d)
            }
        };
        let g = &o.gt;
        for y in g.y_min as usize..g.y_max as usize {
            for x in g.x_min as usize..g.x_max as usize {
                if o.covers(x, y) {
                    for (c, d) in d_rgb.iter().enumerate() {
                        rgb.set(0, c, y, x, bg_rgb[c] + d);
                    }
                    ir.set(0, 0, y, x, bg_ir + d_ir);
                }
            }
        }
    }
    for v in rgb.data_mut().iter_mut().chain(ir.data_mut().iter_mut()) {
        *v += rng.gen_range(-NOISE..=NOISE);
    }
    let boxes = objects.iter().map(|o| o.gt).collect();
    Ok(Scene {
        sample: DetectionSample { id, rgb, ir, boxes },
        objects,
    })
}

/// `n_samples` scenes with ids `0..n_samples`; deterministic in `seed`.
pub fn synth_dataset(seed: u64, n_samples: usize, image_size: usize, n_classes: usize) -> Result<Vec<DetectionSample>> {
    (0..n_samples)
        .map(|id| synth_scene(seed, id, image_size, n_classes).map(|s| s.sample))
        .collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, samples: &[DetectionSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    for s in samples {
        write_tns(dir.join(format!("rgb_{}.tns", s.id)), &s.rgb)?;
        write_tns(dir.join(format!("ir_{}.tns", s.id)), &s.ir)?;
        let mut text = String::new();
        for b in &s.boxes {
            writeln!(text, "{} {} {} {} {}", b.class, b.x_min, b.y_min, b.x_max, b.y_max).unwrap();
        }
        let path = dir.join(format!("boxes_{}.txt", s.id));
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
    }
    Ok(())
}

fn parse_boxes(path: &Path, text: &str, size: usize, n_classes: usize) -> Result<Vec<GtBox>> {
    let bad = |line: usize, msg: &str| Error::Format {
        path: path.into(),
        msg: format!("line {line}: {msg}"),
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected `class x_min y_min x_max y_max`"));
        }
        let class: usize = f[0].parse().map_err(|_| bad(i + 1, "bad class id"))?;
        let v: Vec<f32> = f[1..]
            .iter()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(i + 1, "bad coordinate"))?;
        let b = GtBox {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
            class,
        };
        let s = size as f32;
        if !(0.0 <= b.x_min && b.x_min < b.x_max && b.x_max <= s && 0.0 <= b.y_min && b.y_min < b.y_max && b.y_max <= s)
        {
            return Err(bad(i + 1, "box outside the image or empty"));
        }
        if class >= n_classes {
            return Err(bad(i + 1, "class id out of range"));
        }
        out.push(b);
    }
    Ok(out)
}

/// Reads every sample in `dir`, ordered by id.
pub fn load_dataset(dir: impl AsRef<Path>, n_classes: usize) -> Result<Vec<DetectionSample>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_prefix("boxes_").and_then(|r| r.strip_suffix(".txt")) {
            if let Ok(id) = id.parse::<usize>() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let rgb = read_tns(dir.join(format!("rgb_{id}.tns")))?;
        let ir = read_tns(dir.join(format!("ir_{id}.tns")))?;
        let s = rgb.shape().height();
        if rgb.shape() != Shape::new(1, 3, s, s) || ir.shape() != Shape::new(1, 1, s, s) {
            return Err(Error::Format {
                path: dir.join(format!("rgb_{id}.tns")),
                msg: format!("expected 1x3xSxS and 1x1xSxS, got {:?} and {:?}", rgb.shape(), ir.shape()),
            });
        }
        let path = dir.join(format!("boxes_{id}.txt"));
        let text = fs::read_to_string(&path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let boxes = parse_boxes(&path, &text, s, n_classes)?;
        out.push(DetectionSample { id, rgb, ir, boxes });
    }
    Ok(out)
}
