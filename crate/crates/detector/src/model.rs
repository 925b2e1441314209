//! Dual-stream detector: one convolutional backbone per modality, a fusion
//! block at each configured stage, a top-down neck over the fused maps and an
//! anchor-free per-cell head at every fused level.
//!
//! Stage `i` (1..=5) is a stride-2 3x3 convolution followed by SiLU, so its
//! output has stride `2^i`. The two streams never read each other; fusion
//! outputs feed only the neck.

use fmamba_core::fusion::{fmb, FmbConfig, FmbParams, LinearParams};
use fmamba_core::ops;
use fmamba_core::{Binding, Error, ParamId, ParamStore, Result, Scalar, Shape, Tape, Tensor, Var};
use rand::Rng;

use crate::boxes::BoxPrediction;

pub const STAGES: usize = 5;
pub const BACKBONE_WIDTHS: [usize; STAGES] = [4, 8, 16, 32, 64];
pub const NECK_CHANNELS: usize = 32;
/// Initial objectness bias, `sigmoid(-4) ≈ 0.018`, so that background cells start near zero.
pub const OBJECTNESS_PRIOR: f64 = -4.0;
/// Channels `0..4` of a head output are box distances, `4` is objectness, the rest class logits.
pub const BOX_CHANNELS: usize = 4;
pub const OBJ_CHANNEL: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub fmb: FmbConfig,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.fmb.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << STAGES) {
            return Err(Error::Config(format!(
                "image size {} is not a positive multiple of {}",
                self.image_size,
                1 << STAGES
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        Ok(())
    }

    /// Fused stages in ascending order; these are also the detection levels.
    pub fn levels(&self) -> Vec<usize> {
        let mut s = self.fmb.stages.clone();
        s.sort_unstable();
        s
    }

    pub fn head_channels(&self) -> usize {
        BOX_CHANNELS + 1 + self.n_classes
    }
}

pub fn stride(stage: usize) -> usize {
    1 << stage
}

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    fn new<R: Rng>(store: &mut ParamStore<f32>, prefix: &str, c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Self {
        // He-uniform for the SiLU that follows
        let bound = (6.0 / (c_in * k * k) as f64).sqrt();
        let kernel = Tensor::from_fn(Shape::new(c_out, c_in, k, k), |_, _, _, _| rng.gen_range(-bound..=bound) as f32);
        ConvParams {
            kernel: store.add(format!("{prefix}.kernel"), kernel),
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(Shape::new(1, c_out, 1, 1))),
        }
    }

    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, bind[self.kernel], Some(bind[self.bias]), stride)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<ConvParams>,
}

impl Backbone {
    fn new<R: Rng>(store: &mut ParamStore<f32>, prefix: &str, in_channels: usize, rng: &mut R) -> Self {
        let mut c_in = in_channels;
        let stages = BACKBONE_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = ConvParams::new(store, &format!("{prefix}.stage{}", i + 1), c_in, c, 3, rng);
                c_in = c;
                p
            })
            .collect();
        Backbone { stages }
    }

    /// Stage outputs `1..=5` (index 0 is stage 1).
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(STAGES);
        for st in &self.stages {
            let y = st.forward(tape, bind, x, 2)?;
            x = tape.silu(y);
            out.push(x);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub conv: ConvParams,
    pub out: LinearParams,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub rgb: Backbone,
    pub ir: Backbone,
    /// `(stage, params)` in ascending stage order.
    pub fusion: Vec<(usize, FmbParams)>,
    pub lateral: Vec<LinearParams>,
    pub heads: Vec<HeadParams>,
}

/// Per-level tape outputs of [`Detector::forward`].
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    pub stage: usize,
    /// Fused map `P_i`.
    pub fused: Var,
    /// Raw head map `(B, 5 + K, H_i, W_i)`.
    pub raw: Var,
}

impl Detector {
    /// Registers all parameters in `store`.
    pub fn new<R: Rng>(store: &mut ParamStore<f32>, cfg: DetectorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let rgb = Backbone::new(store, "rgb", 3, rng);
        let ir = Backbone::new(store, "ir", 1, rng);
        let levels = cfg.levels();
        let mut fusion = Vec::new();
        for &s in &levels {
            let c = BACKBONE_WIDTHS[s - 1];
            fusion.push((s, FmbParams::new(store, &format!("fmb{s}"), c, &cfg.fmb, rng)?));
        }
        let mut lateral = Vec::new();
        let mut heads = Vec::new();
        for &s in &levels {
            let c = BACKBONE_WIDTHS[s - 1];
            lateral.push(LinearParams::new(store, &format!("neck{s}.lateral"), c, NECK_CHANNELS, true, 1.0, rng));
            let conv = ConvParams::new(store, &format!("head{s}.conv"), NECK_CHANNELS, NECK_CHANNELS, 3, rng);
            let out = LinearParams::new(store, &format!("head{s}.out"), NECK_CHANNELS, cfg.head_channels(), true, 0.1, rng);
            let bias = out.bias.expect("head has a bias");
            store.get_mut(bias).data_mut()[OBJ_CHANNEL] = OBJECTNESS_PRIOR as f32;
            heads.push(HeadParams { conv, out });
        }
        Ok(Detector {
            cfg,
            rgb,
            ir,
            fusion,
            lateral,
            heads,
        })
    }

    /// `rgb`: `(B, 3, S, S)`, `ir`: `(B, 1, S, S)`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bind: &Binding, rgb: Var, ir: Var) -> Result<Vec<LevelOutput>> {
        let s = self.cfg.image_size;
        let (rs, is) = (tape.shape(rgb), tape.shape(ir));
        if rs.channels() != 3 || is.channels() != 1 || rs.with_channels(1) != is || rs.height() != s || rs.width() != s {
            return Err(Error::Dimension(format!(
                "expected (B,3,{s},{s}) and (B,1,{s},{s}) images, got {rs:?} and {is:?}"
            )));
        }
        let f_r = self.rgb.forward(tape, bind, rgb)?;
        let f_ir = self.ir.forward(tape, bind, ir)?;
        let mut fused = Vec::with_capacity(self.fusion.len());
        for (stage, p) in &self.fusion {
            let out = fmb(tape, bind, p, &self.cfg.fmb, f_r[stage - 1], f_ir[stage - 1])?;
            fused.push(out.fused);
        }
        // top-down: coarsest level first, each finer level adds the upsampled coarser one
        let n = fused.len();
        let mut neck: Vec<Option<Var>> = vec![None; n];
        for j in (0..n).rev() {
            let mut x = self.lateral[j].forward(tape, bind, fused[j])?;
            if j + 1 < n {
                let coarse = neck[j + 1].expect("filled");
                let factor = 1 << (self.fusion[j + 1].0 - self.fusion[j].0);
                let up = upsample(tape, coarse, factor)?;
                x = tape.add(x, up)?;
            }
            neck[j] = Some(tape.silu(x));
        }
        let mut out = Vec::with_capacity(n);
        for j in 0..n {
            let h = &self.heads[j];
            let x = h.conv.forward(tape, bind, neck[j].expect("filled"), 1)?;
            let x = tape.silu(x);
            let raw = h.out.forward(tape, bind, x)?;
            out.push(LevelOutput {
                stage: self.fusion[j].0,
                fused: fused[j],
                raw,
            });
        }
        Ok(out)
    }

    /// Every parameter id of the fusion blocks, per stage.
    pub fn fusion_ids(&self) -> Vec<(usize, Vec<ParamId>)> {
        self.fusion.iter().map(|(s, p)| (*s, p.ids())).collect()
    }

    /// Raw head maps for a single sample, evaluated without gradients.
    pub fn infer(&self, store: &ParamStore<f32>, rgb: &Tensor<f32>, ir: &Tensor<f32>) -> Result<Vec<(usize, Tensor<f32>, Tensor<f32>)>> {
        let mut tape = Tape::new();
        let bind = store.bind_constants(&mut tape);
        let r = tape.constant(rgb.clone());
        let i = tape.constant(ir.clone());
        let levels = self.forward(&mut tape, &bind, r, i)?;
        Ok(levels
            .iter()
            .map(|l| (l.stage, tape.value(l.fused).clone(), tape.value(l.raw).clone()))
            .collect())
    }

    /// Decoded per-cell predictions (before NMS) for a single sample.
    pub fn predict(&self, store: &ParamStore<f32>, rgb: &Tensor<f32>, ir: &Tensor<f32>) -> Result<Vec<BoxPrediction>> {
        let mut preds = Vec::new();
        for (stage, _, raw) in self.infer(store, rgb, ir)? {
            preds.extend(decode_level(&raw, 0, stride(stage), self.cfg.image_size));
        }
        Ok(preds)
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample<S: Scalar>(tape: &mut Tape<S>, x: Var, factor: usize) -> Result<Var> {
    let Shape([_, _, h, w]) = tape.shape(x);
    let (oh, ow) = (h * factor, w * factor);
    let index: Vec<usize> = (0..oh * ow).map(|p| (p / ow / factor) * w + (p % ow) / factor).collect();
    tape.gather_spatial(x, index.into(), oh, ow)
}

/// Cell centre in pixels.
pub fn cell_center(cy: usize, cx: usize, stride: usize) -> (f64, f64) {
    ((cx as f64 + 0.5) * stride as f64, (cy as f64 + 0.5) * stride as f64)
}

/// Box distances from raw outputs: `stride * softplus(raw)` for left, top, right, bottom.
pub fn decode_distances(raw: [f64; 4], stride: usize) -> [f64; 4] {
    raw.map(|r| stride as f64 * r.softplus())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Decodes every cell of sample `b` in one raw head map, clipping boxes to the image.
pub fn decode_level(raw: &Tensor<f32>, b: usize, stride: usize, image_size: usize) -> Vec<BoxPrediction> {
    let Shape([_, ch, h, w]) = raw.shape();
    let s = image_size as f64;
    let mut out = Vec::with_capacity(h * w);
    for cy in 0..h {
        for cx in 0..w {
            let at = |c: usize| raw.at(b, c, cy, cx) as f64;
            let d = decode_distances([at(0), at(1), at(2), at(3)], stride);
            let (px, py) = cell_center(cy, cx, stride);
            let rect = [
                (px - d[0]).clamp(0.0, s) as f32,
                (py - d[1]).clamp(0.0, s) as f32,
                (px + d[2]).clamp(0.0, s) as f32,
                (py + d[3]).clamp(0.0, s) as f32,
            ];
            let logits: Vec<f64> = (OBJ_CHANNEL + 1..ch).map(at).collect();
            out.push(BoxPrediction {
                rect,
                class_scores: softmax(&logits).into_iter().map(|p| p as f32).collect(),
                confidence: at(OBJ_CHANNEL).sigmoid() as f32,
            });
        }
    }
    out
}

/// Stacks per-sample images into one batch tensor.
pub fn stack(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Usage("empty batch".into()))?.shape();
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for t in images {
        if t.shape() != first {
            return Err(Error::Dimension(format!("batch mixes {:?} and {:?}", first, t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(images.len(), first.channels(), first.height(), first.width()), data)
}

/// Side length of the stage `stage` feature map.
pub fn level_size(image_size: usize, stage: usize) -> usize {
    ops::conv_out_len(image_size, stride(stage))
}
