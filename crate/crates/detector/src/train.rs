//! Minibatch SGD with momentum and weight decay over the detection loss.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fmamba_core::fusion::FmbConfig;
use fmamba_core::{Error, ParamStore, Result, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::DetectionSample;
use crate::loss::{detection_loss, LossParts};
use crate::model::{stack, Detector, DetectorConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lambda_coord: f64,
    /// Global gradient-norm ceiling applied before each update; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub image_size: usize,
    pub n_classes: usize,
    pub fmb: FmbConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            lambda_coord: 7.5,
            grad_clip: 10.0,
            seed: 0,
            image_size: 64,
            n_classes: 2,
            fmb: FmbConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn detector(&self) -> DetectorConfig {
        DetectorConfig {
            image_size: self.image_size,
            n_classes: self.n_classes,
            fmb: self.fmb.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector().validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        // a zero learning rate is allowed so that a run can be checked to leave weights alone
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) || !finite_nonneg(self.grad_clip) {
            return Err(Error::Config(
                "learning_rate, weight_decay and grad_clip must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} is outside [0, 1)", self.momentum)));
        }
        if !(self.lambda_coord > 0.0 && self.lambda_coord.is_finite()) {
            return Err(Error::Config(format!("lambda_coord must be positive, got {}", self.lambda_coord)));
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v ← μ·v + g + λ_wd·w`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<f32>>,
}

impl Sgd {
    pub fn new(store: &ParamStore<f32>, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity: store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Applies one update; `grads` are in store order.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Usage(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        let (lr, mu, wd) = (self.learning_rate as f32, self.momentum as f32, self.weight_decay as f32);
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let w = store.get_mut(id);
            if g.shape() != w.shape() {
                return Err(Error::Dimension(format!("gradient {:?} for parameter {:?}", g.shape(), w.shape())));
            }
            for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Loss and parameter gradients (store order) for one batch.
pub fn loss_and_grads(
    det: &Detector,
    store: &ParamStore<f32>,
    batch: &[&DetectionSample],
    lambda_coord: f64,
) -> Result<(LossParts, Vec<Tensor<f32>>)> {
    let rgb = stack(&batch.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let ir = stack(&batch.iter().map(|s| &s.ir).collect::<Vec<_>>())?;
    let targets: Vec<_> = batch.iter().map(|s| s.boxes.clone()).collect();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let r = tape.constant(rgb);
    let i = tape.constant(ir);
    let levels = det.forward(&mut tape, &bind, r, i)?;
    let raws: Vec<&Tensor<f32>> = levels.iter().map(|l| tape.value(l.raw)).collect();
    let stages: Vec<usize> = levels.iter().map(|l| l.stage).collect();
    let (parts, raw_grads) = detection_loss(&raws, &stages, &targets, lambda_coord)?;
    let inputs = levels.iter().map(|l| l.raw).zip(raw_grads).collect();
    let root = tape.precomputed_scalar(parts.total as f32, inputs)?;
    let grads = tape.backward(root)?;
    Ok((parts, bind.collect(&grads)))
}

/// Scales `grads` so that their joint L2 norm is at most `max_norm`. Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.norm_sq() as f64).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// 1-based.
    pub epoch: usize,
    /// 1-based, counted across epochs.
    pub step: usize,
    pub loss: LossParts,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

pub struct Trained {
    pub detector: Detector,
    pub store: ParamStore<f32>,
    pub log: Vec<StepLog>,
}

impl Trained {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[StepLog]) -> Vec<f64> {
    let epochs = log.iter().map(|s| s.epoch).max().unwrap_or(0);
    (1..=epochs)
        .map(|e| {
            let v: Vec<f64> = log.iter().filter(|s| s.epoch == e).map(|s| s.loss.total).collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect()
}

/// Builds a fresh model from `cfg.seed` and trains it on `data`. `on_step` sees each step as it completes.
pub fn train(cfg: &TrainConfig, data: &[DetectionSample], mut on_step: impl FnMut(&StepLog)) -> Result<Trained> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let detector = Detector::new(&mut store, cfg.detector(), &mut rng)?;
    let mut opt = Sgd::new(&store, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DetectionSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = loss_and_grads(&detector, &store, &batch, cfg.lambda_coord)?;
            step += 1;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence(format!(
                    "epoch {epoch} step {step}: loss {} (coord {}, conf {}, class {})",
                    loss.total, loss.coord, loss.conf, loss.class
                )));
            }
            let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(&mut store, &grads)?;
            let entry = StepLog {
                epoch,
                step,
                loss,
                grad_norm,
            };
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok(Trained { detector, store, log })
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,loss,coord,conf,class";

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for s in log {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            s.epoch, s.step, s.loss.total, s.loss.coord, s.loss.conf, s.loss.class
        )
        .unwrap();
    }
    out
}

pub fn write_loss_csv(path: impl AsRef<Path>, log: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, loss_csv(log)).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Rebuilds the model for `cfg` and loads weights from a checkpoint directory.
pub fn load_trained(cfg: &DetectorConfig, dir: impl AsRef<Path>) -> Result<(Detector, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    // initial values are overwritten by the checkpoint
    let detector = Detector::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    store.load_from(&ParamStore::load_checkpoint(dir)?)?;
    Ok((detector, store))
}
