//! Dual-stream RGB/thermal detector built on the fusion blocks of `fmamba-core`:
//! synthetic paired dataset, model, loss, training, evaluation and heatmaps.

pub mod boxes;
pub mod dataset;
pub mod eval;
pub mod heatmap;
pub mod loss;
pub mod model;
pub mod train;

pub use boxes::{BoxPrediction, GtBox};
pub use dataset::DetectionSample;
pub use eval::EvalReport;
pub use model::{Detector, DetectorConfig};
pub use train::{TrainConfig, Trained};
