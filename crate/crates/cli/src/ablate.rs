//! Named ablation matrices: each row is a configuration trained and evaluated
//! under the same protocol.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use fmamba_core::fusion::DualAttention;
use fmamba_core::{Error, Result};
use fmamba_detector::dataset::{load_dataset, synth_dataset, DetectionSample};
use fmamba_detector::eval::{evaluate, EvalReport};
use fmamba_detector::train::train;

use crate::config::CliConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Full block, without channel swapping, without dual fusion, without both.
    Modules,
    /// Fused stage sets `{2,3,5}`, `{2,4,5}`, `{3,4,5}`.
    Position,
    /// Dual-fusion depth 2, 4, 8, 16.
    DssfCount,
    /// Both cross terms, without the RGB-branch term, without the IR-branch term, without both.
    DualAttention,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Modules, Preset::Position, Preset::DssfCount, Preset::DualAttention];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Modules => "modules",
            Preset::Position => "position",
            Preset::DssfCount => "dssf_count",
            Preset::DualAttention => "dual_attention",
        }
    }

    /// Row labels and configurations derived from `base`.
    pub fn rows(self, base: &CliConfig) -> Vec<(String, CliConfig)> {
        let with = |f: &dyn Fn(&mut CliConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Preset::Modules => vec![
                ("full".into(), base.clone()),
                ("remove_sscs".into(), with(&|c| c.train.fmb.use_sscs = false)),
                ("remove_dssf".into(), with(&|c| c.train.fmb.use_dssf = false)),
                (
                    "remove_sscs_dssf".into(),
                    with(&|c| {
                        c.train.fmb.use_sscs = false;
                        c.train.fmb.use_dssf = false;
                    }),
                ),
            ],
            Preset::Position => [[2, 3, 5], [2, 4, 5], [3, 4, 5]]
                .iter()
                .map(|s| {
                    let label = format!("P{}_P{}_P{}", s[0], s[1], s[2]);
                    (label, with(&|c| c.train.fmb.stages = s.to_vec()))
                })
                .collect(),
            Preset::DssfCount => [2, 4, 8, 16]
                .iter()
                .map(|&n| (format!("n_dssf_{n}"), with(&|c| c.train.fmb.n_dssf = n)))
                .collect(),
            Preset::DualAttention => [
                ("full", DualAttention::FULL),
                (
                    "remove_rgb_branch_cross",
                    DualAttention {
                        rgb_cross: false,
                        ir_cross: true,
                    },
                ),
                (
                    "remove_ir_branch_cross",
                    DualAttention {
                        rgb_cross: true,
                        ir_cross: false,
                    },
                ),
                ("remove_both", DualAttention::NONE),
            ]
            .into_iter()
            .map(|(label, dual)| (label.to_string(), with(&|c| c.train.fmb.dual = dual)))
            .collect(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::Usage(format!("unknown preset `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

/// Training and test splits: loaded from the configured directories, else synthesised from the seed.
pub fn datasets(cfg: &CliConfig) -> Result<(Vec<DetectionSample>, Vec<DetectionSample>)> {
    let t = &cfg.train;
    let train_set = match &cfg.train_dir {
        Some(d) => load_dataset(d, t.n_classes)?,
        None => synth_dataset(t.seed, cfg.n_train, t.image_size, t.n_classes)?,
    };
    let test_set = test_split(cfg)?;
    Ok((train_set, test_set))
}

pub fn test_split(cfg: &CliConfig) -> Result<Vec<DetectionSample>> {
    let t = &cfg.train;
    match &cfg.test_dir {
        Some(d) => load_dataset(d, t.n_classes),
        None => synth_dataset(cfg.test_seed(), cfg.n_test, t.image_size, t.n_classes),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    pub params: usize,
    /// Mean inference and decoding time per test image.
    pub time_ms: f64,
    /// Mean loss of the last epoch.
    pub final_loss: f64,
}

/// Trains `cfg` on `train_set` and evaluates on `test_set`.
pub fn run_row(label: &str, cfg: &CliConfig, train_set: &[DetectionSample], test_set: &[DetectionSample]) -> Result<AblationRow> {
    let trained = train(&cfg.train, train_set, |_| {})?;
    let t = Instant::now();
    let report = evaluate(&trained.detector, &trained.store, test_set)?;
    let time_ms = t.elapsed().as_secs_f64() * 1e3 / test_set.len() as f64;
    Ok(AblationRow {
        label: label.to_string(),
        report,
        params: trained.store.numel(),
        time_ms,
        final_loss: trained.epoch_means().last().copied().unwrap_or(f64::NAN),
    })
}

/// Every row of `preset` on the splits of `base`; `on_row` sees each row as it completes.
pub fn run_preset(preset: Preset, base: &CliConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let (train_set, test_set) = datasets(base)?;
    let mut rows = Vec::new();
    for (label, cfg) in preset.rows(base) {
        let row = run_row(&label, &cfg, &train_set, &test_set)?;
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub const TABLE_HEADER: &str = "row,map50,map75,map50_95,params,time_ms,final_loss";

pub fn table_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{},{:.3},{:.4}",
            r.label, r.report.map50, r.report.map75, r.report.map50_95, r.params, r.time_ms, r.final_loss
        )
        .unwrap();
    }
    out
}
