//! Argument parsing and subcommand dispatch for the `fmamba` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fmamba_core::{Error, Result};
use fmamba_detector::heatmap::{sample_heatmap, write_pgm};
use fmamba_detector::train::{epoch_means, load_trained, train, write_loss_csv};
use fmamba_detector::eval::evaluate;

use crate::ablate::{datasets, run_preset, table_csv, test_split, Preset};
use crate::bench::{self, parse_sizes, scaling_verdict, DEFAULT_SIZES, REPS};
use crate::config::CliConfig;
use crate::selftest::run_all;

#[derive(Debug, Parser)]
#[command(name = "fmamba", version, about = "RGB-thermal fusion detector: train, evaluate, inspect and benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// `key=value` configuration file; absent keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output of the run.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ablation preset: modules, position, dssf_count or dual_attention.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Comma-separated sequence lengths for `bench` and `selftest`.
    #[arg(long, global = true)]
    pub sizes: Option<String>,
}

#[derive(Debug, Subcommand, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Train on the configured split and write a checkpoint and loss log.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval,
    /// Write the fused-feature heatmap of one test image as PGM.
    Heatmap,
    /// Time the scan kernels against quadratic attention.
    Bench,
    /// Run the oracle, gradient, invariant and scaling suites.
    Selftest,
    /// Train and evaluate every row of an ablation preset.
    Ablate,
}

const CHECKPOINT_DIR: &str = "checkpoint";
const CONFIG_FILE: &str = "config.txt";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    writeln!(out, "{text}").map_err(io_err(Path::new("<stdout>")))
}

impl Cli {
    /// Configuration from `--config` (or defaults) with `--seed` applied.
    pub fn resolve_config(&self) -> Result<CliConfig> {
        let mut cfg = match &self.config {
            Some(p) => CliConfig::load(p)?,
            None => CliConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    fn checkpoint_dir(&self, cfg: &CliConfig) -> PathBuf {
        cfg.checkpoint.clone().unwrap_or_else(|| self.out.join(CHECKPOINT_DIR))
    }

    /// For `eval` and `heatmap` without `--config`, the configuration saved next to the checkpoint.
    fn model_config(&self) -> Result<CliConfig> {
        let cfg = self.resolve_config()?;
        if self.config.is_some() {
            return Ok(cfg);
        }
        let saved = self.checkpoint_dir(&cfg).join(CONFIG_FILE);
        if !saved.exists() {
            return Ok(cfg);
        }
        let mut c = CliConfig::load(saved)?;
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        Ok(c)
    }

    fn sizes(&self) -> Result<Vec<usize>> {
        match &self.sizes {
            Some(s) => parse_sizes(s),
            None => Ok(DEFAULT_SIZES.to_vec()),
        }
    }
}

/// Executes the parsed command, printing progress to `out`.
/// Returns whether every step succeeded.
pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<bool> {
    fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    match cli.command {
        Command::Train => {
            let cfg = cli.resolve_config()?;
            let echo = cfg.echo();
            say(out, &echo)?;
            write_file(&cli.out.join(CONFIG_FILE), &echo)?;
            let (train_set, _) = datasets(&cfg)?;
            let trained = train(&cfg.train, &train_set, |_| {})?;
            for (e, m) in epoch_means(&trained.log).iter().enumerate() {
                say(out, &format!("epoch {} mean loss {m:.6}", e + 1))?;
            }
            write_loss_csv(cli.out.join("loss.csv"), &trained.log)?;
            let ckpt = cli.checkpoint_dir(&cfg);
            trained.store.save_checkpoint(&ckpt)?;
            write_file(&ckpt.join(CONFIG_FILE), &echo)?;
            say(out, &format!("checkpoint written to {}", ckpt.display()))?;
            Ok(true)
        }
        Command::Eval => {
            let cfg = cli.model_config()?;
            say(out, &cfg.echo())?;
            let (det, store) = load_trained(&cfg.train.detector(), cli.checkpoint_dir(&cfg))?;
            let report = evaluate(&det, &store, &test_split(&cfg)?)?;
            let mut text = format!(
                "map50={:.6}\nmap75={:.6}\nmap50_95={:.6}\n",
                report.map50, report.map75, report.map50_95
            );
            for (c, ap) in report.ap50.iter().enumerate() {
                if let Some(ap) = ap {
                    text.push_str(&format!("ap50_class{c}={ap:.6}\n"));
                }
            }
            say(out, text.trim_end())?;
            write_file(&cli.out.join("metrics.txt"), &text)?;
            Ok(true)
        }
        Command::Heatmap => {
            let cfg = cli.model_config()?;
            let (det, store) = load_trained(&cfg.train.detector(), cli.checkpoint_dir(&cfg))?;
            let test_set = test_split(&cfg)?;
            let sample = test_set.get(cfg.heatmap_sample).ok_or_else(|| {
                Error::Usage(format!(
                    "heatmap_sample {} is outside the {}-image test split",
                    cfg.heatmap_sample,
                    test_set.len()
                ))
            })?;
            let (h, w, map) = sample_heatmap(&det, &store, sample, cfg.heatmap_stage)?;
            let path = cli.out.join(format!("heatmap_p{}_{}.pgm", cfg.heatmap_stage, sample.id));
            write_pgm(&path, h, w, &map)?;
            say(out, &format!("{w}x{h} heatmap written to {}", path.display()))?;
            Ok(true)
        }
        Command::Bench => {
            let cfg = cli.resolve_config()?;
            let rows = bench::run(&cli.sizes()?, REPS, cfg.train.seed)?;
            let csv = bench::csv(&rows);
            write_file(&cli.out.join("bench.csv"), &csv)?;
            say(out, csv.trim_end())?;
            say(out, &scaling_verdict(&rows).summary())?;
            Ok(true)
        }
        Command::Selftest => {
            let cfg = cli.resolve_config()?;
            let mut lines = Vec::new();
            let results = run_all(&cli.sizes()?, cfg.train.seed, |r| {
                let line = r.line();
                let _ = writeln!(out, "{line}");
                lines.push(line);
            })?;
            let passed = results.iter().all(|r| r.passed);
            let failed = results.iter().filter(|r| !r.passed).count();
            let verdict = format!("{} of {} suites passed", results.len() - failed, results.len());
            say(out, &verdict)?;
            lines.push(verdict);
            write_file(&cli.out.join("selftest.txt"), &(lines.join("\n") + "\n"))?;
            Ok(passed)
        }
        Command::Ablate => {
            let name = cli
                .preset
                .as_deref()
                .ok_or_else(|| Error::Usage("ablate needs --preset".into()))?;
            let preset: Preset = name.parse()?;
            let cfg = cli.resolve_config()?;
            say(out, &cfg.echo())?;
            let rows = run_preset(preset, &cfg, |r| {
                let _ = writeln!(
                    out,
                    "{}: map50 {:.4} map {:.4}",
                    r.label, r.report.map50, r.report.map50_95
                );
            })?;
            let table = table_csv(&rows);
            write_file(&cli.out.join(format!("ablate_{}.csv", preset.name())), &table)?;
            say(out, table.trim_end())?;
            Ok(true)
        }
    }
}
