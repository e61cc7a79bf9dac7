//! `train` and `eval` subcommands.

use std::path::{Path, PathBuf};

use stformer_core::data::{load_bundle, make_windows, DatasetBundle, Normalizer};
use stformer_core::model::{load_checkpoint, load_checkpoint_for, save_checkpoint};
use stformer_core::train::{evaluate, train, MetricReport, TrainOutcome};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::write_csv;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const STEP_LOG_FILE: &str = "step_losses.csv";
pub const METRICS_FILE: &str = "metrics.txt";

#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub metrics: PathBuf,
    pub report: MetricReport,
    pub outcome: TrainOutcome,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StepLoss {
    step: usize,
    loss: f64,
}

fn load_data(cfg: &RunConfig) -> Result<DatasetBundle> {
    let bundle = load_bundle(&cfg.data_path)?;
    if bundle.flow.nodes() != cfg.model.nodes {
        return Err(CliError::Config {
            path: cfg.data_path.clone(),
            msg: format!(
                "model.nodes is {} but the bundle has {} nodes",
                cfg.model.nodes,
                bundle.flow.nodes()
            ),
        });
    }
    Ok(bundle)
}

/// Trains, scores the best-validation parameters on the test split and
/// writes the checkpoint, per-epoch and per-step loss logs and the metric
/// report to `out` (or the configured output directory).
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<TrainArtifacts> {
    let out = out.unwrap_or(&cfg.out_dir);
    let bundle = load_data(cfg)?;
    let opts = cfg.train_options();
    let outcome = train(&cfg.model, &bundle, &opts)?;
    let splits = make_windows(
        &bundle.flow,
        cfg.model.input_steps,
        cfg.model.output_steps,
        opts.ratios(),
    )?;
    let report = evaluate(
        &outcome.params,
        &cfg.model,
        &bundle,
        &outcome.normalizer,
        &splits.test.starts,
        cfg.seed,
    )?;

    std::fs::create_dir_all(out)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &cfg.model, &outcome.params)?;
    let loss_log = out.join(LOSS_LOG_FILE);
    write_csv(&loss_log, &outcome.trace)?;
    let steps: Vec<StepLoss> = outcome
        .step_losses
        .iter()
        .enumerate()
        .map(|(i, &loss)| StepLoss { step: i + 1, loss })
        .collect();
    write_csv(&out.join(STEP_LOG_FILE), &steps)?;
    let metrics = out.join(METRICS_FILE);
    std::fs::write(&metrics, report.to_text())?;
    Ok(TrainArtifacts {
        checkpoint,
        loss_log,
        metrics,
        report,
        outcome,
    })
}

/// Scores a checkpoint on the test split of the configured bundle. The
/// normaliser is refitted on the training split, which reproduces the one
/// used during training. Nothing is written unless evaluation succeeds.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, out: Option<&Path>) -> Result<MetricReport> {
    let out = out.unwrap_or(&cfg.out_dir);
    let (saved, _) = load_checkpoint(checkpoint)?;
    let bundle = load_bundle(&cfg.data_path)?;
    if saved.nodes != bundle.flow.nodes() {
        return Err(CliError::Incompatible(format!(
            "checkpoint adaptive embedding covers {} nodes, bundle has {}",
            saved.nodes,
            bundle.flow.nodes()
        )));
    }
    let params = load_checkpoint_for(checkpoint, &cfg.model).map_err(|e| CliError::Incompatible(e.to_string()))?;
    let model = &cfg.model;
    let splits = make_windows(&bundle.flow, model.input_steps, model.output_steps, cfg.train.ratios())?;
    let norm = Normalizer::fit(&bundle.flow, splits.train.range.clone())?;
    let report = evaluate(&params, model, &bundle, &norm, &splits.test.starts, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(METRICS_FILE), report.to_text())?;
    Ok(report)
}
