//! A complete training run: data, partition, epochs, evaluation, logs and
//! checkpoints under one output directory.
//!
//! Output layout:
//! `config.json` (the resolved experiment), `partition.txt`, `metrics.csv`
//! (one row per iteration), `eval.csv` (one row per evaluation),
//! `checkpoints/{epoch_N,best,last}.ckpt` and `summary.json`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use cbff_core::{BitemporalSample, ConfusionMatrix, DatasetPartition, TrainConfig};
use cbff_data::{partition_manifest, read_partition, write_partition, Dataset, DatasetManifest};
use cbff_model::{checkpoint, NetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::eval::evaluate;
use crate::log::MetricsLog;
use crate::trainer::Trainer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Semi,
    SupOnly,
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub config: TrainConfig,
    pub data_root: PathBuf,
    pub partition_ratio: f64,
    /// Existing partition to reuse instead of drawing one from the ratio.
    pub partition_file: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub mode: Mode,
    /// Save `epoch_N.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub workers: usize,
}

impl ExperimentSpec {
    /// The training configuration actually used: sup-only zeroes the
    /// consistency weight.
    pub fn resolved_config(&self) -> TrainConfig {
        let mut cfg = self.config.clone();
        if self.mode == Mode::SupOnly {
            cfg.lambda2 = 0.0;
        }
        cfg
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub oa: f64,
    pub confusion: ConfusionMatrix,
}

impl Scores {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            iou: cm.iou(),
            oa: cm.oa()?,
            confusion: cm,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub epochs: usize,
    pub iterations: usize,
    pub best_val_epoch: Option<usize>,
    pub best_val_iou: Option<f64>,
    /// Scores of the best-validation weights, or of the final weights when
    /// there is no validation split. `train` covers the labeled samples.
    pub train: Scores,
    pub val: Option<Scores>,
    pub test: Option<Scores>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| TrainError::io(path, e))
}

fn score(trainer: &Trainer, samples: &[&BitemporalSample]) -> Result<Option<Scores>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let cm = evaluate(&trainer.net, &trainer.store, samples, trainer.cfg.head_choice, trainer.cfg.batch_size.max(8))?;
    Scores::from_confusion(cm).map(Some)
}

fn save_checkpoint(trainer: &Trainer, dir: &Path, name: &str, epoch: usize) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.ckpt"));
    let meta = serde_json::json!({ "epoch": epoch, "seed": trainer.cfg.seed });
    checkpoint::save(&path, &trainer.store, &NetConfig::from(&trainer.cfg), meta)?;
    Ok(path)
}

/// Draw (or read) the partition for `spec`.
pub fn resolve_partition(spec: &ExperimentSpec, manifest: &DatasetManifest) -> Result<DatasetPartition> {
    match &spec.partition_file {
        Some(p) => Ok(read_partition(p, manifest)?),
        None => Ok(partition_manifest(manifest, spec.partition_ratio, spec.config.seed)?),
    }
}

/// Train for `config.epochs` epochs, evaluating on validation after each
/// epoch. A non-finite loss or gradient stops the run after saving
/// `last.ckpt` from the last finite state.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<RunSummary> {
    let cfg = spec.resolved_config();
    cfg.validate()?;
    fs::create_dir_all(&spec.out_dir).map_err(|e| TrainError::io(&spec.out_dir, e))?;
    let ckpt_dir = spec.out_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| TrainError::io(&ckpt_dir, e))?;

    let manifest = DatasetManifest::load(&spec.data_root)?;
    let data = Dataset::load(&manifest)?;
    let partition = resolve_partition(spec, &manifest)?;
    write_partition(&spec.out_dir.join("partition.txt"), &partition)?;
    let resolved = ExperimentSpec {
        config: cfg.clone(),
        ..spec.clone()
    };
    write_json(&spec.out_dir.join("config.json"), &resolved)?;

    let labeled: Vec<BitemporalSample> = data.select(&partition.labeled_ids)?.into_iter().cloned().collect();
    let unlabeled = data.select_unlabeled(&partition.unlabeled_ids)?;
    let val = data.select(&partition.val_ids)?;
    let test = data.select(&partition.test_ids)?;

    let mut trainer = Trainer::new(cfg.clone(), labeled, unlabeled)?;
    trainer.workers = spec.workers;
    let mut log = MetricsLog::create(&spec.out_dir.join("metrics.csv"))?;
    let eval_path = spec.out_dir.join("eval.csv");
    let mut eval_log = fs::File::create(&eval_path).map_err(|e| TrainError::io(&eval_path, e))?;
    writeln!(eval_log, "epoch,split,iou,oa").map_err(|e| TrainError::io(&eval_path, e))?;

    let mut best: Option<(usize, f64)> = None;
    let mut iterations = 0;
    for epoch in 1..=cfg.epochs {
        let reports = match trainer.train_epoch(epoch) {
            Ok(r) => r,
            Err(e) => {
                if e.is_numeric() {
                    save_checkpoint(&trainer, &ckpt_dir, "last", epoch - 1)?;
                }
                return Err(e);
            }
        };
        iterations += reports.len();
        log.write(&reports)?;
        if let Some(v) = score(&trainer, &val)? {
            writeln!(eval_log, "{epoch},val,{:.4},{:.4}", v.iou, v.oa).map_err(|e| TrainError::io(&eval_path, e))?;
            if best.is_none_or(|(_, b)| v.iou > b) {
                best = Some((epoch, v.iou));
                save_checkpoint(&trainer, &ckpt_dir, "best", epoch)?;
            }
        }
        if spec.checkpoint_every > 0 && epoch % spec.checkpoint_every == 0 {
            save_checkpoint(&trainer, &ckpt_dir, &format!("epoch_{epoch}"), epoch)?;
        }
    }
    save_checkpoint(&trainer, &ckpt_dir, "last", cfg.epochs)?;
    // Final scores use the weights that did best on validation.
    if best.is_some() {
        let path = ckpt_dir.join("best.ckpt");
        checkpoint::load(&path, &mut trainer.store, &NetConfig::from(&trainer.cfg))?;
    }

    let labeled_refs: Vec<&BitemporalSample> = trainer.labeled().iter().collect();
    let summary = RunSummary {
        epochs: cfg.epochs,
        iterations,
        best_val_epoch: best.map(|b| b.0),
        best_val_iou: best.map(|b| b.1),
        train: score(&trainer, &labeled_refs)?.expect("labeled set is non-empty"),
        val: score(&trainer, &val)?,
        test: score(&trainer, &test)?,
    };
    write_json(&spec.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}
