use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cbff_core::{ConfusionMatrix, TrainConfig};
use cbff_data::{partition_manifest, prepare_dataset, synth_generate, write_partition, Dataset, DatasetManifest, Split, SynthSpec};
use cbff_model::gradcheck::{check_network, GradCheckOptions};
use cbff_model::{checkpoint, ChangeNet, NetConfig};
use cbff_train::{evaluate, run_ablation, run_experiment, ExperimentSpec, Mode};

use crate::config::{layer_file, usage, ConfigArgs};
use crate::{Command, ModeArg};

/// Some parameter group exceeded the gradient-check tolerance.
#[derive(Debug)]
pub struct GradcheckFailed {
    pub worst: f64,
    pub tolerance: f64,
}

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "gradient check failed: max relative error {:e} (tolerance {:e})", self.worst, self.tolerance)
    }
}

impl std::error::Error for GradcheckFailed {}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            n,
            size,
            seed,
            out,
            val,
            test,
            workers,
        } => synth(SynthSpec { n_val: val, n_test: test, ..SynthSpec::new(n, size, seed) }, &out, workers),
        Command::Prepare {
            input,
            output,
            tile,
            ratio,
            seed,
        } => prepare(&input, &output, tile, ratio, seed),
        Command::Train {
            data,
            out,
            ratio,
            partition,
            mode,
            checkpoint_every,
            workers,
            cfg,
        } => {
            let spec = ExperimentSpec {
                config: cfg.resolve()?,
                data_root: data,
                partition_ratio: ratio,
                partition_file: partition,
                out_dir: out,
                mode: match mode {
                    ModeArg::Semi => Mode::Semi,
                    ModeArg::SupOnly => Mode::SupOnly,
                },
                checkpoint_every,
                workers,
            };
            train(&spec)
        }
        Command::Ablate {
            data,
            out,
            ratios,
            workers,
            cfg,
        } => {
            let first = *ratios.first().ok_or_else(|| usage("at least one ratio is required"))?;
            let base = ExperimentSpec {
                config: cfg.resolve()?,
                data_root: data,
                partition_ratio: first,
                partition_file: None,
                out_dir: out,
                mode: Mode::Semi,
                checkpoint_every: 0,
                workers,
            };
            let report = run_ablation(&base, &ratios)?;
            print!("{}", report.table.to_text());
            println!("results written to {}", base.out_dir.join("results.csv").display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            cfg,
        } => eval(&checkpoint, &data, split.into(), &cfg),
        Command::Gradcheck {
            samples,
            batch,
            size,
            seed,
            tolerance,
            inject_fault,
        } => gradcheck(
            &GradCheckOptions {
                batch,
                size,
                samples_per_tensor: samples,
                seed,
                inject_fault,
                ..GradCheckOptions::default()
            },
            tolerance,
        ),
    }
}

fn split_counts(manifest: &DatasetManifest) -> String {
    Split::ALL
        .iter()
        .map(|&s| format!("{} {}", s.name(), manifest.ids(s).len()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn synth(spec: SynthSpec, out: &Path, workers: usize) -> Result<()> {
    let manifest = synth_generate(&spec, out, workers)?;
    println!(
        "wrote {} synthetic pairs of {}x{} to {} ({})",
        manifest.records.len(),
        spec.size,
        spec.size,
        out.display(),
        split_counts(&manifest)
    );
    Ok(())
}

fn prepare(input: &Path, output: &Path, tile: usize, ratio: f64, seed: u64) -> Result<()> {
    let manifest = prepare_dataset(input, output, tile)?;
    let part = partition_manifest(&manifest, ratio, seed)?;
    let path = output.join("partition.txt");
    write_partition(&path, &part)?;
    println!("prepared {} tiles of {tile}x{tile} in {} ({})", manifest.records.len(), output.display(), split_counts(&manifest));
    println!(
        "partition {}: {} labeled, {} unlabeled",
        path.display(),
        part.labeled_ids.len(),
        part.unlabeled_ids.len()
    );
    Ok(())
}

fn train(spec: &ExperimentSpec) -> Result<()> {
    let resolved = spec.resolved_config();
    println!("# resolved configuration");
    print!("{}", toml::to_string(&resolved).context("serializing configuration")?);
    let summary = run_experiment(spec)?;
    println!(
        "trained {} epochs ({} iterations); train IoU {:.2} OA {:.2}",
        summary.epochs, summary.iterations, summary.train.iou, summary.train.oa
    );
    for (name, s) in [("val", summary.val), ("test", summary.test)] {
        if let Some(s) = s {
            println!("{name} IoU {:.2} OA {:.2}", s.iou, s.oa);
        }
    }
    println!("artifacts in {}", spec.out_dir.display());
    Ok(())
}

/// `config.json` of the run directory that holds `ckpt`, if any.
fn run_config_of(ckpt: &Path) -> Option<PathBuf> {
    let candidate = ckpt.parent()?.parent()?.join("config.json");
    candidate.exists().then_some(candidate)
}

fn eval(ckpt: &Path, data: &Path, split: Split, args: &ConfigArgs) -> Result<()> {
    let mut cfg: TrainConfig = args.resolve()?;
    if args.config.is_none() {
        if let Some(path) = run_config_of(ckpt) {
            let head = cfg.head_choice;
            cfg = layer_file(&cfg, &path)?;
            if args.head.is_some() {
                cfg.head_choice = head;
            }
        }
    }
    let net_cfg = NetConfig::from(&cfg);
    let (net, mut store) = ChangeNet::new::<f32>(&net_cfg, cfg.seed);
    checkpoint::load(ckpt, &mut store, &net_cfg).with_context(|| format!("loading {}", ckpt.display()))?;
    let manifest = DatasetManifest::load(data)?;
    let dataset = Dataset::load(&manifest)?;
    let samples = dataset.select(&manifest.ids(split))?;
    if samples.is_empty() {
        return Err(usage(format!("split {} of {} is empty", split.name(), data.display())));
    }
    let cm: ConfusionMatrix = evaluate(&net, &store, &samples, cfg.head_choice, cfg.batch_size.max(8))?;
    println!(
        "{} pairs of split {}: IoU {:.2} OA {:.2} (tp {} fp {} fn {} tn {})",
        samples.len(),
        split.name(),
        cm.iou(),
        cm.oa()?,
        cm.tp,
        cm.fp,
        cm.fn_,
        cm.tn
    );
    Ok(())
}

fn gradcheck(opts: &GradCheckOptions, tolerance: f64) -> Result<()> {
    let cfg = NetConfig::from(&TrainConfig::toy());
    let report = check_network(&cfg, opts)?;
    let mut worst: f64 = 0.0;
    for g in &report {
        println!("{:<28} {:>4} checked {:>3} skipped  max rel err {:.3e}", g.group, g.checked, g.skipped, g.rel_error);
        worst = if g.rel_error.is_nan() { f64::INFINITY } else { worst.max(g.rel_error) };
    }
    println!("{} groups, max relative error {worst:.3e}", report.len());
    if worst < tolerance {
        Ok(())
    } else {
        Err(GradcheckFailed { worst, tolerance }.into())
    }
}
