//! The decoder ablation: supervised-only, convolution-only,
//! transformer-only and the fused decoder, trained on one shared partition
//! per label ratio.

use std::path::PathBuf;

use cbff_core::{DecoderVariant, ResultsTable};
use cbff_data::{partition_manifest, write_partition, DatasetManifest};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::run::{run_experiment, ExperimentSpec, Mode, RunSummary};

/// Row name, training mode and decoder for each ablation row.
pub const ROWS: [(&str, Mode, DecoderVariant); 4] = [
    ("sup_only", Mode::SupOnly, DecoderVariant::Cbff),
    ("cnn", Mode::Semi, DecoderVariant::CnnOnly),
    ("trans", Mode::Semi, DecoderVariant::TransOnly),
    ("cbff", Mode::Semi, DecoderVariant::Cbff),
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRun {
    pub method: String,
    pub ratio: f64,
    pub partition_file: PathBuf,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub table: ResultsTable,
    pub runs: Vec<AblationRun>,
}

/// Run every row for every ratio. Scores come from the test split, or from
/// validation when the dataset has no test split. `base.out_dir` receives
/// one subdirectory per run plus `results.csv` and `results.txt`.
pub fn run_ablation(base: &ExperimentSpec, ratios: &[f64]) -> Result<AblationReport> {
    std::fs::create_dir_all(&base.out_dir).map_err(|e| crate::TrainError::io(&base.out_dir, e))?;
    let manifest = DatasetManifest::load(&base.data_root)?;
    let mut table = ResultsTable::default();
    let mut runs = Vec::new();
    for &ratio in ratios {
        let part = partition_manifest(&manifest, ratio, base.config.seed)?;
        let part_path = base.out_dir.join(format!("partition_{:.0}pct.txt", ratio * 100.0));
        write_partition(&part_path, &part)?;
        for (name, mode, decoder) in ROWS {
            let mut spec = base.clone();
            spec.mode = mode;
            spec.config.decoder = decoder;
            spec.partition_ratio = ratio;
            spec.partition_file = Some(part_path.clone());
            spec.out_dir = base.out_dir.join(format!("{name}_{:.0}pct", ratio * 100.0));
            let summary = run_experiment(&spec)?;
            let s = summary.test.or(summary.val).unwrap_or(summary.train);
            table.push(name, ratio, s.iou, s.oa);
            runs.push(AblationRun {
                method: name.to_string(),
                ratio,
                partition_file: part_path.clone(),
                summary,
            });
        }
    }
    let write = |file: &str, text: String| {
        let p = base.out_dir.join(file);
        std::fs::write(&p, text).map_err(|e| crate::TrainError::io(&p, e))
    };
    write("results.csv", table.to_csv())?;
    write("results.txt", table.to_text())?;
    Ok(AblationReport { table, runs })
}
