//! Labeled/unlabeled splits of the training ids and their on-disk form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use cbff_core::rng::{seeded_rng, SHUFFLE};
use cbff_core::DatasetPartition;
use rand::seq::SliceRandom;

use crate::error::{DataError, Result};
use crate::manifest::{DatasetManifest, Split};

/// Draw `round(ratio * n)` labeled ids without replacement; the rest are
/// unlabeled. Both lists keep the input order.
pub fn partition(train_ids: &[String], ratio: f64, seed: u64) -> Result<DatasetPartition> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Config(format!("label ratio {ratio} must lie in (0, 1)")));
    }
    if train_ids.is_empty() {
        return Err(DataError::Config("no training ids to partition".into()));
    }
    let n = train_ids.len();
    let m = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, SHUFFLE));
    let mut labeled = vec![false; n];
    for &i in &order[..m] {
        labeled[i] = true;
    }
    let pick = |want: bool| {
        train_ids
            .iter()
            .zip(&labeled)
            .filter(|(_, &l)| l == want)
            .map(|(id, _)| id.clone())
            .collect()
    };
    Ok(DatasetPartition {
        labeled_ids: pick(true),
        unlabeled_ids: pick(false),
        val_ids: Vec::new(),
        test_ids: Vec::new(),
        ratio,
    })
}

/// Partition the manifest's train split; val and test come from the manifest.
pub fn partition_manifest(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<DatasetPartition> {
    let mut p = partition(&manifest.ids(Split::Train), ratio, seed)?;
    p.val_ids = manifest.ids(Split::Val);
    p.test_ids = manifest.ids(Split::Test);
    p.validate()?;
    Ok(p)
}

/// `labeled:` header, one id per line, then `unlabeled:` and its ids.
pub fn format_partition(p: &DatasetPartition) -> String {
    let mut s = String::from("labeled:\n");
    for id in &p.labeled_ids {
        let _ = writeln!(s, "{id}");
    }
    s.push_str("unlabeled:\n");
    for id in &p.unlabeled_ids {
        let _ = writeln!(s, "{id}");
    }
    s
}

pub fn write_partition(path: &Path, p: &DatasetPartition) -> Result<()> {
    fs::write(path, format_partition(p)).map_err(|e| DataError::io(path, e))
}

/// Parse a partition file into `(labeled, unlabeled)` id lists.
pub fn parse_partition(text: &str) -> std::result::Result<(Vec<String>, Vec<String>), String> {
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    let mut section: Option<&mut Vec<String>> = None;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        match line {
            "" => {}
            "labeled:" => section = Some(&mut labeled),
            "unlabeled:" => section = Some(&mut unlabeled),
            id => match section.as_deref_mut() {
                Some(list) => list.push(id.to_string()),
                None => return Err(format!("line {}: id before any section header", n + 1)),
            },
        }
    }
    Ok((labeled, unlabeled))
}

/// Read a partition file and attach the manifest's val/test ids.
pub fn read_partition(path: &Path, manifest: &DatasetManifest) -> Result<DatasetPartition> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let fail = |msg: String| DataError::PartitionFile {
        path: path.to_path_buf(),
        msg,
    };
    let (labeled_ids, unlabeled_ids) = parse_partition(&text).map_err(fail)?;
    let train = manifest.ids(Split::Train);
    for id in labeled_ids.iter().chain(&unlabeled_ids) {
        if !train.contains(id) {
            return Err(fail(format!("{id} is not a training id of the manifest")));
        }
    }
    let total = labeled_ids.len() + unlabeled_ids.len();
    if total == 0 {
        return Err(fail("no ids".into()));
    }
    let p = DatasetPartition {
        ratio: labeled_ids.len() as f64 / total as f64,
        labeled_ids,
        unlabeled_ids,
        val_ids: manifest.ids(Split::Val),
        test_ids: manifest.ids(Split::Test),
    };
    p.validate().map_err(|e| fail(e.to_string()))?;
    Ok(p)
}
