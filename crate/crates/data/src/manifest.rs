//! Dataset manifests, tiling of raw pairs into a prepared dataset, and the
//! in-memory sample cache the trainer reads from.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use cbff_core::BitemporalSample;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};
use crate::imageio::{read_mask, read_rgb, write_mask, write_rgb};
use crate::tile::{check_tile_size, tile_pair};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One sample; paths are relative to the manifest root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path_a: PathBuf,
    pub path_b: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_label: Option<PathBuf>,
    pub split: Split,
}

impl Record {
    /// Standard `A/<id>.png`, `B/<id>.png`, `label/<id>.png` layout.
    pub fn standard(id: &str, labeled: bool, split: Split) -> Self {
        let file = format!("{id}.png");
        Self {
            id: id.to_string(),
            path_a: Path::new("A").join(&file),
            path_b: Path::new("B").join(&file),
            path_label: labeled.then(|| Path::new("label").join(&file)),
            split,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Directory holding the manifest; not stored, set on load.
    #[serde(skip)]
    pub root: PathBuf,
    pub tile_size: usize,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.id.clone()).collect()
    }

    pub fn record(&self, id: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn save(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| DataError::io(&self.root, e))?;
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Manifest(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| DataError::io(&path, e))
    }

    /// Load `<dir>/manifest.json` (or the file itself) and check that ids are
    /// unique and every referenced image exists with the declared tile size.
    /// The root is taken from the manifest's location, so datasets can move.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| DataError::io(&file, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", file.display())))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_tile_size(self.tile_size)?;
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(DataError::Manifest(format!("duplicate id {}", r.id)));
            }
            for p in [Some(&r.path_a), Some(&r.path_b), r.path_label.as_ref()].into_iter().flatten() {
                let full = self.root.join(p);
                let (w, h) = image::image_dimensions(&full).map_err(|source| DataError::Image {
                    path: full.clone(),
                    source,
                })?;
                if (w as usize, h as usize) != (self.tile_size, self.tile_size) {
                    return Err(DataError::Manifest(format!(
                        "{} is {w}x{h}, manifest tile size is {}",
                        full.display(),
                        self.tile_size
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read_sample(&self, record: &Record) -> Result<BitemporalSample> {
        let a = read_rgb(&self.root.join(&record.path_a))?;
        let b = read_rgb(&self.root.join(&record.path_b))?;
        let label = match &record.path_label {
            Some(p) => Some(read_mask(&self.root.join(p))?),
            None => None,
        };
        Ok(BitemporalSample::new(record.id.clone(), a, b, label)?)
    }
}

/// Every sample of a manifest decoded once and kept in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    samples: Vec<BitemporalSample>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest) -> Result<Self> {
        let samples = manifest
            .records
            .iter()
            .map(|r| manifest.read_sample(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_samples(samples))
    }

    pub fn from_samples(samples: Vec<BitemporalSample>) -> Self {
        let index = samples.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
        Self { samples, index }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&BitemporalSample> {
        self.index
            .get(id)
            .map(|&i| &self.samples[i])
            .ok_or_else(|| DataError::Manifest(format!("unknown sample id {id}")))
    }

    /// Samples for `ids`, in order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<&BitemporalSample>> {
        ids.iter().map(|id| self.get(id)).collect()
    }

    /// Samples for `ids` with their labels removed, as the trainer must see
    /// unlabeled data. Ground truth stays on disk for diagnostics.
    pub fn select_unlabeled(&self, ids: &[String]) -> Result<Vec<BitemporalSample>> {
        ids.iter()
            .map(|id| {
                let mut s = self.get(id)?.clone();
                s.label = None;
                Ok(s)
            })
            .collect()
    }
}

/// Raw pairs to tile: `<input>/manifest.json` if present (splits taken from
/// it), otherwise every `<input>/A/*.png` with matching `B/` and `label/`
/// files, split by `<input>/list/{train,val,test}.txt` (ids not listed go to
/// train).
fn raw_records(input: &Path) -> Result<(PathBuf, Vec<Record>)> {
    let manifest = input.join(MANIFEST_FILE);
    if manifest.exists() {
        let text = fs::read_to_string(&manifest).map_err(|e| DataError::io(&manifest, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", manifest.display())))?;
        return Ok((input.to_path_buf(), m.records));
    }
    let dir_a = input.join("A");
    let mut ids: Vec<String> = fs::read_dir(&dir_a)
        .map_err(|e| DataError::io(&dir_a, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    let mut split_of = HashMap::new();
    for split in Split::ALL {
        let list = input.join("list").join(format!("{}.txt", split.name()));
        if let Ok(text) = fs::read_to_string(&list) {
            for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
                let id = line.trim_end_matches(".png").to_string();
                split_of.insert(id, split);
            }
        }
    }
    let records = ids
        .into_iter()
        .map(|id| {
            let labeled = input.join("label").join(format!("{id}.png")).exists();
            let split = split_of.get(&id).copied().unwrap_or(Split::Train);
            Record::standard(&id, labeled, split)
        })
        .collect();
    Ok((input.to_path_buf(), records))
}

/// Tile every raw pair under `input` into `tile x tile` samples written to
/// `output` in the standard layout, and write the output manifest.
pub fn prepare_dataset(input: &Path, output: &Path, tile: usize) -> Result<DatasetManifest> {
    check_tile_size(tile)?;
    let (root, raw) = raw_records(input)?;
    if raw.is_empty() {
        return Err(DataError::Manifest(format!("no image pairs found under {}", input.display())));
    }
    let mut records = Vec::new();
    for r in &raw {
        let src = DatasetManifest {
            root: root.clone(),
            tile_size: tile,
            records: Vec::new(),
        };
        let sample = src.read_sample(r)?;
        let tiles = tile_pair(&r.id, &sample.image_a, &sample.image_b, sample.label.as_ref(), tile)?;
        for t in tiles {
            let rec = Record::standard(&t.id, t.label.is_some(), r.split);
            write_rgb(&output.join(&rec.path_a), &t.image_a)?;
            write_rgb(&output.join(&rec.path_b), &t.image_b)?;
            if let (Some(p), Some(m)) = (&rec.path_label, &t.label) {
                write_mask(&output.join(p), m)?;
            }
            records.push(rec);
        }
    }
    let manifest = DatasetManifest {
        root: output.to_path_buf(),
        tile_size: tile,
        records,
    };
    manifest.save()?;
    Ok(manifest)
}
