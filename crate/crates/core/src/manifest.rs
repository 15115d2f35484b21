//! Dataset manifests: JSONL record files, `case_id,label` CSVs and
//! seeded class balancing.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::class::{Class, Modality};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// One histology tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub case_id: String,
    pub source_path: String,
    pub row: usize,
    pub col: usize,
    /// Microns per pixel of the source slide.
    pub pixel_resolution: f64,
    pub label: Class,
    /// Relative to the manifest's directory unless absolute.
    pub tile_path: String,
}

/// One MRI slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub case_id: String,
    pub modality: Modality,
    pub z_index: usize,
    pub label: Class,
    /// Relative to the manifest's directory unless absolute.
    pub slice_path: String,
}

/// Common view of manifest rows.
pub trait Labeled {
    fn label(&self) -> Class;
    fn case_id(&self) -> &str;
    fn image_path(&self) -> &str;
}

impl Labeled for TileRecord {
    fn label(&self) -> Class {
        self.label
    }
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn image_path(&self) -> &str {
        &self.tile_path
    }
}

impl Labeled for SliceRecord {
    fn label(&self) -> Class {
        self.label
    }
    fn case_id(&self) -> &str {
        &self.case_id
    }
    fn image_path(&self) -> &str {
        &self.slice_path
    }
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// A manifest of either record kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyManifest {
    Tiles(Vec<TileRecord>),
    Slices(Vec<SliceRecord>),
}

impl AnyManifest {
    pub fn len(&self) -> usize {
        match self {
            AnyManifest::Tiles(v) => v.len(),
            AnyManifest::Slices(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads a tile or slice manifest, telling them apart by their path key.
pub fn read_any_manifest(path: &Path) -> Result<AnyManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or_default();
    let probe: serde_json::Map<String, serde_json::Value> = if first.is_empty() {
        serde_json::Map::new()
    } else {
        serde_json::from_str(first)?
    };
    if probe.contains_key("slice_path") {
        Ok(AnyManifest::Slices(from_jsonl(&text)?))
    } else {
        Ok(AnyManifest::Tiles(from_jsonl(&text)?))
    }
}

/// Resolves a record's image path against the manifest location.
pub fn resolve(manifest: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct LabelRow {
    case_id: String,
    label: String,
}

/// Reads a `case_id,label` CSV. Labels are A, O, G or N.
pub fn read_labels_csv(path: &Path) -> Result<BTreeMap<String, Class>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        })?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: LabelRow = row?;
        let label: Class = row.label.parse()?;
        if out.insert(row.case_id.clone(), label).is_some() {
            return Err(Error::Format(format!(
                "duplicate case_id {} in {}",
                row.case_id,
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn write_labels_csv<'a, I>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, Class)>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for (case_id, label) in rows {
        w.serialize(LabelRow {
            case_id: case_id.to_string(),
            label: label.to_string(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    /// A class below its target is an error.
    #[default]
    Strict,
    /// Classes below target keep everything; the rest are cut to the target.
    Downsample,
}

/// Per-class record counts in (A, O, G, N) order.
pub fn class_counts<R: Labeled>(records: &[R]) -> [usize; 4] {
    let mut c = [0; 4];
    for r in records {
        c[r.label().index()] += 1;
    }
    c
}

/// Seeded subsample to `targets[class]` records per class. Classes without a
/// target pass through untouched. Selected records keep their input order.
pub fn balance_manifest<R: Labeled + Clone>(
    records: &[R],
    targets: &[Option<usize>; 4],
    mode: BalanceMode,
    seed: u64,
) -> Result<Vec<R>> {
    let mut keep = vec![false; records.len()];
    for class in Class::ALL {
        let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].label() == class).collect();
        let chosen: Vec<usize> = match targets[class.index()] {
            None => idx,
            Some(t) if t >= idx.len() => {
                if t > idx.len() && mode == BalanceMode::Strict {
                    return Err(Error::InsufficientSamples {
                        class,
                        available: idx.len(),
                        target: t,
                    });
                }
                idx
            }
            Some(t) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class.as_str()));
                rand::seq::index::sample(&mut rng, idx.len(), t)
                    .into_iter()
                    .map(|k| idx[k])
                    .collect()
            }
        };
        for i in chosen {
            keep[i] = true;
        }
    }
    Ok(records
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(r, _)| r.clone())
        .collect())
}

/// Same target for every class.
pub fn uniform_targets(target: usize) -> [Option<usize>; 4] {
    [Some(target); 4]
}
