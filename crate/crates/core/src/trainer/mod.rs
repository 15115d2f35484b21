//! Mini-batch training of a DCN on a tile or slice manifest.
//!
//! Constant-rate Adam on the mean cross-entropy of each batch, no schedule,
//! no weight decay. All randomness (initialization, split, shuffling,
//! augmentation, dropout) derives from `TrainConfig::seed`, and a run's
//! outputs do not depend on the rayon pool size.

pub mod augment;
pub mod curves;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::dcn::{build_dcn, save_checkpoint, DcnConfig, DcnModel, Preset};
use crate::ensemble::Prediction;
use crate::error::{Error, Result};
use crate::imaging::{load_image, resize_bilinear, Image};
use crate::manifest::{read_any_manifest, resolve, AnyManifest, Labeled};
use crate::seed::derive_seed;
use crate::tensor::{adam_step, ops, AdamState, Graph};

pub use augment::{augment, AugmentFlags};
pub use curves::{curves_svg, read_curves_csv, write_curves_csv, CurvePoint};

/// Largest batch pushed through the tape-free evaluation path at once.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model_preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub val_fraction: f64,
    pub seed: u64,
    pub augment: AugmentFlags,
    /// Overrides the preset's input size; images are resized to it on load.
    pub input_size: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::histology()
    }
}

impl TrainConfig {
    pub fn histology() -> Self {
        TrainConfig {
            model_preset: Preset::Dcn1,
            epochs: 300,
            batch_size: 128,
            lr: 1e-3,
            val_fraction: 0.1,
            seed: 0,
            augment: AugmentFlags::default(),
            input_size: None,
        }
    }

    pub fn radiology() -> Self {
        TrainConfig {
            model_preset: Preset::Dcn2,
            epochs: 500,
            ..TrainConfig::histology()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 for batch norm".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.input_size.unwrap_or_else(|| self.model_preset.config().input_size)
    }

    pub fn model_config(&self, in_channels: usize) -> DcnConfig {
        self.model_preset
            .config()
            .with_input_size(self.input_size())
            .with_in_channels(in_channels)
    }
}

/// Majority non-`N` label of each case; all-`N` cases stratify as `N`.
fn case_strata<R: Labeled>(records: &[R]) -> BTreeMap<String, Class> {
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for r in records {
        counts.entry(r.case_id().to_string()).or_default()[r.label().index()] += 1;
    }
    counts
        .into_iter()
        .map(|(case, c)| {
            let mut best = Class::N;
            for k in Class::SUBTYPES {
                if c[k.index()] > 0 && (best == Class::N || c[k.index()] > c[best.index()]) {
                    best = k;
                }
            }
            (case, best)
        })
        .collect()
}

/// Case-level split stratified by each case's label. Every stratum sends
/// `clamp(round(n·fraction), 1, n − 1)` of its `n` cases to validation.
pub fn split_train_val<R: Labeled + Clone>(records: &[R], val_fraction: f64, seed: u64) -> Result<(Vec<R>, Vec<R>)> {
    if records.is_empty() {
        return Err(Error::EmptyInput("records to split"));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "val_fraction {val_fraction} outside (0, 1)"
        )));
    }
    let strata = case_strata(records);
    let mut by_class: BTreeMap<Class, Vec<&str>> = BTreeMap::new();
    for (case, class) in &strata {
        by_class.entry(*class).or_default().push(case);
    }
    let single: Vec<Class> = by_class
        .iter()
        .filter(|(_, cases)| cases.len() < 2)
        .map(|(c, _)| *c)
        .collect();
    if !single.is_empty() {
        return Err(Error::SingleCaseClass(single));
    }
    let mut val_cases = BTreeSet::new();
    for (class, mut cases) in by_class {
        let n = cases.len();
        let k = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("split/{class}")));
        cases.shuffle(&mut rng);
        val_cases.extend(cases[..k].iter().map(|c| c.to_string()));
    }
    let (val, train): (Vec<R>, Vec<R>) = records.iter().cloned().partition(|r| val_cases.contains(r.case_id()));
    Ok((train, val))
}

/// One decoded, resized training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub case_id: String,
    pub label: Class,
    pub image: Image,
}

/// Loads and resizes the images of `records` (paths resolved against
/// `manifest`), preserving order.
pub fn load_samples<R: Labeled + Sync>(manifest: &Path, records: &[R], size: usize) -> Result<Vec<Sample>> {
    records
        .par_iter()
        .map(|r| {
            let img = load_image(&resolve(manifest, r.image_path()))?;
            Ok(Sample {
                case_id: r.case_id().to_string(),
                label: r.label(),
                image: resize_bilinear(&img, size, size),
            })
        })
        .collect()
}

/// Shuffled batch index lists; a trailing singleton joins the previous batch
/// so batch norm always sees at least two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn labels_of(samples: &[Sample], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| samples[i].label.index()).collect()
}

/// Mean loss and accuracy of `samples` under running statistics.
pub fn evaluate_samples(model: &DcnModel, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let parts: Vec<(f64, usize)> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let imgs: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let logits = model.predict_logits(&Image::batch(&imgs)?)?;
            let labels: Vec<usize> = chunk.iter().map(|s| s.label.index()).collect();
            let (loss, _) = ops::cross_entropy(&logits, &labels)?;
            let k = logits.shape()[1];
            let correct = logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax_f32(row) == l)
                .count();
            Ok((loss as f64 * chunk.len() as f64, correct))
        })
        .collect::<Result<_>>()?;
    let n = samples.len() as f64;
    let loss = parts.iter().map(|p| p.0).sum::<f64>() / n;
    let acc = parts.iter().map(|p| p.1).sum::<usize>() as f64 / n;
    Ok((loss, acc))
}

fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

/// Softmax predictions for a batch of images, in input order.
pub fn predict_batch(model: &DcnModel, images: &[&Image]) -> Result<Vec<Prediction>> {
    if model.config().num_classes != 4 {
        return Err(Error::InvalidConfig(format!(
            "predictions need 4 outputs, model has {}",
            model.config().num_classes
        )));
    }
    let per_chunk: Vec<Vec<Prediction>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let logits = model.predict_logits(&Image::batch(chunk)?)?;
            logits.data().chunks(4).map(Prediction::from_logits).collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_chunk.into_iter().flatten().collect())
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub model: DcnModel,
    pub optimizer: AdamState,
    /// Weights of the epoch with the best validation accuracy (ties go to
    /// lower validation loss, then to the earlier epoch).
    pub best: DcnModel,
    pub best_epoch: usize,
    pub curves: Vec<CurvePoint>,
}

fn check_samples(samples: &[Sample], what: &'static str) -> Result<(usize, usize)> {
    let first = samples.first().ok_or(Error::EmptyInput(what))?;
    let shape = (first.image.channels, first.image.height);
    for s in samples {
        if (s.image.channels, s.image.height, s.image.width) != (shape.0, shape.1, shape.1) {
            return Err(Error::shape(
                "training sample",
                &[s.image.channels, s.image.height, s.image.width],
                &[shape.0, shape.1, shape.1],
            ));
        }
    }
    Ok(shape)
}

/// Trains on in-memory samples. Images must be square and equally sized.
pub fn fit(cfg: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (channels, size) = check_samples(train, "training samples")?;
    if check_samples(val, "validation samples")? != (channels, size) {
        return Err(Error::InvalidArgument(
            "training and validation images differ in shape".into(),
        ));
    }
    let present: BTreeSet<Class> = train.iter().chain(val).map(|s| s.label).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument("need at least two classes to train".into()));
    }
    for c in &present {
        if !train.iter().any(|s| s.label == *c) {
            return Err(Error::EmptyClass(*c));
        }
    }

    let mcfg = cfg.model_config(channels).with_input_size(size);
    let mut model = build_dcn(&mcfg, derive_seed(cfg.seed, "init"))?;
    let mut opt = AdamState::new(cfg.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(DcnModel, usize, f64, f64)> = None;
    info!(
        "training {} ({} parameters) on {} samples, validating on {}",
        cfg.model_preset,
        model.num_parameters(),
        train.len(),
        val.len()
    );

    for epoch in 1..=cfg.epochs {
        model.train_mode();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut correct) = (0f64, 0usize);
        for (bi, idx) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let imgs: Vec<Image> = idx
                .par_iter()
                .map(|&i| {
                    if cfg.augment.any() {
                        augment(
                            &train[i].image,
                            &cfg.augment,
                            derive_seed(cfg.seed, &format!("augment/{epoch}/{i}")),
                        )
                    } else {
                        Ok(train[i].image.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Image> = imgs.iter().collect();
            let labels = labels_of(train, &idx);

            let mut g = Graph::new();
            let x = g.constant(&Image::batch(&refs)?);
            let rec = model.forward(&mut g, x)?;
            let loss = g.cross_entropy(rec.logits, &labels)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    lr: cfg.lr,
                });
            }
            let logits = g.value(rec.logits);
            let k = logits.shape()[1];
            correct += logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &l)| argmax_f32(row) == l)
                .count();
            loss_sum += lv as f64 * idx.len() as f64;

            g.backward(loss)?;
            model.zero_grad();
            model.accumulate_grads(&g, &rec)?;
            adam_step(model.parameters_mut(), &mut opt)?;
            debug!("epoch {epoch} batch {bi} loss {lv:.5}");
        }
        model.eval_mode();
        let (val_loss, val_acc) = evaluate_samples(&model, val)?;
        let point = CurvePoint {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        info!(
            "epoch {epoch}/{}: loss {:.4} acc {:.3} | val loss {:.4} acc {:.3}",
            cfg.epochs, point.train_loss, point.train_acc, val_loss, val_acc
        );
        curves.push(point);
        let better = match &best {
            None => true,
            Some((_, _, acc, loss)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if better {
            best = Some((model.clone(), epoch, val_acc, val_loss));
        }
    }
    model.zero_grad();
    let (mut best, best_epoch, _, _) = best.expect("at least one epoch");
    best.zero_grad();
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        best,
        best_epoch,
        curves,
    })
}

/// Files written by [`train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArtifacts {
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub curves_csv: PathBuf,
    pub curves_svg: PathBuf,
    pub best_epoch: usize,
    pub train_cases: Vec<String>,
    pub val_cases: Vec<String>,
}

fn case_ids<R: Labeled>(records: &[R]) -> Vec<String> {
    records
        .iter()
        .map(|r| r.case_id().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn split_and_load<R: Labeled + Clone + Sync>(
    cfg: &TrainConfig,
    manifest: &Path,
    records: &[R],
) -> Result<(Vec<Sample>, Vec<Sample>, Vec<String>, Vec<String>)> {
    let (train, val) = split_train_val(records, cfg.val_fraction, cfg.seed)?;
    let size = cfg.input_size();
    Ok((
        load_samples(manifest, &train, size)?,
        load_samples(manifest, &val, size)?,
        case_ids(&train),
        case_ids(&val),
    ))
}

/// Splits a manifest by case, trains, and writes `best.ckpt`, `final.ckpt`,
/// `curves.csv`, `curves.svg` and `split.json` into `out_dir`.
pub fn train(cfg: &TrainConfig, manifest: &Path, out_dir: &Path) -> Result<(TrainArtifacts, Vec<CurvePoint>)> {
    cfg.validate()?;
    let (train, val, train_cases, val_cases) = match read_any_manifest(manifest)? {
        AnyManifest::Tiles(r) => split_and_load(cfg, manifest, &r)?,
        AnyManifest::Slices(r) => split_and_load(cfg, manifest, &r)?,
    };
    let out = fit(cfg, &train, &val)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let art = TrainArtifacts {
        best_checkpoint: out_dir.join("best.ckpt"),
        final_checkpoint: out_dir.join("final.ckpt"),
        curves_csv: out_dir.join("curves.csv"),
        curves_svg: out_dir.join("curves.svg"),
        best_epoch: out.best_epoch,
        train_cases,
        val_cases,
    };
    save_checkpoint(&art.best_checkpoint, &out.best, None)?;
    save_checkpoint(&art.final_checkpoint, &out.model, Some(&out.optimizer))?;
    write_curves_csv(&art.curves_csv, &out.curves)?;
    let svg = curves_svg(&out.curves)?;
    fs::write(&art.curves_svg, svg).map_err(|e| Error::io(&art.curves_svg, e))?;
    let split = out_dir.join("split.json");
    fs::write(&split, serde_json::to_string_pretty(&art)?).map_err(|e| Error::io(&split, e))?;
    Ok((art, out.curves))
}
