//! Synthetic mini-cohorts with planted, class-dependent texture.
//!
//! Each case gets an RGB "slide" (tissue on a white background, tiles fully
//! tissue, fully background or half and half) and one MRI-like volume per
//! requested modality (ellipsoidal brain with a lesion spanning a known slice
//! range). Class signal:
//!
//! | class | slide tissue                   | lesion                    |
//! |-------|--------------------------------|---------------------------|
//! | A     | pink, horizontal banding       | homogeneous, bright       |
//! | O     | purple, dark round nuclei      | fine speckle              |
//! | G     | indigo, dense checkerboard     | bright rim, dark core     |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::class::{Class, Modality};
use crate::error::{Error, Result};
use crate::histo::{QuotaEntry, QuotaTable};
use crate::manifest::write_labels_csv;
use crate::radio::{write_positivity_csv, write_volume, PositivityTable, Volume, ZRange};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub cases_per_class: usize,
    /// Cases per class listed in `labels_test.csv` instead of `labels_train.csv`.
    pub held_out_per_class: usize,
    pub tile_size: u32,
    /// Slide size in tiles (columns, rows).
    pub slide_tiles: (u32, u32),
    pub resolution: f64,
    pub volume_dims: [usize; 3],
    pub modalities: Vec<Modality>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            cases_per_class: 4,
            held_out_per_class: 2,
            tile_size: 64,
            slide_tiles: (8, 6),
            resolution: 0.5,
            volume_dims: [32, 32, 16],
            modalities: vec![Modality::T2w],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCohort {
    pub root: PathBuf,
    pub labels: BTreeMap<String, Class>,
    pub train_cases: Vec<String>,
    pub test_cases: Vec<String>,
    pub slide_dir: PathBuf,
    pub volume_dir: PathBuf,
    pub labels_csv: PathBuf,
    pub train_labels_csv: PathBuf,
    pub test_labels_csv: PathBuf,
    pub positivity_csv: PathBuf,
    pub quota_csv: PathBuf,
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn tissue_pixel(class: Class, base: [f64; 3], phase: (u32, u32), x: u32, y: u32, noise: f64) -> Rgb<u8> {
    let (px, py) = (x + phase.0, y + phase.1);
    let shade = match class {
        Class::A => {
            if (py / 4) % 2 == 0 {
                22.0
            } else {
                -22.0
            }
        }
        Class::O => {
            let (dx, dy) = ((px % 8) as f64 - 3.5, (py % 8) as f64 - 3.5);
            if dx * dx + dy * dy < 5.0 {
                -60.0
            } else {
                12.0
            }
        }
        _ => {
            if ((px / 2) + (py / 2)) % 2 == 0 {
                30.0
            } else {
                -30.0
            }
        }
    };
    Rgb(base.map(|c| clamp_u8(c + shade + noise)))
}

fn base_color(class: Class) -> [f64; 3] {
    match class {
        Class::A => [215.0, 125.0, 165.0],
        Class::O => [150.0, 90.0, 200.0],
        _ => [95.0, 75.0, 160.0],
    }
}

/// Slide for one case: the last two tile columns are background, except
/// that the first of them is half tissue.
pub fn synth_slide(class: Class, tile: u32, tiles: (u32, u32), seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter: [f64; 3] = [0; 3].map(|_| rng.gen_range(-10.0..10.0));
    let base = {
        let b = base_color(class);
        [b[0] + jitter[0], b[1] + jitter[1], b[2] + jitter[2]]
    };
    let phase = (rng.gen_range(0..8), rng.gen_range(0..8));
    let (w, h) = (tile * tiles.0, tile * tiles.1);
    let tissue_cols = tiles.0.saturating_sub(2);
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let col = x / tile;
            let tissue = col < tissue_cols || (col == tissue_cols && x % tile < tile / 2);
            let noise = rng.gen_range(-8.0..8.0);
            let p = if tissue {
                tissue_pixel(class, base, phase, x, y, noise)
            } else {
                Rgb([0; 3].map(|_| clamp_u8(248.0 + noise / 2.0)))
            };
            img.put_pixel(x, y, p);
        }
    }
    img
}

/// Volume for one case and its positive slice range along Z.
pub fn synth_volume(case_id: &str, class: Class, dims: [usize; 3], seed: u64) -> Result<(Volume, ZRange)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [nx, ny, nz] = dims;
    if nx < 16 || ny < 16 || nz < 8 {
        return Err(Error::InvalidArgument(format!("synthetic volume too small: {dims:?}")));
    }
    let (cx, cy, cz) = (
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    );
    let (rx, ry, rz) = (nx as f64 * 0.42, ny as f64 * 0.42, nz as f64 * 0.45);
    let radius = nx.min(ny) as f64 * 0.16;
    let lx = cx + rng.gen_range(-2.0..2.0);
    let ly = cy + rng.gen_range(-2.0..2.0);
    let half = nz / 5;
    let z0 = nz / 2 - half + rng.gen_range(0..2);
    let range = ZRange {
        start: z0,
        end: z0 + 2 * half - 1,
    };
    let brain = 100.0 + rng.gen_range(-10.0..10.0);
    let mut data = vec![0f32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let e =
                    ((x as f64 - cx) / rx).powi(2) + ((y as f64 - cy) / ry).powi(2) + ((z as f64 - cz) / rz).powi(2);
                if e > 1.0 {
                    continue;
                }
                let mut v = brain + 8.0 * (x as f64 / nx as f64) + rng.gen_range(-5.0..5.0);
                let d = ((x as f64 - lx).powi(2) + (y as f64 - ly).powi(2)).sqrt();
                if (range.start..=range.end).contains(&z) && d <= radius {
                    v = match class {
                        Class::A => 210.0 + rng.gen_range(-5.0..5.0),
                        Class::O => {
                            if (x + y) % 2 == 0 {
                                230.0
                            } else {
                                60.0
                            }
                        }
                        _ => {
                            if d >= radius - 1.6 {
                                240.0
                            } else {
                                25.0
                            }
                        }
                    };
                }
                data[x + nx * (y + ny * z)] = v as f32;
            }
        }
    }
    Ok((Volume::new(case_id, dims, data)?, range))
}

/// Writes a cohort under `root`. Case ids are `case01`, `case02`, … with
/// classes cycling A, O, G.
pub fn generate_cohort(root: &Path, cfg: &SynthConfig) -> Result<SynthCohort> {
    if cfg.cases_per_class == 0 || cfg.held_out_per_class >= cfg.cases_per_class {
        return Err(Error::InvalidConfig(format!(
            "need held_out_per_class < cases_per_class, got {} and {}",
            cfg.held_out_per_class, cfg.cases_per_class
        )));
    }
    let slide_dir = root.join("slides");
    let volume_dir = root.join("volumes");
    for d in [&slide_dir, &volume_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut labels = BTreeMap::new();
    let mut positivity = PositivityTable::new();
    let mut train_cases = Vec::new();
    let mut test_cases = Vec::new();
    let n = cfg.cases_per_class * 3;
    for i in 0..n {
        let class = Class::SUBTYPES[i % 3];
        let case_id = format!("case{:02}", i + 1);
        let slide = synth_slide(
            class,
            cfg.tile_size,
            cfg.slide_tiles,
            derive_seed(cfg.seed, &format!("slide/{case_id}")),
        );
        let sp = slide_dir.join(format!("{case_id}.png"));
        slide.save(&sp).map_err(|e| Error::ImageDecode {
            path: sp.clone(),
            message: e.to_string(),
        })?;
        let mpp = slide_dir.join(format!("{case_id}.mpp"));
        fs::write(&mpp, format!("{}\n", cfg.resolution)).map_err(|e| Error::io(&mpp, e))?;
        for &m in &cfg.modalities {
            let seed = derive_seed(cfg.seed, &format!("volume/{case_id}/{m}"));
            let (vol, range) = synth_volume(&case_id, class, cfg.volume_dims, seed)?;
            write_volume(&volume_dir.join(format!("{case_id}_{m}.vol")), &vol)?;
            positivity.insert((case_id.clone(), m), vec![range]);
        }
        if i / 3 >= cfg.cases_per_class - cfg.held_out_per_class {
            test_cases.push(case_id.clone());
        } else {
            train_cases.push(case_id.clone());
        }
        labels.insert(case_id, class);
    }
    let cohort = SynthCohort {
        root: root.to_path_buf(),
        labels_csv: root.join("labels.csv"),
        train_labels_csv: root.join("labels_train.csv"),
        test_labels_csv: root.join("labels_test.csv"),
        positivity_csv: root.join("positivity.csv"),
        quota_csv: root.join("quota.csv"),
        slide_dir,
        volume_dir,
        train_cases: train_cases.clone(),
        test_cases: test_cases.clone(),
        labels: labels.clone(),
    };
    write_labels_csv(&cohort.labels_csv, labels.iter().map(|(c, l)| (c.as_str(), *l)))?;
    write_labels_csv(
        &cohort.train_labels_csv,
        train_cases.iter().map(|c| (c.as_str(), labels[c])),
    )?;
    write_labels_csv(
        &cohort.test_labels_csv,
        test_cases.iter().map(|c| (c.as_str(), labels[c])),
    )?;
    write_positivity_csv(&cohort.positivity_csv, &positivity)?;
    let quota = (cfg.slide_tiles.0.saturating_sub(2) * cfg.slide_tiles.1) as usize;
    let table = QuotaTable {
        entries: Class::SUBTYPES
            .iter()
            .map(|&label| QuotaEntry {
                resolution: cfg.resolution,
                label,
                quota,
            })
            .collect(),
    };
    table.write_csv(&cohort.quota_csv)?;
    Ok(cohort)
}
