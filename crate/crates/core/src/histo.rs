//! Slide tiling, tile quality control and tile manifests.
//!
//! A pixel is *bright* iff all three channels exceed 204 (80% of 255).
//! Fractions are compared with exact integer arithmetic, so the 95% and 80%
//! boundaries are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{Error, Result};
use crate::manifest::TileRecord;
use crate::seed::derive_seed;

pub const BRIGHT_LEVEL: u8 = 204;
pub const DEFAULT_TILE_SIZE: u32 = 2000;

#[inline]
pub fn is_bright(p: [u8; 3]) -> bool {
    p[0] > BRIGHT_LEVEL && p[1] > BRIGHT_LEVEL && p[2] > BRIGHT_LEVEL
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridCell {
    pub row: u32,
    pub col: u32,
    pub x: u32,
    pub y: u32,
}

/// Non-overlapping tiles fully contained in the image, in row-major order.
pub fn tile_grid(width: u32, height: u32, tile: u32) -> Result<Vec<GridCell>> {
    if tile == 0 {
        return Err(Error::InvalidArgument("tile size must be positive".into()));
    }
    let (rows, cols) = (height / tile, width / tile);
    Ok((0..rows)
        .flat_map(|row| {
            (0..cols).map(move |col| GridCell {
                row,
                col,
                x: col * tile,
                y: row * tile,
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Positive,
    NegativeN,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NReason {
    Background,
    PenMark,
    Hemorrhage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcVerdict {
    pub background_fraction: f64,
    pub bright_pixel_fraction: f64,
    pub verdict: Verdict,
    pub reason: Option<NReason>,
}

/// Optional artifact heuristics layered on the background rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcConfig {
    /// Tissue whose mean (max − min channel) spread is below this many
    /// 8-bit levels is flagged as a pen mark.
    pub pen_mark_spread: Option<f64>,
    /// Tissue whose mean R exceeds mean(G, B) by more than this many levels
    /// is flagged as hemorrhage.
    pub hemorrhage_red_excess: Option<f64>,
}

impl Default for QcConfig {
    fn default() -> Self {
        QcConfig {
            pen_mark_spread: Some(10.0),
            hemorrhage_red_excess: None,
        }
    }
}

impl QcConfig {
    /// Background rule only.
    pub fn strict() -> Self {
        QcConfig {
            pen_mark_spread: None,
            hemorrhage_red_excess: None,
        }
    }
}

struct PixelStats {
    total: u64,
    bright: u64,
    spread_sum: u64,
    red_excess_sum: i64,
}

fn pixel_stats(tile: &RgbImage) -> PixelStats {
    let mut s = PixelStats {
        total: 0,
        bright: 0,
        spread_sum: 0,
        red_excess_sum: 0,
    };
    for p in tile.pixels() {
        s.total += 1;
        if is_bright(p.0) {
            s.bright += 1;
            continue;
        }
        let [r, g, b] = p.0;
        let (mx, mn) = (r.max(g).max(b), r.min(g).min(b));
        s.spread_sum += (mx - mn) as u64;
        // 2R − (G + B), i.e. twice the red excess
        s.red_excess_sum += 2 * r as i64 - g as i64 - b as i64;
    }
    s
}

/// Background-rule verdict: N iff strictly more than 95% of pixels are bright.
pub fn qc_tile(tile: &RgbImage) -> QcVerdict {
    qc_tile_with(tile, &QcConfig::strict())
}

pub fn qc_tile_with(tile: &RgbImage, cfg: &QcConfig) -> QcVerdict {
    let s = pixel_stats(tile);
    let frac = if s.total == 0 {
        1.0
    } else {
        s.bright as f64 / s.total as f64
    };
    let mut v = QcVerdict {
        background_fraction: frac,
        bright_pixel_fraction: frac,
        verdict: Verdict::Positive,
        reason: None,
    };
    if s.total == 0 || s.bright * 100 > 95 * s.total {
        v.verdict = Verdict::NegativeN;
        v.reason = Some(NReason::Background);
        return v;
    }
    let tissue = (s.total - s.bright) as f64;
    if let Some(limit) = cfg.pen_mark_spread {
        if (s.spread_sum as f64) < limit * tissue {
            v.verdict = Verdict::NegativeN;
            v.reason = Some(NReason::PenMark);
            return v;
        }
    }
    if let Some(limit) = cfg.hemorrhage_red_excess {
        if s.red_excess_sum as f64 > 2.0 * limit * tissue {
            v.verdict = Verdict::NegativeN;
            v.reason = Some(NReason::Hemorrhage);
        }
    }
    v
}

/// Fraction of non-bright pixels.
pub fn cellularity_fraction(tile: &RgbImage) -> f64 {
    let s = pixel_stats(tile);
    if s.total == 0 {
        return 0.0;
    }
    (s.total - s.bright) as f64 / s.total as f64
}

fn is_cellular(s: &PixelStats) -> bool {
    // (total − bright) / total > 0.8
    (s.total - s.bright) * 5 > 4 * s.total
}

/// What extraction does with one tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TileFate {
    /// Labeled with the slide's class.
    Positive,
    /// Labeled `N`.
    Negative,
    /// Passes QC but is not cellular enough to carry the slide label.
    Dropped,
}

pub fn tile_fate(tile: &RgbImage, cfg: &QcConfig) -> TileFate {
    let v = qc_tile_with(tile, cfg);
    if v.verdict == Verdict::NegativeN {
        return TileFate::Negative;
    }
    if is_cellular(&pixel_stats(tile)) {
        TileFate::Positive
    } else {
        TileFate::Dropped
    }
}

/// A decoded slide plus its provenance.
#[derive(Clone, Debug)]
pub struct Slide {
    pub case_id: String,
    pub path: PathBuf,
    pub image: RgbImage,
    /// Microns per pixel.
    pub resolution: f64,
}

/// Reads `<stem>.mpp` next to `path` if present.
pub fn sidecar_resolution(path: &Path) -> Result<Option<f64>> {
    let side = path.with_extension("mpp");
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mpp: f64 = text
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{}: not a number", side.display())))?;
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::Format(format!(
            "{}: resolution must be positive",
            side.display()
        )));
    }
    Ok(Some(mpp))
}

pub fn decode_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match img {
        DynamicImage::ImageRgb8(rgb) => Ok(rgb),
        DynamicImage::ImageRgba8(_) => Ok(img.to_rgb8()),
        other => Err(Error::NonRgb(format!("{:?} in {}", other.color(), path.display()))),
    }
}

/// Loads a PNG/TIFF slide; the case id is the file stem. The `.mpp`
/// sidecar, when present, overrides `default_resolution`.
pub fn load_slide(path: &Path, default_resolution: f64) -> Result<Slide> {
    let image = decode_rgb(path)?;
    let case_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("no file stem in {}", path.display())))?
        .to_string();
    Ok(Slide {
        case_id,
        path: path.to_path_buf(),
        image,
        resolution: sidecar_resolution(path)?.unwrap_or(default_resolution),
    })
}

/// Per-case positive-tile quotas keyed by (resolution, class).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotaTable {
    pub entries: Vec<QuotaEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuotaEntry {
    pub resolution: f64,
    pub label: Class,
    pub quota: usize,
}

impl Default for QuotaTable {
    /// Tiles selected per case at 0.25 and 0.50 µm/px.
    fn default() -> Self {
        let e = |resolution, label, quota| QuotaEntry {
            resolution,
            label,
            quota,
        };
        QuotaTable {
            entries: vec![
                e(0.25, Class::O, 10),
                e(0.25, Class::A, 10),
                e(0.25, Class::G, 31),
                e(0.50, Class::O, 5),
                e(0.50, Class::A, 20),
                e(0.50, Class::G, 50),
            ],
        }
    }
}

impl QuotaTable {
    pub fn quota(&self, resolution: f64, label: Class) -> Result<usize> {
        self.entries
            .iter()
            .find(|e| e.label == label && (e.resolution - resolution).abs() < 1e-9)
            .map(|e| e.quota)
            .ok_or_else(|| Error::InvalidConfig(format!("no quota for class {label} at {resolution} µm/px")))
    }

    /// Reads a `resolution,label,quota` CSV.
    pub fn read_csv(path: &Path) -> Result<QuotaTable> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let entries = rdr.deserialize().collect::<std::result::Result<Vec<QuotaEntry>, _>>()?;
        if entries.is_empty() {
            return Err(Error::EmptyInput("quota table"));
        }
        Ok(QuotaTable { entries })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct ExtractOptions {
    pub tile_size: u32,
    pub seed: u64,
    pub qc: QcConfig,
    /// Directory the manifest lives in; tile paths are recorded relative to it.
    pub root: PathBuf,
    /// Subdirectory of `root` receiving tile PNGs.
    pub tile_subdir: String,
    pub write_tiles: bool,
}

impl ExtractOptions {
    pub fn new(root: impl Into<PathBuf>, seed: u64) -> Self {
        ExtractOptions {
            tile_size: DEFAULT_TILE_SIZE,
            seed,
            qc: QcConfig::default(),
            root: root.into(),
            tile_subdir: "tiles".into(),
            write_tiles: true,
        }
    }
}

/// Tiles one slide: up to `quota` cellular tiles labeled `slide_label`
/// (seeded subsample, kept in row-major order) plus every `N` tile.
pub fn extract_tiles(
    slide: &Slide,
    slide_label: Class,
    quota: usize,
    opts: &ExtractOptions,
) -> Result<Vec<TileRecord>> {
    if !slide_label.is_subtype() {
        return Err(Error::InvalidArgument(format!(
            "slide label must be A, O or G, found {slide_label}"
        )));
    }
    let grid = tile_grid(slide.image.width(), slide.image.height(), opts.tile_size)?;
    let t = opts.tile_size;
    let fates: Vec<TileFate> = grid
        .par_iter()
        .with_min_len(4)
        .map(|c| {
            let view = image::imageops::crop_imm(&slide.image, c.x, c.y, t, t).to_image();
            tile_fate(&view, &opts.qc)
        })
        .collect();

    let positives: Vec<usize> = (0..grid.len()).filter(|&i| fates[i] == TileFate::Positive).collect();
    let mut selected = vec![false; grid.len()];
    if positives.len() > quota {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, &slide.case_id));
        for k in rand::seq::index::sample(&mut rng, positives.len(), quota) {
            selected[positives[k]] = true;
        }
    } else {
        positives.iter().for_each(|&i| selected[i] = true);
    }

    let mut records = Vec::new();
    for (i, c) in grid.iter().enumerate() {
        let label = match fates[i] {
            TileFate::Positive if selected[i] => slide_label,
            TileFate::Negative => Class::N,
            _ => continue,
        };
        let name = format!("{}_r{}_c{}.png", slide.case_id, c.row, c.col);
        let rel = format!("{}/{}", opts.tile_subdir, name);
        records.push(TileRecord {
            case_id: slide.case_id.clone(),
            source_path: slide.path.display().to_string(),
            row: c.row as usize,
            col: c.col as usize,
            pixel_resolution: slide.resolution,
            label,
            tile_path: rel,
        });
    }
    if opts.write_tiles && !records.is_empty() {
        let dir = opts.root.join(&opts.tile_subdir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        records.par_iter().try_for_each(|r| {
            let view = image::imageops::crop_imm(&slide.image, r.col as u32 * t, r.row as u32 * t, t, t).to_image();
            let path = opts.root.join(&r.tile_path);
            view.save(&path).map_err(|e| Error::ImageDecode {
                path: path.clone(),
                message: e.to_string(),
            })
        })?;
    }
    Ok(records)
}

/// Lists slide rasters (png/tif/tiff) in a directory, sorted by file name.
pub fn list_slides(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png" | "tif" | "tiff")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    const WHITE: Rgb<u8> = Rgb([250, 250, 250]);
    const TISSUE: Rgb<u8> = Rgb([150, 60, 170]);

    /// `bright` of the 400 pixels in a 20×20 tile are white, the rest tissue.
    fn tile_with_bright(bright: u32) -> RgbImage {
        RgbImage::from_fn(20, 20, |x, y| if y * 20 + x < bright { WHITE } else { TISSUE })
    }

    #[test]
    fn grid_counts() {
        assert_eq!(tile_grid(4000, 4000, 2000).unwrap().len(), 4);
        assert_eq!(tile_grid(4100, 4100, 2000).unwrap().len(), 4);
        assert!(tile_grid(1999, 5000, 2000).unwrap().is_empty());
        let g = tile_grid(6000, 4000, 2000).unwrap();
        assert_eq!(
            g[4],
            GridCell {
                row: 1,
                col: 1,
                x: 2000,
                y: 2000
            }
        );
        assert!(tile_grid(10, 10, 0).is_err());
    }

    #[test]
    fn bright_boundary() {
        assert!(!is_bright([204, 255, 255]));
        assert!(is_bright([205, 205, 205]));
    }

    #[test]
    fn qc_boundaries() {
        let white = RgbImage::from_pixel(8, 8, WHITE);
        let v = qc_tile(&white);
        assert_eq!(v.verdict, Verdict::NegativeN);
        assert_eq!(v.bright_pixel_fraction, 1.0);
        // exactly 95%: 380 of 400
        assert_eq!(qc_tile(&tile_with_bright(380)).verdict, Verdict::Positive);
        assert_eq!(qc_tile(&tile_with_bright(381)).verdict, Verdict::NegativeN);
        assert_eq!(qc_tile(&tile_with_bright(384)).verdict, Verdict::NegativeN);
    }

    #[test]
    fn one_pixel_flip() {
        let mut t = tile_with_bright(380);
        // pixel 380 is tissue; push it to the bright side one channel at a time
        t.put_pixel(0, 19, Rgb([205, 205, 204]));
        assert_eq!(qc_tile(&t).verdict, Verdict::Positive);
        t.put_pixel(0, 19, Rgb([205, 205, 205]));
        assert_eq!(qc_tile(&t).verdict, Verdict::NegativeN);
    }

    #[test]
    fn cellularity() {
        assert_eq!(cellularity_fraction(&RgbImage::from_pixel(4, 4, WHITE)), 0.0);
        assert_eq!(
            cellularity_fraction(&RgbImage::from_pixel(4, 4, Rgb([10, 10, 10]))),
            1.0
        );
        assert_eq!(cellularity_fraction(&tile_with_bright(200)), 0.5);
        // exactly 80% cellular is not enough
        assert_eq!(tile_fate(&tile_with_bright(80), &QcConfig::strict()), TileFate::Dropped);
        assert_eq!(
            tile_fate(&tile_with_bright(79), &QcConfig::strict()),
            TileFate::Positive
        );
        assert_eq!(
            tile_fate(&tile_with_bright(200), &QcConfig::strict()),
            TileFate::Dropped
        );
    }

    #[test]
    fn artifact_heuristics() {
        let gray = RgbImage::from_pixel(8, 8, Rgb([80, 82, 85]));
        assert_eq!(qc_tile(&gray).verdict, Verdict::Positive);
        let v = qc_tile_with(&gray, &QcConfig::default());
        assert_eq!((v.verdict, v.reason), (Verdict::NegativeN, Some(NReason::PenMark)));
        let blood = RgbImage::from_pixel(8, 8, Rgb([200, 40, 50]));
        assert_eq!(qc_tile_with(&blood, &QcConfig::default()).verdict, Verdict::Positive);
        let cfg = QcConfig {
            hemorrhage_red_excess: Some(60.0),
            ..QcConfig::default()
        };
        assert_eq!(qc_tile_with(&blood, &cfg).reason, Some(NReason::Hemorrhage));
        assert_eq!(
            qc_tile_with(&RgbImage::from_pixel(8, 8, TISSUE), &cfg).verdict,
            Verdict::Positive
        );
    }

    fn half_slide() -> Slide {
        // 4×2 grid of 10 px tiles: left half tissue, right half white
        let image = RgbImage::from_fn(40, 20, |x, _| if x < 20 { TISSUE } else { WHITE });
        Slide {
            case_id: "case7".into(),
            path: PathBuf::from("case7.png"),
            image,
            resolution: 0.25,
        }
    }

    fn opts() -> ExtractOptions {
        ExtractOptions {
            tile_size: 10,
            write_tiles: false,
            ..ExtractOptions::new("/tmp/unused", 1)
        }
    }

    #[test]
    fn half_tissue_slide() {
        let recs = extract_tiles(&half_slide(), Class::G, 10, &opts()).unwrap();
        assert_eq!(recs.len(), 8);
        for r in &recs {
            let expect = if r.col < 2 { Class::G } else { Class::N };
            assert_eq!(r.label, expect, "tile r{} c{}", r.row, r.col);
        }
        assert_eq!(recs[0].tile_path, "tiles/case7_r0_c0.png");
    }

    #[test]
    fn quota_zero_keeps_only_n() {
        let recs = extract_tiles(&half_slide(), Class::A, 0, &opts()).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.label == Class::N));
    }

    #[test]
    fn quota_subsample_is_seeded_and_ordered() {
        let image = RgbImage::from_pixel(100, 100, TISSUE);
        let slide = Slide {
            case_id: "c".into(),
            path: "c.png".into(),
            image,
            resolution: 0.5,
        };
        let a = extract_tiles(&slide, Class::O, 5, &opts()).unwrap();
        let b = extract_tiles(&slide, Class::O, 5, &opts()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        let keys: Vec<_> = a.iter().map(|r| (r.row, r.col)).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let other = ExtractOptions { seed: 2, ..opts() };
        assert_ne!(extract_tiles(&slide, Class::O, 5, &other).unwrap(), a);
    }

    #[test]
    fn quota_table_defaults() {
        let q = QuotaTable::default();
        assert_eq!(q.quota(0.25, Class::G).unwrap(), 31);
        assert_eq!(q.quota(0.5, Class::A).unwrap(), 20);
        assert!(q.quota(1.0, Class::A).is_err());
    }

    #[test]
    fn writes_tiles_under_root() {
        let dir = tempfile::tempdir().unwrap();
        let o = ExtractOptions {
            tile_size: 10,
            ..ExtractOptions::new(dir.path(), 1)
        };
        let recs = extract_tiles(&half_slide(), Class::G, 10, &o).unwrap();
        for r in &recs {
            let img = decode_rgb(&dir.path().join(&r.tile_path)).unwrap();
            assert_eq!(img.dimensions(), (10, 10));
        }
    }

    #[test]
    fn non_rgb_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        image::GrayImage::from_pixel(4, 4, image::Luma([9])).save(&p).unwrap();
        assert_eq!(load_slide(&p, 0.25).unwrap_err().class(), "non_rgb");
    }
}
