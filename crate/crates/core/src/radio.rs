//! MRI volumes, intensity normalization and slice manifests.
//!
//! Two on-disk formats are read: uncompressed NIfTI-1 (through the `nifti`
//! crate) and a minimal raw format:
//!
//! ```text
//! "VOL1" | X: u32 | Y: u32 | Z: u32 | X·Y·Z × f32     (all little-endian)
//! ```
//!
//! with voxel `(x, y, z)` at index `x + X·(y + Y·z)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Axis as NdAxis, Ix3, ShapeBuilder};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::{Class, Modality};
use crate::error::{Error, Result};
use crate::imaging::{resize_bilinear, Image};
use crate::manifest::{balance_manifest, uniform_targets, BalanceMode, SliceRecord};
use crate::seed::derive_seed;

pub const VOLUME_MAGIC: [u8; 4] = *b"VOL1";
const RAW_HEADER: usize = 16;
pub const STD_FLOOR: f64 = 1e-6;
pub const DEFAULT_SLICES_PER_CLASS: usize = 1500;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub case_id: String,
    /// Parsed from a `<case>_<modality>` file stem when possible.
    pub modality: Option<Modality>,
    /// (X, Y, Z)
    pub dims: [usize; 3],
    /// Millimetres per voxel.
    pub spacing: [f32; 3],
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(case_id: impl Into<String>, dims: [usize; 3], data: Vec<f32>) -> Result<Volume> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "volume dims must be positive, got {dims:?}"
            )));
        }
        let n = checked_len(dims.map(|d| d as u64))?;
        if data.len() != n {
            return Err(Error::LengthMismatch(data.len(), n));
        }
        Ok(Volume {
            case_id: case_id.into(),
            modality: None,
            dims,
            spacing: [1.0; 3],
            data,
        })
    }

    pub fn with_modality(mut self, m: Modality) -> Volume {
        self.modality = Some(m);
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// 2-D section at `index` along `axis`, as a single-channel image.
    ///
    /// Rows and columns are the remaining axes in (X, Y, Z) order, slowest
    /// first: an axial (Z) slice has Y rows and X columns.
    pub fn section(&self, axis: Axis, index: usize) -> Result<Image> {
        let [nx, ny, nz] = self.dims;
        let depth = self.dims[axis as usize];
        if index >= depth {
            return Err(Error::InvalidArgument(format!(
                "slice {index} out of range for axis {axis:?} of length {depth}"
            )));
        }
        let (rows, cols) = match axis {
            Axis::X => (nz, ny),
            Axis::Y => (nz, nx),
            Axis::Z => (ny, nx),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let (x, y, z) = match axis {
                    Axis::X => (index, c, r),
                    Axis::Y => (c, index, r),
                    Axis::Z => (c, r, index),
                };
                data.push(self.at(x, y, z));
            }
        }
        Image::new(1, rows, cols, data)
    }
}

fn checked_len(dims: [u64; 3]) -> Result<usize> {
    dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .and_then(|v| v.checked_mul(4))
        .and_then(|bytes| usize::try_from(bytes).ok())
        .map(|bytes| bytes / 4)
        .ok_or(Error::DimOverflow(dims))
}

/// Splits `<case>_<modality>` stems; other stems give `(stem, None)`.
pub fn parse_volume_stem(stem: &str) -> (String, Option<Modality>) {
    if let Some((case, m)) = stem.rsplit_once('_') {
        if let Ok(m) = m.parse::<Modality>() {
            if m.is_radiology() && !case.is_empty() {
                return (case.to_string(), Some(m));
            }
        }
    }
    (stem.to_string(), None)
}

fn volume_stem(path: &Path) -> String {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let name = name.strip_suffix(".gz").unwrap_or(name);
    match name.rsplit_once('.') {
        Some((stem, _)) => stem.to_string(),
        None => name.to_string(),
    }
}

pub fn decode_raw(bytes: &[u8]) -> Result<([usize; 3], Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, need a 4-byte magic", bytes.len())));
    }
    if bytes[..4] != VOLUME_MAGIC {
        return Err(Error::BadMagic {
            expected: VOLUME_MAGIC,
            found: bytes[..4].try_into().expect("4 bytes"),
        });
    }
    if bytes.len() < RAW_HEADER {
        return Err(Error::Truncated(format!(
            "{} bytes, header needs {RAW_HEADER}",
            bytes.len()
        )));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as u64;
    let dims64 = [u(4), u(8), u(12)];
    if dims64.contains(&0) {
        return Err(Error::Format(format!("volume dims must be positive, got {dims64:?}")));
    }
    let n = checked_len(dims64)?;
    let payload = &bytes[RAW_HEADER..];
    if payload.len() != n * 4 {
        return Err(Error::LengthMismatch(payload.len(), n * 4));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims64.map(|d| d as usize), data))
}

pub fn encode_raw(dims: [usize; 3], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER + 4 * data.len());
    out.extend_from_slice(&VOLUME_MAGIC);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn is_nifti_name(path: &Path) -> bool {
    let name = path.to_string_lossy().to_ascii_lowercase();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn read_nifti(path: &Path) -> Result<([usize; 3], [f32; 3], Vec<f32>)> {
    let fmt = |e: nifti::NiftiError| Error::Format(format!("{}: {e}", path.display()));
    let obj = ReaderOptions::new().read_file(path).map_err(fmt)?;
    let pixdim = obj.header().pixdim;
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(fmt)?;
    let arr = match arr.ndim() {
        2 => arr.insert_axis(NdAxis(2)),
        4 if arr.shape()[3] == 1 => arr.index_axis_move(NdAxis(3), 0),
        _ => arr,
    };
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::Format(format!("{}: expected a 3-D volume", path.display())))?;
    let dims = [arr.shape()[0], arr.shape()[1], arr.shape()[2]];
    let mut data = Vec::with_capacity(arr.len());
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data.push(arr[[x, y, z]]);
            }
        }
    }
    let spacing = [pixdim[1], pixdim[2], pixdim[3]].map(|s| if s > 0.0 { s } else { 1.0 });
    Ok((dims, spacing, data))
}

/// Reads a raw `VOL1` or NIfTI-1 volume. Case and modality come from the
/// file stem (`<case>_<modality>`).
pub fn read_volume(path: &Path) -> Result<Volume> {
    let (case_id, modality) = parse_volume_stem(&volume_stem(path));
    let head = {
        use std::io::Read;
        let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut b = [0u8; 4];
        let n = f.read(&mut b).map_err(|e| Error::io(path, e))?;
        b[..n].to_vec()
    };
    let (dims, spacing, data) = if head == VOLUME_MAGIC || !is_nifti_name(path) {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (dims, data) = decode_raw(&bytes)?;
        (dims, [1.0; 3], data)
    } else {
        read_nifti(path)?
    };
    Ok(Volume {
        case_id,
        modality,
        dims,
        spacing,
        data,
    })
}

/// Writes NIfTI-1 (f32) for `.nii` paths, the raw format otherwise.
pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    if is_nifti_name(path) {
        let arr = Array3::from_shape_vec(v.dims.f(), v.data.clone()).map_err(|e| Error::Format(e.to_string()))?;
        nifti::writer::WriterOptions::new(path)
            .write_nifti(&arr)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    } else {
        fs::write(path, encode_raw(v.dims, &v.data)).map_err(|e| Error::io(path, e))
    }
}

/// Z-scores the nonzero voxels; zeros (outside the brain) stay zero.
pub fn znormalize(v: &Volume) -> Volume {
    let (mut n, mut sum) = (0usize, 0f64);
    for &x in v.data.iter().filter(|&&x| x != 0.0) {
        n += 1;
        sum += x as f64;
    }
    if n == 0 {
        return v.clone();
    }
    let mean = sum / n as f64;
    let var = v
        .data
        .iter()
        .filter(|&&x| x != 0.0)
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt().max(STD_FLOOR);
    let mut out = v.clone();
    for x in out.data.iter_mut().filter(|x| **x != 0.0) {
        *x = ((*x as f64 - mean) / std) as f32;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Axis {
    X = 0,
    Y = 1,
    #[default]
    Z = 2,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Axis> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x" | "sagittal" => Ok(Axis::X),
            "y" | "coronal" => Ok(Axis::Y),
            "z" | "axial" => Ok(Axis::Z),
            _ => Err(Error::InvalidArgument(format!("unknown axis {s:?}"))),
        }
    }
}

/// Inclusive range of positive slice indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ZRange {
    pub start: usize,
    pub end: usize,
}

/// Sorts ranges and rejects inverted, overlapping or out-of-range ones.
pub fn validate_ranges(ranges: &[ZRange], depth: usize) -> Result<Vec<ZRange>> {
    let mut sorted = ranges.to_vec();
    sorted.sort();
    for r in &sorted {
        if r.start > r.end {
            return Err(Error::InvalidRanges(format!("inverted range [{}, {}]", r.start, r.end)));
        }
        if r.end >= depth {
            return Err(Error::InvalidRanges(format!(
                "range [{}, {}] exceeds depth {depth}",
                r.start, r.end
            )));
        }
    }
    for w in sorted.windows(2) {
        if w[1].start <= w[0].end {
            return Err(Error::InvalidRanges(format!(
                "ranges [{}, {}] and [{}, {}] overlap",
                w[0].start, w[0].end, w[1].start, w[1].end
            )));
        }
    }
    Ok(sorted)
}

#[derive(Debug, Deserialize, Serialize)]
struct PositivityRow {
    case_id: String,
    modality: String,
    z_start: usize,
    z_end: usize,
}

/// Positive slice ranges keyed by (case, modality).
pub type PositivityTable = BTreeMap<(String, Modality), Vec<ZRange>>;

/// Reads a `case_id,modality,z_start,z_end` CSV (inclusive ends).
pub fn read_positivity_csv(path: &Path) -> Result<PositivityTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = PositivityTable::new();
    for row in rdr.deserialize() {
        let row: PositivityRow = row?;
        let m: Modality = row.modality.parse()?;
        out.entry((row.case_id, m)).or_default().push(ZRange {
            start: row.z_start,
            end: row.z_end,
        });
    }
    Ok(out)
}

pub fn write_positivity_csv(path: &Path, table: &PositivityTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for ((case_id, m), ranges) in table {
        for r in ranges {
            w.serialize(PositivityRow {
                case_id: case_id.clone(),
                modality: m.to_string(),
                z_start: r.start,
                z_end: r.end,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct SliceOptions {
    pub input_size: usize,
    pub axis: Axis,
    pub root: PathBuf,
    pub slice_subdir: String,
    pub write_slices: bool,
}

impl SliceOptions {
    pub fn new(root: impl Into<PathBuf>, input_size: usize) -> Self {
        SliceOptions {
            input_size,
            axis: Axis::Z,
            root: root.into(),
            slice_subdir: "slices".into(),
            write_slices: true,
        }
    }
}

/// Min-max scales to [0, 1]; a constant image becomes all zeros.
pub fn minmax_scale(img: &mut Image) {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    for v in &mut img.data {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Normalized, scaled and resized network input for one slice.
pub fn prepare_slice(normalized: &Volume, axis: Axis, index: usize, size: usize) -> Result<Image> {
    let mut img = normalized.section(axis, index)?;
    minmax_scale(&mut img);
    let mut img = resize_bilinear(&img, size, size);
    // bilinear weights are convex, but rounding may step just outside
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(img)
}

/// Every slice along the configured axis: inside a positive range it takes
/// `case_label`, otherwise `N`. Images are written when `opts.write_slices`.
pub fn extract_slices(
    volume: &Volume,
    modality: Modality,
    positive: &[ZRange],
    case_label: Class,
    opts: &SliceOptions,
) -> Result<Vec<SliceRecord>> {
    if !case_label.is_subtype() {
        return Err(Error::InvalidArgument(format!(
            "case label must be A, O or G, found {case_label}"
        )));
    }
    let depth = volume.dims[opts.axis as usize];
    let ranges = validate_ranges(positive, depth)?;
    let records: Vec<SliceRecord> = (0..depth)
        .map(|z| SliceRecord {
            case_id: volume.case_id.clone(),
            modality,
            z_index: z,
            label: if ranges.iter().any(|r| r.start <= z && z <= r.end) {
                case_label
            } else {
                Class::N
            },
            slice_path: format!("{}/{}_{}_z{:03}.png", opts.slice_subdir, volume.case_id, modality, z),
        })
        .collect();
    if opts.write_slices {
        write_slices(volume, &records, opts)?;
    }
    Ok(records)
}

/// Writes the image of every record in `records`, all taken from `volume`.
pub fn write_slices(volume: &Volume, records: &[SliceRecord], opts: &SliceOptions) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let normalized = znormalize(volume);
    let dir = opts.root.join(&opts.slice_subdir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    records.par_iter().try_for_each(|r| {
        let img = prepare_slice(&normalized, opts.axis, r.z_index, opts.input_size)?;
        let path = opts.root.join(&r.slice_path);
        img.to_gray16()?.save(&path).map_err(|e| Error::ImageDecode {
            path: path.clone(),
            message: e.to_string(),
        })
    })
}

/// Per-modality seeded balancing to `target` slices per class.
pub fn balance_slices(
    records: &[SliceRecord],
    target: usize,
    mode: BalanceMode,
    seed: u64,
) -> Result<Vec<SliceRecord>> {
    let mut keep: Vec<(usize, SliceRecord)> = Vec::with_capacity(records.len());
    let modalities: std::collections::BTreeSet<Modality> = records.iter().map(|r| r.modality).collect();
    for m in modalities {
        let (idx, group): (Vec<usize>, Vec<SliceRecord>) = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.modality == m)
            .map(|(i, r)| (i, r.clone()))
            .unzip();
        let picked = balance_manifest(&group, &uniform_targets(target), mode, derive_seed(seed, m.as_str()))?;
        // balance_manifest preserves order, so walk both lists together
        let mut it = picked.into_iter().peekable();
        for (i, r) in idx.into_iter().zip(group) {
            if it.peek() == Some(&r) {
                keep.push((i, it.next().expect("peeked")));
            }
        }
    }
    keep.sort_by_key(|(i, _)| *i);
    Ok(keep.into_iter().map(|(_, r)| r).collect())
}

/// Lists `<case>_<modality>.{vol,nii}` volumes of one modality, sorted by case.
pub fn list_volumes(dir: &Path, modality: Modality) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if !p.is_file() {
            continue;
        }
        if let (_, Some(m)) = parse_volume_stem(&volume_stem(&p)) {
            if m == modality {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
