//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use glioma_core::class::{Class, Modality};
use glioma_core::dcn::{build_dcn, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, DcnConfig};
use glioma_core::ensemble::{aggregate_slices, aggregate_tiles, fuse_modalities, FusionWeights, Prediction};
use glioma_core::histo::{
    cellularity_fraction, extract_tiles, qc_tile, tile_fate, tile_grid, ExtractOptions, QcConfig, Slide, TileFate,
    Verdict,
};
use glioma_core::imaging::Image;
use glioma_core::manifest::{read_jsonl, write_jsonl, SliceRecord, TileRecord};
use glioma_core::metrics::{balanced_accuracy, cohens_kappa, confusion_matrix, evaluate, f1_scores, Confusion};
use glioma_core::tensor::{adam_step, AdamState, Graph, Tensor};
use glioma_core::trainer::{fit, predict_batch, write_curves_csv, AugmentFlags, Sample, TrainConfig};
use glioma_core::verify::{run_battery, CaseKind, CHAIN_TOLERANCE, SMOOTH_TOLERANCE};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || {
        format!("{what} took {elapsed:.1?}, limit {limit:?}")
    })
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    let t = Instant::now();
    let results = run_battery(2024, 100).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{:?}@{} {:.2e}", r.kind, r.seed, r.max_rel_error))
        .collect();
    ensure(failed.is_empty(), || format!("failed cases: {}", failed.join(", ")))?;
    for r in &results {
        let limit = if r.kind.is_smooth() {
            SMOOTH_TOLERANCE
        } else {
            CHAIN_TOLERANCE
        };
        ensure(r.tolerance <= limit, || {
            format!("{:?} checked at loose tolerance {}", r.kind, r.tolerance)
        })?;
    }
    ensure(results.iter().any(|r| r.kind == CaseKind::DenseBlock), || {
        "no dense-block case ran".into()
    })?;
    within(elapsed, Duration::from_secs(120), "gradient battery")?;
    let worst = |smooth: bool| {
        results
            .iter()
            .filter(|r| r.kind.is_smooth() == smooth)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    Ok(format!(
        "{} cases, worst smooth {:.1e}, worst chain {:.1e}, {elapsed:.1?}",
        results.len(),
        worst(true),
        worst(false)
    ))
}

// ---------------------------------------------------------------- 2

/// Channels entering and leaving each block, from first principles.
fn expected_blocks(cfg: &DcnConfig) -> (Vec<(usize, usize)>, usize) {
    let mut c = cfg.init_features;
    let mut out = Vec::new();
    for (i, &layers) in cfg.block_config.iter().enumerate() {
        let end = c + layers * cfg.growth_rate;
        out.push((c, end));
        c = if i + 1 < cfg.block_config.len() {
            (end as f64 * cfg.compression).floor() as usize
        } else {
            end
        };
    }
    (out, c)
}

fn architecture() -> Outcome {
    let t = Instant::now();
    for (cfg, width) in [(DcnConfig::dcn1(), 128), (DcnConfig::dcn2(), 1104)] {
        let model = build_dcn(&cfg, 0).map_err(|e| e.to_string())?;
        ensure(model.classifier_width() == width, || {
            format!("classifier width {} != {width}", model.classifier_width())
        })?;
        ensure(expected_blocks(&cfg).1 == width, || {
            "reference arithmetic disagrees".into()
        })?;
    }
    let dcn2 = build_dcn(&DcnConfig::dcn2(), 0).map_err(|e| e.to_string())?;
    let chain: Vec<(usize, usize)> = dcn2.block_channels();
    ensure(chain == vec![(48, 192), (96, 384), (192, 1056), (528, 1104)], || {
        format!("DCN2 blocks {chain:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..50 {
        let blocks = rng.gen_range(1..=4);
        let cfg = DcnConfig {
            block_config: (0..blocks).map(|_| rng.gen_range(1..=4)).collect(),
            growth_rate: rng.gen_range(1..=12),
            init_features: rng.gen_range(2..=24),
            bottleneck_factor: rng.gen_range(1..=4),
            dropout: 0.0,
            compression: [0.25, 0.5, 0.75, 1.0][rng.gen_range(0..4)],
            num_classes: 4,
            input_size: 64,
            in_channels: rng.gen_range(1..=3),
        };
        if cfg.validate().is_err() {
            continue;
        }
        let model = build_dcn(&cfg, i).map_err(|e| e.to_string())?;
        let (expected, width) = expected_blocks(&cfg);
        let got = model.block_channels();
        ensure(got == expected, || {
            format!("config {cfg:?}: blocks {got:?}, expected {expected:?}")
        })?;
        for ((c_in, c_out), &layers) in got.iter().zip(&cfg.block_config) {
            ensure(*c_out == c_in + layers * cfg.growth_rate, || {
                format!("c_out != c_in + L·k in {cfg:?}")
            })?;
        }
        ensure(model.classifier_width() == width, || {
            format!("width mismatch in {cfg:?}")
        })?;
        let x = Tensor::full(&[2, cfg.in_channels, 64, 64], 0.5);
        let logits = model.predict_logits(&x).map_err(|e| e.to_string())?;
        ensure(logits.shape() == [2, 4], || {
            format!("logits shape {:?}", logits.shape())
        })?;
    }
    Ok(format!("DCN1 128, DCN2 1104, 50 random configs, {:.1?}", t.elapsed()))
}

// ---------------------------------------------------------------- 3

fn overfit_set() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0f32, 0.05).expect("valid sigma");
    let mut out = Vec::new();
    for (ci, &class) in Class::ALL.iter().enumerate() {
        let mean = 0.2 + 0.2 * ci as f32;
        for k in 0..16 {
            let data = (0..3 * 64 * 64)
                .map(|_| (mean + noise.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            out.push(Sample {
                case_id: format!("{class}{k}"),
                label: class,
                image: Image::new(3, 64, 64, data).expect("shape"),
            });
        }
    }
    out
}

fn overfit() -> Outcome {
    let t = Instant::now();
    let samples = overfit_set();
    let cfg = TrainConfig {
        epochs: 50,
        batch_size: 16,
        lr: 1e-3,
        input_size: Some(64),
        augment: AugmentFlags::none(),
        seed: 11,
        ..TrainConfig::histology()
    };
    let val: Vec<Sample> = samples.iter().step_by(8).cloned().collect();
    let a = fit(&cfg, &samples, &val).map_err(|e| e.to_string())?;
    let b = fit(&cfg, &samples, &val).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_curves_csv(&pa, &a.curves).map_err(|e| e.to_string())?;
    write_curves_csv(&pb, &b.curves).map_err(|e| e.to_string())?;
    let same_curves = fs::read(&pa).ok() == fs::read(&pb).ok()
        && a.curves.iter().zip(&b.curves).all(|(x, y)| {
            [x.train_loss, x.train_acc, x.val_loss, x.val_acc].map(f64::to_bits)
                == [y.train_loss, y.train_acc, y.val_loss, y.val_acc].map(f64::to_bits)
        });
    ensure(same_curves, || "same-seed runs produced different curves".into())?;
    let same_weights =
        encode_checkpoint(&a.model, Some(&a.optimizer)).ok() == encode_checkpoint(&b.model, Some(&b.optimizer)).ok();
    ensure(same_weights, || "same-seed runs produced different weights".into())?;

    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_batch(&a.model, &images).map_err(|e| e.to_string())?;
    let correct = preds.iter().zip(&samples).filter(|(p, s)| p.label == s.label).count();
    let acc = correct as f64 / samples.len() as f64;
    let first = a.curves.iter().find(|p| p.train_acc >= 0.95).map(|p| p.epoch);
    ensure(acc >= 0.95, || format!("train accuracy {acc:.3} after 50 epochs"))?;
    within(elapsed, Duration::from_secs(600), "two overfit runs")?;
    Ok(format!(
        "train accuracy {acc:.3} (running accuracy first ≥ 0.95 at epoch {}), identical curves, {elapsed:.1?}",
        first.map_or("never".into(), |e| e.to_string())
    ))
}

// ---------------------------------------------------------------- 4

const WHITE: Rgb<u8> = Rgb([250, 250, 250]);
const TISSUE: Rgb<u8> = Rgb([150, 60, 170]);

/// A `side`² tile whose first `bright` pixels (row-major) are white.
fn tile_with(side: u32, bright: u64) -> RgbImage {
    RgbImage::from_fn(side, side, |x, y| {
        if ((y as u64) * side as u64 + x as u64) < bright {
            WHITE
        } else {
            TISSUE
        }
    })
}

fn tiling() -> Outcome {
    let total = 2000u64 * 2000;
    let at = total * 95 / 100;
    ensure(qc_tile(&tile_with(2000, at)).verdict == Verdict::Positive, || {
        "95.0% bright was not positive".into()
    })?;
    ensure(qc_tile(&tile_with(2000, at + 1)).verdict == Verdict::NegativeN, || {
        "one pixel over 95% was not N".into()
    })?;
    ensure(
        qc_tile(&tile_with(2000, total * 96 / 100)).verdict == Verdict::NegativeN,
        || "96% was not N".into(),
    )?;
    ensure(qc_tile(&tile_with(2000, total)).verdict == Verdict::NegativeN, || {
        "all white was not N".into()
    })?;

    let edge = RgbImage::from_fn(10, 10, |x, _| {
        if x < 5 {
            Rgb([205, 205, 205])
        } else {
            Rgb([204, 255, 255])
        }
    });
    ensure(cellularity_fraction(&edge) == 0.5, || {
        "205 is bright, 204 is not".into()
    })?;

    let cfg = QcConfig::default();
    let cell_edge = total / 5;
    ensure(
        tile_fate(&tile_with(2000, cell_edge), &cfg) == TileFate::Dropped,
        || "exactly 80% cellularity was labeled".into(),
    )?;
    ensure(
        tile_fate(&tile_with(2000, cell_edge - 1), &cfg) == TileFate::Positive,
        || "80% plus one pixel was not labeled".into(),
    )?;
    ensure(cellularity_fraction(&tile_with(20, 0)) == 1.0, || "all tissue".into())?;
    ensure(cellularity_fraction(&tile_with(20, 400)) == 0.0, || "all white".into())?;
    ensure(cellularity_fraction(&tile_with(20, 200)) == 0.5, || "half".into())?;

    let grids = [
        (4000, 4000, 4),
        (4100, 4100, 4),
        (1999, 5000, 0),
        (6000, 4000, 6),
        (2000, 2000, 1),
    ];
    for (w, h, n) in grids {
        let g = tile_grid(w, h, 2000).map_err(|e| e.to_string())?;
        ensure(g.len() == n, || format!("{w}×{h}: {} tiles, expected {n}", g.len()))?;
        ensure(g.iter().all(|c| c.x + 2000 <= w && c.y + 2000 <= h), || {
            "tile outside slide".into()
        })?;
    }

    let image = RgbImage::from_fn(4100, 4000, |x, _| if x < 2000 { TISSUE } else { WHITE });
    let slide = Slide {
        case_id: "half".into(),
        path: "half.png".into(),
        image,
        resolution: 0.5,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = ExtractOptions::new(dir.path(), 3);
    let records = extract_tiles(&slide, Class::O, 10, &opts).map_err(|e| e.to_string())?;
    let labels: Vec<(usize, usize, Class)> = records.iter().map(|r| (r.row, r.col, r.label)).collect();
    let expected = vec![(0, 0, Class::O), (0, 1, Class::N), (1, 0, Class::O), (1, 1, Class::N)];
    ensure(labels == expected, || format!("half slide tiles {labels:?}"))?;
    for r in &records {
        let written = image::open(dir.path().join(&r.tile_path))
            .map_err(|e| e.to_string())?
            .to_rgb8();
        let crop = image::imageops::crop_imm(&slide.image, r.col as u32 * 2000, r.row as u32 * 2000, 2000, 2000);
        ensure(written == crop.to_image(), || {
            format!("{} differs from its slide region", r.tile_path)
        })?;
    }
    let again = extract_tiles(&slide, Class::O, 10, &opts).map_err(|e| e.to_string())?;
    ensure(again == records, || "extraction is not repeatable".into())?;
    let none = extract_tiles(&slide, Class::O, 0, &opts).map_err(|e| e.to_string())?;
    ensure(none.iter().all(|r| r.label == Class::N) && none.len() == 2, || {
        "quota 0 kept subtype tiles".into()
    })?;
    Ok("boundary, cellularity, grid and extraction cases exact".into())
}

// ---------------------------------------------------------------- 5

/// Every probability vector over four classes in steps of 1/4.
fn quarter_grid() -> Vec<[f64; 4]> {
    let mut out = Vec::new();
    for a in 0..=4 {
        for o in 0..=4 - a {
            for g in 0..=4 - a - o {
                let n = 4 - a - o - g;
                out.push([a, o, g, n].map(|v| v as f64 / 4.0));
            }
        }
    }
    out
}

/// Highest score; exact ties go to the larger tie-break value, then to the
/// earlier class.
fn ref_pick(scores: [f64; 3], tiebreak: [f64; 3]) -> usize {
    let mut best = 0;
    for c in 1..3 {
        if scores[c] > scores[best] || (scores[c] == scores[best] && tiebreak[c] > tiebreak[best]) {
            best = c;
        }
    }
    best
}

fn ref_mean(preds: &[Prediction]) -> [f64; 3] {
    let mut m = [0.0; 3];
    for p in preds {
        for c in 0..3 {
            m[c] += p.probs[c];
        }
    }
    m.map(|v| v / preds.len() as f64)
}

fn ref_norm(v: [f64; 3]) -> [f64; 3] {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.map(|x| x / s)
    } else {
        [1.0 / 3.0; 3]
    }
}

fn ref_tiles(preds: &[Prediction]) -> (usize, [f64; 3]) {
    let mean = ref_mean(preds);
    let mut scores = [0.0; 3];
    let mut voters = 0;
    for p in preds {
        let l = p.label.index();
        if l < 3 {
            scores[l] += p.confidence;
            voters += 1;
        }
    }
    if voters == 0 {
        return (ref_pick(mean, mean), ref_norm(mean));
    }
    (ref_pick(scores, mean), ref_norm(scores))
}

fn ref_slices(preds: &[Prediction]) -> (usize, [f64; 3]) {
    let mean = ref_mean(preds);
    let kept: Vec<&Prediction> = preds.iter().filter(|p| p.label != Class::N).collect();
    if kept.is_empty() {
        return (ref_pick(mean, mean), ref_norm(mean));
    }
    let w: f64 = kept.iter().map(|p| p.confidence).sum();
    // Numerators are exact on the quarter grid, so dividing once keeps ties exact.
    let mut m = [0.0; 3];
    for p in &kept {
        for c in 0..3 {
            m[c] += p.confidence * p.probs[c];
        }
    }
    let probs = ref_norm(m.map(|v| v / w));
    (ref_pick(probs, mean), probs)
}

fn ref_fuse(inputs: &[(Modality, Prediction, f64)]) -> Option<(usize, [f64; 3], [f64; 3])> {
    let live: Vec<_> = inputs.iter().filter(|(_, _, w)| *w > 0.0).collect();
    if live.is_empty() {
        return None;
    }
    let mut votes = [0.0; 3];
    let mut mass = [0.0; 3];
    for (_, p, w) in &live {
        votes[p.label.index()] += w * p.confidence;
        for c in 0..3 {
            mass[c] += w * p.confidence * p.probs[c];
        }
    }
    let probs = ref_norm(mass);
    Some((ref_pick(votes, probs), probs, votes))
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
}

fn compare_level(preds: &[Prediction]) -> Result<(), String> {
    let t = aggregate_tiles(preds).map_err(|e| e.to_string())?;
    let (tl, tp) = ref_tiles(preds);
    ensure(
        t.label.index() == tl && close(&t.probs[..3], &tp) && t.probs[3] == 0.0,
        || format!("tiles {preds:?}: got {t:?}, reference {tl} {tp:?}"),
    )?;
    let s = aggregate_slices(preds).map_err(|e| e.to_string())?;
    let (sl, sp) = ref_slices(preds);
    ensure(s.label.index() == sl && close(&s.probs[..3], &sp), || {
        format!("slices {preds:?}: got {s:?}, reference {sl} {sp:?}")
    })
}

fn compare_fusion(inputs: &[(Modality, Prediction, f64)]) -> Result<(), String> {
    let per: BTreeMap<Modality, Prediction> = inputs.iter().map(|(m, p, _)| (*m, *p)).collect();
    let weights = FusionWeights(inputs.iter().map(|(m, _, w)| (*m, *w)).collect());
    match (fuse_modalities("case", &per, &weights), ref_fuse(inputs)) {
        (Err(_), None) => Ok(()),
        (Ok(d), Some((label, probs, votes))) => ensure(
            d.fused.label.index() == label && close(&d.fused.probs[..3], &probs) && close(&d.votes, &votes),
            || format!("fusion {inputs:?}: got {d:?}, reference {label} {probs:?} {votes:?}"),
        ),
        (got, want) => Err(format!("fusion {inputs:?}: got {got:?}, reference {want:?}")),
    }
}

/// Calls `f` on every length-`k` sequence over `0..n`.
fn sequences(n: usize, k: usize, f: &mut dyn FnMut(&[usize]) -> Result<(), String>) -> Result<(), String> {
    let mut idx = vec![0; k];
    loop {
        f(&idx)?;
        let mut i = k;
        loop {
            if i == 0 {
                return Ok(());
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < n {
                break;
            }
            idx[i] = 0;
        }
    }
}

/// Calls `f` on every non-decreasing length-`k` sequence over `0..n`.
fn multisets(n: usize, k: usize, f: &mut dyn FnMut(&[usize]) -> Result<(), String>) -> Result<(), String> {
    fn go(
        n: usize,
        k: usize,
        start: usize,
        cur: &mut Vec<usize>,
        f: &mut dyn FnMut(&[usize]) -> Result<(), String>,
    ) -> Result<(), String> {
        if cur.len() == k {
            return f(cur);
        }
        for i in start..n {
            cur.push(i);
            go(n, k, i, cur, f)?;
            cur.pop();
        }
        Ok(())
    }
    go(n, k, 0, &mut Vec::new(), f)
}

fn random_prediction(rng: &mut ChaCha8Rng, allow_n: bool) -> Prediction {
    let mut p = [0.0; 4];
    for v in p.iter_mut().take(if allow_n { 4 } else { 3 }) {
        *v = rng.gen_range(0.001..1.0);
    }
    Prediction::from_probs(p).expect("positive mass")
}

fn ensemble() -> Outcome {
    let t = Instant::now();
    let grid: Vec<Prediction> = quarter_grid()
        .into_iter()
        .map(|p| Prediction::from_probs(p).expect("grid point"))
        .collect();
    let mut checked = 0usize;
    for k in 1..=4 {
        sequences(grid.len(), k, &mut |idx| {
            checked += 1;
            compare_level(&idx.iter().map(|&i| grid[i]).collect::<Vec<_>>())
        })?;
    }
    multisets(grid.len(), 5, &mut |idx| {
        checked += 1;
        compare_level(&idx.iter().map(|&i| grid[i]).collect::<Vec<_>>())
    })?;

    let subtype_grid: Vec<Prediction> = grid.iter().copied().filter(|p| p.probs[3] == 0.0).collect();
    let weights = [0.0, 0.5, 1.0, 2.0];
    let mut fused = 0usize;
    for mask in 1u32..32 {
        let mods: Vec<Modality> = (0..5)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| Modality::ALL[b])
            .collect();
        sequences(subtype_grid.len(), mods.len(), &mut |idx| {
            let base: Vec<(Modality, Prediction, f64)> =
                mods.iter().zip(idx).map(|(m, &i)| (*m, subtype_grid[i], 1.0)).collect();
            fused += 1;
            compare_fusion(&base)?;
            if mods.len() <= 3 {
                sequences(weights.len(), mods.len(), &mut |wi| {
                    let with: Vec<_> = base
                        .iter()
                        .zip(wi)
                        .map(|((m, p, _), &w)| (*m, *p, weights[w]))
                        .collect();
                    fused += 1;
                    compare_fusion(&with)
                })?;
            }
            Ok(())
        })?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..10_000 {
        let n = rng.gen_range(1..=12);
        let preds: Vec<Prediction> = (0..n).map(|_| random_prediction(&mut rng, true)).collect();
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rng);
        for agg in [aggregate_tiles, aggregate_slices] {
            let (a, b) = (agg(&preds), agg(&shuffled));
            ensure(a.is_ok() && a.as_ref().ok() == b.as_ref().ok(), || {
                format!("permutation changed case {case}")
            })?;
        }
        let mods: Vec<Modality> = Modality::ALL.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
        if mods.is_empty() {
            continue;
        }
        let per: BTreeMap<Modality, Prediction> =
            mods.iter().map(|m| (*m, random_prediction(&mut rng, false))).collect();
        let w = FusionWeights(mods.iter().map(|m| (*m, rng.gen_range(0.01..3.0))).collect());
        let base = fuse_modalities("c", &per, &w).map_err(|e| e.to_string())?;
        let factor = rng.gen_range(0.001..1000.0);
        let scaled = fuse_modalities("c", &per, &w.scaled(factor, mods.iter().copied())).map_err(|e| e.to_string())?;
        ensure(scaled.fused.label == base.fused.label, || {
            format!("scaling weights by {factor} changed case {case}")
        })?;
        let pow2 = fuse_modalities("c", &per, &w.scaled(8.0, mods.iter().copied())).map_err(|e| e.to_string())?;
        ensure(pow2.fused == base.fused, || {
            format!("scaling weights by 8 changed probabilities in case {case}")
        })?;
    }
    let elapsed = t.elapsed();
    within(elapsed, Duration::from_secs(60), "ensemble oracle")?;
    Ok(format!(
        "{checked} tile/slice inputs, {fused} fusion inputs, 10000 random invariance cases, {elapsed:.1?}"
    ))
}

// ---------------------------------------------------------------- 6

/// Per-case label lists realizing a confusion matrix.
fn expand(m: &[[u64; 3]; 3]) -> (Vec<usize>, Vec<usize>) {
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for (i, row) in m.iter().enumerate() {
        for (j, &count) in row.iter().enumerate() {
            for _ in 0..count {
                t.push(i);
                p.push(j);
            }
        }
    }
    (t, p)
}

/// (micro F1, macro F1, kappa, balanced accuracy) by counting cases.
fn ref_metrics(truth: &[usize], pred: &[usize]) -> [f64; 4] {
    let n = truth.len() as f64;
    let count = |f: &dyn Fn(usize) -> bool| (0..truth.len()).filter(|&i| f(i)).count() as f64;
    let agree = count(&|i| truth[i] == pred[i]);
    let mut f1 = [0.0; 3];
    let mut recalls = Vec::new();
    let mut pe = 0.0;
    for c in 0..3 {
        let tp = count(&|i| truth[i] == c && pred[i] == c);
        let predicted = count(&|i| pred[i] == c);
        let actual = count(&|i| truth[i] == c);
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        f1[c] = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if actual > 0.0 {
            recalls.push(recall);
        }
        pe += (actual / n) * (predicted / n);
    }
    let po = agree / n;
    let kappa = if pe >= 1.0 {
        if po >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (po - pe) / (1.0 - pe)
    };
    [
        po,
        f1.iter().sum::<f64>() / 3.0,
        kappa,
        recalls.iter().sum::<f64>() / recalls.len() as f64,
    ]
}

fn metrics() -> Outcome {
    use Class::*;
    let t = Instant::now();
    let perfect = evaluate(&[A, O, G, A], &[A, O, G, A]).map_err(|e| e.to_string())?;
    ensure(
        [
            perfect.f1_micro,
            perfect.f1_macro,
            perfect.kappa,
            perfect.balanced_accuracy,
        ] == [1.0; 4],
        || format!("perfect anchor {perfect:?}"),
    )?;
    let flat = evaluate(&[A, O, G], &[G, G, G]).map_err(|e| e.to_string())?;
    ensure(flat.kappa == 0.0 && (flat.f1_micro - 1.0 / 3.0).abs() < 1e-15, || {
        format!("degenerate anchor {flat:?}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let mut m = [[0u64; 3]; 3];
        let sparse = i % 10 == 0;
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = if sparse && rng.gen_bool(0.7) {
                    0
                } else {
                    rng.gen_range(0..15)
                };
            }
        }
        if m.iter().flatten().sum::<u64>() == 0 {
            m[rng.gen_range(0..3)][rng.gen_range(0..3)] = 1;
        }
        let (tv, pv) = expand(&m);
        let truth: Vec<Class> = tv.iter().map(|&c| Class::SUBTYPES[c]).collect();
        let pred: Vec<Class> = pv.iter().map(|&c| Class::SUBTYPES[c]).collect();
        let conf = confusion_matrix(&truth, &pred).map_err(|e| e.to_string())?;
        ensure(conf == Confusion(m), || {
            format!("confusion of {m:?} came back {conf:?}")
        })?;
        let (micro, macro_f1) = f1_scores(&conf).map_err(|e| e.to_string())?;
        let got = [
            micro,
            macro_f1,
            cohens_kappa(&conf).map_err(|e| e.to_string())?,
            balanced_accuracy(&conf).map_err(|e| e.to_string())?,
        ];
        let want = ref_metrics(&tv, &pv);
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
        ensure(close(&got, &want), || format!("{m:?}: got {got:?}, reference {want:?}"))?;
    }
    Ok(format!(
        "1000 matrices, max deviation {worst:.1e}, anchors exact, {:.1?}",
        t.elapsed()
    ))
}

// ---------------------------------------------------------------- 7

fn glioma(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_glioma"))
        .args(args)
        .current_dir(cwd)
        .env_remove("GLIOMA_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "glioma {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn end_to_end() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cwd = dir.path();
    let seed = ["--seed", "7"];
    let run = |args: &[&str]| glioma(&[args, &seed[..]].concat(), cwd);

    run(&[
        "synth-cohort",
        "--out-dir",
        "cohort",
        "--cases-per-class",
        "4",
        "--held-out-per-class",
        "2",
    ])?;
    let cfg = ["--config", "cohort/pipeline.toml"];
    let with_cfg = |args: &[&str]| glioma(&[args, &cfg[..]].concat(), cwd);
    for (split, labels) in [("train", "cohort/labels_train.csv"), ("test", "cohort/labels_test.csv")] {
        let tiles = format!("work/hist_{split}/manifest.jsonl");
        let slices = format!("work/t2_{split}/manifest.jsonl");
        with_cfg(&["extract-tiles", "--labels-csv", labels, "--out-manifest", &tiles])?;
        with_cfg(&[
            "extract-slices",
            "--labels-csv",
            labels,
            "--modality",
            "T2w",
            "--input-size",
            "32",
            "--out-manifest",
            &slices,
        ])?;
    }
    let train = |manifest: &str, out: &str| {
        with_cfg(&[
            "train",
            "--manifest",
            manifest,
            "--preset",
            "DCN1",
            "--epochs",
            "15",
            "--batch-size",
            "16",
            "--input-size",
            "32",
            "--val-fraction",
            "0.34",
            "--no-augment",
            "--out-dir",
            out,
        ])
    };
    train("work/hist_train/manifest.jsonl", "work/hist_model")?;
    train("work/t2_train/manifest.jsonl", "work/t2_model")?;
    for (model, manifest) in [("hist_model", "hist_test"), ("t2_model", "t2_test")] {
        run(&[
            "predict",
            "--checkpoint",
            &format!("work/{model}/best.ckpt"),
            "--manifest",
            &format!("work/{manifest}/manifest.jsonl"),
            "--out-dir",
            "work/preds",
        ])?;
    }
    run(&[
        "fuse",
        "--case-preds",
        "work/preds",
        "--modalities",
        "hist,T2w",
        "--out-dir",
        "work/fused",
    ])?;
    let table = with_cfg(&[
        "evaluate",
        "--pred-csv",
        "combined=work/fused/combined.csv",
        "--pred-csv",
        "hist=work/fused/hist.csv",
        "--pred-csv",
        "T2w=work/fused/T2w.csv",
        "--out",
        "work/report.json",
    ])?;
    let elapsed = t.elapsed();

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cwd.join("work/report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let ba = report["balanced_accuracy"]
        .as_f64()
        .ok_or("report has no balanced_accuracy")?;
    let n = report["n_cases"].as_u64().ok_or("report has no n_cases")?;
    for key in ["confusion", "f1_micro", "f1_macro", "kappa", "rows"] {
        ensure(report.get(key).is_some(), || format!("report.json lacks {key}"))?;
    }
    let md = fs::read_to_string(cwd.join("work/report.md")).map_err(|e| e.to_string())?;
    ensure(
        md.starts_with("| Modality | F1-Score (micro) | F1-Score (macro) | Kappa | Balanced accuracy |")
            && md.lines().count() == 5,
        || format!("report table malformed:\n{md}"),
    )?;
    ensure(n == 6, || format!("{n} held-out cases evaluated"))?;
    ensure(ba >= 0.9, || format!("held-out balanced accuracy {ba:.3}\n{table}"))?;
    within(elapsed, Duration::from_secs(1200), "synthetic pipeline")?;
    let rows: Vec<String> = report["rows"]
        .as_array()
        .into_iter()
        .flatten()
        .map(|r| {
            format!(
                "{} {:.3}",
                r["name"].as_str().unwrap_or("?"),
                r["balanced_accuracy"].as_f64().unwrap_or(f64::NAN)
            )
        })
        .collect();
    Ok(format!("held-out BA {}, {n} cases, {elapsed:.1?}", rows.join(", ")))
}

// ---------------------------------------------------------------- 8

fn serialization() -> Outcome {
    let cfg = DcnConfig {
        block_config: vec![2, 1],
        growth_rate: 4,
        init_features: 8,
        bottleneck_factor: 2,
        dropout: 0.0,
        compression: 0.5,
        num_classes: 4,
        input_size: 32,
        in_channels: 3,
    };
    let mut model = build_dcn(&cfg, 9).map_err(|e| e.to_string())?;
    let mut opt = AdamState::new(1e-3);
    let x = Tensor::new(
        &[2, 3, 32, 32],
        (0..2 * 3 * 32 * 32).map(|i| (i % 7) as f32 / 7.0).collect(),
    )
    .map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let xv = g.constant(&x);
    let rec = model.forward(&mut g, xv).map_err(|e| e.to_string())?;
    let loss = g.cross_entropy(rec.logits, &[0, 2]).map_err(|e| e.to_string())?;
    g.backward(loss).map_err(|e| e.to_string())?;
    model.accumulate_grads(&g, &rec).map_err(|e| e.to_string())?;
    adam_step(model.parameters_mut(), &mut opt).map_err(|e| e.to_string())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&p1, &model, Some(&opt)).map_err(|e| e.to_string())?;
    let (loaded, lopt) = load_checkpoint(&p1).map_err(|e| e.to_string())?;
    save_checkpoint(&p2, &loaded, lopt.as_ref()).map_err(|e| e.to_string())?;
    let (b1, b2) = (
        fs::read(&p1).map_err(|e| e.to_string())?,
        fs::read(&p2).map_err(|e| e.to_string())?,
    );
    ensure(b1 == b2, || "checkpoint save→load→save changed bytes".into())?;
    let probe = Tensor::full(&[1, 3, 32, 32], 0.3);
    ensure(
        model.predict_logits(&probe).ok() == loaded.predict_logits(&probe).ok(),
        || "loaded model predicts differently".into(),
    )?;

    let class_of = |bytes: &[u8]| decode_checkpoint(bytes).err().map(|e| e.class());
    let mut flipped = b1.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x10;
    let mut magic = b1.clone();
    magic[0] = b'Z';
    let mut version = b1.clone();
    version[4] = version[4].wrapping_add(1);
    let cases = [
        ("bit flip", class_of(&flipped), "checksum_mismatch"),
        ("truncated", class_of(&b1[..b1.len() - 17]), "checksum_mismatch"),
        ("bad magic", class_of(&magic), "bad_magic"),
        ("future version", class_of(&version), "unsupported_version"),
        ("header only", class_of(&b1[..3]), "truncated"),
    ];
    for (what, got, want) in cases {
        ensure(got == Some(want), || {
            format!("{what}: rejected as {got:?}, expected {want}")
        })?;
    }
    let truncated_file = dir.path().join("cut.ckpt");
    fs::write(&truncated_file, &b1[..b1.len() / 2]).map_err(|e| e.to_string())?;
    let err = load_checkpoint(&truncated_file).err().map(|e| e.class());
    ensure(err == Some("checksum_mismatch"), || {
        format!("truncated file rejected as {err:?}")
    })?;

    let tiles: Vec<TileRecord> = (0..40)
        .map(|i| TileRecord {
            case_id: format!("case{:02}", i % 7),
            source_path: format!("slides/case{:02}.tiff", i % 7),
            row: i / 5,
            col: i % 5,
            pixel_resolution: if i % 2 == 0 { 0.25 } else { 0.5 },
            label: Class::ALL[i % 4],
            tile_path: format!("tiles/case{:02}_r{}_c{}.png", i % 7, i / 5, i % 5),
        })
        .collect();
    let slices: Vec<SliceRecord> = (0..30)
        .map(|i| SliceRecord {
            case_id: format!("c{}", i % 3),
            modality: Modality::ALL[1 + i % 4],
            z_index: i,
            label: Class::ALL[i % 4],
            slice_path: format!("slices/c{}_z{i:03}.png", i % 3),
        })
        .collect();
    let (m1, m2) = (dir.path().join("m1.jsonl"), dir.path().join("m2.jsonl"));
    write_jsonl(&m1, &tiles).map_err(|e| e.to_string())?;
    let back: Vec<TileRecord> = read_jsonl(&m1).map_err(|e| e.to_string())?;
    write_jsonl(&m2, &back).map_err(|e| e.to_string())?;
    ensure(back == tiles && fs::read(&m1).ok() == fs::read(&m2).ok(), || {
        "tile manifest round trip".into()
    })?;
    write_jsonl(&m1, &slices).map_err(|e| e.to_string())?;
    let back: Vec<SliceRecord> = read_jsonl(&m1).map_err(|e| e.to_string())?;
    write_jsonl(&m2, &back).map_err(|e| e.to_string())?;
    ensure(back == slices && fs::read(&m1).ok() == fs::read(&m2).ok(), || {
        "slice manifest round trip".into()
    })?;
    Ok("checkpoint and manifest round trips byte-identical, corruption rejected by class".into())
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, fn() -> Outcome); 8] = [
        (1, "gradient correctness", gradients),
        (2, "architecture arithmetic", architecture),
        (3, "overfit oracle", overfit),
        (4, "tiling exactness", tiling),
        (5, "ensemble oracle", ensemble),
        (6, "metric oracle", metrics),
        (7, "end-to-end synthetic run", end_to_end),
        (8, "serialization", serialization),
    ];
    let mut failures = 0;
    for (n, name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} ({name}): FAIL: {detail}");
            }
        }
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
