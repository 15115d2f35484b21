//! Quick invariant suite behind `glioma selftest`.

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::class::{Class, Modality};
use crate::dcn::{build_dcn, decode_checkpoint, encode_checkpoint, DcnConfig};
use crate::ensemble::{aggregate_slices, aggregate_tiles, fuse_modalities, FusionWeights, Prediction};
use crate::error::Result;
use crate::histo::{qc_tile, tile_grid, Verdict};
use crate::imaging::Image;
use crate::manifest::{from_jsonl, to_jsonl, TileRecord};
use crate::metrics::{cohens_kappa, evaluate, Confusion};
use crate::tensor::Tensor;
use crate::trainer::{augment, AugmentFlags};
use crate::verify::{run_battery, CaseKind};

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<std::result::Result<(), String>>) -> Check {
    let (passed, detail) = match f() {
        Ok(Ok(())) => (true, String::new()),
        Ok(Err(d)) => (false, d),
        Err(e) => (false, format!("error[{}]: {e}", e.class())),
    };
    Check { name, passed, detail }
}

fn expect(cond: bool, detail: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail())
    }
}

fn pred(probs: [f64; 4]) -> Result<Prediction> {
    Prediction::from_probs(probs)
}

fn gradients(seed: u64) -> Result<std::result::Result<(), String>> {
    let results = run_battery(seed, CaseKind::ALL.len())?;
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{:?} {:.2e}", r.kind, r.max_rel_error))
        .collect();
    Ok(expect(failed.is_empty(), || failed.join(", ")))
}

fn architecture() -> Result<std::result::Result<(), String>> {
    let w1 = DcnConfig::dcn1().channel_plan().classifier_in;
    let w2 = DcnConfig::dcn2().channel_plan().classifier_in;
    Ok(expect((w1, w2) == (128, 1104), || format!("widths {w1}, {w2}")))
}

fn tiling() -> Result<std::result::Result<(), String>> {
    let tile = |bright: u32| {
        RgbImage::from_fn(20, 20, |x, y| {
            if y * 20 + x < bright {
                Rgb([250, 250, 250])
            } else {
                Rgb([150, 60, 170])
            }
        })
    };
    let at = qc_tile(&tile(380)).verdict;
    let over = qc_tile(&tile(381)).verdict;
    let grid = tile_grid(4100, 4100, 2000)?.len();
    Ok(expect(
        at == Verdict::Positive && over == Verdict::NegativeN && grid == 4,
        || format!("95.0%: {at:?}, 95.25%: {over:?}, grid {grid}"),
    ))
}

fn ensemble() -> Result<std::result::Result<(), String>> {
    let tiles = [
        pred([0.05, 0.05, 0.9, 0.0])?,
        pred([0.1, 0.0, 0.8, 0.1])?,
        pred([0.025, 0.95, 0.025, 0.0])?,
        pred([0.0025, 0.0025, 0.005, 0.99])?,
    ];
    let slide = aggregate_tiles(&tiles)?;
    let volume = aggregate_slices(&[pred([0.05, 0.05, 0.8, 0.1])?; 3])?;
    let per_modality = [
        (Modality::Histology, pred([0.05, 0.05, 0.9, 0.0])?),
        (Modality::T2w, pred([0.15, 0.15, 0.7, 0.0])?),
        (Modality::GdT1w, pred([0.0, 0.95, 0.05, 0.0])?),
    ]
    .into_iter()
    .collect();
    let case = fuse_modalities("selftest", &per_modality, &FusionWeights::default())?;
    let ok = slide.label == Class::G
        && volume.label == Class::G
        && (volume.probs[2] - 0.8 / 0.9).abs() < 1e-12
        && case.fused.label == Class::G
        && (case.votes[2] - 1.6).abs() < 1e-12
        && (case.votes[1] - 0.95).abs() < 1e-12;
    Ok(expect(ok, || {
        format!("slide {slide:?}, volume {volume:?}, votes {:?}", case.votes)
    }))
}

fn metrics() -> Result<std::result::Result<(), String>> {
    use Class::*;
    let perfect = evaluate(&[A, O, G], &[A, O, G])?;
    let flat = evaluate(&[A, O, G], &[A, A, A])?;
    let m = Confusion([[4, 1, 0], [1, 3, 1], [0, 1, 4]]);
    let pe = 75.0 / 225.0;
    let reference = (11.0 / 15.0 - pe) / (1.0 - pe);
    let kappa = cohens_kappa(&m)?;
    let ok = [
        perfect.f1_micro,
        perfect.f1_macro,
        perfect.kappa,
        perfect.balanced_accuracy,
    ] == [1.0; 4]
        && flat.kappa == 0.0
        && (flat.f1_micro - 1.0 / 3.0).abs() < 1e-15
        && (kappa - reference).abs() < 1e-12;
    Ok(expect(ok, || {
        format!("perfect {perfect:?}, flat {flat:?}, kappa {kappa}")
    }))
}

fn serialization() -> Result<std::result::Result<(), String>> {
    let cfg = DcnConfig {
        block_config: vec![1, 1],
        growth_rate: 4,
        init_features: 6,
        bottleneck_factor: 2,
        dropout: 0.0,
        compression: 0.5,
        num_classes: 4,
        input_size: 16,
        in_channels: 1,
    };
    let model = build_dcn(&cfg, 1)?;
    let bytes = encode_checkpoint(&model, None)?;
    let (back, _) = decode_checkpoint(&bytes)?;
    let again = encode_checkpoint(&back, None)?;
    let x = Tensor::full(&[1, 1, 16, 16], 0.5);
    let same_logits = model.predict_logits(&x)? == back.predict_logits(&x)?;
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x01;
    let rejected = decode_checkpoint(&bad).err().map(|e| e.class());

    let records = vec![TileRecord {
        case_id: "c1".into(),
        source_path: "slides/c1.png".into(),
        row: 2,
        col: 3,
        pixel_resolution: 0.25,
        label: Class::O,
        tile_path: "tiles/c1_r2_c3.png".into(),
    }];
    let text = to_jsonl(&records)?;
    let manifest_ok = to_jsonl(&from_jsonl::<TileRecord>(&text)?)? == text;
    Ok(expect(
        again == bytes && same_logits && rejected == Some("checksum_mismatch") && manifest_ok,
        || {
            format!(
                "identical {}, logits {same_logits}, corrupt {rejected:?}, manifest {manifest_ok}",
                again == bytes
            )
        },
    ))
}

fn augmentation() -> Result<std::result::Result<(), String>> {
    let img = Image::filled(3, 12, 12, 0.25);
    let out = augment(&img, &AugmentFlags::default(), 3)?;
    let numbered = Image::new(1, 5, 5, (0..25).map(|v| v as f32).collect())?;
    let identity = augment(&numbered, &AugmentFlags::none(), 3)? == numbered;
    Ok(expect(out.data.iter().all(|&v| v == 0.25) && identity, || {
        "augmentation changed a constant image or ignored disabled stages".into()
    }))
}

/// Runs every check; the suite passes iff all entries pass.
pub fn run(seed: u64) -> Vec<Check> {
    vec![
        check("gradients", || gradients(seed)),
        check("architecture", architecture),
        check("tiling", tiling),
        check("ensemble", ensemble),
        check("metrics", metrics),
        check("serialization", serialization),
        check("augmentation", augmentation),
    ]
}
