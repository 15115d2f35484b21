use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use glioma_core::manifest::{read_jsonl, TileRecord};

fn glioma() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_glioma"));
    for (k, _) in std::env::vars() {
        if k.starts_with("GLIOMA_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(c: &mut Command) -> Output {
    let out = c.output().expect("spawn glioma");
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// One small synthetic cohort shared by the tests below; treated as read-only.
fn cohort() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        run(glioma()
            .args([
                "--seed",
                "5",
                "synth-cohort",
                "--cases-per-class",
                "2",
                "--held-out-per-class",
                "1",
            ])
            .arg("--out-dir")
            .arg(dir.path()));
        dir
    })
    .path()
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p);
            }
        }
    }
    out
}

fn extract_tiles(out: &Path, extra: &[&str], env: &[(&str, &str)]) -> Vec<TileRecord> {
    let manifest = out.join("tiles.jsonl");
    let mut c = glioma();
    c.arg("--config")
        .arg(cohort().join("pipeline.toml"))
        .arg("extract-tiles")
        .arg("--out-manifest")
        .arg(&manifest)
        .args(extra);
    for (k, v) in env {
        c.env(k, v);
    }
    run(&mut c);
    read_jsonl(&manifest).unwrap()
}

fn first_tile_side(out: &Path, recs: &[TileRecord]) -> u32 {
    image::image_dimensions(out.join(&recs[0].tile_path)).unwrap().0
}

#[test]
fn selftest_passes() {
    let out = run(glioma().arg("selftest"));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 7, "{text}");
    assert!(text.lines().all(|l| l.starts_with("ok   ")), "{text}");
}

#[test]
fn usage_errors_exit_two() {
    let out = glioma().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = glioma().args(["train", "--epochs", "many"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_name_their_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = glioma()
        .args(["train", "--manifest", "/definitely/missing.jsonl", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.lines().any(|l| l.starts_with("error[missing_path]: ")), "{err}");

    let out = glioma().args(["--threads", "0", "selftest"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "unknown_key = 3\n").unwrap();
    let out = glioma().arg("--config").arg(&bad).arg("selftest").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[config]"));
}

#[test]
fn plot_curves_draws_two_panels() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curves.csv");
    fs::write(
        &csv,
        "epoch,train_loss,train_acc,val_loss,val_acc\n1,1.2,0.4,1.3,0.35\n2,0.9,0.6,1.0,0.5\n3,0.5,0.8,0.7,0.7\n",
    )
    .unwrap();
    run(glioma().arg("plot-curves").arg(&csv));
    let svg = fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert_eq!(svg.matches(r#"class="panel""#).count(), 2);
}

#[test]
fn flags_beat_env_beat_config() {
    let cohort_side = {
        let d = tempfile::tempdir().unwrap();
        let recs = extract_tiles(d.path(), &[], &[]);
        first_tile_side(d.path(), &recs)
    };
    assert_eq!(cohort_side, 64, "pipeline.toml sets the synthetic tile size");

    let d = tempfile::tempdir().unwrap();
    let recs = extract_tiles(d.path(), &[], &[("GLIOMA_TILE_SIZE", "32")]);
    assert_eq!(first_tile_side(d.path(), &recs), 32);

    let d = tempfile::tempdir().unwrap();
    let recs = extract_tiles(d.path(), &["--tile-size", "16"], &[("GLIOMA_TILE_SIZE", "32")]);
    assert_eq!(first_tile_side(d.path(), &recs), 16);
}

#[test]
fn extraction_is_reproducible_and_contained() {
    let before = files_under(cohort());
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = extract_tiles(a.path(), &[], &[]);
    let rb = extract_tiles(b.path(), &[], &[]);
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);

    let fa = files_under(a.path());
    let fb = files_under(b.path());
    assert_eq!(fa.len(), fb.len());
    for p in &fa {
        let q = b.path().join(p.strip_prefix(a.path()).unwrap());
        assert_eq!(fs::read(p).unwrap(), fs::read(&q).unwrap(), "{}", p.display());
    }
    assert_eq!(files_under(cohort()), before, "inputs were modified");
}

#[test]
fn version_flag() {
    let out = run(glioma().arg("--version"));
    assert!(String::from_utf8_lossy(&out.stdout).contains(env!("CARGO_PKG_VERSION")));
}
