use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    Command, Context, EvaluateArgs, ExtractSlicesArgs, ExtractTilesArgs, FuseArgs, GradcheckArgs, PlotCurvesArgs,
    PredictArgs, SynthArgs, TrainArgs,
};
use crate::class::{Class, Modality};
use crate::dcn::{load_checkpoint, Preset};
use crate::ensemble::{fuse_modalities, CaseDecision, CasePrediction, FusionWeights};
use crate::error::{Error, Result};
use crate::histo::{extract_tiles, list_slides, load_slide, ExtractOptions, QuotaTable};
use crate::imaging::Image;
use crate::manifest::{
    class_counts, read_any_manifest, read_labels_csv, write_jsonl, write_labels_csv, AnyManifest, BalanceMode, Labeled,
};
use crate::metrics::{evaluate, results_table_markdown, EvalReport};
use crate::radio::{
    balance_slices, extract_slices, list_volumes, read_positivity_csv, read_volume, write_slices, SliceOptions,
};
use crate::synth::{generate_cohort, SynthConfig};
use crate::trainer::{curves_svg, load_samples, predict_batch, read_curves_csv, train, AugmentFlags, TrainConfig};
use crate::verify::run_battery;

const DEFAULT_RESOLUTION: f64 = 0.5;
const DEFAULT_SLICE_SIZE: usize = 224;

pub(super) fn dispatch(cmd: Command, ctx: &Context) -> Result<()> {
    match cmd {
        Command::ExtractTiles(a) => extract_tiles_cmd(a, ctx),
        Command::ExtractSlices(a) => extract_slices_cmd(a, ctx),
        Command::Train(a) => train_cmd(a, ctx),
        Command::Predict(a) => predict_cmd(a),
        Command::Fuse(a) => fuse_cmd(a, ctx),
        Command::Evaluate(a) => evaluate_cmd(a, ctx),
        Command::PlotCurves(a) => plot_curves_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a, ctx),
        Command::Selftest => selftest_cmd(ctx),
        Command::SynthCohort(a) => synth_cmd(a, ctx),
    }
}

fn existing(path: &Path) -> Result<PathBuf> {
    if path.exists() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::MissingPath(path.to_path_buf()))
    }
}

/// Flag (or its env var) first, then the config file.
fn need(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    match flag.or_else(|| configured.clone()) {
        Some(p) => existing(&p),
        None => Err(Error::Config(format!(
            "{name} is required (flag, environment or config file)"
        ))),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Directory holding `file`, created if needed.
fn parent_dir(file: &Path) -> Result<PathBuf> {
    let dir = match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_dir(&dir)?;
    Ok(dir)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn counts_line(counts: [usize; 4]) -> String {
    Class::ALL
        .iter()
        .map(|c| format!("{c}={}", counts[c.index()]))
        .collect::<Vec<_>>()
        .join(" ")
}

fn extract_tiles_cmd(a: ExtractTilesArgs, ctx: &Context) -> Result<()> {
    let paths = &ctx.config.paths;
    let histo = &ctx.config.histo;
    let slide_dir = need(a.slide_dir, &paths.slide_dir, "--slide-dir")?;
    let labels = read_labels_csv(&need(a.labels_csv, &paths.labels_csv, "--labels-csv")?)?;
    let quotas = match a.quota_table.or_else(|| paths.quota_table.clone()) {
        Some(p) => QuotaTable::read_csv(&existing(&p)?)?,
        None => QuotaTable::default(),
    };
    let resolution = a.resolution.or(histo.resolution).unwrap_or(DEFAULT_RESOLUTION);
    let root = parent_dir(&a.out_manifest)?;

    let mut opts = ExtractOptions::new(&root, ctx.seed);
    if let Some(t) = a.tile_size.or(histo.tile_size) {
        opts.tile_size = t;
    }
    if let Some(s) = a.pen_mark_spread.or(histo.pen_mark_spread) {
        opts.qc.pen_mark_spread = Some(s);
    }
    if a.no_pen_marks || histo.pen_marks == Some(false) {
        opts.qc.pen_mark_spread = None;
    }
    opts.qc.hemorrhage_red_excess = a.hemorrhage_red_excess.or(histo.hemorrhage_red_excess);

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for path in list_slides(&slide_dir)? {
        let case = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let Some(&label) = labels.get(&case) else {
            log::info!("skipping {}: no label", path.display());
            continue;
        };
        let slide = load_slide(&path, resolution)?;
        let quota = quotas.quota(slide.resolution, label)?;
        let tiles = extract_tiles(&slide, label, quota, &opts)?;
        log::info!("{case}: {} tiles ({})", tiles.len(), counts_line(class_counts(&tiles)));
        records.extend(tiles);
        seen.insert(case);
    }
    for case in labels.keys().filter(|c| !seen.contains(*c)) {
        log::warn!("labeled case {case} has no slide in {}", slide_dir.display());
    }
    write_jsonl(&a.out_manifest, &records)?;
    println!(
        "{} tiles from {} slides ({}) -> {}",
        records.len(),
        seen.len(),
        counts_line(class_counts(&records)),
        a.out_manifest.display()
    );
    Ok(())
}

fn extract_slices_cmd(a: ExtractSlicesArgs, ctx: &Context) -> Result<()> {
    let paths = &ctx.config.paths;
    let radio = &ctx.config.radio;
    let volume_dir = need(a.volume_dir, &paths.volume_dir, "--volume-dir")?;
    let labels = read_labels_csv(&need(a.labels_csv, &paths.labels_csv, "--labels-csv")?)?;
    let positivity = read_positivity_csv(&need(a.positivity_csv, &paths.positivity_csv, "--positivity-csv")?)?;
    let root = parent_dir(&a.out_manifest)?;
    let size = a
        .input_size
        .or(radio.input_size)
        .or(ctx.config.dcn.input_size)
        .unwrap_or(DEFAULT_SLICE_SIZE);
    let mut opts = SliceOptions::new(&root, size);
    opts.axis = a.axis.or(radio.axis).unwrap_or_default();
    opts.write_slices = false;

    let mut volumes = Vec::new();
    let mut records = Vec::new();
    for path in list_volumes(&volume_dir, a.modality)? {
        let vol = read_volume(&path)?;
        let Some(&label) = labels.get(&vol.case_id) else {
            log::info!("skipping {}: no label", path.display());
            continue;
        };
        let ranges = match positivity.get(&(vol.case_id.clone(), a.modality)) {
            Some(r) => r.as_slice(),
            None => {
                log::warn!("{} has no positivity entry; every slice is N", vol.case_id);
                &[]
            }
        };
        records.extend(extract_slices(&vol, a.modality, ranges, label, &opts)?);
        volumes.push((vol.case_id.clone(), path));
    }
    let mode = if a.downsample {
        BalanceMode::Downsample
    } else {
        radio.balance_mode.unwrap_or_default()
    };
    let kept = match a.balance.or(radio.balance) {
        Some(target) => balance_slices(&records, target, mode, ctx.seed)?,
        None => records,
    };

    for (case, path) in &volumes {
        let mine: Vec<_> = kept.iter().filter(|r| &r.case_id == case).cloned().collect();
        if !mine.is_empty() {
            write_slices(&read_volume(path)?, &mine, &opts)?;
        }
    }
    write_jsonl(&a.out_manifest, &kept)?;
    println!(
        "{} {} slices from {} volumes ({}) -> {}",
        kept.len(),
        a.modality,
        volumes.len(),
        counts_line(class_counts(&kept)),
        a.out_manifest.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs, ctx: &Context, slices: bool) -> TrainConfig {
    let t = &ctx.config.train;
    let mut cfg = match a.preset.or(t.preset) {
        Some(Preset::Dcn1) => TrainConfig::histology(),
        Some(Preset::Dcn2) => TrainConfig::radiology(),
        None if slices => TrainConfig::radiology(),
        None => TrainConfig::histology(),
    };
    if let Some(v) = a.epochs.or(t.epochs) {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size.or(t.batch_size) {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr.or(t.lr) {
        cfg.lr = v;
    }
    if let Some(v) = a.val_fraction.or(t.val_fraction) {
        cfg.val_fraction = v;
    }
    if let Some(v) = t.augment {
        cfg.augment = v;
    }
    if a.no_augment {
        cfg.augment = AugmentFlags::none();
    }
    cfg.input_size = a.input_size.or(ctx.config.dcn.input_size).or(cfg.input_size);
    cfg.seed = ctx.seed;
    cfg
}

fn train_cmd(a: TrainArgs, ctx: &Context) -> Result<()> {
    let manifest = existing(&a.manifest)?;
    let slices = matches!(read_any_manifest(&manifest)?, AnyManifest::Slices(_));
    let cfg = train_config(&a, ctx, slices);
    cfg.validate()?;
    create_dir(&a.out_dir)?;
    write_file(
        &a.out_dir.join("train_config.json"),
        serde_json::to_string_pretty(&cfg)?,
    )?;
    let (art, curves) = train(&cfg, &manifest, &a.out_dir)?;
    let best = &curves[art.best_epoch - 1];
    println!(
        "{} for {} epochs: best epoch {} (val acc {:.3}, val loss {:.4}) -> {}",
        cfg.model_preset,
        cfg.epochs,
        art.best_epoch,
        best.val_acc,
        best.val_loss,
        art.best_checkpoint.display()
    );
    Ok(())
}

fn predict_group<R: Labeled + Clone + Sync>(
    model: &crate::dcn::DcnModel,
    manifest: &Path,
    records: &[R],
    modality: Modality,
) -> Result<Vec<CasePrediction>> {
    let mut by_case: BTreeMap<&str, Vec<&R>> = BTreeMap::new();
    for r in records {
        by_case.entry(r.case_id()).or_default().push(r);
    }
    let size = model.config().input_size;
    let channels = model.config().in_channels;
    by_case
        .into_iter()
        .map(|(case, recs)| {
            let recs: Vec<R> = recs.into_iter().cloned().collect();
            let samples = load_samples(manifest, &recs, size)?;
            let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
            if let Some(bad) = images.iter().find(|i| i.channels != channels) {
                return Err(Error::InvalidArgument(format!(
                    "{case}: model expects {channels}-channel input, image has {}",
                    bad.channels
                )));
            }
            CasePrediction::from_units(case, modality, predict_batch(model, &images)?)
        })
        .collect()
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let (model, _) = load_checkpoint(&existing(&a.checkpoint)?)?;
    let manifest = existing(&a.manifest)?;
    let preds = match read_any_manifest(&manifest)? {
        AnyManifest::Tiles(r) => {
            if let Some(m) = a.modality.filter(|m| m.is_radiology()) {
                return Err(Error::InvalidArgument(format!(
                    "tile manifest cannot be predicted as {m}"
                )));
            }
            predict_group(&model, &manifest, &r, Modality::Histology)?
        }
        AnyManifest::Slices(r) => {
            let present: BTreeSet<Modality> = r.iter().map(|s| s.modality).collect();
            let modality = match a.modality {
                Some(m) => m,
                None if present.len() == 1 => *present.iter().next().expect("one modality"),
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "manifest mixes modalities {present:?}; pass --modality"
                    )))
                }
            };
            let r: Vec<_> = r.into_iter().filter(|s| s.modality == modality).collect();
            predict_group(&model, &manifest, &r, modality)?
        }
    };
    if preds.is_empty() {
        return Err(Error::EmptyInput("manifest records"));
    }
    create_dir(&a.out_dir)?;
    for p in &preds {
        let path = a.out_dir.join(format!("{}_{}.json", p.case_id, p.modality));
        write_file(&path, serde_json::to_string_pretty(p)?)?;
    }
    let modality = preds[0].modality;
    let csv = a.out_dir.join(format!("{modality}.csv"));
    write_labels_csv(&csv, preds.iter().map(|p| (p.case_id.as_str(), p.prediction.label)))?;
    println!("{} {modality} case predictions -> {}", preds.len(), a.out_dir.display());
    Ok(())
}

fn parse_weights(text: &str) -> Result<BTreeMap<Modality, f64>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (m, w) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("weight {pair:?} is not modality=value")))?;
            let w: f64 = w
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("weight {pair:?} is not a number")))?;
            Ok((m.parse()?, w))
        })
        .collect()
}

fn case_pred_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        let input = existing(input)?;
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(&input)
                .map_err(|e| Error::io(&input, e))?
                .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&input, err)))
                .collect::<Result<_>>()?;
            found.retain(|p| p.extension().is_some_and(|e| e == "json"));
            found.sort();
            files.extend(found);
        } else {
            files.push(input);
        }
    }
    Ok(files)
}

fn fuse_cmd(a: FuseArgs, ctx: &Context) -> Result<()> {
    let ens = &ctx.config.ensemble;
    let mut weights = ens.weights.clone();
    if let Some(text) = &a.weights {
        weights.extend(parse_weights(text)?);
    }
    let weights = FusionWeights(weights);
    let subset: Option<BTreeSet<Modality>> = a
        .modalities
        .clone()
        .or_else(|| ens.modalities.clone())
        .map(|v| v.into_iter().collect());

    let mut cases: BTreeMap<String, BTreeMap<Modality, CasePrediction>> = BTreeMap::new();
    for path in case_pred_files(&a.case_preds)? {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let p: CasePrediction =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if subset.as_ref().is_some_and(|s| !s.contains(&p.modality)) {
            continue;
        }
        let slot = cases.entry(p.case_id.clone()).or_default();
        if slot.contains_key(&p.modality) {
            return Err(Error::InvalidArgument(format!(
                "duplicate {} prediction for case {}",
                p.modality, p.case_id
            )));
        }
        slot.insert(p.modality, p);
    }
    if cases.is_empty() {
        return Err(Error::EmptyInput("case predictions"));
    }

    let mut decisions: Vec<CaseDecision> = Vec::new();
    for (case, preds) in &cases {
        if let Some(s) = &subset {
            let missing: Vec<String> = s
                .iter()
                .filter(|m| !preds.contains_key(m))
                .map(|m| m.to_string())
                .collect();
            if !missing.is_empty() {
                log::warn!("{case}: no {} prediction; fusing the rest", missing.join(", "));
            }
        }
        let per_modality = preds.iter().map(|(m, p)| (*m, p.prediction)).collect();
        decisions.push(fuse_modalities(case, &per_modality, &weights)?);
    }

    create_dir(&a.out_dir)?;
    write_file(
        &a.out_dir.join("decisions.json"),
        serde_json::to_string_pretty(&decisions)?,
    )?;
    write_labels_csv(
        &a.out_dir.join("combined.csv"),
        decisions.iter().map(|d| (d.case_id.as_str(), d.fused.label)),
    )?;
    let modalities: BTreeSet<Modality> = cases.values().flat_map(|p| p.keys().copied()).collect();
    for m in &modalities {
        write_labels_csv(
            &a.out_dir.join(format!("{m}.csv")),
            cases
                .iter()
                .filter_map(|(case, p)| p.get(m).map(|p| (case.as_str(), p.prediction.label))),
        )?;
    }
    println!("{} cases fused -> {}", decisions.len(), a.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct NamedReport<'a> {
    name: &'a str,
    #[serde(flatten)]
    report: &'a EvalReport,
}

/// The first row's metrics at top level, every row under `rows`.
#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    head: NamedReport<'a>,
    rows: Vec<NamedReport<'a>>,
}

fn named_csv(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or(arg).to_string();
            (name, path)
        }
    }
}

fn evaluate_cmd(a: EvaluateArgs, ctx: &Context) -> Result<()> {
    let truth = read_labels_csv(&need(a.truth_csv, &ctx.config.paths.truth_csv, "--truth-csv")?)?;
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    for arg in &a.pred_csv {
        let (name, path) = named_csv(arg);
        let pred = read_labels_csv(&existing(&path)?)?;
        let extra = pred.keys().filter(|c| !truth.contains_key(*c)).count();
        if extra > 0 {
            log::warn!("{name}: {extra} predicted cases have no truth label");
        }
        let mut t = Vec::with_capacity(truth.len());
        let mut p = Vec::with_capacity(truth.len());
        for (case, &label) in &truth {
            let got = pred
                .get(case)
                .ok_or_else(|| Error::InvalidArgument(format!("{name}: no prediction for case {case}")))?;
            t.push(label);
            p.push(*got);
        }
        rows.push((name, evaluate(&t, &p)?));
    }
    let named: Vec<NamedReport> = rows.iter().map(|(n, r)| NamedReport { name: n, report: r }).collect();
    let file = ReportFile {
        head: NamedReport {
            name: &rows[0].0,
            report: &rows[0].1,
        },
        rows: named,
    };
    parent_dir(&a.out)?;
    write_file(&a.out, serde_json::to_string_pretty(&file)? + "\n")?;
    let table = results_table_markdown(&rows);
    write_file(&a.out.with_extension("md"), &table)?;
    print!("{table}");
    Ok(())
}

fn plot_curves_cmd(a: PlotCurvesArgs) -> Result<()> {
    let points = read_curves_csv(&existing(&a.curves)?)?;
    let out = a.out.unwrap_or_else(|| a.curves.with_extension("svg"));
    parent_dir(&out)?;
    write_file(&out, curves_svg(&points)?)?;
    println!("{} epochs -> {}", points.len(), out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs, ctx: &Context) -> Result<()> {
    let results = run_battery(ctx.seed, a.cases)?;
    let mut by_kind: BTreeMap<String, (usize, usize, f64, f64)> = BTreeMap::new();
    for r in &results {
        let e = by_kind
            .entry(format!("{:?}", r.kind))
            .or_insert((0, 0, 0.0, r.tolerance));
        e.0 += 1;
        e.1 += usize::from(r.passed());
        e.2 = e.2.max(r.max_rel_error);
    }
    println!(
        "{:<18} {:>5} {:>6} {:>12} {:>9}",
        "case", "runs", "passed", "max_rel_err", "tolerance"
    );
    for (kind, (n, ok, err, tol)) in &by_kind {
        println!("{kind:<18} {n:>5} {ok:>6} {err:>12.3e} {tol:>9.0e}");
    }
    if let Some(out) = &a.out {
        parent_dir(out)?;
        write_file(out, serde_json::to_string_pretty(&results)?)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::CheckFailed(format!(
            "{failed} of {} gradient cases failed",
            results.len()
        )));
    }
    Ok(())
}

fn selftest_cmd(ctx: &Context) -> Result<()> {
    let checks = crate::selftest::run(ctx.seed);
    for c in &checks {
        if c.passed {
            println!("ok   {}", c.name);
        } else {
            println!("FAIL {}: {}", c.name, c.detail);
        }
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CheckFailed(failed.join(", ")))
    }
}

/// Config matching a synthetic cohort; paths are relative to the cohort root.
fn cohort_config(cfg: &SynthConfig) -> String {
    format!(
        "seed = {}\n\n[paths]\nslide_dir = \"slides\"\nvolume_dir = \"volumes\"\nlabels_csv = \"labels_train.csv\"\n\
         positivity_csv = \"positivity.csv\"\nquota_table = \"quota.csv\"\ntruth_csv = \"labels_test.csv\"\n\n\
         [histo]\ntile_size = {}\nresolution = {:?}\n",
        cfg.seed, cfg.tile_size, cfg.resolution
    )
}

fn synth_cmd(a: SynthArgs, ctx: &Context) -> Result<()> {
    let mut cfg = SynthConfig {
        seed: ctx.seed,
        ..SynthConfig::default()
    };
    if let Some(v) = a.cases_per_class {
        cfg.cases_per_class = v;
    }
    if let Some(v) = a.held_out_per_class {
        cfg.held_out_per_class = v;
    }
    if let Some(v) = a.tile_size {
        cfg.tile_size = v;
    }
    if let Some(v) = a.modalities {
        cfg.modalities = v.into_iter().filter(|m| m.is_radiology()).collect();
    }
    let cohort = generate_cohort(&a.out_dir, &cfg)?;
    write_file(&a.out_dir.join("cohort.json"), serde_json::to_string_pretty(&cohort)?)?;
    write_file(&a.out_dir.join("pipeline.toml"), cohort_config(&cfg))?;
    println!(
        "{} cases ({} train, {} test) -> {}",
        cohort.labels.len(),
        cohort.train_cases.len(),
        cohort.test_cases.len(),
        a.out_dir.display()
    );
    Ok(())
}
