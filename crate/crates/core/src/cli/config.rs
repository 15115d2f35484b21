//! TOML experiment configuration. Precedence, lowest first: built-in
//! defaults, config file, `GLIOMA_*` environment variables, CLI flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::class::Modality;
use crate::dcn::Preset;
use crate::error::{Error, Result};
use crate::manifest::BalanceMode;
use crate::radio::Axis;
use crate::trainer::AugmentFlags;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub paths: PathsConfig,
    pub dcn: DcnOverrides,
    pub train: TrainOverrides,
    pub histo: HistoConfig,
    pub radio: RadioConfig,
    pub ensemble: EnsembleConfig,
}

/// Input roots. Relative entries resolve against the config file's directory.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub slide_dir: Option<PathBuf>,
    pub volume_dir: Option<PathBuf>,
    pub labels_csv: Option<PathBuf>,
    pub positivity_csv: Option<PathBuf>,
    pub quota_table: Option<PathBuf>,
    pub truth_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcnOverrides {
    pub input_size: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub preset: Option<Preset>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f32>,
    pub val_fraction: Option<f64>,
    pub augment: Option<AugmentFlags>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HistoConfig {
    pub resolution: Option<f64>,
    pub tile_size: Option<u32>,
    pub pen_marks: Option<bool>,
    pub pen_mark_spread: Option<f64>,
    pub hemorrhage_red_excess: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadioConfig {
    pub input_size: Option<usize>,
    pub axis: Option<Axis>,
    pub balance: Option<usize>,
    pub balance_mode: Option<BalanceMode>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub modalities: Option<Vec<Modality>>,
    pub weights: BTreeMap<Modality, f64>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = PipelineConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let p = &mut cfg.paths;
        for slot in [
            &mut p.slide_dir,
            &mut p.volume_dir,
            &mut p.labels_csv,
            &mut p.positivity_csv,
            &mut p.quota_table,
            &mut p.truth_csv,
        ] {
            if let Some(rel) = slot.as_ref().filter(|r| r.is_relative()) {
                *slot = Some(base.join(rel));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections() {
        let cfg = PipelineConfig::parse(
            r#"
            seed = 9
            [train]
            preset = "DCN2"
            epochs = 4
            augment = { flip = false }
            [ensemble]
            modalities = ["hist", "T2w"]
            weights = { hist = 2.0 }
            [radio]
            axis = "Y"
            balance_mode = "downsample"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(9));
        assert_eq!(cfg.train.preset, Some(Preset::Dcn2));
        let aug = cfg.train.augment.unwrap();
        assert!(!aug.flip && aug.rotate);
        assert_eq!(cfg.ensemble.weights[&Modality::Histology], 2.0);
        assert_eq!(cfg.radio.axis, Some(Axis::Y));
        assert_eq!(cfg.radio.balance_mode, Some(BalanceMode::Downsample));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert_eq!(PipelineConfig::parse("sed = 1").unwrap_err().class(), "config");
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "[paths]\nslide_dir = \"slides\"\ntruth_csv = \"/abs/t.csv\"\n").unwrap();
        let cfg = PipelineConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.slide_dir.unwrap(), dir.path().join("slides"));
        assert_eq!(cfg.paths.truth_csv.unwrap(), PathBuf::from("/abs/t.csv"));
    }
}
