//! Tile → slide, slice → volume and modality → patient aggregation.
//!
//! Every aggregator sorts its inputs into a canonical order before summing,
//! so results are bit-identical under any permutation of the inputs.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::class::{Class, Modality};
use crate::error::{Error, Result};

pub const PROB_TOLERANCE: f64 = 1e-6;

/// Class probabilities in (A, O, G, N) order with their argmax.
/// Slide-, volume- and patient-level predictions keep `probs[N] == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: [f64; 4],
    pub label: Class,
    pub confidence: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

impl Prediction {
    /// Validates and renormalizes a probability vector. Ties pick the
    /// earliest class.
    pub fn from_probs(probs: [f64; 4]) -> Result<Prediction> {
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid probabilities {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("probabilities sum to zero".into()));
        }
        let probs = if (total - 1.0).abs() <= f64::EPSILON {
            probs
        } else {
            probs.map(|p| p / total)
        };
        let i = argmax(&probs);
        Ok(Prediction {
            probs,
            label: Class::ALL[i],
            confidence: probs[i],
        })
    }

    /// Softmax of raw network outputs.
    pub fn from_logits(logits: &[f32]) -> Result<Prediction> {
        if logits.len() != 4 {
            return Err(Error::LengthMismatch(logits.len(), 4));
        }
        let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = logits.iter().map(|&l| (l as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite("logits"));
        }
        Prediction::from_probs([e[0] / s, e[1] / s, e[2] / s, e[3] / s])
    }

    pub fn sum(&self) -> f64 {
        self.probs.iter().sum()
    }

    fn with_label(probs: [f64; 4], label: Class) -> Prediction {
        Prediction {
            probs,
            label,
            confidence: probs[label.index()],
        }
    }
}

fn canonical(preds: &[Prediction]) -> Vec<Prediction> {
    let mut v = preds.to_vec();
    v.sort_by(|a, b| {
        a.probs
            .iter()
            .zip(&b.probs)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.label.cmp(&b.label))
            .then(a.confidence.total_cmp(&b.confidence))
    });
    v
}

fn sorted_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum()
}

/// Mean A/O/G probability per class over all inputs.
fn mean_subtype_probs(preds: &[Prediction]) -> [f64; 3] {
    let n = preds.len() as f64;
    [0, 1, 2].map(|c| sorted_sum(preds.iter().map(|p| p.probs[c]).collect()) / n)
}

/// Argmax over A/O/G; exact ties fall to `tiebreak`, then to class order.
fn pick(scores: &[f64; 3], tiebreak: &[f64; 3]) -> Class {
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<usize> = None;
    for c in 0..3 {
        if scores[c] != top {
            continue;
        }
        best = match best {
            Some(b) if tiebreak[b] >= tiebreak[c] => Some(b),
            _ => Some(c),
        };
    }
    Class::SUBTYPES[best.expect("at least one maximal score")]
}

/// Renormalizes A/O/G mass; zero mass becomes uniform.
fn renormalize(mass: [f64; 3]) -> [f64; 4] {
    let total: f64 = mass.iter().sum();
    if total > 0.0 {
        [mass[0] / total, mass[1] / total, mass[2] / total, 0.0]
    } else {
        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]
    }
}

fn all_n_fallback(all: &[Prediction]) -> Prediction {
    let mean = mean_subtype_probs(all);
    let label = pick(&mean, &mean);
    Prediction::with_label(renormalize(mean), label)
}

/// Confidence-weighted majority vote of tile predictions. `N` tiles are
/// dropped; a slide with only `N` tiles falls back to the mean A/O/G
/// probabilities.
pub fn aggregate_tiles(tile_preds: &[Prediction]) -> Result<Prediction> {
    if tile_preds.is_empty() {
        return Err(Error::EmptyInput("tile predictions"));
    }
    let all = canonical(tile_preds);
    let voters: Vec<&Prediction> = all.iter().filter(|p| p.label != Class::N).collect();
    if voters.is_empty() {
        return Ok(all_n_fallback(&all));
    }
    let scores = [0, 1, 2].map(|c| {
        sorted_sum(
            voters
                .iter()
                .filter(|p| p.label.index() == c)
                .map(|p| p.confidence)
                .collect(),
        )
    });
    let label = pick(&scores, &mean_subtype_probs(&all));
    Ok(Prediction::with_label(renormalize(scores), label))
}

/// Confidence-weighted mean of the A/O/G probabilities of non-`N` slices.
pub fn aggregate_slices(slice_preds: &[Prediction]) -> Result<Prediction> {
    if slice_preds.is_empty() {
        return Err(Error::EmptyInput("slice predictions"));
    }
    let all = canonical(slice_preds);
    let kept: Vec<&Prediction> = all.iter().filter(|p| p.label != Class::N).collect();
    if kept.is_empty() {
        return Ok(all_n_fallback(&all));
    }
    let wsum = sorted_sum(kept.iter().map(|p| p.confidence).collect());
    let mean = [0, 1, 2].map(|c| sorted_sum(kept.iter().map(|p| p.confidence * p.probs[c]).collect()) / wsum);
    let probs = renormalize(mean);
    let label = pick(&[probs[0], probs[1], probs[2]], &mean_subtype_probs(&all));
    Ok(Prediction::with_label(probs, label))
}

/// Per-modality weights; modalities not listed weigh 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights(pub BTreeMap<Modality, f64>);

impl FusionWeights {
    pub fn get(&self, m: Modality) -> f64 {
        self.0.get(&m).copied().unwrap_or(1.0)
    }

    pub fn scaled(&self, factor: f64, modalities: impl IntoIterator<Item = Modality>) -> FusionWeights {
        FusionWeights(modalities.into_iter().map(|m| (m, self.get(m) * factor)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseDecision {
    pub case_id: String,
    pub per_modality: BTreeMap<Modality, Prediction>,
    /// `label` is the vote winner; `probs` the weighted mean of modality
    /// probabilities, so the two can disagree on close calls.
    pub fused: Prediction,
    /// Summed weight·confidence per subtype.
    pub votes: [f64; 3],
    pub contributing_modalities: Vec<Modality>,
}

/// Weighted majority vote across modalities.
pub fn fuse_modalities(
    case_id: &str,
    per_modality: &BTreeMap<Modality, Prediction>,
    weights: &FusionWeights,
) -> Result<CaseDecision> {
    if per_modality.is_empty() {
        return Err(Error::EmptyInput("modality predictions"));
    }
    for (m, p) in per_modality {
        let w = weights.get(*m);
        if !w.is_finite() || w < 0.0 {
            return Err(Error::InvalidArgument(format!("weight {w} for {m}")));
        }
        if p.label == Class::N {
            return Err(Error::InvalidArgument(format!("{m} prediction is N; aggregate first")));
        }
    }
    let contributing: Vec<Modality> = per_modality.keys().copied().filter(|m| weights.get(*m) > 0.0).collect();
    if contributing.is_empty() {
        return Err(Error::InvalidArgument("all fusion weights are zero".into()));
    }
    let strength = |m: &Modality| weights.get(*m) * per_modality[m].confidence;
    let votes = [0, 1, 2].map(|c| {
        sorted_sum(
            contributing
                .iter()
                .filter(|m| per_modality[m].label.index() == c)
                .map(strength)
                .collect(),
        )
    });
    let total = sorted_sum(contributing.iter().map(strength).collect());
    let mean = [0, 1, 2].map(|c| {
        sorted_sum(
            contributing
                .iter()
                .map(|m| strength(m) * per_modality[m].probs[c])
                .collect(),
        ) / total
    });
    let probs = renormalize(mean);
    let label = pick(&votes, &[probs[0], probs[1], probs[2]]);
    Ok(CaseDecision {
        case_id: case_id.to_string(),
        per_modality: per_modality.clone(),
        fused: Prediction::with_label(probs, label),
        votes,
        contributing_modalities: contributing,
    })
}

/// Level-aggregated prediction for one case and modality, with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub case_id: String,
    pub modality: Modality,
    pub prediction: Prediction,
    /// Tiles or slices predicted.
    pub units: usize,
    /// Of which predicted `N` and left out of the vote.
    pub dropped_n: usize,
    pub fallback: bool,
    pub unit_predictions: Vec<Prediction>,
}

impl CasePrediction {
    pub fn from_units(case_id: &str, modality: Modality, units: Vec<Prediction>) -> Result<CasePrediction> {
        let prediction = if modality.is_radiology() {
            aggregate_slices(&units)?
        } else {
            aggregate_tiles(&units)?
        };
        let dropped_n = units.iter().filter(|p| p.label == Class::N).count();
        Ok(CasePrediction {
            case_id: case_id.to_string(),
            modality,
            prediction,
            units: units.len(),
            dropped_n,
            fallback: dropped_n == units.len(),
            unit_predictions: units,
        })
    }
}
