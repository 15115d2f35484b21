//! Patient-level classification metrics over the three subtypes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::class::Class;
use crate::error::{Error, Result};

/// Rows are truth, columns predictions, both in (A, O, G) order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion(pub [[u64; 3]; 3]);

impl Confusion {
    pub fn n(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.0[i][i]).sum()
    }

    pub fn row(&self, i: usize) -> u64 {
        self.0[i].iter().sum()
    }

    pub fn col(&self, j: usize) -> u64 {
        (0..3).map(|i| self.0[i][j]).sum()
    }

    fn nonempty(&self) -> Result<u64> {
        match self.n() {
            0 => Err(Error::EmptyInput("confusion matrix")),
            n => Ok(n),
        }
    }
}

fn subtype_index(c: Class) -> Result<usize> {
    if c.is_subtype() {
        Ok(c.index())
    } else {
        Err(Error::UnknownLabel(c.to_string()))
    }
}

pub fn confusion_matrix(truth: &[Class], pred: &[Class]) -> Result<Confusion> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch(truth.len(), pred.len()));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput("label lists"));
    }
    let mut m = Confusion::default();
    for (&t, &p) in truth.iter().zip(pred) {
        m.0[subtype_index(t)?][subtype_index(p)?] += 1;
    }
    Ok(m)
}

/// Per-class F1 with F1 = 0 when precision + recall = 0.
pub fn per_class_f1(m: &Confusion) -> Result<[f64; 3]> {
    m.nonempty()?;
    Ok([0, 1, 2].map(|c| {
        let tp = m.0[c][c] as f64;
        let (pred, truth) = (m.col(c) as f64, m.row(c) as f64);
        let p = if pred > 0.0 { tp / pred } else { 0.0 };
        let r = if truth > 0.0 { tp / truth } else { 0.0 };
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }))
}

/// (micro, macro). Micro equals accuracy for single-label data; macro
/// averages all three classes, absent ones included as 0.
pub fn f1_scores(m: &Confusion) -> Result<(f64, f64)> {
    let n = m.nonempty()?;
    let per = per_class_f1(m)?;
    Ok((m.trace() as f64 / n as f64, per.iter().sum::<f64>() / 3.0))
}

pub fn cohens_kappa(m: &Confusion) -> Result<f64> {
    let n = m.nonempty()? as f64;
    let po = m.trace() as f64 / n;
    let pe = (0..3).map(|c| m.row(c) as f64 * m.col(c) as f64).sum::<f64>() / (n * n);
    if pe >= 1.0 {
        return Ok(if po >= 1.0 { 1.0 } else { 0.0 });
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Mean recall over classes present in the truth.
pub fn balanced_accuracy(m: &Confusion) -> Result<f64> {
    m.nonempty()?;
    let recalls: Vec<f64> = (0..3)
        .filter(|&c| m.row(c) > 0)
        .map(|c| m.0[c][c] as f64 / m.row(c) as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: Confusion,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub kappa: f64,
    pub balanced_accuracy: f64,
    pub n_cases: u64,
}

impl EvalReport {
    pub fn from_confusion(m: Confusion) -> Result<EvalReport> {
        let (f1_micro, f1_macro) = f1_scores(&m)?;
        Ok(EvalReport {
            confusion: m,
            f1_micro,
            f1_macro,
            kappa: cohens_kappa(&m)?,
            balanced_accuracy: balanced_accuracy(&m)?,
            n_cases: m.n(),
        })
    }
}

pub fn evaluate(truth: &[Class], pred: &[Class]) -> Result<EvalReport> {
    EvalReport::from_confusion(confusion_matrix(truth, pred)?)
}

/// Markdown table with one row per named report.
pub fn results_table_markdown(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from(
        "| Modality | F1-Score (micro) | F1-Score (macro) | Kappa | Balanced accuracy | Cases |\n\
         |---|---|---|---|---|---|\n",
    );
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "| {name} | {:.3} | {:.3} | {:.3} | {:.3} | {} |",
            r.f1_micro, r.f1_macro, r.kappa, r.balanced_accuracy, r.n_cases
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use Class::*;

    #[test]
    fn hand_counted_confusion() {
        let m = confusion_matrix(&[A, A, O, G], &[A, O, O, G]).unwrap();
        assert_eq!(m.0, [[1, 1, 0], [0, 1, 0], [0, 0, 1]]);
        let single = confusion_matrix(&[A], &[G]).unwrap();
        assert_eq!(single.0, [[0, 0, 1], [0, 0, 0], [0, 0, 0]]);
        assert_eq!(confusion_matrix(&[A], &[A, O]).unwrap_err().class(), "length_mismatch");
        assert_eq!(confusion_matrix(&[N], &[A]).unwrap_err().class(), "unknown_label");
        assert!(confusion_matrix(&[], &[]).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&[A, O, G, G], &[A, O, G, G]).unwrap();
        assert_eq!(
            (r.f1_micro, r.f1_macro, r.kappa, r.balanced_accuracy),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn single_class_prediction_on_uniform_truth() {
        let r = evaluate(&[A, O, G], &[A, A, A]).unwrap();
        assert!((r.f1_micro - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.kappa, 0.0);
    }

    #[test]
    fn kappa_reference_matrix() {
        let m = Confusion([[4, 1, 0], [1, 3, 1], [0, 1, 4]]);
        let (n, po) = (15.0, 11.0 / 15.0);
        let pe = (5.0 * 5.0 + 5.0 * 5.0 + 5.0 * 5.0) / (n * n);
        assert!((cohens_kappa(&m).unwrap() - (po - pe) / (1.0 - pe)).abs() < 1e-12);
    }

    #[test]
    fn degenerate_kappa() {
        assert_eq!(cohens_kappa(&Confusion([[3, 0, 0], [0; 3], [0; 3]])).unwrap(), 1.0);
    }

    #[test]
    fn balanced_accuracy_examples() {
        let m = Confusion([[2, 0, 0], [1, 1, 0], [1, 1, 0]]);
        assert_eq!(balanced_accuracy(&m).unwrap(), 0.5);
        let absent = Confusion([[2, 0, 0], [0, 0, 0], [1, 0, 1]]);
        assert_eq!(balanced_accuracy(&absent).unwrap(), 0.75);
    }

    #[test]
    fn absent_class_counts_zero_in_macro() {
        let (_, macro_f1) = f1_scores(&Confusion([[2, 0, 0], [0, 2, 0], [0, 0, 0]])).unwrap();
        assert!((macro_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn table_has_one_row_per_report() {
        let r = evaluate(&[A, O, G], &[A, O, G]).unwrap();
        let t = results_table_markdown(&[("hist".into(), r.clone()), ("combined".into(), r)]);
        assert_eq!(t.lines().count(), 4);
        assert!(t.contains("| combined | 1.000 | 1.000 | 1.000 | 1.000 | 3 |"));
    }
}
