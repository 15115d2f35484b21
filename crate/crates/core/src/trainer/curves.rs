//! Training curves: CSV persistence and a two-panel SVG plot.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

pub fn write_curves_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let points = r.deserialize().collect::<std::result::Result<Vec<CurvePoint>, _>>()?;
    if points.is_empty() {
        return Err(Error::EmptyInput("curves file"));
    }
    Ok(points)
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 48.0;
const TRAIN_COLOR: &str = "#1f77b4";
const VAL_COLOR: &str = "#d62728";

struct Panel<'a> {
    title: &'a str,
    x0: f64,
    y_range: (f64, f64),
    train: Vec<(f64, f64)>,
    val: Vec<(f64, f64)>,
}

fn polyline(s: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        s,
        r#"  <polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#,
        coords.join(" ")
    );
}

fn draw_panel(s: &mut String, p: &Panel, epochs: (f64, f64)) {
    let (left, top) = (p.x0 + MARGIN, MARGIN);
    let (w, h) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let (ylo, yhi) = p.y_range;
    let sx = |e: f64| {
        left + if epochs.1 > epochs.0 {
            (e - epochs.0) / (epochs.1 - epochs.0) * w
        } else {
            w / 2.0
        }
    };
    let sy = |v: f64| {
        top + h
            - if yhi > ylo {
                (v - ylo) / (yhi - ylo) * h
            } else {
                h / 2.0
            }
    };
    let _ = writeln!(
        s,
        r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="15">{}</text>"#,
        left + w / 2.0,
        top - 16.0,
        p.title
    );
    let _ = writeln!(
        s,
        r#"  <rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"  <text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{v:.3}</text>"#,
            left - 4.0,
            sy(v) + 3.0
        );
    }
    for e in [epochs.0, epochs.1] {
        let _ = writeln!(
            s,
            r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{e}</text>"#,
            sx(e),
            top + h + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"  <text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">epoch</text>"#,
        left + w / 2.0,
        top + h + 30.0
    );
    let map = |pts: &[(f64, f64)]| pts.iter().map(|&(e, v)| (sx(e), sy(v))).collect::<Vec<_>>();
    polyline(s, &map(&p.train), TRAIN_COLOR, false);
    polyline(s, &map(&p.val), VAL_COLOR, true);
    for (i, (label, color)) in [("train", TRAIN_COLOR), ("validation", VAL_COLOR)].iter().enumerate() {
        let y = top + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"  <text x="{:.2}" y="{y:.2}" text-anchor="end" font-size="11" fill="{color}">{label}</text>"#,
            left + w - 6.0
        );
    }
}

/// Loss (left) and accuracy (right) against epoch.
pub fn curves_svg(points: &[CurvePoint]) -> Result<String> {
    if points.is_empty() {
        return Err(Error::EmptyInput("curve points"));
    }
    let finite_max = points
        .iter()
        .flat_map(|p| [p.train_loss, p.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    let loss_hi = if finite_max > 0.0 { finite_max * 1.05 } else { 1.0 };
    let e0 = points.first().map(|p| p.epoch as f64).unwrap_or(0.0);
    let e1 = points.last().map(|p| p.epoch as f64).unwrap_or(0.0);
    let col = |f: fn(&CurvePoint) -> f64| {
        points
            .iter()
            .map(|p| (p.epoch as f64, f(p).min(loss_hi)))
            .collect::<Vec<_>>()
    };
    let panels = [
        Panel {
            title: "Loss",
            x0: 0.0,
            y_range: (0.0, loss_hi),
            train: col(|p| p.train_loss),
            val: col(|p| p.val_loss),
        },
        Panel {
            title: "Accuracy",
            x0: PANEL_W,
            y_range: (0.0, 1.0),
            train: col(|p| p.train_acc),
            val: col(|p| p.val_acc),
        },
    ];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" viewBox="0 0 {} {PANEL_H}">"#,
        2.0 * PANEL_W,
        2.0 * PANEL_W
    );
    let _ = writeln!(s, r#"  <rect width="100%" height="100%" fill="white"/>"#);
    for p in &panels {
        let _ = writeln!(s, r#"  <g class="panel" id="{}">"#, p.title.to_lowercase());
        draw_panel(&mut s, p, (e0, e1));
        let _ = writeln!(s, "  </g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(n: usize) -> Vec<CurvePoint> {
        (1..=n)
            .map(|e| CurvePoint {
                epoch: e,
                train_loss: 1.0 / e as f64,
                train_acc: 1.0 - 0.5 / e as f64,
                val_loss: 1.2 / e as f64,
                val_acc: 0.9 - 0.5 / e as f64,
            })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("curves.csv");
        let pts = points(5);
        write_curves_csv(&p, &pts).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
        assert_eq!(text.lines().count(), 6);
        assert_eq!(read_curves_csv(&p).unwrap(), pts);
    }

    #[test]
    fn svg_has_two_panels() {
        let svg = curves_svg(&points(10)).unwrap();
        assert_eq!(svg.matches(r#"<g class="panel""#).count(), 2);
        assert!(svg.contains(">Loss<") && svg.contains(">Accuracy<"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg, curves_svg(&points(10)).unwrap());
        let single = curves_svg(&points(1)).unwrap();
        assert!(!single.contains("NaN"));
    }
}
