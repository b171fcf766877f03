//! Report emission: records as CSV or markdown, learning curves as CSV and
//! SVG.

use crate::error::{Error, Result};
use crate::train::{AblationRow, CurvePoint, HeadKind};

pub const RECORDS_HEADER: &str = "task,head,loss,gamma,encoding,or,mse,mae,r2";
pub const CURVES_HEADER: &str = "epoch,train_loss,val_loss";

fn head_label(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Mlp => "mlp",
        HeadKind::Attention => "attention",
        HeadKind::DeepEnsemble => "deep_ensemble",
    }
}

pub fn records_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task,
            head_label(r.head),
            r.loss_label,
            r.gamma,
            r.encoding_label,
            r.or_enabled,
            r.metrics.mse,
            r.metrics.mae,
            r.metrics.r2
        ));
    }
    out
}

/// A parsed row of the 9-column records CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub task: String,
    pub head: String,
    pub loss: String,
    pub gamma: f64,
    pub encoding: String,
    pub or_enabled: bool,
    pub mse: f64,
    pub mae: f64,
    pub r2: f64,
}

pub fn parse_records_csv(text: &str) -> Result<Vec<RecordRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == RECORDS_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {RECORDS_HEADER:?}, got {h:?}"),
            })
        }
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 9 fields, got {}", f.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| Error::Parse {
                line,
                msg: format!("bad {what} {s:?}: {e}"),
            })
        };
        let or_enabled = match f[5].trim() {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("bad or flag {other:?}"),
                })
            }
        };
        rows.push(RecordRow {
            task: f[0].trim().to_string(),
            head: f[1].trim().to_string(),
            loss: f[2].trim().to_string(),
            gamma: num(f[3], "gamma")?,
            encoding: f[4].trim().to_string(),
            or_enabled,
            mse: num(f[6], "mse")?,
            mae: num(f[7], "mae")?,
            r2: num(f[8], "r2")?,
        });
    }
    Ok(rows)
}

pub fn records_to_markdown(rows: &[RecordRow]) -> String {
    let mut out = String::new();
    out.push_str("| task | head | loss | gamma | encoding | or | mse | mae | r2 |\n");
    out.push_str("| --- | --- | --- | --- | --- | --- | --- | --- | --- |\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.task, r.head, r.loss, r.gamma, r.encoding, r.or_enabled, r.mse, r.mae, r.r2
        ));
    }
    out
}

pub fn curves_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.epoch, p.train_loss, p.val_loss));
    }
    out
}

pub fn parse_curves_csv(text: &str) -> Result<Vec<CurvePoint>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == CURVES_HEADER => {}
        Some((_, h)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {CURVES_HEADER:?}, got {h:?}"),
            })
        }
        None => return Err(Error::Parse { line: 1, msg: "empty file".into() }),
    }
    let mut points = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let f: Vec<&str> = row.split(',').collect();
        if f.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, got {}", f.len()),
            });
        }
        let epoch: usize = f[0].trim().parse().map_err(|e| Error::Parse {
            line,
            msg: format!("bad epoch {:?}: {e}", f[0]),
        })?;
        let mut nums = [0.0f64; 2];
        for (slot, s) in nums.iter_mut().zip(&f[1..]) {
            *slot = s.trim().parse().map_err(|e| Error::Parse {
                line,
                msg: format!("bad loss {s:?}: {e}"),
            })?;
        }
        points.push(CurvePoint {
            epoch,
            train_loss: nums[0],
            val_loss: nums[1],
        });
    }
    Ok(points)
}

/// Renders train/val curves as one polyline per series, one sample point
/// per epoch.
pub fn curves_to_svg(curve: &[CurvePoint]) -> Result<String> {
    if curve.is_empty() {
        return Err(Error::Contract("cannot plot an empty learning curve".into()));
    }
    let (w, h, margin) = (640.0, 400.0, 50.0);
    let series: [(&str, &str, Vec<f64>); 2] = [
        ("train", "#1f77b4", curve.iter().map(|p| p.train_loss).collect()),
        ("val", "#d62728", curve.iter().map(|p| p.val_loss).collect()),
    ];
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, _, ys) in &series {
        for &y in ys {
            lo = lo.min(y);
            hi = hi.max(y);
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("learning curve contains non-finite losses".into()));
    }
    if hi == lo {
        hi = lo + 1.0;
    }
    let n = curve.len();
    let x_at = |i: usize| -> f64 {
        if n == 1 {
            w / 2.0
        } else {
            margin + (w - 2.0 * margin) * i as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| -> f64 { h - margin - (h - 2.0 * margin) * (v - lo) / (hi - lo) };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    svg.push_str(&format!(
        "  <line x1=\"{margin}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#333\"/>\n",
        h - margin,
        w - margin
    ));
    svg.push_str(&format!(
        "  <line x1=\"{margin}\" y1=\"{margin}\" x2=\"{margin}\" y2=\"{0}\" stroke=\"#333\"/>\n",
        h - margin
    ));
    svg.push_str(&format!(
        "  <text x=\"{0}\" y=\"{1}\" font-size=\"12\">epoch</text>\n",
        w / 2.0 - 20.0,
        h - margin / 3.0
    ));
    svg.push_str(&format!(
        "  <text x=\"8\" y=\"{0}\" font-size=\"12\">loss</text>\n",
        h / 2.0
    ));
    for (i, (label, color, ys)) in series.iter().enumerate() {
        let points: Vec<String> = ys
            .iter()
            .enumerate()
            .map(|(j, &v)| format!("{:.2},{:.2}", x_at(j), y_at(v)))
            .collect();
        svg.push_str(&format!(
            "  <polyline class=\"curve\" data-series=\"{label}\" fill=\"none\" stroke=\"{color}\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        svg.push_str(&format!(
            "  <text x=\"{0}\" y=\"{1}\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            w - margin + 4.0,
            margin + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
