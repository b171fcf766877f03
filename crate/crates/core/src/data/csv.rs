//! Target CSV format: header `id,task,value_mm`, one measurement per row.
//! Values outside the task's range are rejected row-by-row and reported;
//! structural problems (bad header, bad field, unknown task) are errors.

use super::{TaskName, TaskSpec};
use crate::error::{Error, Result};
use std::path::Path;

pub const TARGETS_HEADER: &str = "id,task,value_mm";

#[derive(Debug, Clone, PartialEq)]
pub struct TargetRecord {
    pub id: u64,
    pub task: TaskName,
    pub value_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct TargetFile {
    pub records: Vec<TargetRecord>,
    pub rejected: Vec<RejectedRow>,
}

pub fn parse_targets_csv(text: &str) -> Result<TargetFile> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == TARGETS_HEADER => {}
        Some((_, header)) => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {TARGETS_HEADER:?}, got {header:?}"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
    }

    let mut out = TargetFile::default();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let row = raw.trim_end_matches('\r');
        if row.is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let id: u64 = fields[0].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad id {:?}: {e}", fields[0]),
        })?;
        let task = TaskName::parse(fields[1].trim())?;
        let value_mm: f64 = fields[2].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("bad value {:?}: {e}", fields[2]),
        })?;

        let spec = TaskSpec::for_task(task);
        if !value_mm.is_finite() || !spec.contains(value_mm) {
            out.rejected.push(RejectedRow {
                line: line_no,
                reason: format!(
                    "value {value_mm} outside {} range [{}, {}]",
                    task, spec.lo, spec.hi
                ),
            });
            continue;
        }
        out.records.push(TargetRecord { id, task, value_mm });
    }
    Ok(out)
}

pub fn load_targets_csv(path: impl AsRef<Path>) -> Result<TargetFile> {
    parse_targets_csv(&std::fs::read_to_string(path)?)
}

/// Decimal serialization with 9 significant digits; exact for values that
/// have at most 9 significant decimal digits.
fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    s
}

pub fn format_targets_csv(records: &[TargetRecord]) -> String {
    let mut out = String::from(TARGETS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.id, r.task, format_sig9(r.value_mm)));
    }
    out
}

pub fn save_targets_csv(path: impl AsRef<Path>, records: &[TargetRecord]) -> Result<()> {
    std::fs::write(path, format_targets_csv(records))?;
    Ok(())
}
