//! Run-directory outputs: metric traces and small text tables.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use cmow_core::training::TraceRecord;
use cmow_core::{Error, Result};

pub const TRACE: &str = "trace.jsonl";

/// One JSON object per line, in training order.
pub fn write_trace(out: &Path, trace: &[TraceRecord]) -> Result<PathBuf> {
    let path = out.join(TRACE);
    let mut buf = Vec::new();
    for rec in trace {
        serde_json::to_writer(&mut buf, rec).map_err(|e| Error::data(format!("trace: {e}")))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Left-aligned first column, right-aligned rest.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    let line = |s: &mut String, cells: &[&str]| {
        for (c, cell) in cells.iter().enumerate() {
            if c == 0 {
                let _ = write!(s, "{cell:<w$}", w = widths[c]);
            } else {
                let _ = write!(s, "  {cell:>w$}", w = widths[c]);
            }
        }
        s.push('\n');
    };
    line(&mut s, header);
    let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
    line(&mut s, &rule.iter().map(String::as_str).collect::<Vec<_>>());
    for r in rows {
        line(&mut s, &r.iter().map(String::as_str).collect::<Vec<_>>());
    }
    s
}
