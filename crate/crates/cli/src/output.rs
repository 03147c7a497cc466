//! Number formatting and all-or-nothing file output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Shortest decimal form of `v` rounded to 12 significant digits; `inf`
/// for positive infinity.
pub fn fmt_num(v: f64) -> Result<String, CliError> {
    if v == f64::INFINITY {
        return Ok("inf".into());
    }
    if !v.is_finite() {
        return Err(CliError::NonFiniteOutput(v));
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    let rounded = if rounded == 0.0 { 0.0 } else { rounded };
    Ok(format!("{rounded}"))
}

/// Append one CSV row.
pub fn push_row(csv: &mut String, values: &[f64]) -> Result<(), CliError> {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            csv.push(',');
        }
        csv.push_str(&fmt_num(*v)?);
    }
    csv.push('\n');
    Ok(())
}

/// CSV text from a header and rows.
pub fn csv(header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<String, CliError> {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        push_row(&mut out, &row)?;
    }
    Ok(out)
}

/// Files rendered in memory and written together; if any write fails the
/// files already written are removed.
#[derive(Debug, Default, Clone)]
pub struct OutputSet {
    files: Vec<(String, String)>,
}

impl OutputSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn commit(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let mut written = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            if let Err(e) = std::fs::write(&path, contents) {
                for p in &written {
                    let _ = std::fs::remove_file(p);
                }
                let _ = std::fs::remove_file(&path);
                return Err(CliError::io(&path, e));
            }
            written.push(path);
        }
        Ok(written)
    }
}

/// Human-readable one-line list of paths.
pub fn describe(paths: &[PathBuf]) -> String {
    let mut s = String::new();
    for (i, p) in paths.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let _ = write!(s, "{}", p.display());
    }
    s
}
