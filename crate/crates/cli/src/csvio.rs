//! Versioned CSV files: a `# semlink-csv v1` line, a header row, data rows.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const VERSION_LINE: &str = "# semlink-csv v1";

/// Floats are written with six decimals so reruns are byte-identical.
pub fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        v.to_string()
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(f, "{VERSION_LINE}")?;
    let mut w = csv::Writer::from_writer(&mut f);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    drop(w);
    f.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values of a numeric column.
    pub fn floats(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name).with_context(|| format!("no column `{name}`"))?;
        self.rows.iter().map(|r| r[c].parse::<f64>().with_context(|| format!("`{}` in column `{name}`", r[c]))).collect()
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().next().unwrap_or("");
    if first.trim() != VERSION_LINE {
        bail!("{}: first line is `{first}`, expected `{VERSION_LINE}`", path.display());
    }
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows })
}
