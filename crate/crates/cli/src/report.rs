//! Merges CSVs of repeated runs into per-cell means and 95% confidence
//! half-widths.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::csvio::{fmt_f, read_csv, write_csv, Table};

/// Columns that identify a cell rather than measure it.
const KEY_COLUMNS: &[&str] = &["epoch", "stage", "channel", "snr_db", "scheme", "mr", "n"];

#[derive(Clone, Debug)]
pub struct Report {
    pub table: Table,
    pub summary: String,
}

/// Student-t 95% half-width of the mean; `None` for fewer than two values.
pub fn ci95(values: &[f64]) -> Option<f64> {
    let k = values.len();
    if k < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (k - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    Some(t * (var / k as f64).sqrt())
}

fn check_header(first: &Table, first_path: &Path, t: &Table, path: &Path) -> Result<()> {
    for (i, want) in first.header.iter().enumerate() {
        match t.header.get(i) {
            Some(got) if got == want => {}
            Some(got) => bail!("{}: column {} is `{got}`, {} has `{want}`", path.display(), i + 1, first_path.display()),
            None => bail!("{}: missing column `{want}`", path.display()),
        }
    }
    if let Some(extra) = t.header.get(first.header.len()) {
        bail!("{}: unexpected column `{extra}`", path.display());
    }
    Ok(())
}

pub fn aggregate(inputs: &[PathBuf]) -> Result<Report> {
    let Some(first_path) = inputs.first() else { bail!("no input CSVs") };
    let tables: Vec<Table> = inputs.iter().map(|p| read_csv(p)).collect::<Result<_>>()?;
    for (t, p) in tables.iter().zip(inputs) {
        check_header(&tables[0], first_path, t, p)?;
    }
    let header = &tables[0].header;
    let numeric = |c: usize| tables.iter().all(|t| t.rows.iter().all(|r| r[c].parse::<f64>().is_ok()));
    let keys: Vec<usize> = (0..header.len()).filter(|&c| KEY_COLUMNS.contains(&header[c].as_str()) || !numeric(c)).collect();
    let metrics: Vec<usize> = (0..header.len()).filter(|c| !keys.contains(c)).collect();

    let mut cells: Vec<(Vec<String>, Vec<Vec<f64>>)> = Vec::new();
    for t in &tables {
        for r in &t.rows {
            let key: Vec<String> = keys.iter().map(|&c| r[c].clone()).collect();
            let vals = metrics.iter().map(|&c| r[c].parse::<f64>().expect("checked numeric"));
            let idx = match cells.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    cells.push((key, vec![Vec::new(); metrics.len()]));
                    cells.len() - 1
                }
            };
            for (acc, v) in cells[idx].1.iter_mut().zip(vals) {
                acc.push(v);
            }
        }
    }

    let mut out_header: Vec<String> = keys.iter().map(|&c| header[c].clone()).collect();
    out_header.push("runs".into());
    for &c in &metrics {
        out_header.push(format!("{}_mean", header[c]));
        out_header.push(format!("{}_ci95", header[c]));
    }
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|(key, vals)| {
            let mut row = key.clone();
            row.push(vals.first().map_or(0, Vec::len).to_string());
            for v in vals {
                row.push(fmt_f(v.iter().sum::<f64>() / v.len() as f64));
                row.push(ci95(v).map(fmt_f).unwrap_or_default());
            }
            row
        })
        .collect();
    let table = Table { header: out_header, rows };
    let summary = render(&table);
    Ok(Report { table, summary })
}

/// Fixed-width text rendering.
pub fn render(t: &Table) -> String {
    let widths: Vec<usize> = (0..t.header.len())
        .map(|c| t.rows.iter().map(|r| r[c].len()).chain([t.header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| -> String {
        cells.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let mut s = line(&t.header);
    s.push('\n');
    for r in &t.rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let header: Vec<&str> = report.table.header.iter().map(String::as_str).collect();
    write_csv(path, &header, &report.table.rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_t_table() {
        assert_eq!(ci95(&[1.0]), None);
        // t(0.975, 1) = 12.706; sd of {0, 2} is sqrt(2); half-width = 12.706 * 1
        let h = ci95(&[0.0, 2.0]).unwrap();
        assert!((h - 12.7062).abs() < 1e-3, "{h}");
        // t(0.975, 4) = 2.776
        let h = ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((h - 2.7764 * (2.5f64 / 5.0).sqrt()).abs() < 1e-3, "{h}");
    }
}
