//! Result tables and histogram data files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One result-table line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub summarization_model: String,
    pub model: String,
    pub qwk: f64,
    pub test_condition: String,
}

/// Groups by (summarization model, test condition) in lexicographic order;
/// within a group QWK descending, then model name.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (&a.summarization_model, &a.test_condition)
            .cmp(&(&b.summarization_model, &b.test_condition))
            .then(b.qwk.total_cmp(&a.qwk))
            .then(a.model.cmp(&b.model))
    });
}

pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["summarization_model", "model", "qwk", "test_condition"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn parse_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Fixed-width table with QWK to four decimals.
pub fn render_text_table(rows: &[ReportRow]) -> String {
    let header = ["Summarization model", "Model", "QWK", "Test condition"];
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.summarization_model.clone(),
                r.model.clone(),
                format!("{:.4}", r.qwk),
                r.test_condition.clone(),
            ]
        })
        .collect();
    let mut width = header.map(|h| h.chars().count());
    for row in &cells {
        for (w, c) in width.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |row: [&str; 4]| {
        let mut s = String::new();
        for (i, (c, w)) in row.iter().zip(width).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if i == 2 {
                s.push_str(&format!("{c:>w$}"));
            } else {
                s.push_str(&format!("{c:<w$}"));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    out.push_str(
        &width
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for row in &cells {
        out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
    }
    out
}

/// Writes `results.csv` and `results.txt` under `dir` with rows sorted by
/// [`sort_rows`]. Returns both paths.
pub fn write_report(dir: impl AsRef<Path>, rows: &[ReportRow]) -> Result<(PathBuf, PathBuf)> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let csv_path = dir.join("results.csv");
    write_report_csv(&csv_path, &rows)?;
    let txt_path = dir.join("results.txt");
    fs::write(&txt_path, render_text_table(&rows)).map_err(|e| Error::io(&txt_path, e))?;
    Ok((csv_path, txt_path))
}

/// Non-empty length bins of width `bin_width` keyed by bin start, plus
/// marker positions to draw as vertical lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: usize,
    pub bins: BTreeMap<usize, usize>,
    pub markers: Vec<usize>,
}

pub fn emit_histograms(lengths: &[usize], bin_width: usize, markers: &[usize]) -> Result<Histogram> {
    if bin_width == 0 {
        return Err(Error::Precondition("bin_width must be >= 1".into()));
    }
    let mut bins = BTreeMap::new();
    for &l in lengths {
        *bins.entry(l / bin_width * bin_width).or_insert(0) += 1;
    }
    Ok(Histogram {
        bin_width,
        bins,
        markers: markers.to_vec(),
    })
}

/// CSV with columns `kind,position,count`: one `bin` row per non-empty bin,
/// then one `marker` row (empty count) per marker.
pub fn write_histogram(path: impl AsRef<Path>, h: &Histogram) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "position", "count"])?;
    for (start, count) in &h.bins {
        w.write_record(["bin", &start.to_string(), &count.to_string()])?;
    }
    for m in &h.markers {
        w.write_record(["marker", &m.to_string(), ""])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
