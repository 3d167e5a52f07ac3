//! Merging of CSV outputs into sorted, annotated tables.
//!
//! Inputs may hold several tables. The first record of a file, and the
//! first after a blank line, is a header; a record equal to a header already
//! seen switches back to that table. Lines starting with `#` are comments.
//! Output tables are separated by blank lines and annotations are written as
//! comments, so a report can itself be fed back to `report` and yields the
//! same data rows.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: u64, msg: String },
    #[error("{file}: {source}")]
    Io { file: String, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// Reads every table of every input, merging tables that share a header.
pub fn load(paths: &[impl AsRef<Path>]) -> Result<Vec<Table>, ReportError> {
    let mut tables: Vec<Table> = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let file = p.display().to_string();
        let text = std::fs::read_to_string(p).map_err(|source| ReportError::Io { file: file.clone(), source })?;
        parse_into(&text, &file, &mut tables)?;
    }
    Ok(tables)
}

pub fn parse_into(text: &str, file: &str, tables: &mut Vec<Table>) -> Result<(), ReportError> {
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let malformed = |msg: String| ReportError::Malformed { file: file.into(), line, msg };
        if raw.trim().is_empty() {
            current = None;
            continue;
        }
        if raw.starts_with('#') {
            continue;
        }
        let fields = split_record(raw).map_err(malformed)?;
        if let Some(t) = tables.iter().position(|t| t.header == fields) {
            current = Some(t);
            continue;
        }
        let Some(t) = current else {
            if fields.iter().any(|f| f.is_empty()) {
                return Err(malformed("empty column name".into()));
            }
            tables.push(Table { header: fields, rows: Vec::new() });
            current = Some(tables.len() - 1);
            continue;
        };
        let want = tables[t].header.len();
        if fields.len() != want {
            return Err(malformed(format!("expected {want} fields, found {}", fields.len())));
        }
        tables[t].rows.push(fields);
    }
    Ok(())
}

/// Fields of one CSV line.
fn split_record(line: &str) -> Result<Vec<String>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(line.as_bytes());
    match reader.records().next() {
        Some(Ok(rec)) => Ok(rec.iter().map(str::to_string).collect()),
        Some(Err(e)) => Err(e.to_string()),
        None => Ok(Vec::new()),
    }
}

/// Numbers compare numerically, everything else as text.
fn cmp_field(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        _ => a.cmp(b),
    }
}

pub fn sort(table: &mut Table) {
    table.rows.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| cmp_field(x, y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal));
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn column(table: &Table, name: &str) -> Option<usize> {
    table.header.iter().position(|h| h == name)
}

/// Comment lines with percentiles of each numeric column.
fn annotations(table: &Table) -> Vec<String> {
    let mut out = Vec::new();
    if table.rows.is_empty() {
        return out;
    }
    for (c, name) in table.header.iter().enumerate() {
        let vals: Option<Vec<f64>> = table.rows.iter().map(|r| r[c].parse::<f64>().ok()).collect();
        let Some(mut vals) = vals else { continue };
        vals.sort_by(f64::total_cmp);
        out.push(format!(
            "# {name}: n={} min={} p50={} p90={} p99={} max={}",
            vals.len(),
            vals[0],
            percentile(&vals, 50.0),
            percentile(&vals, 90.0),
            percentile(&vals, 99.0),
            vals[vals.len() - 1]
        ));
    }
    // per-core balance for epoch tables
    if let (Some(core), Some(pkts)) = (column(table, "core"), column(table, "packets_per_s")) {
        let mut per_core: Vec<(u64, f64, usize)> = Vec::new();
        for r in &table.rows {
            let (Ok(c), Ok(p)) = (r[core].parse::<u64>(), r[pkts].parse::<f64>()) else { continue };
            match per_core.iter_mut().find(|e| e.0 == c) {
                Some(e) => {
                    e.1 += p;
                    e.2 += 1;
                }
                None => per_core.push((c, p, 1)),
            }
        }
        per_core.sort_by_key(|e| e.0);
        let means: Vec<f64> = per_core.iter().map(|e| e.1 / e.2 as f64).collect();
        let overall = means.iter().sum::<f64>() / means.len().max(1) as f64;
        if overall > 0.0 {
            for (e, m) in per_core.iter().zip(&means) {
                out.push(format!("# balance core={} packets_per_s={m:.1} dev={:+.1}%", e.0, (m / overall - 1.0) * 100.0));
            }
        }
    }
    out
}

/// Sorted tables with annotations, ready to print.
pub fn render(tables: &mut [Table]) -> String {
    let mut out = String::new();
    for (i, t) in tables.iter_mut().enumerate() {
        sort(t);
        if i > 0 {
            out.push('\n');
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&t.header).expect("in-memory write");
        for r in &t.rows {
            w.write_record(r).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8 input"));
        for a in annotations(t) {
            let _ = writeln!(out, "{a}");
        }
    }
    out
}
