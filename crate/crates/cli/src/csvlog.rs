//! Fixed-schema CSV logs.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use iterlearn_core::metrics::MetricsRecord;

/// Exact metrics schema; the plot command parses this back.
pub const METRICS_HEADER: &str = "step,generation,phase,lr,loss_total,loss_i2t,loss_t2i,loss_distill,r1_i2t,r1_t2i,lips_vision,lips_language,topo_sim,active_codes";

pub fn format_metrics_row(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.step,
        r.generation,
        r.phase.name(),
        r.lr,
        r.loss_total,
        r.loss_i2t,
        r.loss_t2i,
        r.loss_distill,
        r.r1_i2t,
        r.r1_t2i,
        r.lips_vision,
        r.lips_language,
        r.topo_sim,
        r.active_codes
    )
}

/// Incremental metrics writer.
pub struct MetricsWriter {
    file: std::fs::File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)
            .with_context(|| format!("log: cannot create {}", path.display()))?;
        writeln!(file, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { file })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", format_metrics_row(record))?;
        Ok(())
    }
}

/// A parsed CSV: header names and rows of raw string cells.
pub struct CsvTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .with_context(|| {
                format!(
                    "csv: no column `{name}` (available: {})",
                    self.columns.join(", ")
                )
            })
    }

    /// Numeric view of one column; unparseable cells become NaN.
    pub fn numeric_column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        Ok(self
            .rows
            .iter()
            .map(|row| row[idx].parse::<f64>().unwrap_or(f64::NAN))
            .collect())
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("csv: cannot read {}", path.display()))?;
    let mut lines = text.lines();
    let header = match lines.next() {
        Some(h) if !h.trim().is_empty() => h,
        _ => bail!("csv: {} is empty", path.display()),
    };
    let columns: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
        if cells.len() != columns.len() {
            bail!(
                "csv: {} line {} has {} cells, expected {}",
                path.display(),
                lineno + 2,
                cells.len(),
                columns.len()
            );
        }
        rows.push(cells);
    }
    Ok(CsvTable { columns, rows })
}

/// Write a probe curve as `step,r1`.
pub fn write_probe_csv(path: &Path, curve: &[(u64, f64)]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = String::from("step,r1\n");
    for (step, r1) in curve {
        out.push_str(&format!("{step},{r1}\n"));
    }
    std::fs::write(path, out).with_context(|| format!("csv: cannot write {}", path.display()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use iterlearn_core::iterate::PhaseTag;

    #[test]
    fn header_matches_contract() {
        assert_eq!(
            METRICS_HEADER,
            "step,generation,phase,lr,loss_total,loss_i2t,loss_t2i,loss_distill,\
             r1_i2t,r1_t2i,lips_vision,lips_language,topo_sim,active_codes"
                .replace(' ', "")
        );
    }

    #[test]
    fn rows_round_trip_through_parser() {
        let rec = MetricsRecord {
            step: 40,
            generation: 1,
            phase: PhaseTag::Distill,
            lr: 2.5e-4,
            loss_total: 4.25,
            loss_i2t: 4.0,
            loss_t2i: 4.5,
            loss_distill: 0.75,
            r1_i2t: 0.5,
            r1_t2i: 0.25,
            lips_vision: 21.5,
            lips_language: 19.0,
            topo_sim: f64::NAN,
            active_codes: 17,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut writer = MetricsWriter::create(&path).unwrap();
        writer.write(&rec).unwrap();
        drop(writer);
        let table = read_csv(&path).unwrap();
        assert_eq!(table.columns.join(","), METRICS_HEADER);
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.numeric_column("lr").unwrap()[0], 2.5e-4);
        assert!(table.numeric_column("topo_sim").unwrap()[0].is_nan());
        assert_eq!(table.rows[0][2], "distill");
    }
}
