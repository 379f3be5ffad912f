//! Append-only CSV experiment reports.
//!
//! Fixed header `experiment,seed,stage,metric,value,seconds`; one block of
//! rows is appended atomically per run. Every field except the wall-clock
//! seconds is deterministic for a fixed config and seed.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

pub const HEADER: &str = "experiment,seed,stage,metric,value,seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub seed: u64,
    pub stage: String,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.3}",
            self.experiment, self.seed, self.stage, self.metric, self.value, self.seconds
        )
    }
}

/// Append rows to `path`, writing the header first when the file is new.
/// The whole block goes out in one write.
pub fn append_rows(path: impl AsRef<Path>, rows: &[ReportRow]) -> std::io::Result<()> {
    if rows.is_empty() {
        return Ok(());
    }
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let fresh = !path.exists();
    let mut block = String::new();
    if fresh {
        block.push_str(HEADER);
        block.push('\n');
    }
    for row in rows {
        block.push_str(&row.to_csv());
        block.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(block.as_bytes())?;
    Ok(())
}

/// Parse and validate a report file against the fixed schema.
pub fn read_rows(path: impl AsRef<Path>) -> Result<Vec<ReportRow>, String> {
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read {}: {e}", path.as_ref().display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == HEADER => {}
        other => return Err(format!("bad report header {other:?}")),
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            ));
        }
        if fields[0].is_empty() || fields[2].is_empty() || fields[3].is_empty() {
            return Err(format!("line {}: empty identifier field", lineno + 2));
        }
        let seed = fields[1]
            .parse::<u64>()
            .map_err(|e| format!("line {}: bad seed: {e}", lineno + 2))?;
        let value = fields[4]
            .parse::<f64>()
            .map_err(|e| format!("line {}: bad value: {e}", lineno + 2))?;
        let seconds = fields[5]
            .parse::<f64>()
            .map_err(|e| format!("line {}: bad seconds: {e}", lineno + 2))?;
        if !value.is_finite() || !seconds.is_finite() {
            return Err(format!("line {}: non-finite numeric field", lineno + 2));
        }
        rows.push(ReportRow {
            experiment: fields[0].to_string(),
            seed,
            stage: fields[2].to_string(),
            metric: fields[3].to_string(),
            value,
            seconds,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let rows = vec![
            ReportRow {
                experiment: "train-tiny-cnn".into(),
                seed: 1,
                stage: "float".into(),
                metric: "eval_accuracy".into(),
                value: 0.991,
                seconds: 12.5,
            },
            ReportRow {
                experiment: "train-tiny-cnn".into(),
                seed: 2,
                stage: "float".into(),
                metric: "eval_accuracy".into(),
                value: 0.989,
                seconds: 12.1,
            },
        ];
        append_rows(&path, &rows[..1]).unwrap();
        append_rows(&path, &rows[1..]).unwrap();
        let read = read_rows(&path).unwrap();
        assert_eq!(read.len(), 2);
        assert_eq!(read[0].experiment, "train-tiny-cnn");
        assert!((read[0].value - 0.991).abs() < 1e-9);
        // header written exactly once
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.matches(HEADER).count(), 1);
    }

    #[test]
    fn schema_check_rejects_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        std::fs::write(&path, format!("{HEADER}\na,b,c\n")).unwrap();
        assert!(read_rows(&path).is_err());
        std::fs::write(&path, format!("{HEADER}\nx,1,s,m,notanumber,0.1\n")).unwrap();
        assert!(read_rows(&path).is_err());
        std::fs::write(&path, "wrong,header\n").unwrap();
        assert!(read_rows(&path).is_err());
        std::fs::write(&path, format!("{HEADER}\nx,1,s,m,0.5,0.1\n")).unwrap();
        assert!(read_rows(&path).is_ok());
    }
}
