//! Metrics reports (JSON and CSV) and training history CSV.

use super::{write, write_json, Result};
use crate::metrics::MetricsReport;
use crate::train::EpochRecord;
use std::path::{Path, PathBuf};

/// Writes `report` to `json_path` and the CSV summary next to it.
pub fn write_report(json_path: &Path, report: &MetricsReport) -> Result<PathBuf> {
    write_json(json_path, report)?;
    let csv = json_path.with_extension("csv");
    write(&csv, report.to_csv().as_bytes())?;
    Ok(csv)
}

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_loss,val_accuracy";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy));
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    write(path, history_csv(history).as_bytes())
}

/// Parses a history CSV written by [`write_history`].
pub fn parse_history(text: &str) -> Result<Vec<EpochRecord>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err("missing history header".into());
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || format!("line {}: malformed row {l:?}", i + 2);
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_loss: f[2].parse().map_err(|_| bad())?,
                val_accuracy: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::classification_report;

    #[test]
    fn json_and_csv_agree() {
        let dir = tempfile::tempdir().unwrap();
        let r = classification_report(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap();
        let csv_path = write_report(&dir.path().join("report.json"), &r).unwrap();
        let back: MetricsReport = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(csv_path).unwrap();
        let mut rows = csv.lines();
        assert_eq!(rows.next(), Some(MetricsReport::CSV_HEADER));
        let values: Vec<f64> = rows.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(values, r.csv_values().to_vec());
    }

    #[test]
    fn history_round_trip() {
        let h = vec![
            EpochRecord { epoch: 1, train_loss: 0.7, val_loss: 0.69, val_accuracy: 0.5 },
            EpochRecord { epoch: 2, train_loss: 0.1 + 0.2, val_loss: 1e-9, val_accuracy: 1.0 },
        ];
        assert_eq!(parse_history(&history_csv(&h)).unwrap(), h);
        assert!(parse_history("epoch\n").is_err());
    }
}
