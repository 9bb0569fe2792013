use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's examples.
    pub loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub final_eval_loss: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    /// `epoch,loss,seconds` rows. With `timings` off the seconds column is
    /// zero so that reruns compare byte for byte.
    pub fn to_csv(&self, timings: bool) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            let row = EpochRecord {
                seconds: if timings { e.seconds } else { 0.0 },
                ..*e
            };
            w.serialize(row).expect("in-memory csv write");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is UTF-8")
    }

    pub fn write_csv(&self, path: &Path, timings: bool) -> Result<()> {
        std::fs::write(path, self.to_csv(timings)).map_err(io_err(path))
    }
}

/// Appends one JSON object as a line to a run log.
pub fn append_run_log(path: &Path, entry: &serde_json::Value) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    writeln!(f, "{entry}").map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let h = TrainHistory {
            epochs: vec![
                EpochRecord {
                    epoch: 1,
                    loss: 2.5,
                    seconds: 0.75,
                },
                EpochRecord {
                    epoch: 2,
                    loss: 1.25,
                    seconds: 0.5,
                },
            ],
            final_eval_loss: None,
        };
        assert_eq!(h.to_csv(true), "epoch,loss,seconds\n1,2.5,0.75\n2,1.25,0.5\n");
        assert_eq!(h.to_csv(false), "epoch,loss,seconds\n1,2.5,0.0\n2,1.25,0.0\n");
        assert_eq!(h.final_loss(), Some(1.25));
    }

    #[test]
    fn run_log_appends_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.jsonl");
        append_run_log(&p, &serde_json::json!({"epoch": 1})).unwrap();
        append_run_log(&p, &serde_json::json!({"epoch": 2})).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "{\"epoch\":1}\n{\"epoch\":2}\n");
    }
}
