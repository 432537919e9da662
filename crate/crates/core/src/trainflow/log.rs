use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use super::{Result, Stage, TrainError};

/// One logged loss term.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub wall_time: f64,
    pub stage: Stage,
    pub step: u64,
    pub term: String,
    pub value: f64,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
}

/// Append-only training log rendered as tab-separated text.
#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "wall_time\tstage\tstep\tterm\tvalue\tencoder_lr\tdecoder_lr";

    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, stage: Stage, step: u64, term: &str, value: f64, lrs: (f64, f64)) {
        let wall_time = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        self.rows.push(LogRow {
            wall_time,
            stage,
            step,
            term: term.to_string(),
            value,
            encoder_lr: lrs.0,
            decoder_lr: lrs.1,
        });
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    /// Values of one term in step order.
    pub fn series(&self, term: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.term == term)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:.3}\t{}\t{}\t{}\t{:e}\t{:e}\t{:e}",
                r.wall_time, r.stage, r.step, r.term, r.value, r.encoder_lr, r.decoder_lr
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| TrainError::Io(path.to_path_buf(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_has_header_and_one_line_per_row() {
        let mut log = TrainLog::new();
        log.push(Stage::Recon, 1, "pixel", 0.5, (1e-3, 2e-3));
        log.push(Stage::Recon, 1, "gradient", 0.25, (1e-3, 2e-3));
        let text = log.to_tsv();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], TrainLog::HEADER);
        assert_eq!(lines.len(), 3);
        let cols: Vec<&str> = lines[2].split('\t').collect();
        assert_eq!(&cols[1..5], &["recon", "1", "gradient", "2.5e-1"]);
        assert_eq!(log.series("pixel"), vec![(1, 0.5)]);
    }
}
