use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::fidelity::{psnr, ssim};
use super::{MetricsError, Result};
use crate::imagedata::{Dataset, Image, PairedSample};
use crate::netblocks::Checkpoint;
use crate::trainflow::{derain_checkpoint, Tiling};

const HEADER: &str = "image_id\tmetric\tvalue";
const AGGREGATE: &str = "#aggregate";
const FAILURE: &str = "#failure";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-image metric rows, per-image failures, and per-metric aggregates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub failures: Vec<(String, String)>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let count = values.len();
    if values.windows(2).all(|w| w[0] == w[1]) {
        return Aggregate {
            mean: values.first().copied().unwrap_or(f64::NAN),
            std: 0.0,
            count,
        };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    Aggregate {
        mean,
        std: var.sqrt(),
        count,
    }
}

fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-9
}

impl MetricReport {
    pub fn push(&mut self, image_id: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push(MetricRow {
            image_id: image_id.into(),
            metric: metric.into(),
            value,
        });
    }

    pub fn push_failure(&mut self, image_id: impl Into<String>, message: impl Into<String>) {
        self.failures.push((image_id.into(), message.into()));
    }

    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }

    /// Recomputes the aggregates from the rows.
    pub fn finalize(&mut self) {
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &self.rows {
            by_metric.entry(r.metric.clone()).or_default().push(r.value);
        }
        self.aggregates = by_metric.into_iter().map(|(k, v)| (k, aggregate(&v))).collect();
    }

    /// Checks that the stored aggregates agree with the rows.
    pub fn validate(&self) -> Result<()> {
        let mut fresh = self.clone();
        fresh.finalize();
        if fresh.aggregates.len() != self.aggregates.len() {
            return Err(MetricsError::Format("aggregate metrics differ from row metrics".into()));
        }
        for (k, a) in &fresh.aggregates {
            let b = self
                .aggregates
                .get(k)
                .ok_or_else(|| MetricsError::Format(format!("missing aggregate for {k}")))?;
            if a.count != b.count || !same(a.mean, b.mean) || !same(a.std, b.std) {
                return Err(MetricsError::Format(format!("aggregate for {k} disagrees with its rows")));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{HEADER}").unwrap();
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{}", r.image_id, r.metric, r.value).unwrap();
        }
        for (id, msg) in &self.failures {
            writeln!(s, "{FAILURE}\t{id}\t{}", msg.replace(['\t', '\n'], " ")).unwrap();
        }
        for (k, a) in &self.aggregates {
            writeln!(s, "{AGGREGATE}\t{k}\t{}\t{}\t{}", a.mean, a.std, a.count).unwrap();
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(MetricsError::Format("missing report header".into()));
        }
        let num = |s: &str, line: usize| {
            s.parse::<f64>()
                .map_err(|_| MetricsError::Format(format!("line {line}: bad number {s:?}")))
        };
        let mut report = MetricReport::default();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                [AGGREGATE, k, mean, std, count] => {
                    let count = count
                        .parse()
                        .map_err(|_| MetricsError::Format(format!("line {n}: bad count {count:?}")))?;
                    report.aggregates.insert(
                        k.to_string(),
                        Aggregate {
                            mean: num(mean, n)?,
                            std: num(std, n)?,
                            count,
                        },
                    );
                }
                [FAILURE, id, msg] => report.push_failure(*id, *msg),
                [id, metric, value] => report.push(*id, *metric, num(value, n)?),
                _ => return Err(MetricsError::Format(format!("line {n}: unexpected field count"))),
            }
        }
        Ok(report)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| MetricsError::Io(path.to_path_buf(), e))
    }
}

/// Scores every pair of `data` after passing its input through `restore`.
/// Restoration or scoring failures become failure entries.
pub fn evaluate_with(
    data: &Dataset<PairedSample>,
    mut restore: impl FnMut(&Image) -> Result<Image>,
) -> MetricReport {
    let mut report = MetricReport::default();
    for (id, sample) in data.iter() {
        let scored = restore(sample.input()).and_then(|out| Ok((psnr(&out, sample.target())?, ssim(&out, sample.target())?)));
        match scored {
            Ok((p, s)) => {
                report.push(id, "psnr", p);
                report.push(id, "ssim", s);
            }
            Err(e) => report.push_failure(id, e.to_string()),
        }
    }
    report.finalize();
    report
}

/// Derains each input with the checkpoint and scores it against its target.
pub fn evaluate_dataset(ckpt: &Checkpoint, data: &Dataset<PairedSample>, tiling: Option<Tiling>) -> MetricReport {
    evaluate_with(data, |img| Ok(derain_checkpoint(ckpt, img, tiling)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip_with_failures_and_infinities() {
        let mut r = MetricReport::default();
        r.push("a", "psnr", f64::INFINITY);
        r.push("b", "psnr", f64::INFINITY);
        r.push("a", "ssim", 1.0);
        r.push("b", "ssim", 0.25);
        r.push_failure("c", "decode\tfailed");
        r.finalize();
        let text = r.to_tsv();
        assert!(text.contains("a\tpsnr\tinf"));
        let back = MetricReport::from_tsv(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.rows, r.rows);
        assert_eq!(back.aggregates["ssim"].mean, 0.625);
        assert_eq!(back.aggregates["psnr"].mean, f64::INFINITY);
        assert_eq!(back.failures[0].1, "decode failed");
    }

    #[test]
    fn tampered_aggregates_fail_validation() {
        let mut r = MetricReport::default();
        r.push("a", "ssim", 0.5);
        r.finalize();
        r.aggregates.get_mut("ssim").unwrap().mean = 0.6;
        assert!(r.validate().is_err());
    }
}
