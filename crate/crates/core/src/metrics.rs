//! Per-round metrics, their CSV form, and cross-seed summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "scheme,seed,round,train_loss,test_loss,test_accuracy,\
uplink_payload_bytes,uplink_total_bytes,downlink_payload_bytes,downlink_total_bytes,mean_p_t,mean_k";

/// One row of `metrics.csv`. Byte counters are cumulative from round 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub scheme: String,
    pub seed: u64,
    /// 1-based.
    pub round: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub uplink_payload_bytes: u64,
    pub uplink_total_bytes: u64,
    pub downlink_payload_bytes: u64,
    pub downlink_total_bytes: u64,
    /// Mean pruning ratio over the round's iterations (0 for non-pruning schemes).
    pub mean_p_t: f64,
    /// Mean transmitted channel count over the round's iterations.
    pub mean_k: f64,
}

impl RoundMetrics {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.scheme,
            self.seed,
            self.round,
            self.train_loss,
            self.test_loss,
            self.test_accuracy,
            self.uplink_payload_bytes,
            self.uplink_total_bytes,
            self.downlink_payload_bytes,
            self.downlink_total_bytes,
            self.mean_p_t,
            self.mean_k
        )
    }

    pub fn from_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 12 {
            return Err(Error::Data(format!(
                "metrics row has {} fields, expected 12: {line}",
                f.len()
            )));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Data(format!("bad {what} value `{s}` in metrics row")))
        }
        Ok(RoundMetrics {
            scheme: f[0].to_string(),
            seed: num(f[1], "seed")?,
            round: num(f[2], "round")?,
            train_loss: num(f[3], "train_loss")?,
            test_loss: num(f[4], "test_loss")?,
            test_accuracy: num(f[5], "test_accuracy")?,
            uplink_payload_bytes: num(f[6], "uplink_payload_bytes")?,
            uplink_total_bytes: num(f[7], "uplink_total_bytes")?,
            downlink_payload_bytes: num(f[8], "downlink_payload_bytes")?,
            downlink_total_bytes: num(f[9], "downlink_total_bytes")?,
            mean_p_t: num(f[10], "mean_p_t")?,
            mean_k: num(f[11], "mean_k")?,
        })
    }
}

pub fn metrics_csv(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RoundMetrics>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim_end() == METRICS_HEADER => {}
        _ => {
            return Err(Error::Data(
                "metrics file does not start with the expected header".into(),
            ))
        }
    }
    lines.map(RoundMetrics::from_csv_row).collect()
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<RoundMetrics>> {
    parse_metrics_csv(&fs::read_to_string(path)?)
}

/// First 1-based round whose test accuracy reaches `target`.
pub fn rounds_to_accuracy(rows: &[RoundMetrics], target: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.test_accuracy >= target)
        .map(|r| r.round)
}

/// Cross-seed aggregate for one scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub final_accuracy: Vec<f64>,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub first_train_loss_mean: f64,
    pub final_train_loss_mean: f64,
    pub final_test_loss_mean: f64,
    pub mean_p_t: f64,
    pub mean_k: f64,
    pub uplink_payload_bytes_mean: f64,
    pub uplink_total_bytes_mean: f64,
    pub downlink_payload_bytes_mean: f64,
    pub downlink_total_bytes_mean: f64,
    pub target_accuracy: f64,
    /// Per seed; `None` when the target was never reached.
    pub rounds_to_target: Vec<Option<usize>>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Groups rows by scheme (in order of first appearance) and then by seed.
pub fn summarize(rows: &[RoundMetrics], target: f64) -> Vec<SchemeSummary> {
    let mut schemes: Vec<&str> = Vec::new();
    for r in rows {
        if !schemes.contains(&r.scheme.as_str()) {
            schemes.push(&r.scheme);
        }
    }
    schemes
        .into_iter()
        .map(|scheme| {
            let mine: Vec<&RoundMetrics> = rows.iter().filter(|r| r.scheme == scheme).collect();
            let mut seeds: Vec<u64> = Vec::new();
            for r in &mine {
                if !seeds.contains(&r.seed) {
                    seeds.push(r.seed);
                }
            }
            let per_seed: Vec<Vec<RoundMetrics>> = seeds
                .iter()
                .map(|&s| {
                    let mut v: Vec<RoundMetrics> = mine
                        .iter()
                        .filter(|r| r.seed == s)
                        .map(|r| (*r).clone())
                        .collect();
                    v.sort_by_key(|r| r.round);
                    v
                })
                .collect();
            let last = |f: fn(&RoundMetrics) -> f64| -> Vec<f64> {
                per_seed
                    .iter()
                    .map(|v| f(v.last().expect("non-empty")))
                    .collect()
            };
            let final_accuracy = last(|r| r.test_accuracy);
            SchemeSummary {
                scheme: scheme.to_string(),
                rounds: per_seed.iter().map(|v| v.len()).max().unwrap_or(0),
                final_accuracy_mean: mean(&final_accuracy),
                final_accuracy_std: std_dev(&final_accuracy),
                final_accuracy,
                first_train_loss_mean: mean(
                    &per_seed.iter().map(|v| v[0].train_loss).collect::<Vec<_>>(),
                ),
                final_train_loss_mean: mean(&last(|r| r.train_loss)),
                final_test_loss_mean: mean(&last(|r| r.test_loss)),
                mean_p_t: mean(&mine.iter().map(|r| r.mean_p_t).collect::<Vec<_>>()),
                mean_k: mean(&mine.iter().map(|r| r.mean_k).collect::<Vec<_>>()),
                uplink_payload_bytes_mean: mean(&last(|r| r.uplink_payload_bytes as f64)),
                uplink_total_bytes_mean: mean(&last(|r| r.uplink_total_bytes as f64)),
                downlink_payload_bytes_mean: mean(&last(|r| r.downlink_payload_bytes as f64)),
                downlink_total_bytes_mean: mean(&last(|r| r.downlink_total_bytes as f64)),
                target_accuracy: target,
                rounds_to_target: per_seed
                    .iter()
                    .map(|v| rounds_to_accuracy(v, target))
                    .collect(),
                seeds,
            }
        })
        .collect()
}

fn mib(bytes: f64) -> f64 {
    bytes / (1024.0 * 1024.0)
}

/// Plain-text comparison table.
pub fn format_report(summaries: &[SchemeSummary]) -> String {
    let mut out = String::new();
    let width = summaries
        .iter()
        .map(|s| s.scheme.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let target = summaries.first().map(|s| s.target_accuracy).unwrap_or(0.0);
    let _ = writeln!(
        out,
        "{:<width$}  {:>5}  {:>15}  {:>10}  {:>6}  {:>6}  {:>12}  {:>12}  {:>12}",
        "scheme",
        "seeds",
        "final acc",
        "train loss",
        "P_t",
        "k",
        "up MiB",
        "down MiB",
        format!("rounds>={target}"),
    );
    for s in summaries {
        let reached: Vec<String> = s
            .rounds_to_target
            .iter()
            .map(|r| r.map_or("-".to_string(), |r| r.to_string()))
            .collect();
        let _ = writeln!(
            out,
            "{:<width$}  {:>5}  {:>7.4}±{:<7.4}  {:>10.4}  {:>6.3}  {:>6.2}  {:>12.3}  {:>12.3}  {:>12}",
            s.scheme,
            s.seeds.len(),
            s.final_accuracy_mean,
            s.final_accuracy_std,
            s.final_train_loss_mean,
            s.mean_p_t,
            s.mean_k,
            mib(s.uplink_total_bytes_mean),
            mib(s.downlink_total_bytes_mean),
            reached.join("/"),
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scheme: &str, seed: u64, round: usize, acc: f64) -> RoundMetrics {
        RoundMetrics {
            scheme: scheme.into(),
            seed,
            round,
            train_loss: 2.0 / round as f64,
            test_loss: 1.5,
            test_accuracy: acc,
            uplink_payload_bytes: 100 * round as u64,
            uplink_total_bytes: 120 * round as u64,
            downlink_payload_bytes: 90,
            downlink_total_bytes: 110,
            mean_p_t: 0.7,
            mean_k: 5.0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row("acp_sl", 1, 1, 0.5), row("standard", 2, 3, 0.8125)];
        let text = metrics_csv(&rows);
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("nope\n").is_err());
    }

    #[test]
    fn rounds_to_accuracy_is_first_hit() {
        let rows = vec![
            row("a", 1, 1, 0.5),
            row("a", 1, 2, 0.66),
            row("a", 1, 3, 0.6),
        ];
        assert_eq!(rounds_to_accuracy(&rows, 0.65), Some(2));
        assert_eq!(rounds_to_accuracy(&rows, 0.9), None);
    }

    #[test]
    fn summary_groups_by_scheme_and_seed() {
        let rows = vec![
            row("a", 1, 1, 0.4),
            row("a", 1, 2, 0.6),
            row("a", 2, 1, 0.5),
            row("a", 2, 2, 0.8),
            row("b", 1, 1, 0.1),
        ];
        let s = summarize(&rows, 0.7);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].seeds, vec![1, 2]);
        assert_eq!(s[0].final_accuracy, vec![0.6, 0.8]);
        assert!((s[0].final_accuracy_mean - 0.7).abs() < 1e-12);
        assert!((s[0].first_train_loss_mean - 2.0).abs() < 1e-12);
        assert_eq!(s[0].rounds_to_target, vec![None, Some(2)]);
        assert_eq!(s[0].uplink_total_bytes_mean, 240.0);
        assert!(format_report(&s).contains("standard") || format_report(&s).contains("a "));
    }
}
