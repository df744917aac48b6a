//! CSV output, seed aggregation and confidence intervals.
//!
//! Every file starts with a `schema_version` column (currently 1).
//!
//! | file | one row per |
//! |------|-------------|
//! | `metrics.csv` | seed and episode ([`MetricsRow`]) |
//! | `aggregate.csv` | episode and metric, across seeds ([`AggregateRow`]) |
//! | `seed_summary.csv` | seed and metric, final-window mean ([`SeedSummaryRow`]) |
//! | `summary.csv` | metric, across the seed summaries ([`SummaryRow`]) |
//! | `exchange_log.csv` | logged upload ([`ExchangeRow`]) |
//! | `admm_trace.csv` | ADMM iteration on traced episodes ([`TraceRow`]) |
//! | `slots.csv` | slot on logged episodes ([`SlotRecord`]) |
//! | `runtime.csv` | seed, wall-clock seconds (not deterministic) |

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::comm::{ExchangeRecord, MessageKind};
use crate::error::{Error, Result};

use super::config::Algorithm;
use super::sim::{MetricsRow, SCHEMA_VERSION};

/// Sample mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub n: usize,
    pub mean: f64,
    /// `None` with fewer than two samples.
    pub half_width: Option<f64>,
}

impl Interval {
    pub fn low(&self) -> Option<f64> {
        self.half_width.map(|h| self.mean - h)
    }

    pub fn high(&self) -> Option<f64> {
        self.half_width.map(|h| self.mean + h)
    }

    /// Whether the two intervals are disjoint.
    pub fn separated_from(&self, other: &Interval) -> bool {
        match (self.low(), self.high(), other.low(), other.high()) {
            (Some(a_lo), Some(a_hi), Some(b_lo), Some(b_hi)) => a_hi < b_lo || b_hi < a_lo,
            _ => false,
        }
    }
}

pub fn mean_ci(xs: &[f64]) -> Option<Interval> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Some(Interval { n, mean, half_width: None });
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    Some(Interval { n, mean, half_width: Some(t * (var / n as f64).sqrt()) })
}

type Getter = fn(&MetricsRow) -> Option<f64>;

/// Metrics carried into the aggregate and summary files.
pub const METRICS: [(&str, Getter); 15] = [
    ("reward_total", |r| Some(r.reward_total)),
    ("reward_dsm", |r| Some(r.reward_dsm)),
    ("reward_pv", |r| Some(r.reward_pv)),
    ("reward_ess", |r| Some(r.reward_ess)),
    ("dsm_cost", |r| Some(r.dsm_cost)),
    ("mean_price", |r| Some(r.mean_price)),
    ("grid_import_kwh", |r| Some(r.grid_import_kwh)),
    ("grid_export_kwh", |r| Some(r.grid_export_kwh)),
    ("messages", |r| Some(r.messages as f64)),
    ("failed_transmissions", |r| Some(r.failed_transmissions as f64)),
    ("isolated_slots", |r| Some(r.isolated_slots as f64)),
    ("coordination_rounds", |r| Some(r.coordination_rounds as f64)),
    ("belief_accuracy", |r| r.belief_accuracy),
    ("loss", |r| r.loss),
    ("epsilon", |r| r.epsilon),
];

pub fn metric(name: &str) -> Option<Getter> {
    METRICS.iter().find(|(n, _)| *n == name).map(|(_, g)| *g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub episode: usize,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummaryRow {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub metric: String,
    pub episodes: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl SummaryRow {
    pub fn interval(&self) -> Interval {
        Interval { n: self.n, mean: self.mean, half_width: self.ci_high.map(|h| h - self.mean) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeRow {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub episode: usize,
    pub slot: u32,
    pub round: usize,
    pub sender: usize,
    pub receivers: usize,
    pub kind: MessageKind,
    pub delivered: bool,
}

impl ExchangeRow {
    pub fn new(algorithm: Algorithm, seed: u64, r: &ExchangeRecord) -> Self {
        ExchangeRow {
            schema_version: SCHEMA_VERSION,
            algorithm,
            seed,
            episode: r.episode,
            slot: r.slot,
            round: r.round,
            sender: r.sender,
            receivers: r.receivers.len(),
            kind: r.kind,
            delivered: !r.upload_failed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub episodes: usize,
    pub seconds: f64,
}

/// Per-episode mean and interval of every metric across seeds. `rows` may
/// hold several seeds in any order.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let Some(algorithm) = rows.first().map(|r| r.algorithm) else {
        return Vec::new();
    };
    let episodes = rows.iter().map(|r| r.episode + 1).max().unwrap_or(0);
    let mut by_episode: Vec<Vec<&MetricsRow>> = vec![Vec::new(); episodes];
    for r in rows {
        by_episode[r.episode].push(r);
    }
    let mut out = Vec::new();
    for (episode, group) in by_episode.iter().enumerate() {
        for (name, get) in METRICS {
            let xs: Vec<f64> = group.iter().filter_map(|r| get(r)).collect();
            if let Some(ci) = mean_ci(&xs) {
                out.push(AggregateRow {
                    schema_version: SCHEMA_VERSION,
                    algorithm,
                    episode,
                    metric: name.to_string(),
                    n: ci.n,
                    mean: ci.mean,
                    ci_low: ci.low(),
                    ci_high: ci.high(),
                });
            }
        }
    }
    out
}

/// Mean of each metric over the last `ceil(window * episodes)` episodes of
/// each seed.
pub fn seed_summaries(rows: &[MetricsRow], window: f64) -> Vec<SeedSummaryRow> {
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut out = Vec::new();
    for seed in seeds {
        let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.seed == seed).collect();
        let episodes = mine.iter().map(|r| r.episode + 1).max().unwrap_or(0);
        let keep = ((window * episodes as f64).ceil() as usize).clamp(1, episodes.max(1));
        let from = episodes - keep;
        let tail: Vec<&MetricsRow> = mine.into_iter().filter(|r| r.episode >= from).collect();
        for (name, get) in METRICS {
            let xs: Vec<f64> = tail.iter().filter_map(|r| get(r)).collect();
            if xs.is_empty() {
                continue;
            }
            out.push(SeedSummaryRow {
                schema_version: SCHEMA_VERSION,
                algorithm: tail[0].algorithm,
                seed,
                metric: name.to_string(),
                episodes: xs.len(),
                value: xs.iter().sum::<f64>() / xs.len() as f64,
            });
        }
    }
    out
}

pub fn summarize(seeds: &[SeedSummaryRow]) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    let Some(algorithm) = seeds.first().map(|r| r.algorithm) else {
        return out;
    };
    for (name, _) in METRICS {
        let xs: Vec<f64> = seeds.iter().filter(|r| r.metric == name).map(|r| r.value).collect();
        if let Some(ci) = mean_ci(&xs) {
            out.push(SummaryRow {
                schema_version: SCHEMA_VERSION,
                algorithm,
                metric: name.to_string(),
                n: ci.n,
                mean: ci.mean,
                ci_low: ci.low(),
                ci_high: ci.high(),
            });
        }
    }
    out
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Writes a header-only file when `rows` is empty.
pub fn write_csv_with_header<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    if !rows.is_empty() {
        return write_csv(path, rows);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}
