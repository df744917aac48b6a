//! Multi-seed experiments, parameter sweeps and the isolation probe.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::comm::FailureModel;
use crate::error::{Error, Result};

use super::config::{Algorithm, PaHandling, RunConfig};
use super::output::{
    aggregate, seed_summaries, summarize, write_csv, write_csv_with_header, ExchangeRow, RuntimeRow, SummaryRow,
};
use super::plot;
use super::sim::{EpisodeOptions, MetricsRow, Simulation, SlotRecord, TraceRow, SCHEMA_VERSION};

/// Everything one seed produced.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    pub slots: Vec<SlotRecord>,
    pub traces: Vec<TraceRow>,
    pub exchanges: Vec<ExchangeRow>,
    pub seconds: f64,
    pub sim: Simulation,
}

/// Runs the configured number of episodes for one seed, starting from
/// `sim` when given.
pub fn run_seed(cfg: &RunConfig, seed: u64, sim: Option<Simulation>) -> Result<SeedRun> {
    let start = Instant::now();
    let mut sim = match sim {
        Some(s) => s,
        None => Simulation::new(cfg, seed)?,
    };
    let total = cfg.run.episodes;
    let (mut rows, mut slots, mut traces, mut exchanges) = (Vec::with_capacity(total), Vec::new(), Vec::new(), Vec::new());
    let every = |n: usize, e: usize| n > 0 && (e % n == 0 || e + 1 == total);
    while sim.episode < total {
        let e = sim.episode;
        let opts = EpisodeOptions {
            record_slots: every(cfg.run.slot_log_every, e),
            record_trace: cfg.run.algorithm == Algorithm::Admm && every(cfg.run.trace_every, e),
            ..EpisodeOptions::default()
        };
        let out = sim.run_episode(opts)?;
        rows.push(out.row);
        slots.extend(out.slots);
        traces.extend(out.traces);
        exchanges.extend(out.exchanges.iter().map(|r| ExchangeRow::new(cfg.run.algorithm, seed, r)));
    }
    let run = SeedRun { seed, rows, slots, traces, exchanges, seconds: start.elapsed().as_secs_f64(), sim };
    info!("{} seed {seed}: {total} episodes in {:.1} s", cfg.run.algorithm, run.seconds);
    Ok(run)
}

/// Runs every seed, at most `cfg.run.jobs` at a time. Results come back in
/// seed-list order whatever the scheduling.
pub fn run_seeds(cfg: &RunConfig) -> Result<Vec<SeedRun>> {
    let seeds = &cfg.run.seeds;
    let jobs = cfg.run.jobs.clamp(1, seeds.len());
    if jobs == 1 {
        return seeds.iter().map(|&s| run_seed(cfg, s, None)).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedRun>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = run_seed(cfg, seeds[i], None);
                results.lock().expect("no poisoned worker")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned worker")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub algorithm: Algorithm,
    pub out_dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<SeedRun>,
}

impl ExperimentReport {
    pub fn summary_of(&self, metric: &str) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.metric == metric)
    }
}

/// Runs all seeds and writes the CSV files, plots and a copy of the
/// configuration to `out_dir`.
pub fn run_experiment(cfg: &RunConfig, out_dir: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    let runs = run_seeds(cfg)?;
    write_outputs(cfg, &runs, out_dir)?;
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    let summary = summarize(&seed_summaries(&rows, cfg.run.summary_window));
    Ok(ExperimentReport { algorithm: cfg.run.algorithm, out_dir: out_dir.to_path_buf(), summary, runs })
}

pub fn write_outputs(cfg: &RunConfig, runs: &[SeedRun], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows: Vec<MetricsRow> = runs.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    write_csv(&out_dir.join("metrics.csv"), &rows)?;
    let agg = aggregate(&rows);
    write_csv(&out_dir.join("aggregate.csv"), &agg)?;
    let per_seed = seed_summaries(&rows, cfg.run.summary_window);
    write_csv(&out_dir.join("seed_summary.csv"), &per_seed)?;
    write_csv(&out_dir.join("summary.csv"), &summarize(&per_seed))?;

    let exchanges: Vec<&ExchangeRow> = runs.iter().flat_map(|r| &r.exchanges).collect();
    write_csv_with_header(
        &out_dir.join("exchange_log.csv"),
        &["schema_version", "algorithm", "seed", "episode", "slot", "round", "sender", "receivers", "kind", "delivered"],
        &exchanges,
    )?;
    if cfg.run.algorithm == Algorithm::Admm {
        let traces: Vec<&TraceRow> = runs.iter().flat_map(|r| &r.traces).collect();
        write_csv_with_header(
            &out_dir.join("admm_trace.csv"),
            &["schema_version", "seed", "episode", "slot", "iteration", "primal_residual", "dual_residual", "converged"],
            &traces,
        )?;
    }
    if cfg.run.slot_log_every > 0 {
        let slots: Vec<&SlotRecord> = runs.iter().flat_map(|r| &r.slots).collect();
        write_csv(&out_dir.join("slots.csv"), &slots)?;
    }
    let runtime: Vec<RuntimeRow> = runs
        .iter()
        .map(|r| RuntimeRow { algorithm: cfg.run.algorithm, seed: r.seed, episodes: r.rows.len(), seconds: r.seconds })
        .collect();
    write_csv(&out_dir.join("runtime.csv"), &runtime)?;
    let cfg_path = out_dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    plot::plot_aggregate(&agg, out_dir)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    PFail,
    Fidelity,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::PFail => "p_fail",
            SweepParam::Fidelity => "fidelity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "p_fail" => Ok(SweepParam::PFail),
            "fidelity" => Ok(SweepParam::Fidelity),
            _ => Err(Error::Config(format!("unknown sweep parameter {s:?} (expected p_fail or fidelity)"))),
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            SweepParam::PFail => c.comm.p_fail = value,
            SweepParam::Fidelity => c.belief.fidelity = value,
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub algorithm: Algorithm,
    pub param: String,
    pub value: f64,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Increasing,
    Decreasing,
    Constant,
    Mixed,
}

/// Direction of a sequence, with ties allowed inside a monotone run.
pub fn trend(xs: &[f64]) -> Trend {
    let up = xs.windows(2).all(|w| w[1] >= w[0]);
    let down = xs.windows(2).all(|w| w[1] <= w[0]);
    match (up, down) {
        (true, true) => Trend::Constant,
        (true, false) => Trend::Increasing,
        (false, true) => Trend::Decreasing,
        (false, false) => Trend::Mixed,
    }
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub text: String,
}

pub const SWEEP_METRICS: [&str; 5] = ["reward_total", "dsm_cost", "failed_transmissions", "isolated_slots", "belief_accuracy"];

/// One experiment per value in `out_dir/<param>=<value>`, plus `sweep.csv`,
/// `sweep_report.txt` and `sweep.svg`.
pub fn run_sweep(cfg: &RunConfig, param: SweepParam, values: &[f64], out_dir: &Path) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &v in values {
        let c = param.apply(cfg, v);
        let dir = out_dir.join(format!("{}={v}", param.name()));
        let rep = run_experiment(&c, &dir)?;
        for s in rep.summary.iter().filter(|s| SWEEP_METRICS.contains(&s.metric.as_str())) {
            rows.push(SweepRow {
                schema_version: SCHEMA_VERSION,
                algorithm: cfg.run.algorithm,
                param: param.name().to_string(),
                value: v,
                metric: s.metric.clone(),
                n: s.n,
                mean: s.mean,
                ci_low: s.ci_low,
                ci_high: s.ci_high,
            });
        }
    }
    write_csv(&out_dir.join("sweep.csv"), &rows)?;
    let mut text = format!("{} sweep over {} = {values:?}\n", cfg.run.algorithm, param.name());
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    for m in SWEEP_METRICS {
        let series: Vec<f64> = order
            .iter()
            .filter_map(|&i| rows.iter().find(|r| r.metric == m && r.value == values[i]).map(|r| r.mean))
            .collect();
        if series.len() == values.len() {
            let _ = writeln!(text, "{m}: {:?} {series:?}", trend(&series));
        }
    }
    let report_path = out_dir.join("sweep_report.txt");
    std::fs::write(&report_path, &text).map_err(|e| Error::io(&report_path, e))?;
    plot::plot_sweep(&rows, out_dir)?;
    Ok(SweepReport { rows, text })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub slot: u32,
    pub agent: usize,
    pub belief: SlotRecord,
    pub neglect: SlotRecord,
}

/// Replays one greedy, non-learning day of `sim` twice with `agent`'s
/// upload forced to fail at `slot` and no other losses: once with the
/// connected agents reasoning over their beliefs, once holding the cut-off
/// agent at its null action. Both copies start from identical random
/// streams, so the days coincide until `slot`.
pub fn isolation_probe(sim: &Simulation, slot: u32, agent: usize) -> Result<ProbeResult> {
    let play = |handling: PaHandling| -> Result<SlotRecord> {
        let mut s = sim.clone();
        s.cfg.run.pa_handling = handling;
        s.hub.model = FailureModel::reliable();
        s.hub.force_failure(slot, agent);
        let out = s.run_episode(EpisodeOptions { greedy: true, frozen: true, record_slots: true, record_trace: false })?;
        out.slots
            .into_iter()
            .find(|r| r.slot == slot)
            .ok_or_else(|| Error::Precondition(format!("slot {slot} is outside the day")))
    };
    Ok(ProbeResult { slot, agent, belief: play(PaHandling::BeliefCe)?, neglect: play(PaHandling::Neglect)? })
}
