//! `mgsim`: command-line front end of the microgrid simulator.
//!
//! Log verbosity comes from `MGSIM_LOG` (env_logger syntax, default `info`).

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use mgrid::checkpoint::Checkpoint;
use mgrid::grid::AGENT_NAMES;
use mgrid::harness::experiment::{run_seed, write_outputs};
use mgrid::harness::{isolation_probe, run_experiment, run_sweep, Algorithm, RunConfig, Simulation, SweepParam};

#[derive(Parser)]
#[command(name = "mgsim", version, about = "Multi-agent microgrid energy trading simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train or run one algorithm over several seeds.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat `run` for each value of a parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "p_fail")]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all three algorithms and report the final-window reward ranking.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Redraw the figures of one or more output directories.
    Plot {
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Defaults to the first input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Save or resume a training run.
    #[command(subcommand)]
    Checkpoint(CheckpointCmd),
    /// Train one BA-DRL seed, then compare belief-based and neglecting
    /// handling of a scripted upload failure.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 15)]
        slot: u32,
        /// dsm, pv or ess.
        #[arg(long, default_value = "ess")]
        agent: String,
    },
}

#[derive(Subcommand)]
enum CheckpointCmd {
    /// Train one seed for the configured episodes and write a checkpoint.
    Save {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Inspect a checkpoint and optionally continue training up to
    /// `--episodes`, writing outputs to `--out`.
    Load {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algorithm>,
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// 10000 episodes with failures over the second half.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_algo(s: &str) -> std::result::Result<Algorithm, String> {
    s.parse().map_err(|e: mgrid::Error| e.to_string())
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.full_scale {
            cfg = cfg.full_scale();
        }
        if let Some(a) = self.algo {
            cfg.run.algorithm = a;
        }
        if let Some(n) = self.seeds {
            cfg.run.seeds = (0..n).collect();
        }
        if let Some(e) = self.episodes {
            cfg.run.episodes = e;
        }
        if let Some(j) = self.jobs {
            cfg.run.jobs = j;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn agent_index(name: &str) -> Result<usize> {
    AGENT_NAMES
        .iter()
        .position(|&a| a == name)
        .with_context(|| format!("unknown agent {name:?} (expected dsm, pv or ess)"))
}

fn print_summary(report: &mgrid::harness::ExperimentReport) {
    for m in ["reward_total", "dsm_cost", "failed_transmissions"] {
        if let Some(s) = report.summary_of(m) {
            let ci = s.interval().half_width.map_or(String::new(), |h| format!(" +/- {h:.4}"));
            println!("{} {m}: {:.4}{ci} (n={})", report.algorithm, s.mean, s.n);
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MGSIM_LOG", "info")).init();
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { common, out } => {
            let cfg = common.config()?;
            let report = run_experiment(&cfg, &out)?;
            print_summary(&report);
            println!("wrote {}", out.display());
        }
        Cmd::Sweep { common, param, values, out } => {
            let cfg = common.config()?;
            let rep = run_sweep(&cfg, SweepParam::parse(&param)?, &values, &out)?;
            print!("{}", rep.text);
        }
        Cmd::Compare { common, out } => {
            let base = common.config()?;
            let mut means = Vec::new();
            for algo in Algorithm::ALL {
                let mut cfg = base.clone();
                cfg.run.algorithm = algo;
                let report = run_experiment(&cfg, &out.join(algo.name()))?;
                print_summary(&report);
                let s = report.summary_of("reward_total").context("no reward summary")?;
                means.push((algo, s.interval()));
            }
            means.sort_by(|a, b| b.1.mean.total_cmp(&a.1.mean));
            let order: Vec<String> = means.iter().map(|(a, i)| format!("{a} ({:.4})", i.mean)).collect();
            println!("ranking: {}", order.join(" > "));
            let dirs: Vec<PathBuf> = Algorithm::ALL.iter().map(|a| out.join(a.name())).collect();
            mgrid::harness::plot::plot_dirs(&dirs, &out)?;
        }
        Cmd::Plot { input, out } => {
            let out = out.unwrap_or_else(|| input[0].clone());
            for p in mgrid::harness::plot::plot_dirs(&input, &out)? {
                println!("{}", p.display());
            }
        }
        Cmd::Checkpoint(CheckpointCmd::Save { common, seed, out }) => {
            let cfg = common.config()?;
            if !cfg.run.algorithm.learns() {
                bail!("{} has no learned state to checkpoint", cfg.run.algorithm);
            }
            let run = run_seed(&cfg, seed, None)?;
            run.sim.checkpoint().save(&out)?;
            println!("saved episode {} of seed {seed} to {}", run.sim.episode, out.display());
        }
        Cmd::Checkpoint(CheckpointCmd::Load { common, input, seed, out }) => {
            let ck = Checkpoint::<f64>::load(&input)?;
            println!(
                "{}: episode {}, {} training events, {} agents, {} random streams",
                input.display(),
                ck.episode,
                ck.train_events,
                ck.agents.len(),
                ck.rngs.len()
            );
            if let Some(out) = out {
                let cfg = common.config()?;
                let sim = Simulation::from_checkpoint(&cfg, seed, &ck)?;
                info!("resuming at episode {} of {}", sim.episode, cfg.run.episodes);
                let run = run_seed(&cfg, seed, Some(sim))?;
                write_outputs(&cfg, std::slice::from_ref(&run), &out)?;
                println!("wrote {}", out.display());
            }
        }
        Cmd::Probe { common, slot, agent } => {
            let mut cfg = common.config()?;
            cfg.run.algorithm = Algorithm::BaDrl;
            let agent = agent_index(&agent)?;
            let seed = cfg.run.seeds[0];
            let run = run_seed(&cfg, seed, None)?;
            let p = isolation_probe(&run.sim, slot, agent)?;
            println!("slot {slot}, {} cut off", AGENT_NAMES[agent]);
            for (name, r) in [("belief-ce", &p.belief), ("neglect", &p.neglect)] {
                println!(
                    "{name}: actions (dsm {}, pv {}, ess {}) price {:.3} import {:.2} kW",
                    r.dsm_action, r.pv_action, r.ess_action, r.price, r.grid_import_kw
                );
            }
        }
    }
    Ok(())
}
