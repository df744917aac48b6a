//! Acceptance run: one line per criterion, nonzero exit on any failure.
//!
//! The end-to-end criterion trains 3 x 10 seeds x 3000 episodes (about an
//! hour on one core). For quick local iteration only:
//! `MGSIM_ACCEPT_EPISODES`, `MGSIM_ACCEPT_SEEDS` shrink it and
//! `MGSIM_ACCEPT_OUT` keeps the run directories.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::checks;
use mgrid::harness::output::read_csv;
use mgrid::harness::{isolation_probe, run_experiment, Algorithm, ExperimentReport, MetricsRow, RunConfig};

struct Verdicts {
    failed: Vec<String>,
    known: Vec<String>,
}

impl Verdicts {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        println!("criterion {id}: {} {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed.push(id.to_string());
        }
    }

    /// A literal requirement that is false as stated. Reported as FAIL but
    /// does not change the exit status; the sound variant is checked next
    /// to it.
    fn check_known(&mut self, id: &str, ok: bool, detail: String, why: &str) {
        if ok {
            println!("criterion {id}: PASS {detail}");
        } else {
            println!("criterion {id}: FAIL (known) {detail}; {why}");
            self.known.push(id.to_string());
        }
    }
}

fn env_usize(name: &str) -> Option<usize> {
    std::env::var(name).ok().and_then(|v| v.parse().ok())
}

fn metrics(dir: &Path) -> Vec<MetricsRow> {
    read_csv(&dir.join("metrics.csv")).expect("metrics.csv")
}

fn worst_residuals(rows: &[MetricsRow]) -> (f64, f64, usize) {
    let bal = rows.iter().map(|r| r.max_balance_residual).fold(0.0, f64::max);
    let cash = rows.iter().map(|r| r.max_cash_residual).fold(0.0, f64::max);
    (bal, cash, rows.len() * 24)
}

fn market(v: &mut Verdicts) {
    let t = Instant::now();
    let bad = checks::market_mismatch(10_000, 11);
    let secs = t.elapsed().as_secs_f64();
    let detail = match &bad {
        None => format!("10000 exact instances match enumeration in {secs:.2} s"),
        Some(b) => format!("mismatch {b}"),
    };
    v.check("1", bad.is_none() && secs < 10.0, detail);
}

fn belief(v: &mut Verdicts) {
    let gap = checks::posterior_gap(2000, 5);
    v.check("3a", gap < 1e-12, format!("posterior vs direct Bayes, worst gap {gap:.2e} over 2000 cases"));
    let m = mgrid::belief::ObservationModel::<f64>::with_fidelity(8, 0.6).unwrap();
    let post = mgrid::belief::posterior(&mgrid::belief::DirichletBelief::uniform(8), &m, 0).unwrap()[0];
    v.check("3b", (post - 0.6002).abs() <= 1e-3, format!("uniform prior, f = 0.6, posterior(a1|o1) = {post:.4}"));
    let acc = checks::mean_accuracy(0.6, 0.9, 1000, 20);
    v.check("3c", acc > 0.8, format!("argmax accuracy after 1000 updates at f = 0.6: {acc:.4}"));
    let a: Vec<f64> = [0.3, 0.6, 0.9].iter().map(|&f| checks::mean_accuracy(f, 0.6, 200, 40)).collect();
    v.check(
        "3d",
        a[0] < a[1] && a[1] < a[2],
        format!("accuracy at f = 0.3, 0.6, 0.9: {:.4} < {:.4} < {:.4}", a[0], a[1], a[2]),
    );
}

fn equilibrium(v: &mut Verdicts) {
    let st = checks::ce_recheck(1000, 21);
    v.check(
        "4a",
        st.worst_violation <= 1e-8 && st.bad_support == 0,
        format!("{} solved games rechecked, worst constraint violation {:.2e}", st.games, st.worst_violation),
    );
    v.check_known(
        "4b",
        st.below_uniform == 0,
        format!("objective >= uniform play in all games: {} of {} fall below", st.below_uniform, st.games),
        "uniform play is not an equilibrium in any of them and the solver only ranges over equilibria",
    );
    v.check(
        "4c",
        st.below_feasible_uniform == 0,
        format!("objective >= uniform play whenever uniform play is an equilibrium: {} violations", st.below_feasible_uniform),
    );
    let (gap, mixed) = checks::two_by_two_gap(1000, 8);
    v.check("4d", gap < 1e-8, format!("2x2 games vs vertex enumeration, worst gap {gap:.2e} ({mixed} mixed optima)"));
}

fn learner(v: &mut Verdicts) {
    let gap = checks::finite_difference_gap(40, 12);
    v.check("5a", gap < 1e-4, format!("LSTM backward vs central differences, worst relative gap {gap:.2e}"));
    let gap = checks::tabular_gap(0.6);
    v.check("5b", gap < 1e-3, format!("tabular Q vs value iteration, worst gap {gap:.2e}"));
    let wins = checks::double_estimator_wins(10);
    v.check("5c", wins >= 8, format!("double estimator closer to the bandit value in {wins} of 10 seeds"));
}

fn admm(v: &mut Verdicts) {
    let st = checks::admm_vs_projected_gradient(100, 17);
    v.check(
        "6a",
        st.unconverged == 0 && st.out_of_box == 0 && st.worst_gap < 1e-4,
        format!("{} instances, {} unconverged, worst objective gap {:.2e}", st.instances, st.unconverged, st.worst_gap),
    );
    let st = checks::rounding_check(400, 23);
    v.check(
        "6b",
        st.inadmissible == 0 && st.unserviced_days == 0 && st.worst_gap < 1e-9,
        format!("rounded dispatch on {} slots, worst gap to the discrete optimum {:.2e}", st.slots, st.worst_gap),
    );
}

fn describe(r: &ExperimentReport) -> String {
    let s = r.summary_of("reward_total").expect("reward summary");
    let ci = s.interval();
    format!("{} {:.4} [{:.4}, {:.4}]", r.algorithm, ci.mean, ci.low().unwrap_or(f64::NAN), ci.high().unwrap_or(f64::NAN))
}

fn end_to_end(v: &mut Verdicts, root: &Path) -> Vec<PathBuf> {
    let mut base = RunConfig::default();
    if let Some(e) = env_usize("MGSIM_ACCEPT_EPISODES") {
        base.run.episodes = e;
        base.comm.fail_from = e / 2;
        base.comm.fail_until = e;
    }
    if let Some(n) = env_usize("MGSIM_ACCEPT_SEEDS") {
        base.run.seeds = (0..n as u64).collect();
    }
    let t = Instant::now();
    let mut reports = Vec::new();
    let mut dirs = Vec::new();
    for algo in [Algorithm::BaDrl, Algorithm::NashDqn, Algorithm::Admm] {
        let mut cfg = base.clone();
        cfg.run.algorithm = algo;
        let dir = root.join("e2e").join(algo.name());
        reports.push(run_experiment(&cfg, &dir).expect("end-to-end run"));
        dirs.push(dir);
    }
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let ci: Vec<_> = reports.iter().map(|r| r.summary_of("reward_total").expect("summary").interval()).collect();
    let (ba, nash, admm) = (ci[0], ci[1], ci[2]);
    let advantage = (ba.mean - nash.mean) / nash.mean.abs();
    let scale = format!("{} episodes x {} seeds, p_fail {}", base.run.episodes, base.run.seeds.len(), base.comm.p_fail);
    println!("  {scale}; final-window reward: {}; {}; {}", describe(&reports[0]), describe(&reports[1]), describe(&reports[2]));
    v.check("7a", ba.mean > nash.mean && nash.mean > admm.mean, format!("reward ordering BA-DRL > Nash-DQN > ADMM ({:.1} min)", minutes));
    v.check("7b", ba.separated_from(&admm) && ba.mean > admm.mean, "BA-DRL and ADMM 95% intervals do not overlap".into());
    v.check("7c", advantage >= 0.01, format!("BA-DRL advantage over Nash-DQN {:.2}% (needs >= 1%)", 100.0 * advantage));
    v.check("7d", minutes <= 120.0, format!("end-to-end runtime {minutes:.1} min"));
    dirs
}

fn failures(v: &mut Verdicts, root: &Path) -> Vec<PathBuf> {
    let episodes = env_usize("MGSIM_ACCEPT_EPISODES").map_or(1000, |e| e.min(1000));
    let mut base = RunConfig::default();
    base.run.episodes = episodes;
    base.run.seeds = vec![0];
    base.comm.fail_from = 0;
    base.comm.fail_until = episodes;
    let p = base.comm.p_fail;
    let mut totals = Vec::new();
    let mut dirs = Vec::new();
    for algo in [Algorithm::Admm, Algorithm::NashDqn, Algorithm::BaDrl] {
        let mut cfg = base.clone();
        cfg.run.algorithm = algo;
        let dir = root.join("failures").join(algo.name());
        let rep = run_experiment(&cfg, &dir).expect("failure run");
        totals.push(metrics(&dir).iter().map(|r| r.failed_transmissions).sum::<usize>());
        if algo == Algorithm::BaDrl {
            let sim = &rep.runs[0].sim;
            match isolation_probe(sim, 15, 2) {
                Ok(pr) => println!(
                    "  isolation probe, slot 15, ESS cut off: belief-ce actions ({}, {}, {}) price {:.3}; neglect actions ({}, {}, {}) price {:.3}",
                    pr.belief.dsm_action, pr.belief.pv_action, pr.belief.ess_action, pr.belief.price,
                    pr.neglect.dsm_action, pr.neglect.pv_action, pr.neglect.ess_action, pr.neglect.price
                ),
                Err(e) => println!("  isolation probe failed: {e}"),
            }
        }
        dirs.push(dir);
    }
    let (admm, nash, ba) = (totals[0], totals[1], totals[2]);
    v.check(
        "8a",
        admm > nash && nash > ba,
        format!("failed transmissions over {episodes} episodes at p_fail {p}: ADMM {admm} > Nash-DQN {nash} > BA-DRL {ba}"),
    );
    let trials = (72 * episodes) as f64;
    let (mean, sd) = (trials * p, (trials * p * (1.0 - p)).sqrt());
    v.check(
        "8b",
        (ba as f64 - mean).abs() <= 3.0 * sd,
        format!("BA-DRL failures {ba} vs 72 p per episode = {mean:.1} +/- {:.1} (3 sigma)", 3.0 * sd),
    );
    dirs
}

fn determinism(v: &mut Verdicts, root: &Path) -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    let mut same = true;
    for algo in [Algorithm::BaDrl, Algorithm::NashDqn, Algorithm::Admm] {
        let mut cfg = RunConfig::default();
        cfg.run.algorithm = algo;
        cfg.run.episodes = 40;
        cfg.run.seeds = vec![7, 8];
        cfg.comm.p_fail = 0.1;
        cfg.comm.fail_from = 0;
        cfg.comm.fail_until = 40;
        let a = root.join("determinism").join(format!("{}-a", algo.name()));
        let b = root.join("determinism").join(format!("{}-b", algo.name()));
        run_experiment(&cfg, &a).expect("first run");
        run_experiment(&cfg, &b).expect("second run");
        same &= std::fs::read(a.join("metrics.csv")).unwrap() == std::fs::read(b.join("metrics.csv")).unwrap();
        dirs.push(a);
        dirs.push(b);
    }
    v.check("9", same, "repeated runs write byte-identical metrics.csv for all three algorithms".into());
    dirs
}

fn main() {
    let keep = std::env::var_os("MGSIM_ACCEPT_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    let mut v = Verdicts { failed: Vec::new(), known: Vec::new() };

    market(&mut v);
    belief(&mut v);
    equilibrium(&mut v);
    learner(&mut v);
    admm(&mut v);
    let mut dirs = determinism(&mut v, &root);
    dirs.extend(failures(&mut v, &root));
    dirs.extend(end_to_end(&mut v, &root));

    let rows: Vec<MetricsRow> = dirs.iter().flat_map(|d| metrics(d)).collect();
    let (bal, cash, slots) = worst_residuals(&rows);
    v.check("2", bal < 1e-9, format!("energy balance residual {bal:.2e} kW worst over {slots} slots (cash {cash:.2e})"));

    println!(
        "acceptance: {} failed {:?}, {} known {:?}",
        v.failed.len(),
        v.failed,
        v.known.len(),
        v.known
    );
    if !v.failed.is_empty() {
        std::process::exit(1);
    }
}
