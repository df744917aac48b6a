//! Parameter-server message exchange with Bernoulli upload loss.
//!
//! Every agent uploads its payload to the hub once per exchange round and
//! the hub relays it to all peers. A lost upload is lost for every receiver,
//! which is what turns the sender into an isolated (problematic) agent for
//! the rest of the slot.

use std::fmt;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    pub p_fail: f64,
    /// Episodes `[start, end)` in which uploads may fail.
    pub active_from: usize,
    pub active_until: usize,
}

impl FailureModel {
    pub fn new(p_fail: f64, active_from: usize, active_until: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_fail) {
            return Err(Error::Config(format!("p_fail {p_fail} outside [0, 1]")));
        }
        Ok(FailureModel { p_fail, active_from, active_until })
    }

    pub fn reliable() -> Self {
        FailureModel { p_fail: 0.0, active_from: 0, active_until: 0 }
    }

    pub fn always(p_fail: f64) -> Self {
        FailureModel { p_fail, active_from: 0, active_until: usize::MAX }
    }

    pub fn p_at(&self, episode: usize) -> f64 {
        if (self.active_from..self.active_until).contains(&episode) {
            self.p_fail
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    QValues,
    DualVariables,
    EquilibriumInfo,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::QValues => "q-values",
            MessageKind::DualVariables => "dual-variables",
            MessageKind::EquilibriumInfo => "equilibrium-info",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeRecord {
    pub episode: usize,
    pub slot: u32,
    pub round: usize,
    pub sender: usize,
    pub receivers: Vec<usize>,
    pub delivered: Vec<bool>,
    pub kind: MessageKind,
}

impl ExchangeRecord {
    pub fn upload_failed(&self) -> bool {
        self.delivered.iter().any(|d| !d)
    }
}

/// Where a message sits in the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub episode: usize,
    pub slot: u32,
    pub round: usize,
}

/// One upload from `sender` relayed to `receivers`.
pub fn broadcast<R: Rng + ?Sized>(
    at: Slot,
    sender: usize,
    receivers: Vec<usize>,
    kind: MessageKind,
    model: &FailureModel,
    rng: &mut R,
) -> ExchangeRecord {
    let p = model.p_at(at.episode);
    // no draw when the outcome is certain, so a lossless channel leaves the
    // stream untouched
    let lost = if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.gen::<f64>() < p
    };
    let delivered = vec![!lost; receivers.len()];
    ExchangeRecord {
        episode: at.episode,
        slot: at.slot,
        round: at.round,
        sender,
        receivers,
        delivered,
        kind,
    }
}

/// Number of failed uploads.
pub fn failed_count(records: &[ExchangeRecord]) -> usize {
    records.iter().filter(|r| r.upload_failed()).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExchangeLogMode {
    Off,
    #[default]
    Failures,
    All,
}

/// Hub state for one run: failure model, its own random stream, running
/// counters and an optional record log.
#[derive(Debug, Clone)]
pub struct Hub<R> {
    pub model: FailureModel,
    pub agents: usize,
    rng: R,
    mode: ExchangeLogMode,
    log: Vec<ExchangeRecord>,
    sent: usize,
    failed: usize,
    /// `(slot, agent)` uploads that fail in every episode regardless of the
    /// model.
    forced: Vec<(u32, usize)>,
}

impl<R: Rng> Hub<R> {
    pub fn new(model: FailureModel, agents: usize, rng: R, mode: ExchangeLogMode) -> Self {
        Hub { model, agents, rng, mode, log: Vec::new(), sent: 0, failed: 0, forced: Vec::new() }
    }

    /// Scripts a failure of `agent`'s uploads in `slot` of every episode.
    pub fn force_failure(&mut self, slot: u32, agent: usize) {
        self.forced.push((slot, agent));
    }

    /// Uploads one message and reports whether the peers received it.
    pub fn send(&mut self, at: Slot, sender: usize, kind: MessageKind) -> bool {
        let receivers: Vec<usize> = (0..self.agents).filter(|&k| k != sender).collect();
        let rec = if self.forced.contains(&(at.slot, sender)) {
            let delivered = vec![false; receivers.len()];
            ExchangeRecord { episode: at.episode, slot: at.slot, round: at.round, sender, receivers, delivered, kind }
        } else {
            broadcast(at, sender, receivers, kind, &self.model, &mut self.rng)
        };
        let ok = !rec.upload_failed();
        self.sent += 1;
        if !ok {
            self.failed += 1;
        }
        match self.mode {
            ExchangeLogMode::All => self.log.push(rec),
            ExchangeLogMode::Failures if !ok => self.log.push(rec),
            _ => {}
        }
        ok
    }

    pub fn sent(&self) -> usize {
        self.sent
    }

    pub fn failed(&self) -> usize {
        self.failed
    }

    pub fn records(&self) -> &[ExchangeRecord] {
        &self.log
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }

    pub fn rng(&self) -> &R {
        &self.rng
    }

    /// Takes the records logged so far.
    pub fn drain_records(&mut self) -> Vec<ExchangeRecord> {
        std::mem::take(&mut self.log)
    }
}

/// Writes records as CSV with columns
/// `episode,slot,round,sender,kind,delivered`.
pub fn write_exchange_log<W: Write>(out: W, records: &[ExchangeRecord]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "slot", "round", "sender", "kind", "delivered"])?;
    for r in records {
        w.write_record([
            r.episode.to_string(),
            r.slot.to_string(),
            r.round.to_string(),
            r.sender.to_string(),
            r.kind.to_string(),
            (!r.upload_failed()).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
