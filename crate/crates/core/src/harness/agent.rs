//! A learning agent: main and target networks, its own replay pool and the
//! recurrent state carried through the current day.

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::learner::{sync_target, train_step, Experience, Hyperparams, ReplayBuffer, TargetKind};
use crate::lstm::{LstmNetwork, LstmShape, LstmState};

#[derive(Debug, Clone)]
pub struct Agent {
    pub main: LstmNetwork<f64>,
    pub target: LstmNetwork<f64>,
    pub pool: ReplayBuffer<f64>,
    state: LstmState<f64>,
    history: Vec<Vec<f64>>,
}

/// Result of one training event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub loss: Option<f64>,
    pub diverged: bool,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(shape: LstmShape, h: &Hyperparams, rng: &mut R) -> Self {
        let main = LstmNetwork::random(shape, h.init_scale, rng);
        Self::from_networks(main.clone(), main, h.pool)
    }

    pub fn from_networks(main: LstmNetwork<f64>, target: LstmNetwork<f64>, pool: usize) -> Self {
        let state = main.initial_state();
        Agent { main, target, pool: ReplayBuffer::new(pool), state, history: Vec::new() }
    }

    /// Clears the recurrent state at the start of a day.
    pub fn begin_day(&mut self) {
        self.state = self.main.initial_state();
        self.history.clear();
    }

    /// Feeds this slot's observation and returns Q over joint actions.
    pub fn observe(&mut self, x: Vec<f64>) -> Result<Vec<f64>> {
        let q = self.main.step(&mut self.state, &x)?;
        self.history.push(x);
        Ok(q)
    }

    pub fn remember(&mut self, joint_action: usize, reward: f64, next_state: Vec<f64>, done: bool, next_feasible: Vec<usize>) {
        self.pool.push(Experience {
            history: self.history.clone(),
            joint_action,
            reward,
            next_state,
            done,
            next_feasible,
        });
    }

    /// Runs `h.updates_per_train` gradient steps. A diverged step rolls the
    /// main network back to the target weights and ends the event.
    pub fn train<R: Rng + ?Sized>(&mut self, h: &Hyperparams, lr: f64, kind: TargetKind, rng: &mut R) -> Result<TrainReport> {
        if self.pool.is_empty() {
            return Ok(TrainReport { loss: None, diverged: false });
        }
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..h.updates_per_train.max(1) {
            let batch = self.pool.sample(h.batch, rng);
            match train_step(&mut self.main, &self.target, &batch, h.discount, lr, h.grad_clip, kind) {
                Ok(loss) => {
                    total += loss;
                    steps += 1;
                }
                Err(Error::Divergence) => {
                    warn!("training diverged, restoring target weights");
                    sync_target(&self.target, &mut self.main)?;
                    return Ok(TrainReport { loss: None, diverged: true });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(TrainReport { loss: Some(total / f64::from(steps)), diverged: false })
    }

    pub fn sync(&mut self) -> Result<()> {
        sync_target(&self.main, &mut self.target)
    }
}
