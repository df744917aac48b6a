//! Versioned binary checkpoints of trained learners.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `MGCK` |
//! | 4 | 2 | format version, `u16` (currently 1) |
//! | 6 | 1 | scalar width in bytes, 4 (`f32`) or 8 (`f64`) |
//! | 7 | 1 | reserved, 0 |
//! | 8 | 8 | episodes completed, `u64` |
//! | 16 | 8 | training events completed, `u64` |
//! | 24 | 112 | hyperparameters, 14 fields of 8 bytes in declaration order of [`Hyperparams`] (`f64` or `u64`) |
//! | 136 | 4 | agent count `A`, `u32` |
//!
//! then per agent: shape as five `u32` (input, embed, cells, layers,
//! outputs), parameter count `P` as `u64`, `P` main-network weights and `P`
//! target-network weights at the scalar width; then the RNG count `R` as
//! `u32` and per generator a ChaCha state: 32-byte seed, `u64` stream,
//! `u128` word position. The file ends with the FNV-1a 64-bit hash of every
//! preceding byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::learner::Hyperparams;
use crate::lstm::{LstmNetwork, LstmShape};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"MGCK";
pub const FORMAT_VERSION: u16 = 1;

/// Resumable position of a ChaCha generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentWeights<T> {
    pub main: LstmNetwork<T>,
    pub target: LstmNetwork<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub episode: u64,
    pub train_events: u64,
    pub hyper: Hyperparams,
    pub agents: Vec<AgentWeights<T>>,
    pub rngs: Vec<RngState>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn width<T>() -> Result<u8> {
    match std::mem::size_of::<T>() {
        4 => Ok(4),
        8 => Ok(8),
        w => Err(Error::Checkpoint(format!("unsupported scalar width {w}"))),
    }
}

fn put_scalar<T: Scalar>(buf: &mut Vec<u8>, x: T, w: u8) {
    if w == 4 {
        buf.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
    } else {
        buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
    }
}

fn hyper_words(h: &Hyperparams) -> [[u8; 8]; 14] {
    let f = |x: f64| x.to_le_bytes();
    let u = |x: usize| (x as u64).to_le_bytes();
    [
        f(h.learning_rate),
        f(h.discount),
        u(h.batch),
        u(h.pool),
        u(h.train_every),
        u(h.updates_per_train),
        u(h.target_sync_every),
        f(h.epsilon_start),
        f(h.epsilon_end),
        f(h.epsilon_decay_frac),
        f(h.lr_decay),
        u(h.lr_decay_every),
        f(h.grad_clip),
        f(h.init_scale),
    ]
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let w = width::<T>()?;
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(w);
        buf.push(0);
        buf.extend_from_slice(&self.episode.to_le_bytes());
        buf.extend_from_slice(&self.train_events.to_le_bytes());
        for word in hyper_words(&self.hyper) {
            buf.extend_from_slice(&word);
        }
        buf.extend_from_slice(&(self.agents.len() as u32).to_le_bytes());
        for a in &self.agents {
            if a.main.shape != a.target.shape {
                return Err(Error::Checkpoint("main and target shapes differ".into()));
            }
            let s = a.main.shape;
            for v in [s.input, s.embed, s.cells, s.layers, s.outputs] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            buf.extend_from_slice(&(a.main.params.len() as u64).to_le_bytes());
            for net in [&a.main, &a.target] {
                for &p in &net.params {
                    put_scalar(&mut buf, p, w);
                }
            }
        }
        buf.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for r in &self.rngs {
            buf.extend_from_slice(&r.seed);
            buf.extend_from_slice(&r.stream.to_le_bytes());
            buf.extend_from_slice(&r.word_pos.to_le_bytes());
        }
        let h = fnv1a(&buf);
        buf.extend_from_slice(&h.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 8 {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if &body[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        if fnv1a(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Cursor { bytes: body, at: 4 };
        let version = u16::from_le_bytes(r.array()?);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let w = r.array::<1>()?[0];
        if w != width::<T>()? {
            return Err(Error::Checkpoint(format!(
                "scalar width {w} does not match the requested {}-byte type",
                width::<T>()?
            )));
        }
        r.array::<1>()?;
        let episode = r.u64()?;
        let train_events = r.u64()?;
        let f = |r: &mut Cursor| -> Result<f64> { Ok(f64::from_le_bytes(r.array()?)) };
        let u = |r: &mut Cursor| -> Result<usize> { Ok(r.u64()? as usize) };
        let hyper = Hyperparams {
            learning_rate: f(&mut r)?,
            discount: f(&mut r)?,
            batch: u(&mut r)?,
            pool: u(&mut r)?,
            train_every: u(&mut r)?,
            updates_per_train: u(&mut r)?,
            target_sync_every: u(&mut r)?,
            epsilon_start: f(&mut r)?,
            epsilon_end: f(&mut r)?,
            epsilon_decay_frac: f(&mut r)?,
            lr_decay: f(&mut r)?,
            lr_decay_every: u(&mut r)?,
            grad_clip: f(&mut r)?,
            init_scale: f(&mut r)?,
        };
        let n_agents = r.u32()?;
        let mut agents = Vec::with_capacity(n_agents as usize);
        for _ in 0..n_agents {
            let mut dims = [0usize; 5];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = LstmShape { input: dims[0], embed: dims[1], cells: dims[2], layers: dims[3], outputs: dims[4] };
            let count = r.u64()? as usize;
            if count != shape.param_count() {
                return Err(Error::Checkpoint(format!(
                    "parameter count {count} does not match shape ({})",
                    shape.param_count()
                )));
            }
            let read_net = |r: &mut Cursor| -> Result<LstmNetwork<T>> {
                let mut params = Vec::with_capacity(count);
                for _ in 0..count {
                    params.push(if w == 4 {
                        T::of(f64::from(f32::from_le_bytes(r.array()?)))
                    } else {
                        T::of(f64::from_le_bytes(r.array()?))
                    });
                }
                Ok(LstmNetwork { shape, params })
            };
            let main = read_net(&mut r)?;
            let target = read_net(&mut r)?;
            agents.push(AgentWeights { main, target });
        }
        let n_rngs = r.u32()?;
        let mut rngs = Vec::with_capacity(n_rngs as usize);
        for _ in 0..n_rngs {
            let seed = r.array::<32>()?;
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.array()?);
            rngs.push(RngState { seed, stream, word_pos });
        }
        if r.at != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.at)));
        }
        Ok(Checkpoint { episode, train_events, hyper, agents, rngs })
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let bytes = self.to_bytes().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        out.write_all(&bytes)?;
        out.flush()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        let s = self.bytes.get(self.at..end).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        self.at = end;
        Ok(s.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
