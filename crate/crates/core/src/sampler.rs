//! Real/synthetic batch interleaving.
//!
//! Each batch is drawn entirely from the synthetic pool with probability `p`
//! and entirely from the real pool otherwise. Each pool is walked by its own
//! shuffled epoch cursor, so the order real images are visited in does not
//! depend on `p`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Source;

/// Default probability of a synthetic batch.
pub const DEFAULT_P: f64 = 0.2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("sampling probability {0} not in [0, 1]")]
    InvalidProbability(f64),
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("real pool is empty")]
    EmptyReal,
    #[error("p = {0} > 0 but the synthetic pool is empty")]
    EmptySynthetic(f64),
    #[error("checkpoint does not match the pools")]
    StateMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub p: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: DEFAULT_P, batch_size: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub examples: Vec<u64>,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Cursor {
    stream: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl Cursor {
    fn new(stream: u64, seed: u64, len: usize) -> Self {
        let mut c = Cursor { stream, epoch: 0, pos: 0, order: Vec::new() };
        c.reshuffle(seed, len);
        c
    }

    fn reshuffle(&mut self, seed: u64, len: usize) {
        // One independent ChaCha stream per (source, epoch).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((self.stream << 48) | (self.epoch & 0xffff_ffff_ffff));
        self.order = (0..len).collect();
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    /// Next `n` pool indices; wraps into a fresh shuffle when exhausted.
    fn take(&mut self, n: usize, seed: u64, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.epoch += 1;
                self.reshuffle(seed, len);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Serializable sampler snapshot for checkpoint/resume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerState {
    pub seed: u64,
    /// Position of the source-choice stream, in 32-bit words.
    pub choice_word_pos: u128,
    real: Cursor,
    synth: Option<Cursor>,
    pub batches_drawn: u64,
}

#[derive(Debug, Clone)]
pub struct BatchSampler {
    cfg: SamplerConfig,
    real: Vec<u64>,
    synth: Vec<u64>,
    choice: ChaCha8Rng,
    real_cursor: Cursor,
    synth_cursor: Option<Cursor>,
    batches_drawn: u64,
}

const REAL_STREAM: u64 = 1;
const SYNTH_STREAM: u64 = 2;

impl BatchSampler {
    pub fn new(cfg: SamplerConfig, real: Vec<u64>, synth: Vec<u64>) -> Result<Self, SamplerError> {
        if !(0.0..=1.0).contains(&cfg.p) {
            return Err(SamplerError::InvalidProbability(cfg.p));
        }
        if cfg.batch_size == 0 {
            return Err(SamplerError::ZeroBatch);
        }
        if real.is_empty() && cfg.p < 1.0 {
            return Err(SamplerError::EmptyReal);
        }
        if synth.is_empty() && cfg.p > 0.0 {
            return Err(SamplerError::EmptySynthetic(cfg.p));
        }
        let real_cursor = Cursor::new(REAL_STREAM, cfg.seed, real.len());
        let synth_cursor = (!synth.is_empty()).then(|| Cursor::new(SYNTH_STREAM, cfg.seed, synth.len()));
        Ok(Self {
            cfg,
            real,
            synth,
            choice: ChaCha8Rng::seed_from_u64(cfg.seed),
            real_cursor,
            synth_cursor,
            batches_drawn: 0,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn next_batch(&mut self) -> Batch {
        let synthetic = self.choice.random::<f64>() < self.cfg.p;
        self.batches_drawn += 1;
        let n = self.cfg.batch_size;
        if synthetic {
            let cursor = self.synth_cursor.as_mut().expect("p > 0 implies a synthetic pool");
            let idx = cursor.take(n, self.cfg.seed, self.synth.len());
            Batch { examples: idx.into_iter().map(|i| self.synth[i]).collect(), source: Source::Synthetic }
        } else {
            let idx = self.real_cursor.take(n, self.cfg.seed, self.real.len());
            Batch { examples: idx.into_iter().map(|i| self.real[i]).collect(), source: Source::Real }
        }
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.cfg.seed,
            choice_word_pos: self.choice.get_word_pos(),
            real: self.real_cursor.clone(),
            synth: self.synth_cursor.clone(),
            batches_drawn: self.batches_drawn,
        }
    }

    /// Resume from a snapshot taken over the same pools.
    pub fn restore(&mut self, state: &SamplerState) -> Result<(), SamplerError> {
        if state.seed != self.cfg.seed
            || state.real.order.len() != self.real.len()
            || state.synth.as_ref().map_or(0, |c| c.order.len()) != self.synth.len()
        {
            return Err(SamplerError::StateMismatch);
        }
        self.choice = ChaCha8Rng::seed_from_u64(state.seed);
        self.choice.set_word_pos(state.choice_word_pos);
        self.real_cursor = state.real.clone();
        self.synth_cursor = state.synth.clone();
        self.batches_drawn = state.batches_drawn;
        Ok(())
    }
}
