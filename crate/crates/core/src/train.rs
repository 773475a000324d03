//! Shared training-loop plumbing: schedules, deterministic batching and a
//! single optimizer step over a tape.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, Bound, ParamStore, Tape, Var};
use crate::rng::{derive_seed, rng_from_seed};

/// Per-epoch named series, e.g. `loss`, `val_dice`.
pub type History = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 10,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainSchedule {
            epochs,
            batch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Shuffled mini-batches of `0..n` for `epoch`; a pure function of
    /// (seed, epoch, n).
    pub fn batches(&self, n: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(self.seed, epoch as u64)));
        order.chunks(self.batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Seed for randomness consumed inside step `step` (noise, timesteps).
    pub fn step_seed(&self, step: u64) -> u64 {
        derive_seed(self.seed ^ 0x5eed_0000_0000_0000, step)
    }
}

/// Evaluate `f` with `store` bound as trainable, backpropagate the returned
/// scalar and apply one optimizer update. Returns the pre-update loss and
/// whatever side values `f` reports.
pub fn optimize_step<T: std::fmt::Debug>(
    store: &mut ParamStore,
    opt: &mut AdamW,
    f: impl FnOnce(&mut Tape, &Bound) -> Result<(Var, T)>,
) -> Result<(f64, T)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let (out, extra) = f(&mut tape, &bound)?;
    let loss = tape.value(out).item();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss = {loss}, components {extra:?}")));
    }
    let mut grads = tape.backward(out)?;
    let g = bound.grads(&mut grads, store);
    drop(tape);
    opt.step(store, &g)?;
    Ok((loss, extra))
}

/// Attach epoch/batch position to a non-finite-loss error.
pub(crate) fn at_step(e: Error, what: &str, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{what}: epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

pub(crate) fn push(history: &mut History, key: &str, value: f64) {
    history.entry(key.to_string()).or_default().push(value);
}
