//! Pieces shared by the trainers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamGrads, ParamSet};
use crate::scalar::Scalar;

/// Number of trailing losses kept in checkpoint metadata.
pub const LOSS_TAIL: usize = 50;

/// Cycles through `0..n` in reshuffled epochs, deterministically for a seed.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchSampler { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss curve of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn tail(&self) -> Vec<f64> {
        self.losses[self.losses.len().saturating_sub(LOSS_TAIL)..].to_vec()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Rejects a step whose loss, gradients or updated weights are not finite.
pub fn check_step<S: Scalar>(
    step: usize,
    lr: f64,
    batch: &[String],
    loss: f64,
    grads: &ParamGrads<S>,
    params: Option<&ParamSet<S>>,
) -> Result<()> {
    let message = if !loss.is_finite() {
        Some(format!("loss is {loss}"))
    } else if !grads.all_finite() {
        Some("non-finite gradient".to_string())
    } else if params.is_some_and(|p| !p.all_finite()) {
        Some("non-finite weights after update".to_string())
    } else {
        None
    };
    match message {
        Some(message) => Err(Error::Diverged {
            step,
            lr,
            batch: batch.to_vec(),
            message,
        }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(5, 3);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        let a: Vec<_> = (0..4).map(|_| BatchSampler::new(7, 9).next_batch(3)).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(BatchSampler::new(2, 0).next_batch(4).len(), 2);
    }
}
