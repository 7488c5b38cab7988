//! Class-balanced batch stream for the neural trainers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PipelineError;

/// Infinite stream of index batches, each holding exactly half positive and
/// half negative examples.
///
/// The minority class is resampled with replacement; the majority class is
/// consumed without replacement through shuffled epochs, so every majority
/// example is visited once per epoch.
pub struct BalancedBatches {
    rng: ChaCha8Rng,
    half: usize,
    minority: Vec<usize>,
    majority: Vec<usize>,
    cursor: usize,
    /// True when the minority indices are the positive examples.
    minority_is_positive: bool,
}

pub fn balanced_batches(
    labels: &[u8],
    batch_size: usize,
    seed: u64,
) -> Result<BalancedBatches, PipelineError> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(PipelineError::InvalidInput(format!(
            "batch_size must be even and positive, got {batch_size}"
        )));
    }
    let positives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == 1)
        .map(|(i, _)| i)
        .collect();
    let negatives: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l != 1)
        .map(|(i, _)| i)
        .collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(PipelineError::InvalidInput(format!(
            "balanced batches need both classes; got {} positives and {} negatives",
            positives.len(),
            negatives.len()
        )));
    }

    let minority_is_positive = positives.len() <= negatives.len();
    let (minority, mut majority) = if minority_is_positive {
        (positives, negatives)
    } else {
        (negatives, positives)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    majority.shuffle(&mut rng);
    Ok(BalancedBatches {
        rng,
        half: batch_size / 2,
        minority,
        majority,
        cursor: 0,
        minority_is_positive,
    })
}

impl Iterator for BalancedBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let mut minority_draw = Vec::with_capacity(self.half);
        for _ in 0..self.half {
            let i = self.rng.gen_range(0..self.minority.len());
            minority_draw.push(self.minority[i]);
        }
        let mut majority_draw = Vec::with_capacity(self.half);
        for _ in 0..self.half {
            if self.cursor == self.majority.len() {
                self.majority.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            majority_draw.push(self.majority[self.cursor]);
            self.cursor += 1;
        }

        let (mut positives, negatives) = if self.minority_is_positive {
            (minority_draw, majority_draw)
        } else {
            (majority_draw, minority_draw)
        };
        let mut batch = {
            positives.extend(negatives);
            positives
        };
        batch.shuffle(&mut self.rng);
        Some(batch)
    }
}
