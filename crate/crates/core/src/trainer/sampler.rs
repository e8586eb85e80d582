use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::synth::{DatasetManifest, Split};

/// Deterministic P×K batch sampler.
///
/// Each epoch shuffles the identity order and every identity's samples, cuts
/// each identity into `R` chunks of `K` (wrapping around its own samples when
/// it runs short), and lays the chunks out round by round in the shuffled
/// identity order. A batch is `P` consecutive chunks of that cyclic sequence,
/// so its identities are distinct whenever there are at least `P` of them.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    groups: Vec<(usize, Vec<usize>)>,
    p: usize,
    k: usize,
    seed: u64,
    rounds: usize,
}

impl BatchSampler {
    /// `items` are `(sample index, identity)` pairs. Identities with fewer
    /// than `k` samples are left out.
    pub fn new(items: &[(usize, usize)], p: usize, k: usize, seed_value: u64) -> Result<Self> {
        if p < 2 || k < 2 {
            return Err(Error::Config(format!("batch needs P >= 2 and K >= 2, got P={p} K={k}")));
        }
        let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(idx, id) in items {
            by_id.entry(id).or_default().push(idx);
        }
        let groups: Vec<(usize, Vec<usize>)> = by_id.into_iter().filter(|(_, v)| v.len() >= k).collect();
        if groups.len() < p {
            return Err(Error::BatchComposition(format!(
                "need {p} identities with at least {k} samples, found {}",
                groups.len()
            )));
        }
        let rounds = groups.iter().map(|(_, v)| v.len().div_ceil(k)).max().unwrap_or(1);
        Ok(Self {
            groups,
            p,
            k,
            seed: seed_value,
            rounds,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    /// Number of samples the sampler draws from.
    pub fn num_samples(&self) -> usize {
        self.groups.iter().map(|(_, v)| v.len()).sum()
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.groups.len() * self.rounds).div_ceil(self.p)
    }

    fn chunk(&self, epoch: u64, order: &[usize], position: usize) -> Vec<usize> {
        let m = order.len();
        let (round, slot) = (position / m, position % m);
        let (id, members) = &self.groups[order[slot]];
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut seed::rng(self.seed, &[seed::SAMPLER, epoch, 1, *id as u64]));
        (0..self.k).map(|j| shuffled[(round * self.k + j) % shuffled.len()]).collect()
    }

    /// Sample indices of the batch at `step`, grouped by identity.
    pub fn batch(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let (epoch, b) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.groups.len()).collect();
        order.shuffle(&mut seed::rng(self.seed, &[seed::SAMPLER, epoch, 0]));
        let total = self.groups.len() * self.rounds;
        (0..self.p)
            .flat_map(|i| self.chunk(epoch, &order, (b * self.p + i) % total))
            .collect()
    }
}

/// Batch at `step` over the training split of a manifest.
pub fn sample_batch(manifest: &DatasetManifest, p: usize, k: usize, seed_value: u64, step: u64) -> Result<Vec<usize>> {
    let items: Vec<(usize, usize)> = manifest
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, s)| (i, s.identity_id))
        .collect();
    Ok(BatchSampler::new(&items, p, k, seed_value)?.batch(step))
}
