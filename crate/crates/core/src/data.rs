//! Synthetic workloads: a long-range key-value retrieval language and
//! clustered vector clouds.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::WindowSource;

/// Sequences that first list a dictionary of `value key` pairs and then ask
/// for values with `QUERY key value` triples.
///
/// Token ids: values are `0..values`, keys are `values..values + keys`, and the
/// query marker is the last id. Each value is given to exactly `per_value`
/// distinct keys and the dictionary is sorted by value, so a key's value is
/// also determined by where the key sits in the dictionary. Queries visit the
/// dictionary in random order, each key once per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetrievalTask {
    pub keys: usize,
    pub values: usize,
    pub per_value: usize,
}

impl RetrievalTask {
    pub fn new(keys: usize, values: usize, per_value: usize) -> Result<Self> {
        ensure!(values >= 2, "need at least two values");
        ensure!(per_value >= 1, "need at least one key per value");
        ensure!(
            values * per_value <= keys,
            "{values} values x {per_value} keys each exceeds {keys} keys"
        );
        Ok(Self {
            keys,
            values,
            per_value,
        })
    }

    /// Dictionary entries per sequence.
    pub fn pairs(&self) -> usize {
        self.values * self.per_value
    }

    /// Tokens taken by the dictionary.
    pub fn dictionary_len(&self) -> usize {
        2 * self.pairs()
    }

    pub fn vocab(&self) -> usize {
        self.values + self.keys + 1
    }

    pub fn query_token(&self) -> u32 {
        (self.values + self.keys) as u32
    }

    pub fn key_token(&self, k: usize) -> u32 {
        (self.values + k) as u32
    }

    /// A sequence of exactly `len` tokens drawn from `rng`.
    pub fn sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        let pairs = self.pairs();
        // Entry i holds key keys[i] with value i / per_value.
        let keys = sample(rng, self.keys, pairs).into_vec();
        let mut out = Vec::with_capacity(len + 2);
        for (i, k) in keys.iter().enumerate() {
            out.push((i / self.per_value) as u32);
            out.push(self.key_token(*k));
        }
        let mut order: Vec<usize> = Vec::new();
        while out.len() < len {
            if order.is_empty() {
                order = sample(rng, pairs, pairs).into_vec();
            }
            let i = order.pop().expect("nonempty");
            out.extend([
                self.query_token(),
                self.key_token(keys[i]),
                (i / self.per_value) as u32,
            ]);
        }
        out.truncate(len);
        out
    }

    /// Positions whose next token is a queried value.
    pub fn answer_positions(&self, seq: &[u32]) -> Vec<usize> {
        let q = self.query_token();
        (1..seq.len().saturating_sub(1))
            .filter(|&i| seq[i - 1] == q)
            .collect()
    }

    /// Fixed held-out sequences of `n + 1` tokens.
    pub fn validation_set(&self, seed: u64, n: usize, count: usize) -> Vec<Vec<u32>> {
        (0..count)
            .map(|i| self.sequence(n + 1, &mut rng::stream(seed, &[0x7a11, i as u64])))
            .collect()
    }
}

impl WindowSource for RetrievalTask {
    fn window(&self, seed: u64, step: u64, index: usize, n: usize) -> Vec<u32> {
        self.sequence(n + 1, &mut rng::stream(seed, &[0x7a5c, step, index as u64]))
    }
}

/// `n` points in `d` dimensions around `clusters` random unit directions,
/// with isotropic Gaussian noise of standard deviation `spread`. Returns the
/// points and the generating cluster of each.
pub fn clustered_vectors<R: Rng + ?Sized>(
    n: usize,
    d: usize,
    clusters: usize,
    spread: f64,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>)> {
    ensure!(clusters >= 1 && d >= 1, "need at least one cluster and dimension");
    let mut centers = Vec::with_capacity(clusters);
    for _ in 0..clusters {
        let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        centers.push(c.into_iter().map(|x| x / norm).collect::<Vec<_>>());
    }
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.random_range(0..clusters);
        labels.push(c);
        for x in &centers[c] {
            let e: f64 = StandardNormal.sample(rng);
            data.push(x + spread * e);
        }
    }
    Ok((Tensor::new(vec![n, d], data)?, labels))
}
