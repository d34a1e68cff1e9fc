// SPDX-License-Identifier: Apache-2.0

//! Addressable randomness.
//!
//! Every random choice made during an execution goes through a
//! [`RandomSource`]. Seeded runs derive each draw from a keyed hash of
//! `(master seed, stream, counter)`, so the n-th draw of a stream is the same
//! value in every execution that shares the seed, whatever other streams did
//! in between. Enumeration replaces the source with a [`ChoiceTape`] that
//! walks every branch explicitly and tracks the exact probability of the path.

use std::collections::HashMap;

use num::{BigInt, BigRational, One};
use rand::distributions::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::dp::{self, DpParams};

/// Exact probability.
pub type Prob = BigRational;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Party {
    Collector,
    Environment,
    /// Server embedded in the environment (answers collector outcalls).
    EnvServer,
}

/// On whose behalf a draw happens. The collector's draws are attributed to
/// the party whose session triggered them, which keeps environment-driven
/// draws aligned between paired real and ideal runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Principal {
    Setup,
    Environment,
    Requester,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stream {
    pub party: Party,
    pub principal: Principal,
}

impl Stream {
    pub const fn new(party: Party, principal: Principal) -> Self {
        Stream { party, principal }
    }
}

pub trait RandomSource {
    /// Uniform integer in `[0, n)`. `n` must be at least 1.
    fn uniform(&mut self, stream: Stream, n: u64) -> u64;

    /// Noisy, clamped sum released by the geometric mechanism for a sum of
    /// `m` values whose exact total is `true_sum`.
    fn clamped_sum(&mut self, stream: Stream, params: &DpParams, m: u64, true_sum: u64) -> u64;
}

/// Seeded source: a keyed PRF on `(seed, stream, counter)`.
#[derive(Debug, Clone)]
pub struct SeededSource {
    seed: u64,
    counters: HashMap<Stream, u64>,
}

impl SeededSource {
    pub fn new(seed: u64) -> Self {
        SeededSource {
            seed,
            counters: HashMap::new(),
        }
    }

    fn next_rng(&mut self, stream: Stream) -> ChaCha20Rng {
        let counter = self.counters.entry(stream).or_insert(0);
        let mut h = Sha256::new();
        h.update(b"dclab/draw/v1");
        h.update(self.seed.to_be_bytes());
        h.update([stream.party as u8, stream.principal as u8]);
        h.update(counter.to_be_bytes());
        *counter += 1;
        ChaCha20Rng::from_seed(h.finalize().into())
    }
}

impl RandomSource for SeededSource {
    fn uniform(&mut self, stream: Stream, n: u64) -> u64 {
        assert!(n >= 1, "empty draw range");
        self.next_rng(stream).gen_range(0..n)
    }

    fn clamped_sum(&mut self, stream: Stream, params: &DpParams, m: u64, true_sum: u64) -> u64 {
        let u: f64 = Open01.sample(&mut self.next_rng(stream));
        let noise = dp::geometric_inverse_cdf(params, u);
        dp::clamp_release(params, m, true_sum as i64 + noise)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Choice {
    pub chosen: u64,
    pub range: u64,
}

/// Enumeration source. Draws follow `forced` while it lasts and take branch 0
/// afterwards; every draw is recorded so the caller can advance to the next
/// path in depth-first order.
#[derive(Debug, Clone)]
pub struct ChoiceTape {
    forced: Vec<u64>,
    record: Vec<Choice>,
    uniform_den: BigInt,
    weighted: Prob,
}

impl ChoiceTape {
    pub fn new(forced: Vec<u64>) -> Self {
        ChoiceTape {
            forced,
            record: Vec::new(),
            uniform_den: BigInt::one(),
            weighted: Prob::one(),
        }
    }

    fn pick(&mut self, range: u64) -> u64 {
        let i = self.record.len();
        let chosen = self.forced.get(i).copied().unwrap_or(0);
        assert!(chosen < range, "forced choice out of range (non-deterministic replay?)");
        self.record.push(Choice { chosen, range });
        chosen
    }

    pub fn record(&self) -> &[Choice] {
        &self.record
    }

    pub fn probability(&self) -> Prob {
        &self.weighted / &self.uniform_den
    }

    /// Next forced prefix in depth-first order, never touching the first
    /// `frozen` choices. `None` once the subtree is exhausted.
    pub fn successor(&self, frozen: usize) -> Option<Vec<u64>> {
        let idx = (frozen..self.record.len())
            .rev()
            .find(|&i| self.record[i].chosen + 1 < self.record[i].range)?;
        let mut next: Vec<u64> = self.record[..idx].iter().map(|c| c.chosen).collect();
        next.push(self.record[idx].chosen + 1);
        Some(next)
    }
}

impl RandomSource for ChoiceTape {
    fn uniform(&mut self, _stream: Stream, n: u64) -> u64 {
        assert!(n >= 1, "empty draw range");
        let c = self.pick(n);
        if n > 1 {
            self.uniform_den *= BigInt::from(n);
        }
        c
    }

    fn clamped_sum(&mut self, _stream: Stream, params: &DpParams, m: u64, true_sum: u64) -> u64 {
        let table = dp::noise_distribution(params, m, true_sum);
        let c = self.pick(table.len() as u64) as usize;
        let (outcome, p) = &table[c];
        if table.len() > 1 {
            self.weighted *= p;
        }
        *outcome
    }
}
