// SPDX-License-Identifier: Apache-2.0

use crate::codec::{encode_fields, parse_uint, CanonicalWriter, Inst, ParseError};
use crate::dp::{summarize, DpParams, Summary};
use crate::hidict::{Dictionary, HiDict};
use crate::rng::{RandomSource, Stream};

use super::{parse_request, Host, ProtocolPair, StepResult};

/// Collects bounded integers and releases one noisy sum of a random
/// λ-subset once the collection reaches a random threshold.
#[derive(Debug, Clone)]
pub struct DiffPState {
    pair: ProtocolPair,
    params: DpParams,
    lambda: u32,
    pub dict: HiDict,
    pub thr: u64,
    pub count: u64,
    pub summarized: bool,
    pub summary: Option<Summary>,
}

impl DiffPState {
    /// Draws `thr` uniformly from `[λ+1, 2λ]`.
    pub fn new(pair: ProtocolPair, params: DpParams, lambda: u32, draws: &mut dyn RandomSource, setup: Stream) -> Self {
        let l = lambda as u64;
        let thr = l + 1 + draws.uniform(setup, l);
        DiffPState {
            pair,
            params,
            lambda,
            dict: HiDict::new(),
            thr,
            count: 0,
            summarized: false,
            summary: None,
        }
    }

    pub fn step(&mut self, protocol: &str, payload: &[u8], host: &mut dyn Host) -> StepResult {
        let (inst, fields) = match parse_request(&self.pair, protocol, payload) {
            Ok(r) => r,
            Err(e) => return StepResult::Ignored(e),
        };
        let field = fields[0].as_deref().unwrap_or_default();
        match inst {
            Inst::Insert => {
                let value = match parse_uint(field) {
                    Some(v) if v <= self.params.value_bound => v,
                    _ => return StepResult::Ignored(ParseError::Malformed("value out of range")),
                };
                let key = host.random_bits();
                if self.dict.insert(&key, &value.to_be_bytes()).unwrap_or(false) {
                    self.count += 1;
                    if self.summarized {
                        self.thr += 1;
                    }
                }
                if !self.summarized && self.count == self.thr {
                    self.release(host);
                }
                StepResult::Reply(encode_fields(&[Some(&key)]))
            }
            Inst::Delete => {
                if self.dict.delete(field) {
                    self.count -= 1;
                    if self.summarized {
                        self.thr -= 1;
                    }
                }
                StepResult::Done
            }
            Inst::Lookup => StepResult::Ignored(ParseError::Malformed("lookup not supported")),
        }
    }

    fn release(&mut self, host: &mut dyn Host) {
        let values: Vec<u64> = self
            .dict
            .iter()
            .map(|(_, v)| parse_uint(v).expect("stored canonically"))
            .collect();
        let stream = host.stream();
        let picked = sample_subset(values.len(), self.lambda as usize, host.draws(), stream);
        let subset: Vec<u64> = picked.into_iter().map(|i| values[i]).collect();
        self.summary = Some(summarize(&subset, &self.params, host.draws(), stream).expect("values validated on insert"));
        self.summarized = true;
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new(b"DFP1");
        w.bytes(&self.dict.serialize_canonical())
            .u64(self.thr)
            .u64(self.count)
            .bool(self.summarized);
        match &self.summary {
            Some(s) => {
                w.u8(1);
                s.write(&mut w);
            }
            None => {
                w.u8(0);
            }
        }
        w.finish()
    }
}

fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return None;
        }
    }
    Some(acc as u64)
}

/// Uniform `k`-subset of `0..n`, ascending. One draw of the combination's
/// lexicographic rank when `C(n, k)` fits in 64 bits, otherwise `k`
/// successive draws without replacement.
pub fn sample_subset(n: usize, k: usize, draws: &mut dyn RandomSource, stream: Stream) -> Vec<usize> {
    assert!(k <= n, "subset larger than population");
    if let Some(total) = binomial(n as u64, k as u64) {
        return unrank_combination(n, k, draws.uniform(stream, total));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let i = draws.uniform(stream, pool.len() as u64) as usize;
        out.push(pool.remove(i));
    }
    out.sort_unstable();
    out
}

pub fn unrank_combination(n: usize, k: usize, mut rank: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(k);
    let mut left = k;
    for i in 0..n {
        if left == 0 {
            break;
        }
        let with_i = binomial((n - i - 1) as u64, (left - 1) as u64).expect("fits when the total fits");
        if rank < with_i {
            out.push(i);
            left -= 1;
        } else {
            rank -= with_i;
        }
    }
    out
}
