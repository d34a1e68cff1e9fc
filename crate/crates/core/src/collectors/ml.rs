// SPDX-License-Identifier: Apache-2.0

use crate::codec::{encode_fields, CanonicalWriter, Inst, ParseError};
use crate::hidict::Dictionary;
use crate::rng::{RandomSource, Stream};
use crate::unlearn::{self, Dataset, Model, Row};

use super::{parse_request, Host, ProtocolPair, StepResult};

/// Collects rows until a random threshold, learns a least-squares model once,
/// and afterwards unlearns deleted rows exactly.
#[derive(Debug, Clone)]
pub struct MlState {
    pair: ProtocolPair,
    pub data: Dataset,
    pub thr: u64,
    pub count: u64,
    pub learnt: bool,
    pub model: Option<Model>,
}

impl MlState {
    /// Draws `thr` uniformly from `[λ, 2λ]`.
    pub fn new(pair: ProtocolPair, dim: usize, lambda: u32, draws: &mut dyn RandomSource, setup: Stream) -> Self {
        let l = lambda as u64;
        let thr = l + draws.uniform(setup, l + 1);
        MlState {
            pair,
            data: Dataset::new(dim),
            thr,
            count: 0,
            learnt: false,
            model: None,
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
                let Ok(row) = Row::decode(field, self.data.dim) else {
                    return StepResult::Ignored(ParseError::Malformed("row width"));
                };
                let key = host.random_bits();
                if !self.learnt && self.data.rows.insert(&key, &row.encode()).unwrap_or(false) {
                    self.count += 1;
                    if self.count == self.thr {
                        self.model = Some(unlearn::learn(&self.data).expect("rows validated on insert"));
                        self.learnt = true;
                    }
                }
                StepResult::Reply(encode_fields(&[Some(&key)]))
            }
            Inst::Delete => {
                if self.data.rows.lookup(field).is_some() {
                    if let Some(model) = &self.model {
                        self.model = Some(unlearn::delete(&self.data, model, field).expect("key present"));
                    }
                    self.data.rows.delete(field);
                    self.count -= 1;
                    if self.learnt {
                        self.thr -= 1;
                    }
                }
                StepResult::Done
            }
            Inst::Lookup => StepResult::Ignored(ParseError::Malformed("lookup not supported")),
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new(b"MLS1");
        w.bytes(&self.data.rows.serialize_canonical())
            .u64(self.thr)
            .u64(self.count)
            .bool(self.learnt);
        let model = self.model.as_ref().map(Model::serialize);
        w.opt_bytes(model.as_deref());
        w.finish()
    }
}
