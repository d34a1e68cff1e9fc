// SPDX-License-Identifier: Apache-2.0

use crate::codec::{encode_fields, Inst};
use crate::hidict::{Dictionary, HiDict, TombstoneDict};

use super::{compound_key, parse_request, HistIndFlaw, Host, ProtocolPair, StepResult};

/// Backing store; the log-structured variant is the tombstone control.
#[derive(Debug, Clone)]
pub enum KeyedStore {
    Hi(HiDict),
    Tomb(TombstoneDict),
}

impl KeyedStore {
    fn dict(&mut self) -> &mut dyn DynDict {
        match self {
            KeyedStore::Hi(d) => d,
            KeyedStore::Tomb(d) => d,
        }
    }

    pub fn lookup(&self, key: &[u8]) -> Option<&[u8]> {
        match self {
            KeyedStore::Hi(d) => d.lookup(key),
            KeyedStore::Tomb(d) => d.lookup(key),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            KeyedStore::Hi(d) => d.len(),
            KeyedStore::Tomb(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn serialize(&self) -> Vec<u8> {
        match self {
            KeyedStore::Hi(d) => d.serialize_canonical(),
            KeyedStore::Tomb(d) => d.serialize_canonical(),
        }
    }
}

// Object-safe subset of `Dictionary`.
trait DynDict {
    fn put(&mut self, key: &[u8], value: &[u8]) -> bool;
    fn remove(&mut self, key: &[u8]) -> bool;
}

impl<D: Dictionary> DynDict for D {
    fn put(&mut self, key: &[u8], value: &[u8]) -> bool {
        self.insert(key, value).unwrap_or(false)
    }
    fn remove(&mut self, key: &[u8]) -> bool {
        self.delete(key)
    }
}

/// Server of the authenticated key-value protocol.
#[derive(Debug, Clone)]
pub struct HistIndState {
    pair: ProtocolPair,
    flaw: HistIndFlaw,
    pub store: KeyedStore,
}

impl HistIndState {
    pub fn new(pair: ProtocolPair, flaw: HistIndFlaw) -> Self {
        let store = match flaw {
            HistIndFlaw::Tombstone => KeyedStore::Tomb(TombstoneDict::new()),
            _ => KeyedStore::Hi(HiDict::new()),
        };
        HistIndState { pair, flaw, store }
    }

    fn slot(&self, key: &[u8], auth: &[u8]) -> Vec<u8> {
        match self.flaw {
            HistIndFlaw::NoAuth => key.to_vec(),
            _ => compound_key(key, auth),
        }
    }

    pub fn step(&mut self, protocol: &str, payload: &[u8], host: &mut dyn Host) -> StepResult {
        let (inst, fields) = match parse_request(&self.pair, protocol, payload) {
            Ok(r) => r,
            Err(e) => return StepResult::Ignored(e),
        };
        let key = fields[0].as_deref().unwrap_or_default();
        match inst {
            Inst::Insert => {
                let value = fields[2].as_deref().unwrap_or_default();
                let auth = host.random_bits();
                let slot = self.slot(key, &auth);
                self.store.dict().put(&slot, value);
                StepResult::Reply(encode_fields(&[Some(&auth)]))
            }
            Inst::Lookup => {
                let auth = fields[1].as_deref().unwrap_or_default();
                let value = self.store.lookup(&self.slot(key, auth));
                StepResult::Reply(encode_fields(&[value]))
            }
            Inst::Delete => {
                let auth = fields[1].as_deref().unwrap_or_default();
                let slot = self.slot(key, auth);
                self.store.dict().remove(&slot);
                StepResult::Done
            }
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.store.serialize()
    }
}
