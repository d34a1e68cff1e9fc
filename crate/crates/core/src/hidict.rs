// SPDX-License-Identifier: Apache-2.0

//! History-independent dictionary.
//!
//! [`HiDict`] is uniquely represented: its memory image is a function of the
//! logical entry set alone, so two dictionaries holding the same entries
//! serialize to the same bytes regardless of the operations that built them.
//! [`TombstoneDict`] offers the same lookup semantics but keeps an operation
//! log, and is used as a negative control.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::CanonicalWriter;

pub const HIDICT_MAGIC: &[u8; 4] = b"HID1";
pub const TOMBSTONE_MAGIC: &[u8; 4] = b"TMB1";

pub const MAX_KEY_LEN: usize = 4096;
pub const MAX_VALUE_LEN: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DictError {
    #[error("key of {0} bytes exceeds limit")]
    KeyTooLarge(usize),
    #[error("value of {0} bytes exceeds limit")]
    ValueTooLarge(usize),
}

fn check_sizes(key: &[u8], value: &[u8]) -> Result<(), DictError> {
    if key.len() > MAX_KEY_LEN {
        return Err(DictError::KeyTooLarge(key.len()));
    }
    if value.len() > MAX_VALUE_LEN {
        return Err(DictError::ValueTooLarge(value.len()));
    }
    Ok(())
}

/// Dictionary operations the collectors rely on.
///
/// `insert` and `delete` report whether the logical content changed.
pub trait Dictionary: Clone + std::fmt::Debug + Send + Sync {
    fn insert(&mut self, key: &[u8], value: &[u8]) -> Result<bool, DictError>;
    fn lookup(&self, key: &[u8]) -> Option<&[u8]>;
    fn delete(&mut self, key: &[u8]) -> bool;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Entries in ascending key order.
    fn entries(&self) -> Vec<(&[u8], &[u8])>;
    fn serialize_canonical(&self) -> Vec<u8>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct HiDict {
    entries: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl HiDict {
    pub fn new() -> Self {
        Self::default()
    }

    /// Functional form of [`Dictionary::insert`].
    pub fn inserted(&self, key: &[u8], value: &[u8]) -> Result<HiDict, DictError> {
        let mut next = self.clone();
        next.insert(key, value)?;
        Ok(next)
    }

    /// Functional form of [`Dictionary::delete`].
    pub fn deleted(&self, key: &[u8]) -> HiDict {
        let mut next = self.clone();
        next.delete(key);
        next
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], &[u8])> {
        self.entries.iter().map(|(k, v)| (k.as_slice(), v.as_slice()))
    }
}

impl Dictionary for HiDict {
    /// If the key is already in use the dictionary is left unchanged.
    fn insert(&mut self, key: &[u8], value: &[u8]) -> Result<bool, DictError> {
        check_sizes(key, value)?;
        if self.entries.contains_key(key) {
            return Ok(false);
        }
        self.entries.insert(key.to_vec(), value.to_vec());
        Ok(true)
    }

    fn lookup(&self, key: &[u8]) -> Option<&[u8]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    fn delete(&mut self, key: &[u8]) -> bool {
        self.entries.remove(key).is_some()
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn entries(&self) -> Vec<(&[u8], &[u8])> {
        self.iter().collect()
    }

    /// `HID1 ‖ count:u32 ‖ (len:u32 ‖ key ‖ len:u32 ‖ value)*`, keys ascending.
    fn serialize_canonical(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new(HIDICT_MAGIC);
        w.u32(self.entries.len() as u32);
        for (k, v) in &self.entries {
            w.bytes(k).bytes(v);
        }
        w.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LogOp {
    Insert = 1,
    Delete = 2,
}

/// Log-structured dictionary that never forgets: deletions append a
/// tombstone carrying the deleted value.
#[derive(Debug, Clone, Default)]
pub struct TombstoneDict {
    log: Vec<(LogOp, Vec<u8>, Vec<u8>)>,
    live: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl TombstoneDict {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn log_len(&self) -> usize {
        self.log.len()
    }
}

impl Dictionary for TombstoneDict {
    fn insert(&mut self, key: &[u8], value: &[u8]) -> Result<bool, DictError> {
        check_sizes(key, value)?;
        if self.live.contains_key(key) {
            return Ok(false);
        }
        self.live.insert(key.to_vec(), value.to_vec());
        self.log.push((LogOp::Insert, key.to_vec(), value.to_vec()));
        Ok(true)
    }

    fn lookup(&self, key: &[u8]) -> Option<&[u8]> {
        self.live.get(key).map(Vec::as_slice)
    }

    fn delete(&mut self, key: &[u8]) -> bool {
        match self.live.remove(key) {
            Some(old) => {
                let mut marked = old;
                marked.extend_from_slice(b"deleted");
                self.log.push((LogOp::Delete, key.to_vec(), marked));
                true
            }
            None => false,
        }
    }

    fn len(&self) -> usize {
        self.live.len()
    }

    fn entries(&self) -> Vec<(&[u8], &[u8])> {
        self.live
            .iter()
            .map(|(k, v)| (k.as_slice(), v.as_slice()))
            .collect()
    }

    fn serialize_canonical(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new(TOMBSTONE_MAGIC);
        w.u32(self.log.len() as u32);
        for (op, k, v) in &self.log {
            w.u8(*op as u8).bytes(k).bytes(v);
        }
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u8, u8),
        Delete(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..6, any::<u8>()).prop_map(|(k, v)| Op::Insert(k, v)),
            (0u8..6).prop_map(Op::Delete),
        ]
    }

    fn apply<D: Dictionary>(d: &mut D, ops: &[Op]) {
        for op in ops {
            match op {
                Op::Insert(k, v) => {
                    d.insert(&[*k], &[*v]).unwrap();
                }
                Op::Delete(k) => {
                    d.delete(&[*k]);
                }
            }
        }
    }

    #[test]
    fn empty_is_header_and_zero_count() {
        assert_eq!(HiDict::new().serialize_canonical(), b"HID1\0\0\0\0".to_vec());
    }

    #[test]
    fn second_insert_does_nothing() {
        let d = HiDict::new().inserted(b"k", b"v1").unwrap();
        let d2 = d.inserted(b"k", b"v2").unwrap();
        assert_eq!(d2.lookup(b"k"), Some(&b"v1"[..]));
        assert_eq!(d, d2);
    }

    #[test]
    fn lookup_absent_is_none() {
        assert_eq!(HiDict::new().lookup(b"k"), None);
        let d = HiDict::new().inserted(b"k", b"v").unwrap().deleted(b"k");
        assert_eq!(d.lookup(b"k"), None);
    }

    #[test]
    fn delete_absent_leaves_bytes_unchanged() {
        let d = HiDict::new().inserted(b"a", b"1").unwrap();
        assert_eq!(d.deleted(b"zz").serialize_canonical(), d.serialize_canonical());
    }

    #[test]
    fn insert_then_delete_matches_empty() {
        let d = HiDict::new().inserted(b"k", b"v").unwrap().deleted(b"k");
        assert_eq!(d.serialize_canonical(), HiDict::new().serialize_canonical());
    }

    #[test]
    fn insertion_order_is_invisible() {
        let a = HiDict::new().inserted(b"k1", b"x").unwrap().inserted(b"k2", b"y").unwrap();
        let b = HiDict::new().inserted(b"k2", b"y").unwrap().inserted(b"k1", b"x").unwrap();
        assert_eq!(a.serialize_canonical(), b.serialize_canonical());
    }

    #[test]
    fn size_limits() {
        let big = vec![0u8; MAX_KEY_LEN + 1];
        assert_eq!(
            HiDict::new().insert(&big, b"v"),
            Err(DictError::KeyTooLarge(MAX_KEY_LEN + 1))
        );
        let big = vec![0u8; MAX_VALUE_LEN + 1];
        assert!(matches!(
            HiDict::new().insert(b"k", &big),
            Err(DictError::ValueTooLarge(_))
        ));
    }

    #[test]
    fn tombstone_remembers() {
        let mut t = TombstoneDict::new();
        t.insert(b"k", b"secret").unwrap();
        t.delete(b"k");
        assert_eq!(t.lookup(b"k"), None);
        assert_ne!(t.serialize_canonical(), TombstoneDict::new().serialize_canonical());
        let bytes = t.serialize_canonical();
        assert!(bytes.windows(6).any(|w| w == b"secret"));
    }

    proptest! {
        #[test]
        fn serialization_depends_only_on_content(ops in proptest::collection::vec(op(), 0..50)) {
            let mut d = HiDict::new();
            apply(&mut d, &ops);
            // Content-set oracle: replay semantics on a plain map, then build directly.
            let mut model: BTreeMap<u8, u8> = BTreeMap::new();
            for op in &ops {
                match op {
                    Op::Insert(k, v) => { model.entry(*k).or_insert(*v); }
                    Op::Delete(k) => { model.remove(k); }
                }
            }
            let mut direct = HiDict::new();
            for (k, v) in model.iter().rev() {
                direct.insert(&[*k], &[*v]).unwrap();
            }
            prop_assert_eq!(d.serialize_canonical(), direct.serialize_canonical());
        }

        #[test]
        fn tombstone_agrees_on_lookups(ops in proptest::collection::vec(op(), 0..50)) {
            let mut h = HiDict::new();
            let mut t = TombstoneDict::new();
            for op in &ops {
                apply(&mut h, std::slice::from_ref(op));
                apply(&mut t, std::slice::from_ref(op));
                for k in 0u8..6 {
                    prop_assert_eq!(h.lookup(&[k]), t.lookup(&[k]));
                }
            }
        }
    }
}
