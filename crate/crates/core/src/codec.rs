// SPDX-License-Identifier: Apache-2.0

//! Binary encodings shared by messages, deletion tokens and canonical states.
//!
//! Protocol messages use a small TLV grammar: one instruction byte followed by
//! a sequence of fields. A present field is `0x00 ‖ len:u16be ‖ bytes`, an
//! absent field (⊥) is the single byte [`BOTTOM`]. Because every present field
//! starts with `0x00`, the sentinel never collides with a value encoding.
//!
//! Canonical state serializations use `u32` big-endian length prefixes.

use thiserror::Error;

/// Reserved encoding of ⊥.
pub const BOTTOM: u8 = 0xFF;
const PRESENT: u8 = 0x00;

/// Upper bound on a single TLV field.
pub const MAX_FIELD_LEN: usize = u16::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Inst {
    Insert = 0x01,
    Lookup = 0x02,
    Delete = 0x03,
}

impl Inst {
    pub fn from_byte(b: u8) -> Option<Inst> {
        match b {
            0x01 => Some(Inst::Insert),
            0x02 => Some(Inst::Lookup),
            0x03 => Some(Inst::Delete),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Inst::Insert => "insert",
            Inst::Lookup => "lookup",
            Inst::Delete => "delete",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("empty message")]
    Empty,
    #[error("unknown instruction byte 0x{0:02x}")]
    UnknownInst(u8),
    #[error("truncated field")]
    Truncated,
    #[error("invalid field marker 0x{0:02x}")]
    BadMarker(u8),
    #[error("expected {expected} fields, found {found}")]
    Arity { expected: usize, found: usize },
    #[error("malformed {0}")]
    Malformed(&'static str),
}

pub fn encode_field(out: &mut Vec<u8>, field: Option<&[u8]>) {
    match field {
        None => out.push(BOTTOM),
        Some(bytes) => {
            assert!(bytes.len() <= MAX_FIELD_LEN, "field exceeds u16 length");
            out.push(PRESENT);
            out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
            out.extend_from_slice(bytes);
        }
    }
}

/// Encodes a field list without an instruction byte (deletion tokens, replies).
pub fn encode_fields(fields: &[Option<&[u8]>]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in fields {
        encode_field(&mut out, *f);
    }
    out
}

pub fn encode_message(inst: Inst, fields: &[Option<&[u8]>]) -> Vec<u8> {
    let mut out = vec![inst as u8];
    for f in fields {
        encode_field(&mut out, *f);
    }
    out
}

/// Decodes a bare field list. The whole input must be consumed.
pub fn decode_fields(mut input: &[u8]) -> Result<Vec<Option<Vec<u8>>>, ParseError> {
    let mut fields = Vec::new();
    while let Some((&marker, rest)) = input.split_first() {
        match marker {
            BOTTOM => {
                fields.push(None);
                input = rest;
            }
            PRESENT => {
                if rest.len() < 2 {
                    return Err(ParseError::Truncated);
                }
                let len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
                let body = &rest[2..];
                if body.len() < len {
                    return Err(ParseError::Truncated);
                }
                fields.push(Some(body[..len].to_vec()));
                input = &body[len..];
            }
            other => return Err(ParseError::BadMarker(other)),
        }
    }
    Ok(fields)
}

pub fn decode_message(input: &[u8]) -> Result<(Inst, Vec<Option<Vec<u8>>>), ParseError> {
    let (&tag, rest) = input.split_first().ok_or(ParseError::Empty)?;
    let inst = Inst::from_byte(tag).ok_or(ParseError::UnknownInst(tag))?;
    Ok((inst, decode_fields(rest)?))
}

/// Decodes a reply that carries exactly one field.
pub fn decode_single(input: &[u8]) -> Result<Option<Vec<u8>>, ParseError> {
    let mut fields = decode_fields(input)?;
    if fields.len() != 1 {
        return Err(ParseError::Arity {
            expected: 1,
            found: fields.len(),
        });
    }
    Ok(fields.pop().unwrap())
}

/// Length-prefixed writer for canonical serializations.
#[derive(Debug, Default, Clone)]
pub struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    pub fn new(magic: &[u8]) -> Self {
        CanonicalWriter {
            buf: magic.to_vec(),
        }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    /// `Some` as `0x00 ‖ bytes`, `None` as [`BOTTOM`].
    pub fn opt_bytes(&mut self, v: Option<&[u8]>) -> &mut Self {
        match v {
            None => self.u8(BOTTOM),
            Some(b) => self.u8(PRESENT).bytes(b),
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Big-endian encoding of `value` in exactly `ceil(bits / 8)` bytes.
pub fn bitstring(value: u64, bits: u32) -> Vec<u8> {
    let len = bits.div_ceil(8) as usize;
    value.to_be_bytes()[8 - len..].to_vec()
}

/// Unsigned big-endian integer of at most 8 bytes.
pub fn parse_uint(bytes: &[u8]) -> Option<u64> {
    if bytes.is_empty() || bytes.len() > 8 {
        return None;
    }
    Some(bytes.iter().fold(0u64, |acc, &b| (acc << 8) | b as u64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bottom_is_distinct_from_empty_field() {
        assert_eq!(encode_fields(&[None]), vec![BOTTOM]);
        assert_eq!(encode_fields(&[Some(&[])]), vec![0x00, 0x00, 0x00]);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(decode_message(&[]), Err(ParseError::Empty));
        assert_eq!(decode_message(&[0x09]), Err(ParseError::UnknownInst(0x09)));
        assert_eq!(
            decode_message(&[0x01, 0x00, 0x00, 0x05, 1]),
            Err(ParseError::Truncated)
        );
        assert_eq!(decode_message(&[0x01, 0x42]), Err(ParseError::BadMarker(0x42)));
    }

    #[test]
    fn bitstring_widths() {
        assert_eq!(bitstring(3, 2), vec![3]);
        assert_eq!(bitstring(0x1ff, 9), vec![1, 0xff]);
        assert_eq!(bitstring(5, 8), vec![5]);
    }

    proptest! {
        #[test]
        fn message_roundtrip(
            tag in 1u8..=3,
            fields in proptest::collection::vec(
                proptest::option::of(proptest::collection::vec(any::<u8>(), 0..40)), 0..5),
        ) {
            let inst = Inst::from_byte(tag).unwrap();
            let refs: Vec<Option<&[u8]>> = fields.iter().map(|f| f.as_deref()).collect();
            let bytes = encode_message(inst, &refs);
            let (i2, f2) = decode_message(&bytes).unwrap();
            prop_assert_eq!(i2, inst);
            prop_assert_eq!(f2, fields);
        }
    }
}
