// SPDX-License-Identifier: Apache-2.0

//! Scripted parties.
//!
//! Environments and requesters are lists of [`Step`]s. Byte strings are
//! built from [`Bytes`] expressions that may splice in earlier replies,
//! deletion tokens, random bytes or instructions. Handles name sessions
//! started by the same script.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::Inst;
use crate::unlearn::Row;

use super::Role;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Opens a session of `protocol` carrying `payload`.
    Start {
        protocol: String,
        payload: Payload,
        #[serde(default, rename = "as", skip_serializing_if = "Option::is_none")]
        handle: Option<String>,
    },
    /// Writes another client message into an existing session.
    Send { session: String, payload: Payload },
    /// Writes to the requester's incoming tape and passes it the activation.
    Instruct { payload: Bytes },
    Activate { target: Target },
    /// Ends the current activation.
    Yield,
    EndAlive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Collector,
    Requester,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstName {
    Insert,
    Lookup,
    Delete,
}

impl From<InstName> for Inst {
    fn from(i: InstName) -> Inst {
        match i {
            InstName::Insert => Inst::Insert,
            InstName::Lookup => Inst::Lookup,
            InstName::Delete => Inst::Delete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Payload {
    /// `inst ‖ fields`, `null` fields encode ⊥.
    Message { inst: InstName, fields: Vec<Option<Bytes>> },
    /// Deletion request for the session named by the handle.
    DeleteToken { of: String },
    Raw(Bytes),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bytes {
    Hex(String),
    Utf8(String),
    /// Minimal big-endian encoding, at least one byte.
    Int(u64),
    Row { features: Vec<i32>, target: i32 },
    /// Field carried by the server's reply in the named session.
    Reply(String),
    /// Deletion token of the named session.
    Token(String),
    /// Fresh bytes from the party's random tape.
    Random(usize),
    /// The i-th instruction received from the environment.
    Instruction(usize),
    Concat(Vec<Bytes>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("step {step}: handle {handle:?} used before it is defined")]
    UnknownHandle { step: usize, handle: String },
    #[error("step {step}: handle {handle:?} defined twice")]
    DuplicateHandle { step: usize, handle: String },
    #[error("step {step}: requester cannot {what}")]
    BackChannel { step: usize, what: &'static str },
    #[error("step {step}: {reason}")]
    NotHonest { step: usize, reason: &'static str },
    #[error("step {step}: bad bytes: {reason}")]
    BadBytes { step: usize, reason: String },
    #[error("payload of {len} bytes exceeds limit {limit}")]
    PayloadTooLarge { len: usize, limit: usize },
    #[error("step {step}: unknown protocol {protocol:?}")]
    UnknownProtocol { step: usize, protocol: String },
}

impl Script {
    pub fn new() -> Self {
        Script::default()
    }

    pub fn push(mut self, step: Step) -> Self {
        self.steps.push(step);
        self
    }

    pub fn start(self, protocol: &str, payload: Payload, handle: Option<&str>) -> Self {
        self.push(Step::Start {
            protocol: protocol.to_string(),
            payload,
            handle: handle.map(str::to_string),
        })
    }

    pub fn then(self, step: Step) -> Self {
        self.push(step)
    }

    /// True when no payload splices bytes from a server reply. Deletion
    /// tokens are allowed.
    pub fn is_oblivious(&self) -> bool {
        let mut oblivious = true;
        for_each_bytes(self, |_, b| {
            if matches!(b, Bytes::Reply(_)) {
                oblivious = false;
            }
        });
        oblivious
    }

    /// Copy with every handle prefixed, so several scripts can be merged.
    pub fn with_handle_prefix(&self, prefix: &str) -> Script {
        let p = |h: &str| format!("{prefix}{h}");
        let steps = self
            .steps
            .iter()
            .map(|s| match s {
                Step::Start {
                    protocol,
                    payload,
                    handle,
                } => Step::Start {
                    protocol: protocol.clone(),
                    payload: payload.renamed(&p),
                    handle: handle.as_deref().map(p),
                },
                Step::Send { session, payload } => Step::Send {
                    session: p(session),
                    payload: payload.renamed(&p),
                },
                Step::Instruct { payload } => Step::Instruct {
                    payload: payload.renamed(&p),
                },
                other => other.clone(),
            })
            .collect();
        Script { steps }
    }
}

impl Payload {
    pub fn message(inst: InstName, fields: Vec<Option<Bytes>>) -> Self {
        Payload::Message { inst, fields }
    }

    /// HistInd insert: `(insert, key, ⊥, value)`.
    pub fn insert(key: Bytes, value: Bytes) -> Self {
        Payload::message(InstName::Insert, vec![Some(key), None, Some(value)])
    }

    /// HistInd lookup: `(lookup, key, auth, ⊥)`.
    pub fn lookup(key: Bytes, auth: Bytes) -> Self {
        Payload::message(InstName::Lookup, vec![Some(key), Some(auth), None])
    }

    /// Keyed-protocol insert: `(insert, value)`.
    pub fn submit(value: Bytes) -> Self {
        Payload::message(InstName::Insert, vec![Some(value)])
    }

    pub fn delete_token(of: &str) -> Self {
        Payload::DeleteToken { of: of.to_string() }
    }

    fn renamed(&self, p: &dyn Fn(&str) -> String) -> Payload {
        match self {
            Payload::Message { inst, fields } => Payload::Message {
                inst: *inst,
                fields: fields.iter().map(|f| f.as_ref().map(|b| b.renamed(p))).collect(),
            },
            Payload::DeleteToken { of } => Payload::DeleteToken { of: p(of) },
            Payload::Raw(b) => Payload::Raw(b.renamed(p)),
        }
    }

    fn bytes(&self) -> Vec<&Bytes> {
        match self {
            Payload::Message { fields, .. } => fields.iter().flatten().collect(),
            Payload::DeleteToken { .. } => Vec::new(),
            Payload::Raw(b) => vec![b],
        }
    }
}

impl Bytes {
    pub fn utf8(s: &str) -> Self {
        Bytes::Utf8(s.to_string())
    }

    pub fn reply(h: &str) -> Self {
        Bytes::Reply(h.to_string())
    }

    pub fn token(h: &str) -> Self {
        Bytes::Token(h.to_string())
    }

    pub fn row(features: &[i32], target: i32) -> Self {
        Bytes::Row {
            features: features.to_vec(),
            target,
        }
    }

    fn renamed(&self, p: &dyn Fn(&str) -> String) -> Bytes {
        match self {
            Bytes::Reply(h) => Bytes::Reply(p(h)),
            Bytes::Token(h) => Bytes::Token(p(h)),
            Bytes::Concat(v) => Bytes::Concat(v.iter().map(|b| b.renamed(p)).collect()),
            other => other.clone(),
        }
    }


    fn handles(&self, out: &mut Vec<String>) {
        match self {
            Bytes::Reply(h) | Bytes::Token(h) => out.push(h.clone()),
            Bytes::Concat(v) => v.iter().for_each(|b| b.handles(out)),
            _ => {}
        }
    }

    /// Evaluates the expression against `ctx`.
    pub fn render(&self, ctx: &mut dyn BytesContext) -> Result<Vec<u8>, String> {
        Ok(match self {
            Bytes::Hex(s) => hex::decode(s).map_err(|e| format!("hex {s:?}: {e}"))?,
            Bytes::Utf8(s) => s.as_bytes().to_vec(),
            Bytes::Int(v) => {
                let b = v.to_be_bytes();
                let skip = b.iter().take(7).take_while(|&&x| x == 0).count();
                b[skip..].to_vec()
            }
            Bytes::Row { features, target } => Row::new(features.clone(), *target).encode(),
            Bytes::Reply(h) => ctx.reply(h)?,
            Bytes::Token(h) => ctx.token(h)?,
            Bytes::Random(n) => ctx.random(*n),
            Bytes::Instruction(i) => ctx.instruction(*i),
            Bytes::Concat(v) => {
                let mut out = Vec::new();
                for b in v {
                    out.extend(b.render(ctx)?);
                }
                out
            }
        })
    }
}

/// What a [`Bytes`] expression can read while rendering.
pub trait BytesContext {
    fn reply(&mut self, handle: &str) -> Result<Vec<u8>, String>;
    fn token(&mut self, handle: &str) -> Result<Vec<u8>, String>;
    fn random(&mut self, len: usize) -> Vec<u8>;
    fn instruction(&mut self, index: usize) -> Vec<u8>;
}

fn for_each_bytes(script: &Script, mut f: impl FnMut(usize, &Bytes)) {
    fn walk(b: &Bytes, step: usize, f: &mut dyn FnMut(usize, &Bytes)) {
        f(step, b);
        if let Bytes::Concat(v) = b {
            v.iter().for_each(|x| walk(x, step, f));
        }
    }
    for (i, s) in script.steps.iter().enumerate() {
        let payload_bytes = match s {
            Step::Start { payload, .. } | Step::Send { payload, .. } => payload.bytes(),
            Step::Instruct { payload } => vec![payload],
            _ => Vec::new(),
        };
        for b in payload_bytes {
            walk(b, i, &mut f);
        }
    }
}

/// Static checks: handles are defined before use and the requester stays
/// within what an honest client may do.
pub fn validate(script: &Script, role: Role) -> Result<(), ScriptError> {
    let mut defined: HashSet<&str> = HashSet::new();
    for (step, s) in script.steps.iter().enumerate() {
        let mut used: Vec<String> = Vec::new();
        match s {
            Step::Start { payload, .. } | Step::Send { payload, .. } => {
                if let Payload::DeleteToken { of } = payload {
                    used.push(of.clone());
                }
                payload.bytes().iter().for_each(|b| b.handles(&mut used));
            }
            Step::Instruct { payload } => payload.handles(&mut used),
            _ => {}
        }
        if let Step::Send { session, .. } = s {
            used.push(session.clone());
        }
        if let Some(h) = used.iter().find(|h| !defined.contains(h.as_str())) {
            return Err(ScriptError::UnknownHandle {
                step,
                handle: h.clone(),
            });
        }
        if role == Role::Requester {
            match s {
                Step::Instruct { .. } => return Err(ScriptError::BackChannel { step, what: "instruct" }),
                Step::Activate { .. } => return Err(ScriptError::BackChannel { step, what: "pass activations" }),
                Step::EndAlive => return Err(ScriptError::BackChannel { step, what: "end the alive phase" }),
                Step::Send { .. } => {
                    return Err(ScriptError::NotHonest {
                        step,
                        reason: "honest clients send one message per session",
                    })
                }
                Step::Start {
                    payload: Payload::Raw(_),
                    ..
                } => {
                    return Err(ScriptError::NotHonest {
                        step,
                        reason: "raw payloads are not allowed for the requester",
                    })
                }
                _ => {}
            }
        }
        if let Step::Start {
            handle: Some(h), ..
        } = s
        {
            if !defined.insert(h.as_str()) {
                return Err(ScriptError::DuplicateHandle {
                    step,
                    handle: h.clone(),
                });
            }
        }
    }
    if role == Role::Environment {
        let mut bad = None;
        for_each_bytes(script, |step, b| {
            if matches!(b, Bytes::Instruction(_)) && bad.is_none() {
                bad = Some(step);
            }
        });
        if let Some(step) = bad {
            return Err(ScriptError::BadBytes {
                step,
                reason: "the environment receives no instructions".into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let json = r#"{"steps": [
            {"start": {"protocol": "histind", "as": "a",
                       "payload": {"message": {"inst": "insert", "fields": [{"utf8": "k"}, null, {"hex": "01"}]}}}},
            {"start": {"protocol": "histind", "payload": {"message": {"inst": "lookup",
                       "fields": [{"utf8": "k"}, {"reply": "a"}, null]}}}},
            "yield",
            {"start": {"protocol": "histind/del", "payload": {"delete_token": {"of": "a"}}}}
        ]}"#;
        let s: Script = serde_json::from_str(json).unwrap();
        assert_eq!(s.steps.len(), 4);
        validate(&s, Role::Requester).unwrap();
        let back: Script = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_fields_rejected() {
        let json = r#"{"steps": [], "extra": 1}"#;
        assert!(serde_json::from_str::<Script>(json).is_err());
    }

    #[test]
    fn forward_reference_is_an_error() {
        let s = Script::new()
            .start("histind", Payload::lookup(Bytes::utf8("k"), Bytes::reply("later")), None)
            .start("histind", Payload::insert(Bytes::utf8("k"), Bytes::Int(1)), Some("later"));
        assert!(matches!(
            validate(&s, Role::Environment),
            Err(ScriptError::UnknownHandle { step: 0, .. })
        ));
    }

    #[test]
    fn requester_cannot_talk_back() {
        for step in [
            Step::Instruct { payload: Bytes::Int(1) },
            Step::Activate { target: Target::Collector },
            Step::EndAlive,
        ] {
            let s = Script::new().then(step);
            assert!(matches!(validate(&s, Role::Requester), Err(ScriptError::BackChannel { .. })));
            validate(&s, Role::Environment).unwrap();
        }
    }

    #[test]
    fn int_encoding_is_minimal() {
        struct Nothing;
        impl BytesContext for Nothing {
            fn reply(&mut self, _: &str) -> Result<Vec<u8>, String> {
                Err("none".into())
            }
            fn token(&mut self, _: &str) -> Result<Vec<u8>, String> {
                Err("none".into())
            }
            fn random(&mut self, n: usize) -> Vec<u8> {
                vec![0; n]
            }
            fn instruction(&mut self, _: usize) -> Vec<u8> {
                Vec::new()
            }
        }
        assert_eq!(Bytes::Int(0).render(&mut Nothing).unwrap(), vec![0]);
        assert_eq!(Bytes::Int(258).render(&mut Nothing).unwrap(), vec![1, 2]);
        let c = Bytes::Concat(vec![Bytes::utf8("a"), Bytes::Hex("ff".into())]);
        assert_eq!(c.render(&mut Nothing).unwrap(), vec![b'a', 0xff]);
    }

    #[test]
    fn prefixing_keeps_scripts_valid() {
        let s = Script::new()
            .start("diffp", Payload::submit(Bytes::Int(1)), Some("a"))
            .start("diffp/del", Payload::delete_token("a"), None);
        let p = s.with_handle_prefix("r1.");
        validate(&p, Role::Requester).unwrap();
        assert!(p.is_oblivious());
        let reads = Script::new()
            .start("histind", Payload::insert(Bytes::utf8("k"), Bytes::utf8("v")), Some("a"))
            .start("histind", Payload::lookup(Bytes::utf8("k"), Bytes::reply("a")), None);
        assert!(!reads.is_oblivious());
        assert_eq!(
            p.steps[1],
            Step::Start {
                protocol: "diffp/del".into(),
                payload: Payload::delete_token("r1.a"),
                handle: None
            }
        );
    }
}
