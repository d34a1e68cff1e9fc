// SPDX-License-Identifier: Apache-2.0

//! Data collectors as deterministic state machines.
//!
//! A [`CollectorSpec`] is the immutable description of a collector; calling
//! [`CollectorSpec::instantiate`] yields the per-execution [`CollectorState`].
//! Each activation hands the state one inbound client message; any scratch
//! data lives only for the duration of that call, and the only way to observe
//! the state is [`CollectorState::serialize`].

mod composite;
mod diffp;
mod histind;
mod histind2;
mod ml;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, Inst, ParseError};
use crate::dp::DpParams;
use crate::exec::ExecError;
use crate::rng::{Party, Principal, RandomSource, Stream};

pub use composite::CompositeState;
pub use diffp::DiffPState;
pub use histind::{HistIndState, KeyedStore};
pub use histind2::HistInd2State;
pub use ml::MlState;

/// Protocol family; decides the client grammar and how deletion tokens are
/// computed from transcripts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// `(inst, key, auth, value)` requests, tokens `(key, auth')`.
    HistInd,
    /// `(insert, value)` requests answered with a server-sampled key.
    Keyed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ProtocolPair {
    pub main: String,
    pub deletion: String,
    pub family: Family,
}

impl ProtocolPair {
    pub fn new(namespace: &str, family: Family) -> Self {
        ProtocolPair {
            main: namespace.to_string(),
            deletion: format!("{namespace}/del"),
            family,
        }
    }

    pub fn owns(&self, protocol: &str) -> bool {
        self.main == protocol || self.deletion == protocol
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistIndFlaw {
    #[default]
    None,
    /// Ignores `auth`: entries are addressed by the client key alone.
    NoAuth,
    /// Backs the dictionary with an append-only log.
    Tombstone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeControl {
    NoAuth,
    Tombstone,
    ExactSummary,
}

fn default_dim() -> usize {
    1
}

/// Immutable collector definition. JSON form is `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum CollectorSpec {
    #[serde(rename = "histind")]
    HistInd {
        #[serde(default)]
        flaw: HistIndFlaw,
        #[serde(default)]
        namespace: Option<String>,
    },
    #[serde(rename = "histind2")]
    HistInd2 {
        #[serde(default)]
        namespace: Option<String>,
    },
    #[serde(rename = "diffp")]
    DiffP {
        #[serde(flatten)]
        params: DpParams,
        #[serde(default)]
        namespace: Option<String>,
    },
    Ml {
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default)]
        namespace: Option<String>,
    },
    Composite {
        left: Box<CollectorSpec>,
        right: Box<CollectorSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollectorError {
    #[error("protocol identifier {0:?} used by both sides of a composite")]
    ProtocolIdClash(String),
    #[error("invalid collector parameters: {0}")]
    InvalidParams(String),
}

impl CollectorSpec {
    pub fn histind() -> Self {
        CollectorSpec::HistInd {
            flaw: HistIndFlaw::None,
            namespace: None,
        }
    }

    pub fn histind2() -> Self {
        CollectorSpec::HistInd2 { namespace: None }
    }

    pub fn diffp(params: DpParams) -> Self {
        CollectorSpec::DiffP {
            params,
            namespace: None,
        }
    }

    pub fn ml(dim: usize) -> Self {
        CollectorSpec::Ml {
            dim,
            namespace: None,
        }
    }

    /// Same collector with its protocols renamed to `namespace` and
    /// `namespace/del`. Needed to compose two collectors of the same kind.
    pub fn in_namespace(self, ns: &str) -> Self {
        let ns = Some(ns.to_string());
        match self {
            CollectorSpec::HistInd { flaw, .. } => CollectorSpec::HistInd { flaw, namespace: ns },
            CollectorSpec::HistInd2 { .. } => CollectorSpec::HistInd2 { namespace: ns },
            CollectorSpec::DiffP { params, .. } => CollectorSpec::DiffP { params, namespace: ns },
            CollectorSpec::Ml { dim, .. } => CollectorSpec::Ml { dim, namespace: ns },
            c @ CollectorSpec::Composite { .. } => c,
        }
    }

    pub fn protocols(&self) -> Vec<ProtocolPair> {
        let ns = |n: &Option<String>, d: &str| n.clone().unwrap_or_else(|| d.to_string());
        match self {
            CollectorSpec::HistInd { namespace, .. } => {
                vec![ProtocolPair::new(&ns(namespace, "histind"), Family::HistInd)]
            }
            CollectorSpec::HistInd2 { namespace } => {
                vec![ProtocolPair::new(&ns(namespace, "histind2"), Family::HistInd)]
            }
            CollectorSpec::DiffP { namespace, .. } => {
                vec![ProtocolPair::new(&ns(namespace, "diffp"), Family::Keyed)]
            }
            CollectorSpec::Ml { namespace, .. } => {
                vec![ProtocolPair::new(&ns(namespace, "ml"), Family::Keyed)]
            }
            CollectorSpec::Composite { left, right } => {
                let mut v = left.protocols();
                v.extend(right.protocols());
                v
            }
        }
    }

    pub fn protocol(&self, id: &str) -> Option<ProtocolPair> {
        self.protocols().into_iter().find(|p| p.owns(id))
    }

    /// Whether any part of this collector starts sessions with the environment.
    pub fn needs_outcalls(&self) -> bool {
        match self {
            CollectorSpec::HistInd2 { .. } => true,
            CollectorSpec::Composite { left, right } => left.needs_outcalls() || right.needs_outcalls(),
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<(), CollectorError> {
        match self {
            CollectorSpec::DiffP { params, .. } => params
                .validate()
                .map_err(|e| CollectorError::InvalidParams(e.to_string())),
            CollectorSpec::Ml { dim, .. } if *dim == 0 || *dim > 8 => {
                Err(CollectorError::InvalidParams(format!("dimension {dim} outside 1..=8")))
            }
            CollectorSpec::Composite { left, right } => {
                left.validate()?;
                right.validate()?;
                for l in left.protocols() {
                    for r in right.protocols() {
                        for id in [&l.main, &l.deletion] {
                            if r.owns(id) {
                                return Err(CollectorError::ProtocolIdClash(id.clone()));
                            }
                        }
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn instantiate(&self, lambda: u32, draws: &mut dyn RandomSource) -> CollectorState {
        let setup = Stream::new(Party::Collector, Principal::Setup);
        let pair = || self.protocols().remove(0);
        match self {
            CollectorSpec::HistInd { flaw, .. } => CollectorState::HistInd(HistIndState::new(pair(), *flaw)),
            CollectorSpec::HistInd2 { .. } => CollectorState::HistInd2(HistInd2State::new(pair())),
            CollectorSpec::DiffP { params, .. } => {
                CollectorState::DiffP(DiffPState::new(pair(), *params, lambda, draws, setup))
            }
            CollectorSpec::Ml { dim, .. } => CollectorState::Ml(MlState::new(pair(), *dim, lambda, draws, setup)),
            CollectorSpec::Composite { left, right } => CollectorState::Composite(Box::new(CompositeState {
                left_protocols: left.protocols(),
                left: left.instantiate(lambda, draws),
                right: right.instantiate(lambda, draws),
            })),
        }
    }
}

/// Builds the flawed counterpart of an honest collector.
pub fn make_negative_control(kind: NegativeControl, dp: DpParams) -> CollectorSpec {
    match kind {
        NegativeControl::NoAuth => CollectorSpec::HistInd {
            flaw: HistIndFlaw::NoAuth,
            namespace: None,
        },
        NegativeControl::Tombstone => CollectorSpec::HistInd {
            flaw: HistIndFlaw::Tombstone,
            namespace: None,
        },
        NegativeControl::ExactSummary => CollectorSpec::diffp(dp.without_noise()),
    }
}

pub fn compose(left: CollectorSpec, right: CollectorSpec) -> Result<CollectorSpec, CollectorError> {
    let c = CollectorSpec::Composite {
        left: Box::new(left),
        right: Box::new(right),
    };
    c.validate()?;
    Ok(c)
}

/// Result of one activation of a server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepResult {
    /// The server writes this payload back to the client.
    Reply(Vec<u8>),
    /// Processed; nothing is written back.
    Done,
    /// Malformed request, ignored without touching the state.
    Ignored(ParseError),
}

/// Which half of the environment's `(π, π_D)` an outcall targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcall {
    Main,
    Deletion,
}

/// Capabilities the execution grants a server during one activation.
pub trait Host {
    fn lambda(&self) -> u32;
    fn party(&self) -> Party;
    /// Party whose session is being served.
    fn principal(&self) -> Principal;
    fn draws(&mut self) -> &mut dyn RandomSource;
    /// Opens a session of the environment's protocol with the collector as
    /// client and returns the environment's reply, if any.
    fn outcall(&mut self, which: Outcall, payload: Vec<u8>) -> Result<Option<Vec<u8>>, ExecError>;
    /// Writes to the requester's incoming tape; only allowed in auxiliary mode.
    fn write_requester(&mut self, _payload: Vec<u8>) -> Result<(), ExecError> {
        Err(ExecError::ProtocolViolation {
            party: crate::exec::Role::Collector,
            reason: "no back channel to the requester".into(),
        })
    }
    /// Bookkeeping hook for λ-bit draws (authentication strings and keys).
    fn note_secret_draw(&mut self, _value: &[u8]) {}

    fn stream(&self) -> Stream {
        Stream::new(self.party(), self.principal())
    }

    /// Uniform λ-bit string, big-endian in `ceil(λ/8)` bytes.
    fn random_bits(&mut self) -> Vec<u8> {
        let lambda = self.lambda();
        let stream = self.stream();
        let v = self.draws().uniform(stream, 1u64 << lambda);
        let bits = codec::bitstring(v, lambda);
        self.note_secret_draw(&bits);
        bits
    }
}

#[derive(Debug, Clone)]
pub enum CollectorState {
    HistInd(HistIndState),
    HistInd2(HistInd2State),
    DiffP(DiffPState),
    Ml(MlState),
    Composite(Box<CompositeState>),
}

impl CollectorState {
    pub fn step(&mut self, protocol: &str, payload: &[u8], host: &mut dyn Host) -> Result<StepResult, ExecError> {
        match self {
            CollectorState::HistInd(s) => Ok(s.step(protocol, payload, host)),
            CollectorState::HistInd2(s) => s.step(protocol, payload, host),
            CollectorState::DiffP(s) => Ok(s.step(protocol, payload, host)),
            CollectorState::Ml(s) => Ok(s.step(protocol, payload, host)),
            CollectorState::Composite(s) => s.step(protocol, payload, host),
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        match self {
            CollectorState::HistInd(s) => s.serialize(),
            CollectorState::HistInd2(s) => s.serialize(),
            CollectorState::DiffP(s) => s.serialize(),
            CollectorState::Ml(s) => s.serialize(),
            CollectorState::Composite(s) => s.serialize(),
        }
    }
}

/// Parses `payload` as a message on `pair` and checks the honest client grammar.
pub(crate) fn parse_request(
    pair: &ProtocolPair,
    protocol: &str,
    payload: &[u8],
) -> Result<(Inst, Vec<Option<Vec<u8>>>), ParseError> {
    if !pair.owns(protocol) {
        return Err(ParseError::Malformed("unknown protocol"));
    }
    let (inst, fields) = codec::decode_message(payload)?;
    let is_deletion = protocol == pair.deletion;
    let expect = |n: usize| {
        if fields.len() == n {
            Ok(())
        } else {
            Err(ParseError::Arity {
                expected: n,
                found: fields.len(),
            })
        }
    };
    let nonempty = |f: &Option<Vec<u8>>| f.as_ref().is_some_and(|b| !b.is_empty());
    match (pair.family, is_deletion, inst) {
        (Family::HistInd, false, Inst::Insert) => {
            expect(3)?;
            if fields[0].is_none() || !nonempty(&fields[2]) {
                return Err(ParseError::Malformed("insert needs key and value"));
            }
        }
        (Family::HistInd, false, Inst::Lookup) => {
            expect(3)?;
            if fields[0].is_none() || !nonempty(&fields[1]) {
                return Err(ParseError::Malformed("lookup needs key and auth"));
            }
        }
        (Family::HistInd, true, Inst::Delete) => {
            expect(2)?;
            if fields.iter().any(Option::is_none) {
                return Err(ParseError::Malformed("delete needs key and auth"));
            }
        }
        (Family::Keyed, false, Inst::Insert) => {
            expect(1)?;
            if fields[0].is_none() {
                return Err(ParseError::Malformed("insert needs a value"));
            }
        }
        (Family::Keyed, true, Inst::Delete) => {
            expect(1)?;
            if fields[0].is_none() {
                return Err(ParseError::Malformed("delete needs a key"));
            }
        }
        _ => return Err(ParseError::Malformed("instruction not allowed on this protocol")),
    }
    Ok((inst, fields))
}

/// `len(key):u32 ‖ key ‖ auth`, an injective encoding of the pair.
pub(crate) fn compound_key(key: &[u8], auth: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + key.len() + auth.len());
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(key);
    out.extend_from_slice(auth);
    out
}
