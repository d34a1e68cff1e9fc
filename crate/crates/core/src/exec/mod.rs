// SPDX-License-Identifier: Apache-2.0

//! Execution of a collector with a scripted environment and requester.
//!
//! Scheduling is sequential: exactly one party holds the activation at any
//! time, and control moves only when the active party writes to another
//! party's tape or halts. An execution has two phases. In the alive phase the
//! environment drives; in the terminate phase the requester's remaining data
//! is deleted through the deletion protocol.

mod engine;
mod enumerate;
pub mod script;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CanonicalWriter, Inst, BOTTOM};
use crate::collectors::{CollectorSpec, Family, HistIndFlaw, ProtocolPair};
use crate::rng::SeededSource;

pub use engine::run_with_source;
pub use enumerate::{enumerate_executions, enumerate_fold, ENUMERATION_LIMIT, MAX_ENUMERATION_LAMBDA};
pub use script::{Bytes, InstName, Payload, Script, ScriptError, Step, Target};

pub const DEFAULT_MAX_ACTIVATIONS: u64 = 100_000;
pub const DEFAULT_MAX_PAYLOAD: usize = 4096;
pub const MAX_LAMBDA: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct SecurityParam(u32);

impl SecurityParam {
    pub fn new(lambda: u32) -> Result<Self, ExecError> {
        if (1..=MAX_LAMBDA).contains(&lambda) {
            Ok(SecurityParam(lambda))
        } else {
            Err(ExecError::InvalidConfig(format!("security parameter {lambda} outside 1..={MAX_LAMBDA}")))
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for SecurityParam {
    type Error = ExecError;
    fn try_from(v: u32) -> Result<Self, ExecError> {
        SecurityParam::new(v)
    }
}

impl From<SecurityParam> for u32 {
    fn from(l: SecurityParam) -> u32 {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Environment,
    Requester,
    Collector,
}

impl Role {
    fn tag(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionId {
    pub sid: u64,
    pub initiator: Role,
}

/// Session name as seen by the environment: initiator plus the initiator's
/// own session count. Unlike `sid` it does not depend on other parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionLabel {
    pub initiator: Role,
    pub ordinal: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToServer,
    ToClient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub session: SessionId,
    pub direction: Direction,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub messages: Vec<Message>,
}

impl Transcript {
    pub fn request(&self) -> Option<&[u8]> {
        self.messages
            .iter()
            .find(|m| m.direction == Direction::ToServer)
            .map(|m| m.payload.as_slice())
    }

    pub fn reply(&self) -> Option<&[u8]> {
        self.messages
            .iter()
            .find(|m| m.direction == Direction::ToClient)
            .map(|m| m.payload.as_slice())
    }
}

/// Encoded field list handed to the deletion protocol; `[0xFF]` is ⊥.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DeletionToken(pub Vec<u8>);

impl DeletionToken {
    pub fn bottom() -> Self {
        DeletionToken(vec![BOTTOM])
    }

    pub fn is_bottom(&self) -> bool {
        self.0 == [BOTTOM]
    }

    /// Message opening a deletion session, `None` for ⊥.
    pub fn message(&self) -> Option<Vec<u8>> {
        if self.is_bottom() {
            return None;
        }
        let mut m = vec![Inst::Delete as u8];
        m.extend_from_slice(&self.0);
        Some(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("protocol {0:?} is not served by this collector")]
    UnknownProtocol(String),
    #[error("transcript has no server reply")]
    IncompleteTranscript,
    #[error("request does not parse")]
    Malformed,
}

/// Deletion token for a completed session of `pair.main`.
pub fn compute_deletion_token(pair: &ProtocolPair, transcript: &Transcript) -> Result<DeletionToken, TokenError> {
    let request = transcript.request().ok_or(TokenError::IncompleteTranscript)?;
    let (inst, fields) = codec::decode_message(request).map_err(|_| TokenError::Malformed)?;
    match (pair.family, inst) {
        (Family::HistInd, Inst::Lookup) => Ok(DeletionToken::bottom()),
        (_, Inst::Insert) => {
            let reply = transcript.reply().ok_or(TokenError::IncompleteTranscript)?;
            let issued = codec::decode_single(reply)
                .map_err(|_| TokenError::Malformed)?
                .ok_or(TokenError::Malformed)?;
            Ok(DeletionToken(match pair.family {
                Family::HistInd => {
                    let key = fields.first().cloned().flatten().ok_or(TokenError::Malformed)?;
                    codec::encode_fields(&[Some(&key), Some(&issued)])
                }
                Family::Keyed => codec::encode_fields(&[Some(&issued)]),
            }))
        }
        _ => Err(TokenError::Malformed),
    }
}

/// Looks up the pair serving `protocol` and computes the token.
pub fn deletion_token_for(
    collector: &CollectorSpec,
    protocol: &str,
    transcript: &Transcript,
) -> Result<DeletionToken, TokenError> {
    let pair = collector
        .protocol(protocol)
        .filter(|p| p.main == protocol)
        .ok_or_else(|| TokenError::UnknownProtocol(protocol.to_string()))?;
    compute_deletion_token(&pair, transcript)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViewEvent {
    Sent {
        session: SessionLabel,
        protocol: String,
        payload: Vec<u8>,
    },
    Received {
        session: SessionLabel,
        payload: Vec<u8>,
    },
    Instructed {
        payload: Vec<u8>,
    },
    Activated {
        target: Target,
    },
    /// The environment's embedded server answered a collector request.
    Served {
        session: SessionLabel,
        protocol: String,
        request: Vec<u8>,
        reply: Option<Vec<u8>>,
    },
    EndAlive,
}

/// The environment's view: its random tape and everything it saw, indexed by
/// its own activation count.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct View {
    pub random_tape: Vec<u8>,
    pub events: Vec<(u64, ViewEvent)>,
}

impl View {
    pub fn serialize(&self) -> Vec<u8> {
        let mut w = CanonicalWriter::new(b"VEW1");
        w.bytes(&self.random_tape).u32(self.events.len() as u32);
        let label = |w: &mut CanonicalWriter, l: &SessionLabel| {
            w.u8(l.initiator.tag()).u32(l.ordinal);
        };
        for (at, e) in &self.events {
            w.u64(*at);
            match e {
                ViewEvent::Sent {
                    session,
                    protocol,
                    payload,
                } => {
                    w.u8(1);
                    label(&mut w, session);
                    w.bytes(protocol.as_bytes()).bytes(payload);
                }
                ViewEvent::Received { session, payload } => {
                    w.u8(2);
                    label(&mut w, session);
                    w.bytes(payload);
                }
                ViewEvent::Instructed { payload } => {
                    w.u8(3).bytes(payload);
                }
                ViewEvent::Activated { target } => {
                    w.u8(4).u8(*target as u8);
                }
                ViewEvent::Served {
                    session,
                    protocol,
                    request,
                    reply,
                } => {
                    w.u8(5);
                    label(&mut w, session);
                    w.bytes(protocol.as_bytes()).bytes(request).opt_bytes(reply.as_deref());
                }
                ViewEvent::EndAlive => {
                    w.u8(6);
                }
            }
        }
        w.finish()
    }
}

/// Server the environment runs for collector outcalls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvServerKind {
    #[default]
    Histind,
    Tombstone,
}

impl EnvServerKind {
    pub fn spec(self) -> CollectorSpec {
        let flaw = match self {
            EnvServerKind::Histind => HistIndFlaw::None,
            EnvServerKind::Tombstone => HistIndFlaw::Tombstone,
        };
        CollectorSpec::HistInd {
            flaw,
            namespace: Some("env".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Plain,
    /// The collector may also write to the requester's incoming tape.
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum World {
    Real,
    /// Same configuration with the requester replaced by the silent one.
    Ideal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionConfig {
    pub lambda: SecurityParam,
    pub collector: CollectorSpec,
    pub env_script: Script,
    /// Server embedded in the environment; required when outcalls are enabled.
    pub env_server: Option<EnvServerKind>,
    /// `None` is the silent requester.
    pub requester: Option<Script>,
    pub mode: Mode,
    pub aux_protocols_enabled: bool,
    pub master_seed: u64,
    pub max_activations: u64,
    pub max_payload: usize,
    pub trace: bool,
}

impl ExecutionConfig {
    pub fn new(lambda: SecurityParam, collector: CollectorSpec, env_script: Script) -> Self {
        let aux = collector.needs_outcalls();
        ExecutionConfig {
            lambda,
            collector,
            env_script,
            env_server: aux.then_some(EnvServerKind::Histind),
            requester: None,
            mode: Mode::Plain,
            aux_protocols_enabled: aux,
            master_seed: 0,
            max_activations: DEFAULT_MAX_ACTIVATIONS,
            max_payload: DEFAULT_MAX_PAYLOAD,
            trace: false,
        }
    }

    pub fn with_requester(mut self, script: Script) -> Self {
        self.requester = Some(script);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        self.collector
            .validate()
            .map_err(|e| ExecError::InvalidConfig(e.to_string()))?;
        script::validate(&self.env_script, Role::Environment)?;
        if let Some(r) = &self.requester {
            script::validate(r, Role::Requester)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecutionStats {
    pub activations: u64,
    /// λ-bit strings drawn by the collector.
    pub collector_secret_draws: u64,
    /// Two of those strings were equal.
    pub secret_draw_collision: bool,
    pub sessions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOutcome {
    pub state_x: Vec<u8>,
    pub view_z: View,
    pub state_z: Vec<u8>,
    pub deletion_tokens_issued: Vec<DeletionToken>,
    pub stats: ExecutionStats,
    pub trace: Option<Vec<String>>,
}

/// Which part of an outcome the distinguisher sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Observation {
    /// `(state_x, view_z)`.
    #[default]
    StateAndView,
    /// `(state_x, state_z)`.
    StateAndEnvState,
}

impl ExecutionOutcome {
    pub fn observed(&self, obs: Observation) -> Vec<u8> {
        let mut w = CanonicalWriter::new(b"OBS1");
        w.bytes(&self.state_x);
        match obs {
            Observation::StateAndView => w.bytes(&self.view_z.serialize()),
            Observation::StateAndEnvState => w.bytes(&self.state_z),
        };
        w.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error("script error: {0}")]
    Script(#[from] ScriptError),
    #[error("protocol violation by {party:?}: {reason}")]
    ProtocolViolation { party: Role, reason: String },
    #[error("activation budget of {limit} exhausted")]
    BudgetExceeded { limit: u64 },
    #[error("collector outcall with no environment protocol available")]
    OutcallUnavailable,
    #[error("enumeration space of {space} paths exceeds the limit")]
    EnumerationTooLarge { space: u128 },
    #[error("deletion token: {0}")]
    Token(#[from] TokenError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub fn run_execution(config: &ExecutionConfig) -> Result<ExecutionOutcome, ExecError> {
    run_with_source(config, World::Real, &mut SeededSource::new(config.master_seed))
}

/// Same seed and environment, silent requester.
pub fn run_ideal(config: &ExecutionConfig) -> Result<ExecutionOutcome, ExecError> {
    run_with_source(config, World::Ideal, &mut SeededSource::new(config.master_seed))
}

