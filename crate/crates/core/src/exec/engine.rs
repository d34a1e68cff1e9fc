// SPDX-License-Identifier: Apache-2.0

use std::collections::{HashMap, HashSet};

use crate::codec::{self, CanonicalWriter};
use crate::collectors::{self, CollectorState, Host, Outcall, ProtocolPair, StepResult};
use crate::rng::{Party, Principal, RandomSource, Stream};

use super::script::{BytesContext, Payload, Step, Target};
use super::{
    compute_deletion_token, DeletionToken, Direction, ExecError, ExecutionConfig, ExecutionOutcome, ExecutionStats,
    Message, Mode, Role, ScriptError, SessionId, SessionLabel, Transcript, View, ViewEvent, World,
};

/// Runs one execution drawing all randomness from `draws`.
pub fn run_with_source(
    cfg: &ExecutionConfig,
    world: World,
    draws: &mut dyn RandomSource,
) -> Result<ExecutionOutcome, ExecError> {
    cfg.validate()?;
    let lambda = cfg.lambda.get();
    let collector = cfg.collector.instantiate(lambda, draws);
    let server = cfg.env_server.map(|k| k.spec());
    let ctx = Ctx {
        cfg,
        lambda,
        real: world == World::Real && cfg.requester.is_some(),
        server_pair: server.as_ref().map(|s| s.protocols().remove(0)),
        server: server.map(|s| s.instantiate(lambda, draws)),
        draws,
        principal: Principal::Setup,
        sessions: Vec::new(),
        ordinals: [0; 3],
        view: Vec::new(),
        z_act: 1,
        activations: 1,
        secret_draws: 0,
        secret_values: HashSet::new(),
        draw_collision: false,
        env_tape: Vec::new(),
        env_handles: HashMap::new(),
        req_handles: HashMap::new(),
        instructions: Vec::new(),
        req_pc: 0,
        tokens: Vec::new(),
        trace: cfg.trace.then(Vec::new),
    };
    let mut engine = Engine { collector, ctx };
    engine.alive()?;
    engine.terminate()?;
    Ok(engine.finish())
}

struct Session {
    id: SessionId,
    label: SessionLabel,
    protocol: String,
    pair: Option<ProtocolPair>,
    transcript: Transcript,
    answered: bool,
    deletion_issued: bool,
    pending: Option<Vec<u8>>,
}

struct Ctx<'a> {
    cfg: &'a ExecutionConfig,
    lambda: u32,
    real: bool,
    draws: &'a mut dyn RandomSource,
    server: Option<CollectorState>,
    server_pair: Option<ProtocolPair>,
    principal: Principal,
    sessions: Vec<Session>,
    ordinals: [u32; 3],
    view: Vec<(u64, ViewEvent)>,
    z_act: u64,
    activations: u64,
    secret_draws: u64,
    secret_values: HashSet<Vec<u8>>,
    draw_collision: bool,
    env_tape: Vec<u8>,
    env_handles: HashMap<String, usize>,
    req_handles: HashMap<String, usize>,
    instructions: Vec<Vec<u8>>,
    req_pc: usize,
    tokens: Vec<DeletionToken>,
    trace: Option<Vec<String>>,
}

impl Ctx<'_> {
    fn tick(&mut self) -> Result<(), ExecError> {
        self.activations += 1;
        if self.activations > self.cfg.max_activations {
            return Err(ExecError::BudgetExceeded {
                limit: self.cfg.max_activations,
            });
        }
        Ok(())
    }

    fn note(&mut self, line: impl FnOnce() -> String) {
        if let Some(t) = &mut self.trace {
            t.push(line());
        }
    }

    fn open(&mut self, initiator: Role, protocol: &str, pair: Option<ProtocolPair>) -> usize {
        let slot = &mut self.ordinals[initiator as usize];
        *slot += 1;
        let label = SessionLabel {
            initiator,
            ordinal: *slot,
        };
        self.sessions.push(Session {
            id: SessionId {
                sid: self.sessions.len() as u64 + 1,
                initiator,
            },
            label,
            protocol: protocol.to_string(),
            pair,
            transcript: Transcript::default(),
            answered: false,
            deletion_issued: false,
            pending: None,
        });
        self.sessions.len() - 1
    }

    fn record(&mut self, idx: usize, direction: Direction, payload: &[u8]) {
        let s = &mut self.sessions[idx];
        s.transcript.messages.push(Message {
            session: s.id,
            direction,
            payload: payload.to_vec(),
        });
    }

    fn handles(&self, role: Role) -> &HashMap<String, usize> {
        match role {
            Role::Requester => &self.req_handles,
            _ => &self.env_handles,
        }
    }

    fn session_of(&self, role: Role, handle: &str) -> Result<usize, String> {
        self.handles(role)
            .get(handle)
            .copied()
            .ok_or_else(|| format!("unknown handle {handle:?}"))
    }

    fn token_of(&self, idx: usize) -> Result<DeletionToken, ExecError> {
        let s = &self.sessions[idx];
        let pair = s.pair.as_ref().ok_or_else(|| ExecError::InvalidConfig("session has no protocol".into()))?;
        Ok(compute_deletion_token(pair, &s.transcript)?)
    }
}

impl Host for Ctx<'_> {
    fn lambda(&self) -> u32 {
        self.lambda
    }

    fn party(&self) -> Party {
        Party::Collector
    }

    fn principal(&self) -> Principal {
        self.principal
    }

    fn draws(&mut self) -> &mut dyn RandomSource {
        &mut *self.draws
    }

    fn note_secret_draw(&mut self, value: &[u8]) {
        self.secret_draws += 1;
        if !self.secret_values.insert(value.to_vec()) {
            self.draw_collision = true;
        }
    }

    fn write_requester(&mut self, payload: Vec<u8>) -> Result<(), ExecError> {
        if self.cfg.mode != Mode::Auxiliary {
            return Err(ExecError::ProtocolViolation {
                party: Role::Collector,
                reason: "no back channel to the requester".into(),
            });
        }
        if self.real {
            self.instructions.push(payload);
        }
        Ok(())
    }

    fn outcall(&mut self, which: Outcall, payload: Vec<u8>) -> Result<Option<Vec<u8>>, ExecError> {
        if !self.cfg.aux_protocols_enabled {
            return Err(ExecError::OutcallUnavailable);
        }
        let pair = self.server_pair.clone().ok_or(ExecError::OutcallUnavailable)?;
        let protocol = match which {
            Outcall::Main => pair.main.clone(),
            Outcall::Deletion => pair.deletion.clone(),
        };
        let idx = self.open(Role::Collector, &protocol, Some(pair));
        self.record(idx, Direction::ToServer, &payload);
        self.tick()?;
        let mut host = ServerHost {
            lambda: self.lambda,
            principal: self.principal,
            draws: &mut *self.draws,
        };
        let server = self.server.as_mut().ok_or(ExecError::OutcallUnavailable)?;
        let reply = match server.step(&protocol, &payload, &mut host)? {
            StepResult::Reply(r) => Some(r),
            _ => None,
        };
        if let Some(r) = &reply {
            self.record(idx, Direction::ToClient, r);
        }
        let label = self.sessions[idx].label;
        self.view.push((
            self.z_act,
            ViewEvent::Served {
                session: label,
                protocol: protocol.clone(),
                request: payload.clone(),
                reply: reply.clone(),
            },
        ));
        self.note(|| format!("collector -> env {protocol} {}", hex::encode(&payload)));
        self.tick()?;
        Ok(reply)
    }
}

/// Host for the environment's embedded server; it cannot make outcalls.
struct ServerHost<'a> {
    lambda: u32,
    principal: Principal,
    draws: &'a mut dyn RandomSource,
}

impl Host for ServerHost<'_> {
    fn lambda(&self) -> u32 {
        self.lambda
    }

    fn party(&self) -> Party {
        Party::EnvServer
    }

    fn principal(&self) -> Principal {
        self.principal
    }

    fn draws(&mut self) -> &mut dyn RandomSource {
        &mut *self.draws
    }

    fn outcall(&mut self, _: Outcall, _: Vec<u8>) -> Result<Option<Vec<u8>>, ExecError> {
        Err(ExecError::OutcallUnavailable)
    }
}

struct Render<'b, 'a> {
    ctx: &'b mut Ctx<'a>,
    role: Role,
}

impl BytesContext for Render<'_, '_> {
    fn reply(&mut self, handle: &str) -> Result<Vec<u8>, String> {
        let idx = self.ctx.session_of(self.role, handle)?;
        Ok(self.ctx.sessions[idx]
            .transcript
            .reply()
            .and_then(|r| codec::decode_single(r).ok().flatten())
            .unwrap_or_default())
    }

    fn token(&mut self, handle: &str) -> Result<Vec<u8>, String> {
        let idx = self.ctx.session_of(self.role, handle)?;
        self.ctx.token_of(idx).map(|t| t.0).map_err(|e| e.to_string())
    }

    fn random(&mut self, len: usize) -> Vec<u8> {
        let principal = match self.role {
            Role::Requester => Principal::Requester,
            _ => Principal::Environment,
        };
        let stream = Stream::new(Party::Environment, principal);
        let mut out = Vec::with_capacity(len);
        let mut left = len;
        while left > 0 {
            let n = left.min(4);
            let v = self.ctx.draws.uniform(stream, 1u64 << (8 * n));
            out.extend_from_slice(&v.to_be_bytes()[8 - n..]);
            left -= n;
        }
        if self.role == Role::Environment {
            self.ctx.env_tape.extend_from_slice(&out);
        }
        out
    }

    fn instruction(&mut self, index: usize) -> Vec<u8> {
        self.ctx.instructions.get(index).cloned().unwrap_or_default()
    }
}

enum Rendered {
    Bytes(Vec<u8>),
    Deletion { of: usize, token: DeletionToken },
}

struct Engine<'a> {
    collector: CollectorState,
    ctx: Ctx<'a>,
}

impl Engine<'_> {
    fn render(&mut self, role: Role, step: usize, payload: &Payload) -> Result<Rendered, ExecError> {
        let bad = |reason: String| ExecError::Script(ScriptError::BadBytes { step, reason });
        let out = match payload {
            Payload::DeleteToken { of } => {
                let idx = self.ctx.session_of(role, of).map_err(bad)?;
                let token = self.ctx.token_of(idx)?;
                return Ok(Rendered::Deletion { of: idx, token });
            }
            Payload::Raw(b) => b.render(&mut Render { ctx: &mut self.ctx, role }).map_err(bad)?,
            Payload::Message { inst, fields } => {
                let mut parts = Vec::with_capacity(fields.len());
                for f in fields {
                    parts.push(match f {
                        Some(b) => Some(b.render(&mut Render { ctx: &mut self.ctx, role }).map_err(bad)?),
                        None => None,
                    });
                }
                let refs: Vec<Option<&[u8]>> = parts.iter().map(|p| p.as_deref()).collect();
                codec::encode_message((*inst).into(), &refs)
            }
        };
        Ok(Rendered::Bytes(out))
    }

    fn pair_for(&self, step: usize, protocol: &str) -> Result<ProtocolPair, ExecError> {
        self.ctx.cfg.collector.protocol(protocol).ok_or_else(|| {
            ExecError::Script(ScriptError::UnknownProtocol {
                step,
                protocol: protocol.to_string(),
            })
        })
    }

    /// Hands `payload` to the collector in session `idx`; returns its reply.
    fn deliver(&mut self, idx: usize, payload: Vec<u8>) -> Result<Option<Vec<u8>>, ExecError> {
        if payload.len() > self.ctx.cfg.max_payload {
            return Err(ScriptError::PayloadTooLarge {
                len: payload.len(),
                limit: self.ctx.cfg.max_payload,
            }
            .into());
        }
        self.ctx.record(idx, Direction::ToServer, &payload);
        self.ctx.tick()?;
        let initiator = self.ctx.sessions[idx].id.initiator;
        self.ctx.principal = match initiator {
            Role::Requester => Principal::Requester,
            _ => Principal::Environment,
        };
        let protocol = self.ctx.sessions[idx].protocol.clone();
        self.ctx
            .note(|| format!("{initiator:?} -> collector {protocol} {}", hex::encode(&payload)));
        let result = self.collector.step(&protocol, &payload, &mut self.ctx)?;
        Ok(match result {
            StepResult::Reply(r) => {
                self.ctx.record(idx, Direction::ToClient, &r);
                self.ctx.sessions[idx].answered = true;
                self.ctx.note(|| format!("collector -> {initiator:?} {}", hex::encode(&r)));
                Some(r)
            }
            StepResult::Done => {
                self.ctx.sessions[idx].answered = true;
                None
            }
            StepResult::Ignored(e) => {
                self.ctx.note(|| format!("collector ignored request: {e}"));
                None
            }
        })
    }

    fn z_resume(&mut self) -> Result<(), ExecError> {
        self.ctx.tick()?;
        self.ctx.z_act += 1;
        Ok(())
    }

    fn z_event(&mut self, e: ViewEvent) {
        self.ctx.view.push((self.ctx.z_act, e));
    }

    fn z_send(&mut self, idx: usize, protocol: &str, payload: Vec<u8>) -> Result<(), ExecError> {
        let label = self.ctx.sessions[idx].label;
        self.z_event(ViewEvent::Sent {
            session: label,
            protocol: protocol.to_string(),
            payload: payload.clone(),
        });
        let reply = self.deliver(idx, payload)?;
        self.z_resume()?;
        if let Some(r) = reply {
            self.z_event(ViewEvent::Received {
                session: label,
                payload: r,
            });
        }
        Ok(())
    }

    fn alive(&mut self) -> Result<(), ExecError> {
        let cfg = self.ctx.cfg;
        for (i, step) in cfg.env_script.steps.iter().enumerate() {
            match step {
                Step::Start {
                    protocol,
                    payload,
                    handle,
                } => {
                    let pair = self.pair_for(i, protocol)?;
                    let rendered = self.render(Role::Environment, i, payload)?;
                    let idx = self.ctx.open(Role::Environment, protocol, Some(pair));
                    if let Some(h) = handle {
                        self.ctx.env_handles.insert(h.clone(), idx);
                    }
                    match rendered {
                        Rendered::Bytes(b) => self.z_send(idx, protocol, b)?,
                        Rendered::Deletion { of, token } => {
                            self.ctx.sessions[of].deletion_issued = true;
                            if let Some(m) = token.message() {
                                self.z_send(idx, protocol, m)?;
                            }
                        }
                    }
                }
                Step::Send { session, payload } => {
                    let idx = self.ctx.env_handles[session];
                    let protocol = self.ctx.sessions[idx].protocol.clone();
                    let bytes = match self.render(Role::Environment, i, payload)? {
                        Rendered::Bytes(b) => Some(b),
                        Rendered::Deletion { token, .. } => token.message(),
                    };
                    if let Some(b) = bytes {
                        self.z_send(idx, &protocol, b)?;
                    }
                }
                Step::Instruct { payload } => {
                    let bytes = payload
                        .render(&mut Render {
                            ctx: &mut self.ctx,
                            role: Role::Environment,
                        })
                        .map_err(|reason| ScriptError::BadBytes { step: i, reason })?;
                    self.z_event(ViewEvent::Instructed { payload: bytes.clone() });
                    if self.ctx.real {
                        self.ctx.instructions.push(bytes);
                    }
                    self.run_requester(false)?;
                    self.z_resume()?;
                }
                Step::Activate { target } => {
                    self.z_event(ViewEvent::Activated { target: *target });
                    match target {
                        Target::Collector => self.ctx.tick()?,
                        Target::Requester => self.run_requester(false)?,
                    }
                    self.z_resume()?;
                }
                Step::Yield => self.z_resume()?,
                Step::EndAlive => {
                    self.z_event(ViewEvent::EndAlive);
                    return Ok(());
                }
            }
        }
        // Script exhausted: one last activation of the requester, which then
        // runs to completion.
        self.z_event(ViewEvent::Activated {
            target: Target::Requester,
        });
        self.run_requester(true)?;
        self.z_resume()?;
        self.z_event(ViewEvent::EndAlive);
        Ok(())
    }

    fn run_requester(&mut self, to_end: bool) -> Result<(), ExecError> {
        self.ctx.tick()?;
        if !self.ctx.real {
            return Ok(());
        }
        let Some(script) = &self.ctx.cfg.requester else {
            return Ok(());
        };
        while let Some(step) = script.steps.get(self.ctx.req_pc) {
            let i = self.ctx.req_pc;
            self.ctx.req_pc += 1;
            match step {
                Step::Yield if to_end => {}
                Step::Yield => break,
                Step::Start {
                    protocol,
                    payload,
                    handle,
                } => self.requester_start(i, protocol, payload, handle.as_deref())?,
                _ => {
                    return Err(ScriptError::BackChannel {
                        step: i,
                        what: "take this step",
                    }
                    .into())
                }
            }
        }
        Ok(())
    }

    fn violation(reason: impl Into<String>) -> ExecError {
        ExecError::ProtocolViolation {
            party: Role::Requester,
            reason: reason.into(),
        }
    }

    fn requester_start(
        &mut self,
        step: usize,
        protocol: &str,
        payload: &Payload,
        handle: Option<&str>,
    ) -> Result<(), ExecError> {
        let pair = self.pair_for(step, protocol)?;
        let rendered = self.render(Role::Requester, step, payload)?;
        match rendered {
            Rendered::Deletion { of, token } => {
                let target = &self.ctx.sessions[of];
                if protocol != pair.deletion || target.pair.as_ref() != Some(&pair) || target.protocol != pair.main {
                    return Err(Self::violation("deletion token sent on the wrong protocol"));
                }
                if target.deletion_issued {
                    return Err(Self::violation("session already deleted"));
                }
                let idx = self.ctx.open(Role::Requester, protocol, Some(pair));
                if let Some(h) = handle {
                    self.ctx.req_handles.insert(h.to_string(), idx);
                }
                self.ctx.sessions[of].deletion_issued = true;
                let msg = token.message();
                self.ctx.tokens.push(token);
                if let Some(m) = msg {
                    self.deliver(idx, m)?;
                }
            }
            Rendered::Bytes(bytes) => {
                if protocol != pair.main {
                    return Err(Self::violation("deletion protocol needs a deletion token"));
                }
                if let Err(e) = collectors::parse_request(&pair, protocol, &bytes) {
                    return Err(Self::violation(format!("malformed request: {e}")));
                }
                let idx = self.ctx.open(Role::Requester, protocol, Some(pair));
                if let Some(h) = handle {
                    self.ctx.req_handles.insert(h.to_string(), idx);
                }
                if self.deliver(idx, bytes)?.is_some() {
                    self.ctx.tick()?;
                }
            }
        }
        Ok(())
    }

    fn terminate(&mut self) -> Result<(), ExecError> {
        self.ctx.note(|| "terminate".into());
        // Every message is delivered synchronously, so no main-protocol
        // message is still in flight here.
        let open: Vec<usize> = (0..self.ctx.sessions.len())
            .filter(|&i| {
                let s = &self.ctx.sessions[i];
                s.id.initiator == Role::Requester
                    && s.pair.as_ref().is_some_and(|p| p.main == s.protocol)
                    && s.answered
                    && !s.deletion_issued
            })
            .collect();
        for i in open {
            let token = self.ctx.token_of(i)?;
            let pair = self.ctx.sessions[i].pair.clone().expect("filtered above");
            self.ctx.sessions[i].deletion_issued = true;
            let deletion = pair.deletion.clone();
            let idx = self.ctx.open(Role::Requester, &deletion, Some(pair));
            self.ctx.sessions[idx].pending = token.message();
            self.ctx.tokens.push(token);
        }
        for idx in 0..self.ctx.sessions.len() {
            if let Some(m) = self.ctx.sessions[idx].pending.take() {
                self.deliver(idx, m)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> ExecutionOutcome {
        let ctx = self.ctx;
        let mut w = CanonicalWriter::new(b"ENV1");
        let server = ctx.server.as_ref().map(CollectorState::serialize);
        w.opt_bytes(server.as_deref()).bytes(&ctx.env_tape);
        let env_sessions: Vec<&Session> = ctx
            .sessions
            .iter()
            .filter(|s| s.id.initiator == Role::Environment)
            .collect();
        w.u32(env_sessions.len() as u32);
        for s in env_sessions {
            w.opt_bytes(s.transcript.reply());
        }
        ExecutionOutcome {
            state_x: self.collector.serialize(),
            view_z: View {
                random_tape: ctx.env_tape.clone(),
                events: ctx.view,
            },
            state_z: w.finish(),
            deletion_tokens_issued: ctx.tokens,
            stats: ExecutionStats {
                activations: ctx.activations,
                collector_secret_draws: ctx.secret_draws,
                secret_draw_collision: ctx.draw_collision,
                sessions: ctx.sessions.len() as u64,
            },
            trace: ctx.trace,
        }
    }
}
