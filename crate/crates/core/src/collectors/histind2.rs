// SPDX-License-Identifier: Apache-2.0

use crate::codec::{decode_fields, decode_single, encode_fields, encode_message, Inst};
use crate::exec::ExecError;
use crate::hidict::{Dictionary, HiDict};

use super::{compound_key, parse_request, Host, Outcall, ProtocolPair, StepResult};

/// HistInd front end that keeps values in the environment's own HistInd
/// server. Locally it only stores `(key, auth) -> (exkey, exauth)`.
#[derive(Debug, Clone)]
pub struct HistInd2State {
    pair: ProtocolPair,
    pub dict: HiDict,
}

impl HistInd2State {
    pub fn new(pair: ProtocolPair) -> Self {
        HistInd2State {
            pair,
            dict: HiDict::new(),
        }
    }

    fn external(&self, key: &[u8], auth: &[u8]) -> Option<(Vec<u8>, Vec<u8>)> {
        let stored = self.dict.lookup(&compound_key(key, auth))?;
        let mut f = decode_fields(stored).ok()?;
        let exauth = f.pop()??;
        let exkey = f.pop()??;
        Some((exkey, exauth))
    }

    pub fn step(&mut self, protocol: &str, payload: &[u8], host: &mut dyn Host) -> Result<StepResult, ExecError> {
        let (inst, fields) = match parse_request(&self.pair, protocol, payload) {
            Ok(r) => r,
            Err(e) => return Ok(StepResult::Ignored(e)),
        };
        let key = fields[0].as_deref().unwrap_or_default();
        match inst {
            Inst::Insert => {
                let value = fields[2].as_deref().unwrap_or_default();
                let auth = host.random_bits();
                let exkey = host.random_bits();
                let req = encode_message(Inst::Insert, &[Some(&exkey), None, Some(value)]);
                let exauth = host
                    .outcall(Outcall::Main, req)?
                    .and_then(|r| decode_single(&r).ok().flatten())
                    .unwrap_or_default();
                let mapping = encode_fields(&[Some(&exkey), Some(&exauth)]);
                let _ = self.dict.insert(&compound_key(key, &auth), &mapping);
                Ok(StepResult::Reply(encode_fields(&[Some(&auth)])))
            }
            Inst::Lookup => {
                let auth = fields[1].as_deref().unwrap_or_default();
                let Some((exkey, exauth)) = self.external(key, auth) else {
                    return Ok(StepResult::Reply(encode_fields(&[None])));
                };
                let req = encode_message(Inst::Lookup, &[Some(&exkey), Some(&exauth), None]);
                let value = host
                    .outcall(Outcall::Main, req)?
                    .and_then(|r| decode_single(&r).ok().flatten());
                Ok(StepResult::Reply(encode_fields(&[value.as_deref()])))
            }
            Inst::Delete => {
                let auth = fields[1].as_deref().unwrap_or_default();
                if let Some((exkey, exauth)) = self.external(key, auth) {
                    let req = encode_message(Inst::Delete, &[Some(&exkey), Some(&exauth)]);
                    host.outcall(Outcall::Deletion, req)?;
                    self.dict.delete(&compound_key(key, auth));
                }
                Ok(StepResult::Done)
            }
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        self.dict.serialize_canonical()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectors::testing::TestHost;
    use crate::collectors::{CollectorSpec, Family};
    use crate::rng::SeededSource;

    fn setup() -> (HistInd2State, TestHost) {
        let mut h = TestHost::new(16, 5);
        h.server = Some(CollectorSpec::histind().instantiate(16, &mut SeededSource::new(0)));
        (HistInd2State::new(ProtocolPair::new("histind2", Family::HistInd)), h)
    }

    #[test]
    fn values_live_in_the_environment() {
        let (mut s, mut h) = setup();
        let ins = encode_message(Inst::Insert, &[Some(b"k"), None, Some(b"value")]);
        let StepResult::Reply(r) = s.step("histind2", &ins, &mut h).unwrap() else {
            panic!()
        };
        let auth = decode_single(&r).unwrap().unwrap();
        assert!(!s.serialize().windows(5).any(|w| w == b"value"));
        let server_bytes = h.server.as_ref().unwrap().serialize();
        assert!(server_bytes.windows(5).any(|w| w == b"value"));

        let look = encode_message(Inst::Lookup, &[Some(b"k"), Some(&auth), None]);
        let StepResult::Reply(r) = s.step("histind2", &look, &mut h).unwrap() else {
            panic!()
        };
        assert_eq!(decode_single(&r).unwrap(), Some(b"value".to_vec()));

        let del = encode_message(Inst::Delete, &[Some(b"k"), Some(&auth)]);
        s.step("histind2/del", &del, &mut h).unwrap();
        assert_eq!(s.serialize(), HiDict::new().serialize_canonical());
        assert_eq!(
            h.server.as_ref().unwrap().serialize(),
            HiDict::new().serialize_canonical()
        );
        let kinds: Vec<Outcall> = h.outcalls.iter().map(|o| o.0).collect();
        assert_eq!(kinds, vec![Outcall::Main, Outcall::Main, Outcall::Deletion]);
    }

    #[test]
    fn unknown_lookup_makes_no_outcall() {
        let (mut s, mut h) = setup();
        let look = encode_message(Inst::Lookup, &[Some(b"k"), Some(b"aa"), None]);
        let StepResult::Reply(r) = s.step("histind2", &look, &mut h).unwrap() else {
            panic!()
        };
        assert_eq!(decode_single(&r).unwrap(), None);
        assert!(h.outcalls.is_empty());
    }

    #[test]
    fn missing_environment_server_is_an_error() {
        let mut h = TestHost::new(16, 5);
        let mut s = HistInd2State::new(ProtocolPair::new("histind2", Family::HistInd));
        let ins = encode_message(Inst::Insert, &[Some(b"k"), None, Some(b"v")]);
        assert!(matches!(s.step("histind2", &ins, &mut h), Err(ExecError::OutcallUnavailable)));
    }
}
