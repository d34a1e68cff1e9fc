// SPDX-License-Identifier: Apache-2.0

use crate::exec::ExecError;

use super::{CollectorState, Host, ProtocolPair, StepResult};

/// Two collectors side by side; requests are routed by protocol identifier.
#[derive(Debug, Clone)]
pub struct CompositeState {
    pub left_protocols: Vec<ProtocolPair>,
    pub left: CollectorState,
    pub right: CollectorState,
}

impl CompositeState {
    pub fn step(&mut self, protocol: &str, payload: &[u8], host: &mut dyn Host) -> Result<StepResult, ExecError> {
        if self.left_protocols.iter().any(|p| p.owns(protocol)) {
            self.left.step(protocol, payload, host)
        } else {
            self.right.step(protocol, payload, host)
        }
    }

    /// Concatenation; each side's encoding is self-delimiting.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = self.left.serialize();
        out.extend(self.right.serialize());
        out
    }
}
