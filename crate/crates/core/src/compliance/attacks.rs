// SPDX-License-Identifier: Apache-2.0

//! Curated adversary scripts.
//!
//! Every HistInd-style script pairs the same requester (insert under
//! `alice`, yield, delete) with an environment that activates it twice.
//! Measured distances are per-script lower bounds on the compliance error,
//! not worst-case values.

use crate::collectors::CollectorSpec;
use crate::exec::{Bytes, InstName, Payload, Script, SecurityParam, Step, Target};

use super::{Experiment, RequesterProfile};

pub const VICTIM_KEY: &str = "alice";
pub const VICTIM_VALUE: &str = "victim-canary";

#[derive(Debug, Clone, PartialEq)]
pub struct Attack {
    pub name: &'static str,
    pub environment: Script,
    pub requester: Script,
    /// Whether any distance comes from equal secret draws or a lucky guess.
    /// The others should measure exactly zero against honest collectors.
    pub draw_driven: bool,
}

impl Attack {
    pub fn experiment(&self, lambda: SecurityParam, collector: &CollectorSpec) -> Experiment {
        Experiment::new(
            lambda,
            collector.clone(),
            self.environment.clone(),
            RequesterProfile::from_script(self.requester.clone(), collector),
        )
    }
}

fn insert(key: &str, value: &str) -> Payload {
    Payload::insert(Bytes::utf8(key), Bytes::utf8(value))
}

fn activate() -> Step {
    Step::Activate {
        target: Target::Requester,
    }
}

/// All-zero guess of an auth string.
fn guess(lambda: SecurityParam) -> Bytes {
    Bytes::Hex("00".repeat(lambda.get().div_ceil(8) as usize))
}

/// Insert, yield, then delete through the protocol's deletion channel.
pub fn victim(protocol: &str) -> Script {
    Script::new()
        .start(protocol, insert(VICTIM_KEY, VICTIM_VALUE), Some("y"))
        .then(Step::Yield)
        .start(&format!("{protocol}/del"), Payload::delete_token("y"), None)
}

/// The four HistInd scripts, for the main protocol `protocol`.
pub fn histind_suite(protocol: &str, lambda: SecurityParam) -> Vec<Attack> {
    let del = format!("{protocol}/del");
    let lookup = |key: &str, auth: Bytes| Payload::lookup(Bytes::utf8(key), auth);
    let y = victim(protocol);
    vec![
        Attack {
            name: "namespace-squatting",
            environment: Script::new()
                .start(protocol, insert(VICTIM_KEY, "squat"), Some("s"))
                .then(activate())
                .then(activate())
                .start(protocol, lookup(VICTIM_KEY, Bytes::reply("s")), None),
            requester: y.clone(),
            draw_driven: true,
        },
        Attack {
            name: "token-replay",
            environment: Script::new()
                .start(protocol, insert("bob", "z"), Some("b"))
                .then(activate())
                .start(
                    &del,
                    Payload::message(InstName::Delete, vec![Some(Bytes::utf8(VICTIM_KEY)), Some(guess(lambda))]),
                    None,
                )
                .then(activate())
                .start(
                    &del,
                    Payload::message(InstName::Delete, vec![Some(Bytes::utf8(VICTIM_KEY)), Some(guess(lambda))]),
                    None,
                ),
            requester: y.clone(),
            draw_driven: false,
        },
        Attack {
            name: "post-deletion-lookup",
            environment: Script::new()
                .start(protocol, insert("bob", "z"), Some("b"))
                .then(activate())
                .then(activate())
                .start(protocol, lookup(VICTIM_KEY, guess(lambda)), None)
                .start(protocol, lookup("bob", Bytes::reply("b")), None),
            requester: y.clone(),
            draw_driven: false,
        },
        Attack {
            name: "size-probing",
            environment: Script::new()
                .start(protocol, insert("bob", "z1"), Some("b1"))
                .start(protocol, insert("carol", "z2"), Some("b2"))
                .then(activate())
                .start(protocol, lookup("bob", Bytes::reply("b1")), None)
                .start(protocol, lookup("carol", Bytes::reply("b2")), None)
                .start(protocol, lookup(VICTIM_KEY, guess(lambda)), None)
                .then(activate()),
            requester: y,
            draw_driven: true,
        },
    ]
}

fn keyed_victim(protocol: &str, value: Bytes) -> Script {
    Script::new()
        .start(protocol, Payload::submit(value), Some("y"))
        .then(Step::Yield)
        .start(&format!("{protocol}/del"), Payload::delete_token("y"), None)
}

/// Summary probe: the requester contributes 1, the environment contributes
/// `zeros` zeros after it and then deletes the first `deleted` of them.
pub fn summary_probe(zeros: usize, deleted: usize) -> Attack {
    let mut env = Script::new().then(activate());
    for i in 0..zeros {
        env = env.start("diffp", Payload::submit(Bytes::Int(0)), Some(&format!("z{i}")));
    }
    for i in 0..deleted.min(zeros) {
        env = env.start("diffp/del", Payload::delete_token(&format!("z{i}")), None);
    }
    Attack {
        name: "summary-probe",
        environment: env,
        requester: keyed_victim("diffp", Bytes::Int(1)),
        draw_driven: true,
    }
}

/// Model probe: two environment rows, the requester's outlier, a third row,
/// then the environment removes its own rows.
pub fn model_probe() -> Attack {
    let rows = [("a", Bytes::row(&[1], 2)), ("b", Bytes::row(&[2], 3))];
    let mut env = Script::new();
    for (h, r) in &rows {
        env = env.start("ml", Payload::submit(r.clone()), Some(h));
    }
    env = env
        .then(activate())
        .start("ml", Payload::submit(Bytes::row(&[3], 1)), Some("c"));
    for h in ["a", "b", "c"] {
        env = env.start("ml/del", Payload::delete_token(h), None);
    }
    Attack {
        name: "model-probe",
        environment: env,
        requester: keyed_victim("ml", Bytes::row(&[5], -4)),
        draw_driven: true,
    }
}
