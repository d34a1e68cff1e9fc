// SPDX-License-Identifier: Apache-2.0

//! Exhaustive enumeration of an execution's random choices.
//!
//! Paths are visited depth first by replaying the execution from scratch with
//! a growing forced prefix. Each replay is deterministic given its choices,
//! so every leaf is visited exactly once and carries its exact probability.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use num::{One, Zero};

use crate::par;
use crate::rng::{ChoiceTape, Prob};

use super::{engine, ExecError, ExecutionConfig, ExecutionOutcome, World};

/// Maximum number of leaves, and maximum estimated path count.
pub const ENUMERATION_LIMIT: u64 = 1 << 24;
pub const MAX_ENUMERATION_LAMBDA: u32 = 30;

fn run(cfg: &ExecutionConfig, world: World, forced: Vec<u64>) -> Result<(ChoiceTape, ExecutionOutcome), ExecError> {
    let mut tape = ChoiceTape::new(forced);
    let out = engine::run_with_source(cfg, world, &mut tape)?;
    Ok((tape, out))
}

/// Folds `f` over every execution path whose first draws are `prefix`.
///
/// Probabilities passed to `f` are joint probabilities including the prefix
/// choices. Subtrees below the first free choice are folded in parallel and
/// combined with `merge`.
pub fn enumerate_fold<A, I, F, M>(
    cfg: &ExecutionConfig,
    world: World,
    prefix: &[u64],
    init: I,
    fold: F,
    merge: M,
) -> Result<A, ExecError>
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, Prob, ExecutionOutcome) + Sync + Send,
    M: Fn(A, A) -> A + Sync + Send,
{
    if cfg.lambda.get() > MAX_ENUMERATION_LAMBDA {
        return Err(ExecError::EnumerationTooLarge {
            space: 1u128 << cfg.lambda.get().min(127),
        });
    }
    let (probe, _) = run(cfg, world, prefix.to_vec())?;
    let record = probe.record();
    let mut space: u128 = 1;
    for c in &record[prefix.len().min(record.len())..] {
        space = space.saturating_mul(c.range as u128);
    }
    if space > ENUMERATION_LIMIT as u128 {
        return Err(ExecError::EnumerationTooLarge { space });
    }
    if record.len() <= prefix.len() {
        let (tape, out) = run(cfg, world, prefix.to_vec())?;
        let mut acc = init();
        fold(&mut acc, tape.probability(), out);
        return Ok(acc);
    }

    let branches = record[prefix.len()].range;
    let leaves = AtomicU64::new(0);
    let subtree = |first: u64| -> Result<A, ExecError> {
        let mut forced = prefix.to_vec();
        forced.push(first);
        let frozen = forced.len();
        let mut acc = init();
        loop {
            let (tape, out) = run(cfg, world, forced)?;
            if leaves.fetch_add(1, Ordering::Relaxed) >= ENUMERATION_LIMIT {
                return Err(ExecError::EnumerationTooLarge {
                    space: ENUMERATION_LIMIT as u128 + 1,
                });
            }
            let next = tape.successor(frozen);
            fold(&mut acc, tape.probability(), out);
            match next {
                Some(p) => forced = p,
                None => return Ok(acc),
            }
        }
    };
    par::try_map_reduce(0..branches, subtree, &init, &merge)
}

/// Every distinct outcome with its total probability, in a stable order.
pub fn enumerate_executions(cfg: &ExecutionConfig, world: World) -> Result<Vec<(Prob, ExecutionOutcome)>, ExecError> {
    type Acc = HashMap<Vec<u8>, (Prob, ExecutionOutcome)>;
    let map = enumerate_fold(
        cfg,
        world,
        &[],
        Acc::new,
        |acc: &mut Acc, p, out| {
            let mut key = out.observed(super::Observation::StateAndView);
            key.extend(out.state_z.iter());
            match acc.get_mut(&key) {
                Some(slot) => slot.0 += p,
                None => {
                    let mut normalized = out;
                    normalized.trace = None;
                    acc.insert(key, (p, normalized));
                }
            }
        },
        |mut a, b| {
            for (k, (p, o)) in b {
                match a.get_mut(&k) {
                    Some(slot) => slot.0 += p,
                    None => {
                        a.insert(k, (p, o));
                    }
                }
            }
            a
        },
    )?;
    let mut v: Vec<(Vec<u8>, (Prob, ExecutionOutcome))> = map.into_iter().collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    let out: Vec<(Prob, ExecutionOutcome)> = v.into_iter().map(|(_, x)| x).collect();
    debug_assert!(out.iter().map(|x| &x.0).fold(Prob::zero(), |a, b| a + b) == Prob::one());
    Ok(out)
}
