// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use num::{One, Zero};
use sha2::{Digest, Sha256};

use crate::collectors::CollectorSpec;
use crate::exec::{
    enumerate_fold, run_with_source, ExecError, ExecutionOutcome, Observation, Script, SecurityParam, World,
};
use crate::par::{self, Backend};
use crate::rng::{Prob, SeededSource};

use super::{half_l1, prob_from_counts, CheckMode, ComplianceError, ComplianceReport, Experiment, RequesterProfile};
use super::MIN_SAMPLES;

type Bucket = [u8; 32];

fn bucket(out: &ExecutionOutcome, obs: Observation) -> Bucket {
    Sha256::digest(out.observed(obs)).into()
}

/// Seed of the `i`-th paired sample.
pub fn sample_seed(seed: u64, i: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dclab/sample/v1");
    h.update(seed.to_be_bytes());
    h.update(i.to_be_bytes());
    let d = h.finalize();
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Default)]
struct Counts {
    buckets: HashMap<Bucket, (u64, u64)>,
    q: u64,
}

impl Counts {
    fn merge(mut self, other: Counts) -> Counts {
        if self.buckets.len() < other.buckets.len() {
            return other.merge(self);
        }
        for (k, (a, b)) in other.buckets {
            let slot = self.buckets.entry(k).or_default();
            slot.0 += a;
            slot.1 += b;
        }
        self.q = self.q.max(other.q);
        self
    }
}

const CHUNK: u64 = 256;

/// Plug-in estimate from `n` paired real/ideal runs.
pub fn estimate_compliance(exp: &Experiment, n: u64, seed: u64) -> Result<ComplianceReport, ComplianceError> {
    estimate_compliance_with(exp, n, seed, Backend::default())
}

pub fn estimate_compliance_with(
    exp: &Experiment,
    n: u64,
    seed: u64,
    backend: Backend,
) -> Result<ComplianceReport, ComplianceError> {
    exp.validate()?;
    if n < MIN_SAMPLES {
        return Err(ComplianceError::TooFewSamples(n));
    }
    let chunk = |c: u64| -> Result<Counts, ExecError> {
        let mut acc = Counts::default();
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let s = sample_seed(seed, i);
            let cfg = exp.config(s);
            let real = run_with_source(&cfg, World::Real, &mut SeededSource::new(s))?;
            let ideal = run_with_source(&cfg, World::Ideal, &mut SeededSource::new(s))?;
            acc.q = acc
                .q
                .max(real.stats.collector_secret_draws)
                .max(ideal.stats.collector_secret_draws);
            acc.buckets.entry(bucket(&real, exp.observation)).or_default().0 += 1;
            acc.buckets.entry(bucket(&ideal, exp.observation)).or_default().1 += 1;
        }
        Ok(acc)
    };
    let counts = par::try_map_reduce_with(backend, 0..n.div_ceil(CHUNK), chunk, &Counts::default, &Counts::merge)?;
    let diff: u64 = counts.buckets.values().map(|&(a, b)| a.abs_diff(b)).sum();
    let tv = prob_from_counts(diff, 2 * n);
    Ok(ComplianceReport::build(
        CheckMode::Sampling,
        tv,
        n,
        counts.buckets.len(),
        counts.q,
        exp,
    ))
}

#[derive(Default)]
struct Masses {
    buckets: HashMap<Bucket, Prob>,
    q: u64,
    leaves: u64,
}

impl Masses {
    fn merge(mut self, other: Masses) -> Masses {
        if self.buckets.len() < other.buckets.len() {
            return other.merge(self);
        }
        for (k, p) in other.buckets {
            *self.buckets.entry(k).or_insert_with(Prob::zero) += p;
        }
        self.q = self.q.max(other.q);
        self.leaves += other.leaves;
        self
    }

    fn normalized(mut self) -> Masses {
        let total: Prob = self.buckets.values().sum();
        if !total.is_zero() && !total.is_one() {
            for v in self.buckets.values_mut() {
                *v /= &total;
            }
        }
        self
    }
}

fn enumerate_world(exp: &Experiment, world: World, prefix: &[u64]) -> Result<Masses, ExecError> {
    Ok(enumerate_split(exp, world, prefix, false)?.0.normalized())
}

/// Mass of the paths without secret-draw collisions (or all paths when
/// `split` is false), and the mass of the colliding ones.
fn enumerate_split(exp: &Experiment, world: World, prefix: &[u64], split: bool) -> Result<(Masses, Prob), ExecError> {
    let cfg = exp.config(0);
    let obs = exp.observation;
    enumerate_fold(
        &cfg,
        world,
        prefix,
        || (Masses::default(), Prob::zero()),
        |acc: &mut (Masses, Prob), p, out| {
            if split && out.stats.secret_draw_collision {
                acc.1 += p;
                return;
            }
            let m = &mut acc.0;
            m.q = m.q.max(out.stats.collector_secret_draws);
            m.leaves += 1;
            *m.buckets.entry(bucket(&out, obs)).or_insert_with(Prob::zero) += p;
        },
        |a, b| (a.0.merge(b.0), a.1 + b.1),
    )
}

/// Exact distance over every execution path of both worlds.
pub fn exact_compliance(exp: &Experiment) -> Result<ComplianceReport, ComplianceError> {
    exact_compliance_given(exp, &[])
}

/// Exact distance conditioned on the first draws of each world being `prefix`.
pub fn exact_compliance_given(exp: &Experiment, prefix: &[u64]) -> Result<ComplianceReport, ComplianceError> {
    exp.validate()?;
    let real = enumerate_world(exp, World::Real, prefix)?;
    let ideal = enumerate_world(exp, World::Ideal, prefix)?;
    let tv = half_l1(real.buckets.iter(), ideal.buckets.iter());
    let support = real
        .buckets
        .keys()
        .chain(ideal.buckets.keys())
        .collect::<std::collections::HashSet<_>>()
        .len();
    let mut report = ComplianceReport::build(
        CheckMode::Enumeration,
        tv,
        real.leaves + ideal.leaves,
        support,
        real.q.max(ideal.q),
        exp,
    );
    if !prefix.is_empty() {
        report.notes.push(format!("conditioned on first draws {prefix:?}"));
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollisionSplit {
    /// Distance between the worlds, each conditioned on no two collector
    /// secret draws being equal.
    pub tv_without_collisions: Prob,
    /// Probability of a collision in each world, within the conditioned branch.
    pub collision_real: Prob,
    pub collision_ideal: Prob,
}

/// Separates the collision slack from the rest of the distance, on the
/// branch whose first draws are `prefix`.
pub fn exact_collision_split(exp: &Experiment, prefix: &[u64]) -> Result<CollisionSplit, ComplianceError> {
    exp.validate()?;
    let mut parts = Vec::with_capacity(2);
    for world in [World::Real, World::Ideal] {
        let (clean, collided) = enumerate_split(exp, world, prefix, true)?;
        let clean_mass: Prob = clean.buckets.values().sum();
        let total = &clean_mass + &collided;
        let collided = if total.is_zero() { Prob::zero() } else { collided / total };
        parts.push((clean.normalized(), collided));
    }
    let (ideal, collision_ideal) = parts.pop().expect("two worlds");
    let (real, collision_real) = parts.pop().expect("two worlds");
    Ok(CollisionSplit {
        tv_without_collisions: half_l1(real.buckets.iter(), ideal.buckets.iter()),
        collision_real,
        collision_ideal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sample { n: u64, seed: u64 },
    Enumerate,
}

/// Compares `(state_x, state_z)` with the environment embedding a server for
/// the collector's outcalls.
pub fn conditional_compliance(exp: &Experiment, method: Method) -> Result<ComplianceReport, ComplianceError> {
    if !exp.collector.needs_outcalls() || exp.env_server.is_none() {
        return Err(ExecError::InvalidConfig("conditional check needs a collector with outcalls and an embedded server".into()).into());
    }
    let mut e = exp.clone();
    e.observation = Observation::StateAndEnvState;
    match method {
        Method::Sample { n, seed } => estimate_compliance(&e, n, seed),
        Method::Enumerate => exact_compliance(&e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionReport {
    pub k: usize,
    pub e1_each: Vec<Prob>,
    pub e1: Prob,
    pub ek: Prob,
    pub margin: f64,
    pub holds: bool,
}

/// Measures each 1-representative oblivious requester alone and all of them
/// merged into one requester, and checks `e_k ≤ k·e_1 + margin`.
pub fn composition_check(
    lambda: SecurityParam,
    collector: &CollectorSpec,
    env: &Script,
    requesters: &[Script],
    margin: f64,
) -> Result<CompositionReport, ComplianceError> {
    let mut e1_each = Vec::with_capacity(requesters.len());
    let mut merged = Script::new();
    for (i, r) in requesters.iter().enumerate() {
        let profile = RequesterProfile::from_script(r.clone(), collector);
        if !profile.oblivious || profile.k_bound.unwrap_or(0) > 1 {
            return Err(ComplianceError::Profile(format!(
                "requester {i} is not a 1-representative oblivious requester"
            )));
        }
        let exp = Experiment::new(lambda, collector.clone(), env.clone(), profile);
        e1_each.push(exact_compliance(&exp)?.tv);
        merged.steps.extend(r.with_handle_prefix(&format!("r{i}.")).steps);
    }
    let exp = Experiment::new(
        lambda,
        collector.clone(),
        env.clone(),
        RequesterProfile::from_script(merged, collector),
    );
    let ek = exact_compliance(&exp)?.tv;
    let e1 = e1_each.iter().max().cloned().unwrap_or_else(Prob::zero);
    let k = requesters.len();
    let slack = Prob::from_float(margin).unwrap_or_else(Prob::zero);
    let holds = ek <= Prob::from_integer((k as i64).into()) * &e1 + slack;
    Ok(CompositionReport {
        k,
        e1_each,
        e1,
        ek,
        margin,
        holds,
    })
}
