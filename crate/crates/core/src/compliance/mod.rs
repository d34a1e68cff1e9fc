// SPDX-License-Identifier: Apache-2.0

//! Compliance measurement: total-variation distance between the real and
//! ideal outcome distributions, by sampling or by exact enumeration, checked
//! against the bound each collector is expected to meet.

pub mod attacks;
mod chain;
mod measure;

use std::collections::{BTreeMap, HashMap};

use num::{BigInt, FromPrimitive, One, Signed, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collectors::{CollectorSpec, HistIndFlaw};
use crate::exec::{
    script, EnvServerKind, ExecError, ExecutionConfig, Observation, Role, Script, SecurityParam, Step,
    DEFAULT_MAX_ACTIVATIONS,
};
use crate::rng::Prob;

pub use chain::{sd_chain_rule_check, ChainRuleCheck, Joint};
pub use measure::{
    composition_check, conditional_compliance, exact_collision_split, estimate_compliance, estimate_compliance_with, exact_compliance,
    exact_compliance_given, sample_seed, CollisionSplit, CompositionReport, Method,
};

pub const DEFAULT_MARGIN: f64 = 0.02;
pub const MIN_SAMPLES: u64 = 1000;
/// Confidence parameter of the sampling half-width.
pub const CI_DELTA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ComplianceError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("distribution mass {0} is not 1")]
    NotNormalized(String),
    #[error("at least {MIN_SAMPLES} samples are required, got {0}")]
    TooFewSamples(u64),
    #[error("requester profile: {0}")]
    Profile(String),
    #[error("support of {0} points exceeds 100")]
    SupportTooLarge(usize),
}

/// Distribution over byte strings.
pub type Distribution = BTreeMap<Vec<u8>, Prob>;

fn mass_is_one(total: &Prob) -> bool {
    let tol = Prob::new(BigInt::one(), BigInt::from(1_000_000_000u64));
    (total - Prob::one()).abs() <= tol
}

/// `½ Σ |p − q|`.
pub fn tv_distance(p: &Distribution, q: &Distribution) -> Result<Prob, ComplianceError> {
    for d in [p, q] {
        let total: Prob = d.values().sum();
        if !mass_is_one(&total) {
            return Err(ComplianceError::NotNormalized(total.to_string()));
        }
    }
    Ok(half_l1(p.iter(), q.iter()))
}

pub(crate) fn half_l1<'a, K: Ord + std::hash::Hash + 'a>(
    p: impl Iterator<Item = (&'a K, &'a Prob)>,
    q: impl Iterator<Item = (&'a K, &'a Prob)>,
) -> Prob {
    let mut diff: HashMap<&K, Prob> = HashMap::new();
    for (k, v) in p {
        *diff.entry(k).or_insert_with(Prob::zero) += v;
    }
    for (k, v) in q {
        *diff.entry(k).or_insert_with(Prob::zero) -= v;
    }
    let total: Prob = diff.values().map(|v| v.abs()).sum();
    total / Prob::from_integer(BigInt::from(2))
}

/// What the requester does and which structural promises it makes.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequesterProfile {
    /// `None` is the silent requester.
    #[serde(default)]
    pub script: Option<Script>,
    /// Maximum number of main-protocol sessions; `None` is unbounded.
    #[serde(default)]
    pub k_bound: Option<u32>,
    #[serde(default)]
    pub oblivious: bool,
}

impl RequesterProfile {
    pub fn silent() -> Self {
        RequesterProfile::default()
    }

    /// Profile with the promises the script actually satisfies.
    pub fn from_script(script: Script, collector: &CollectorSpec) -> Self {
        let k = main_sessions(&script, collector);
        let oblivious = script.is_oblivious();
        RequesterProfile {
            script: Some(script),
            k_bound: Some(k),
            oblivious,
        }
    }

    pub fn validate(&self, collector: &CollectorSpec) -> Result<(), ComplianceError> {
        let Some(s) = &self.script else { return Ok(()) };
        script::validate(s, Role::Requester).map_err(ExecError::from)?;
        if self.oblivious && !s.is_oblivious() {
            return Err(ComplianceError::Profile(
                "oblivious requester splices server replies".into(),
            ));
        }
        if let Some(k) = self.k_bound {
            let n = main_sessions(s, collector);
            if n > k {
                return Err(ComplianceError::Profile(format!("{n} sessions exceed k_bound {k}")));
            }
        }
        Ok(())
    }
}

fn main_sessions(s: &Script, collector: &CollectorSpec) -> u32 {
    s.steps
        .iter()
        .filter(|st| match st {
            Step::Start { protocol, .. } => collector.protocol(protocol).is_some_and(|p| p.main == *protocol),
            _ => false,
        })
        .count() as u32
}

/// One compliance question: a collector, an environment, a requester.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub lambda: SecurityParam,
    pub collector: CollectorSpec,
    pub env: Script,
    pub requester: RequesterProfile,
    /// Embedded server for collector outcalls.
    pub env_server: Option<EnvServerKind>,
    pub observation: Observation,
    pub margin: f64,
    pub max_activations: u64,
}

impl Experiment {
    pub fn new(lambda: SecurityParam, collector: CollectorSpec, env: Script, requester: RequesterProfile) -> Self {
        let env_server = collector.needs_outcalls().then_some(EnvServerKind::Histind);
        Experiment {
            lambda,
            collector,
            env,
            requester,
            env_server,
            observation: Observation::StateAndView,
            margin: DEFAULT_MARGIN,
            max_activations: DEFAULT_MAX_ACTIVATIONS,
        }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }

    pub fn config(&self, seed: u64) -> ExecutionConfig {
        let mut c = ExecutionConfig::new(self.lambda, self.collector.clone(), self.env.clone());
        c.requester = self.requester.script.clone();
        c.env_server = self.env_server;
        c.aux_protocols_enabled = self.env_server.is_some();
        c.master_seed = seed;
        c.max_activations = self.max_activations;
        c
    }

    pub fn validate(&self) -> Result<(), ComplianceError> {
        self.requester.validate(&self.collector)?;
        self.config(0).validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub name: String,
    pub value: f64,
}

/// Expected error bound for `collector` at `lambda`, where `q` is the largest
/// number of λ-bit strings the collector drew in any observed run.
pub fn theorem_bound(collector: &CollectorSpec, lambda: u32, q: u64) -> Bound {
    let collision = || (q as f64).powi(2) * 2f64.powi(-(lambda as i32));
    match collector {
        CollectorSpec::HistInd { .. } | CollectorSpec::HistInd2 { .. } => Bound {
            name: "q^2 * 2^-lambda".into(),
            value: collision(),
        },
        CollectorSpec::DiffP { params, .. } => Bound {
            name: "epsilon + 1/lambda".into(),
            value: params.epsilon + 1.0 / lambda as f64,
        },
        CollectorSpec::Ml { .. } => Bound {
            name: "1/lambda".into(),
            value: 1.0 / lambda as f64,
        },
        CollectorSpec::Composite { left, right } => {
            let (l, r) = (theorem_bound(left, lambda, q), theorem_bound(right, lambda, q));
            Bound {
                name: format!("({}) + ({})", l.name, r.name),
                value: l.value + r.value,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckMode {
    Sampling,
    Enumeration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// Pass needs the whole interval under the bound; a point estimate above it
/// is a Fail. Anything between is Inconclusive.
pub fn verdict(tv: f64, ci: f64, bound: f64, margin: f64) -> Verdict {
    let limit = bound + margin;
    if tv + ci <= limit {
        Verdict::Pass
    } else if tv > limit {
        Verdict::Fail
    } else {
        Verdict::Inconclusive
    }
}

/// `min(1, sqrt(ln(2/δ) · support / (2n)))`.
pub fn ci_halfwidth(support: usize, n: u64) -> f64 {
    ((2.0 / CI_DELTA).ln() * support as f64 / (2.0 * n as f64)).sqrt().min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub mode: CheckMode,
    /// Exact value of the measured distance.
    #[serde(with = "prob_string")]
    pub tv: Prob,
    pub tv_estimate: f64,
    pub ci_halfwidth: f64,
    pub n_samples: u64,
    pub support: usize,
    pub secret_draws: u64,
    pub bound: Bound,
    pub margin: f64,
    pub verdict: Verdict,
    pub notes: Vec<String>,
}

impl ComplianceReport {
    pub(crate) fn build(
        mode: CheckMode,
        tv: Prob,
        n_samples: u64,
        support: usize,
        secret_draws: u64,
        exp: &Experiment,
    ) -> Self {
        let tv_estimate = tv.to_f64().unwrap_or(1.0);
        let ci = match mode {
            CheckMode::Enumeration => 0.0,
            CheckMode::Sampling => ci_halfwidth(support, n_samples),
        };
        let bound = theorem_bound(&exp.collector, exp.lambda.get(), secret_draws);
        let v = verdict(tv_estimate, ci, bound.value, exp.margin);
        let mut notes = vec![match v {
            Verdict::Pass => "bound holds on this script".to_string(),
            Verdict::Fail => format!("error >= {tv_estimate:.6} for this script"),
            Verdict::Inconclusive => "estimate is under the bound but the interval reaches past it".to_string(),
        }];
        if let Some(k) = exp.env_server {
            if matches!(k.spec(), CollectorSpec::HistInd { flaw, .. } if flaw != HistIndFlaw::None) {
                notes.push("environment not auxiliary-compliant".into());
            }
        }
        ComplianceReport {
            mode,
            tv,
            tv_estimate,
            ci_halfwidth: ci,
            n_samples,
            support,
            secret_draws,
            bound,
            margin: exp.margin,
            verdict: v,
            notes,
        }
    }
}

pub(crate) fn prob_from_counts(diff: u64, denom: u64) -> Prob {
    Prob::new(
        BigInt::from_u64(diff).expect("u64"),
        BigInt::from_u64(denom.max(1)).expect("u64"),
    )
}

mod prob_string {
    use super::Prob;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Prob, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&p.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Prob, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| D::Error::custom(format!("bad rational {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(items: &[(&str, (i64, i64))]) -> Distribution {
        items
            .iter()
            .map(|(k, (n, d))| (k.as_bytes().to_vec(), Prob::new((*n).into(), (*d).into())))
            .collect()
    }

    #[test]
    fn tv_examples() {
        let p = dist(&[("a", (1, 2)), ("b", (1, 2))]);
        let q = dist(&[("a", (1, 1))]);
        let r = dist(&[("c", (1, 1))]);
        assert_eq!(tv_distance(&p, &p).unwrap(), Prob::zero());
        assert_eq!(tv_distance(&q, &r).unwrap(), Prob::one());
        assert_eq!(tv_distance(&p, &q).unwrap(), Prob::new(1.into(), 2.into()));
    }

    #[test]
    fn tv_rejects_unnormalized() {
        let p = dist(&[("a", (1, 2))]);
        assert!(matches!(tv_distance(&p, &p), Err(ComplianceError::NotNormalized(_))));
    }

    #[test]
    fn verdict_rules() {
        assert_eq!(verdict(0.0, 0.0, 0.1, 0.02), Verdict::Pass);
        assert_eq!(verdict(0.5, 0.0, 0.1, 0.02), Verdict::Fail);
        assert_eq!(verdict(0.1, 0.05, 0.1, 0.02), Verdict::Inconclusive);
        assert_eq!(verdict(1.0, 1.0, 0.1, 0.02), Verdict::Fail);
    }

    #[test]
    fn ci_is_capped() {
        assert_eq!(ci_halfwidth(1_000_000, 1000), 1.0);
        let c = ci_halfwidth(4, 20_000);
        assert!((c - ((200f64).ln() * 4.0 / 40_000.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn bounds() {
        let dp = crate::dp::DpParams::new(0.5, 1).unwrap();
        assert!((theorem_bound(&CollectorSpec::diffp(dp), 3, 0).value - 0.833_333_333_333).abs() < 1e-9);
        assert_eq!(theorem_bound(&CollectorSpec::histind(), 2, 2).value, 1.0);
        let c = CollectorSpec::Composite {
            left: Box::new(CollectorSpec::ml(1)),
            right: Box::new(CollectorSpec::ml(1).in_namespace("ml2")),
        };
        assert!((theorem_bound(&c, 4, 0).value - 0.5).abs() < 1e-12);
    }
}
