// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use num::{Signed, Zero};

use crate::rng::Prob;

use super::{half_l1, mass_is_one, ComplianceError};

/// Joint distribution of a pair `(X, Y)`.
pub type Joint<X, Y> = BTreeMap<(X, Y), Prob>;

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRuleCheck {
    /// `TV((X, Y), (X', Y'))`.
    pub joint_tv: Prob,
    /// `TV(X, X')`.
    pub marginal_tv: Prob,
    /// `E_{x←X}[TV(Y_x, Y'_x)]`.
    pub expected_conditional_tv: Prob,
    pub holds: bool,
}

fn marginal<X: Ord + Clone, Y>(j: &Joint<X, Y>) -> BTreeMap<X, Prob> {
    let mut m = BTreeMap::new();
    for ((x, _), p) in j {
        *m.entry(x.clone()).or_insert_with(Prob::zero) += p;
    }
    m
}

fn conditional<X: Ord, Y: Ord + Clone>(j: &Joint<X, Y>, x: &X, px: &Prob) -> BTreeMap<Y, Prob> {
    j.iter()
        .filter(|((a, _), _)| a == x)
        .map(|((_, y), p)| (y.clone(), p / px))
        .collect()
}

/// Checks `TV((X,Y),(X',Y')) ≤ TV(X,X') + E_{x←X}[TV(Y_x, Y'_x)]` exactly.
///
/// Where `x` has no mass under `q`, `Y'_x` is taken to equal `Y_x`; the
/// inequality holds for any choice there.
pub fn sd_chain_rule_check<X, Y>(p: &Joint<X, Y>, q: &Joint<X, Y>) -> Result<ChainRuleCheck, ComplianceError>
where
    X: Ord + Clone + std::hash::Hash,
    Y: Ord + Clone + std::hash::Hash,
{
    for d in [p, q] {
        if d.len() > 100 {
            return Err(ComplianceError::SupportTooLarge(d.len()));
        }
        if d.values().any(|v| v.is_negative()) {
            return Err(ComplianceError::NotNormalized("negative mass".into()));
        }
        let total: Prob = d.values().sum();
        if !mass_is_one(&total) {
            return Err(ComplianceError::NotNormalized(total.to_string()));
        }
    }
    let joint_tv = half_l1(p.iter(), q.iter());
    let (mp, mq) = (marginal(p), marginal(q));
    let marginal_tv = half_l1(mp.iter(), mq.iter());
    let mut expected = Prob::zero();
    for (x, px) in &mp {
        if px.is_zero() {
            continue;
        }
        let cp = conditional(p, x, px);
        let cq = match mq.get(x) {
            Some(qx) if !qx.is_zero() => conditional(q, x, qx),
            _ => cp.clone(),
        };
        expected += px * half_l1(cp.iter(), cq.iter());
    }
    let holds = joint_tv <= &marginal_tv + &expected;
    Ok(ChainRuleCheck {
        joint_tv,
        marginal_tv,
        expected_conditional_tv: expected,
        holds,
    })
}
