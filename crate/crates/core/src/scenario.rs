// SPDX-License-Identifier: Apache-2.0

//! Scenario files and the versioned report format.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::collectors::CollectorSpec;
use crate::compliance::{
    conditional_compliance, estimate_compliance, exact_compliance, ComplianceError, ComplianceReport, Experiment,
    Method, RequesterProfile, Verdict, MIN_SAMPLES,
};
use crate::exec::{script, EnvServerKind, Observation, Role, Script, SecurityParam};

pub const REPORT_SCHEMA: &str = "dclab-report/1";
pub const DEFAULT_SAMPLES: u64 = 20_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    /// Used for output file names; defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub lambda: SecurityParam,
    pub collector: CollectorSpec,
    #[serde(default)]
    pub environment: Script,
    #[serde(default)]
    pub requester: RequesterProfile,
    pub check: CheckSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional: Option<ConditionalSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Sample,
    Enumerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalSpec {
    pub w_kind: EnvServerKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("line {line}, column {column}: {message}")]
    Json { line: usize, column: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Compliance(#[from] ComplianceError),
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<ModeName>,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub result: ComplianceReport,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        match self.result.verdict {
            Verdict::Pass => 0,
            Verdict::Fail | Verdict::Inconclusive => 1,
        }
    }
}

/// Hex SHA-256 of the scenario file bytes.
pub fn scenario_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile = serde_json::from_str(text).map_err(|e| ScenarioError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        file.validate()?;
        Ok(file)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if let Err(e) = self.collector.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = script::validate(&self.environment, Role::Environment) {
            return bad(format!("environment: {e}"));
        }
        if let Err(e) = self.requester.validate(&self.collector) {
            return bad(e.to_string());
        }
        if let Some(c) = &self.conditional {
            if !self.collector.needs_outcalls() {
                return bad(format!("conditional check with w_kind {:?} needs a collector that outcalls", c.w_kind));
            }
        }
        self.check_settings(self.check.mode, self.check.seed, self.check.margin)
    }

    fn check_settings(&self, mode: ModeName, seed: Option<u64>, margin: Option<f64>) -> Result<(), ScenarioError> {
        if mode == ModeName::Sample {
            if seed.is_none() {
                return Err(ScenarioError::Invalid("seed is required in sample mode".into()));
            }
            if self.check.n_samples.is_some_and(|n| n < MIN_SAMPLES) {
                return Err(ScenarioError::Invalid(format!("n_samples must be at least {MIN_SAMPLES}")));
            }
        }
        if margin.is_some_and(|m| !(m.is_finite() && m >= 0.0)) {
            return Err(ScenarioError::Invalid("margin must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn experiment(&self, margin: Option<f64>) -> Experiment {
        let mut exp = Experiment::new(
            self.lambda,
            self.collector.clone(),
            self.environment.clone(),
            self.requester.clone(),
        );
        if let Some(c) = self.conditional {
            exp.env_server = Some(c.w_kind);
            exp.observation = Observation::StateAndEnvState;
        }
        if let Some(m) = margin.or(self.check.margin) {
            exp.margin = m;
        }
        exp
    }

    pub fn display_name(&self, fallback: &str) -> String {
        self.name.clone().unwrap_or_else(|| fallback.to_string())
    }

    /// Runs the configured check.
    pub fn check(&self, name: &str, hash: &str, ov: &Overrides) -> Result<Report, CheckError> {
        let mode = ov.mode.unwrap_or(self.check.mode);
        let seed = ov.seed.or(self.check.seed);
        let margin = ov.margin.or(self.check.margin);
        self.check_settings(mode, seed, margin)?;
        let exp = self.experiment(margin);
        let method = match mode {
            ModeName::Sample => Method::Sample {
                n: self.check.n_samples.unwrap_or(DEFAULT_SAMPLES),
                seed: seed.expect("checked above"),
            },
            ModeName::Enumerate => Method::Enumerate,
        };
        let result = match (self.conditional.is_some(), method) {
            (true, m) => conditional_compliance(&exp, m)?,
            (false, Method::Sample { n, seed }) => estimate_compliance(&exp, n, seed)?,
            (false, Method::Enumerate) => exact_compliance(&exp)?,
        };
        Ok(Report {
            schema: REPORT_SCHEMA.into(),
            scenario: name.to_string(),
            scenario_hash: hash.to_string(),
            seed: match mode {
                ModeName::Sample => seed,
                ModeName::Enumerate => None,
            },
            result,
        })
    }
}
