//! Verification document written as `report.json` in every run directory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Error,
}

impl Status {
    pub fn exit_code(self) -> u8 {
        match self {
            Status::Pass => 0,
            Status::Fail => 1,
            Status::Error => 2,
        }
    }
}

/// One pass/fail check with its measured value and the limit it was held to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: Value,
    pub limit: Value,
}

impl Check {
    pub fn new(name: &str, pass: bool, value: impl Serialize, limit: impl Serialize) -> Self {
        Self { name: name.into(), pass, value: to_value(value), limit: to_value(limit) }
    }

    /// `value <= limit`; NaN fails.
    pub fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self::new(name, value <= limit, value, format!("<= {limit:e}"))
    }

    pub fn holds(name: &str, pass: bool) -> Self {
        Self::new(name, pass, pass, true)
    }
}

pub fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

/// What a pipeline produced before it is wrapped into a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Body {
    pub checks: Vec<Check>,
    pub results: BTreeMap<String, Value>,
    pub hashes: BTreeMap<String, String>,
    pub artifacts: Vec<String>,
}

impl Body {
    pub fn result(&mut self, key: &str, v: impl Serialize) {
        self.results.insert(key.into(), to_value(v));
    }

    pub fn check(&mut self, c: Check) {
        self.checks.push(c);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub status: Status,
    pub error: Option<String>,
    pub hashes: BTreeMap<String, String>,
    pub checks: Vec<Check>,
    pub results: BTreeMap<String, Value>,
    pub artifacts: Vec<String>,
}

impl Report {
    pub fn new(config: &RunConfig, outcome: Result<Body, String>) -> Self {
        let (status, error, body) = match outcome {
            Ok(body) => {
                let status = if body.checks.iter().all(|c| c.pass) { Status::Pass } else { Status::Fail };
                (status, None, body)
            }
            Err(e) => (Status::Error, Some(e), Body::default()),
        };
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            config_hash: config.hash(),
            status,
            error,
            hashes: body.hashes,
            checks: body.checks,
            results: body.results,
            artifacts: body.artifacts,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        text
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mode;

    #[test]
    fn status_follows_the_checks() {
        let cfg = RunConfig::with_mode(Mode::Layer);
        let mut body = Body::default();
        body.check(Check::at_most("small", 1e-12, 1e-10));
        assert_eq!(Report::new(&cfg, Ok(body.clone())).status, Status::Pass);
        body.check(Check::at_most("nan", f64::NAN, 1.0));
        assert_eq!(Report::new(&cfg, Ok(body)).status, Status::Fail);
        let err = Report::new(&cfg, Err("bad".into()));
        assert_eq!((err.status, err.status.exit_code()), (Status::Error, 2));
    }
}
