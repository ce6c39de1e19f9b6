//! Subprocess adapter protocol.
//!
//! The harness launches a shim once per role:
//!
//! ```text
//! <command> --role {pub|sub} --endpoint E --transport T --count C \
//!           --size P --interval-us T --delay-ms D
//! ```
//!
//! The shim performs the publisher or subscriber loop using the payload
//! format from [`crate::codec`] and prints one JSON document on standard
//! output:
//!
//! ```text
//! publisher:  {"schema":"1","first_send_ns":..,"last_send_ns":..,"sent":..}
//! subscriber: {"schema":"1","latencies_us":[..],"last_recv_ns":..,"received":..}
//! ```
//!
//! `first_send_ns`, `last_send_ns` and `last_recv_ns` are read from the
//! host's monotonic clock (`CLOCK_MONOTONIC`); latencies are computed from
//! the real-time clock embedded in each payload.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Transport;

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter output is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported adapter schema `{0}`, expected `{SCHEMA_VERSION}`")]
    Schema(String),
    #[error("adapter report is inconsistent: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pub,
    Sub,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Pub => "pub",
            Role::Sub => "sub",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pub" => Ok(Role::Pub),
            "sub" => Ok(Role::Sub),
            other => Err(format!("unknown role `{other}`, expected pub or sub")),
        }
    }
}

/// Arguments of one shim invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleArgs {
    pub role: Role,
    pub endpoint: String,
    pub transport: Transport,
    pub count: u64,
    pub size: usize,
    pub interval_us: u64,
    pub delay_ms: u64,
}

impl RoleArgs {
    /// The contract flags, in the documented order.
    pub fn to_args(&self) -> Vec<String> {
        vec![
            "--role".into(),
            self.role.to_string(),
            "--endpoint".into(),
            self.endpoint.clone(),
            "--transport".into(),
            self.transport.to_string(),
            "--count".into(),
            self.count.to_string(),
            "--size".into(),
            self.size.to_string(),
            "--interval-us".into(),
            self.interval_us.to_string(),
            "--delay-ms".into(),
            self.delay_ms.to_string(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublisherReport {
    pub schema: String,
    pub first_send_ns: u64,
    pub last_send_ns: u64,
    pub sent: u64,
}

impl PublisherReport {
    pub fn new(first_send_ns: u64, last_send_ns: u64, sent: u64) -> Self {
        Self {
            schema: SCHEMA_VERSION.into(),
            first_send_ns,
            last_send_ns,
            sent,
        }
    }

    pub fn parse(json: &str) -> Result<Self, AdapterError> {
        let report: Self = serde_json::from_str(json.trim())?;
        check_schema(&report.schema)?;
        if report.sent > 0 && report.last_send_ns < report.first_send_ns {
            return Err(AdapterError::Inconsistent("last_send_ns precedes first_send_ns".into()));
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriberReport {
    pub schema: String,
    pub latencies_us: Vec<f64>,
    pub last_recv_ns: u64,
    pub received: u64,
}

impl SubscriberReport {
    pub fn new(latencies_us: Vec<f64>, last_recv_ns: u64) -> Self {
        Self {
            schema: SCHEMA_VERSION.into(),
            received: latencies_us.len() as u64,
            latencies_us,
            last_recv_ns,
        }
    }

    pub fn parse(json: &str) -> Result<Self, AdapterError> {
        let report: Self = serde_json::from_str(json.trim())?;
        check_schema(&report.schema)?;
        if report.received != report.latencies_us.len() as u64 {
            return Err(AdapterError::Inconsistent(format!(
                "received = {} but {} latencies reported",
                report.received,
                report.latencies_us.len()
            )));
        }
        Ok(report)
    }
}

fn check_schema(schema: &str) -> Result<(), AdapterError> {
    if schema != SCHEMA_VERSION {
        return Err(AdapterError::Schema(schema.into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn args_follow_contract_order() {
        let args = RoleArgs {
            role: Role::Sub,
            endpoint: "127.0.0.1:6000".into(),
            transport: Transport::Tcp,
            count: 5000,
            size: 32768,
            interval_us: 1000,
            delay_ms: 1000,
        };
        assert_eq!(
            args.to_args().join(" "),
            "--role sub --endpoint 127.0.0.1:6000 --transport tcp --count 5000 --size 32768 \
             --interval-us 1000 --delay-ms 1000"
        );
    }

    #[test]
    fn reports_serialize_with_schema() {
        let p = PublisherReport::new(10, 20, 2);
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, r#"{"schema":"1","first_send_ns":10,"last_send_ns":20,"sent":2}"#);
        assert_eq!(PublisherReport::parse(&json).unwrap(), p);

        let s = SubscriberReport::new(vec![1.5, 2.0], 99);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"schema":"1","latencies_us":[1.5,2.0],"last_recv_ns":99,"received":2}"#);
        assert_eq!(SubscriberReport::parse(&json).unwrap(), s);
    }

    #[test]
    fn rejects_bad_reports() {
        assert!(PublisherReport::parse(r#"{"schema":"2","first_send_ns":1,"last_send_ns":2,"sent":1}"#).is_err());
        assert!(SubscriberReport::parse(r#"{"schema":"1","latencies_us":[1.0],"last_recv_ns":2,"received":3}"#).is_err());
        assert!(SubscriberReport::parse("not json").is_err());
    }
}
