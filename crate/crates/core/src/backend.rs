//! The messaging interface every benchmarked library implements.
//!
//! In-tree backends implement [`Backend`] directly and run inside the
//! harness. Out-of-tree libraries are wrapped by a small shim executable
//! that speaks the adapter protocol in [`crate::adapter`]; those are
//! registered as [`BackendKind::SubprocessAdapter`] descriptors.

use std::collections::BTreeSet;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::codec::CodecError;

/// Longest usable `sun_path` for a local domain socket.
pub const MAX_SOCKET_PATH: usize = 107;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Transport {
    #[serde(rename = "inproc")]
    InProcess,
    #[serde(rename = "ipc")]
    InterProcess,
    #[serde(rename = "tcp")]
    Tcp,
}

impl Transport {
    pub const ALL: [Transport; 3] = [Transport::InProcess, Transport::InterProcess, Transport::Tcp];

    pub fn as_str(self) -> &'static str {
        match self {
            Transport::InProcess => "inproc",
            Transport::InterProcess => "ipc",
            Transport::Tcp => "tcp",
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Transport {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "inproc" | "in-process" | "inprocess" => Ok(Transport::InProcess),
            "ipc" | "inter-process" | "interprocess" => Ok(Transport::InterProcess),
            "tcp" => Ok(Transport::Tcp),
            _ => Err(BackendError::InvalidEndpoint(format!("unknown transport `{s}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("address already in use: {0}")]
    AddressInUse(String),
    #[error("backend `{backend}` does not support the {transport} transport")]
    UnsupportedTransport { backend: String, transport: Transport },
    #[error("permission denied: {0}")]
    PermissionDenied(String),
    #[error("could not connect to {0} before the retry budget ran out")]
    ConnectionRefusedAfterRetries(String),
    #[error("handle is closed")]
    HandleClosed,
    #[error("in-process endpoint `{0}` is already bound")]
    DuplicateName(String),
    #[error("socket path is {len} bytes, longer than the {MAX_SOCKET_PATH}-byte limit")]
    PathTooLong { len: usize },
    #[error("invalid endpoint: {0}")]
    InvalidEndpoint(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("frame of {0} bytes exceeds the frame size limit")]
    FrameTooLarge(usize),
    #[error("stream ended in the middle of a frame")]
    TruncatedFrame,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a publisher binds and subscribers connect.
///
/// The address is a name for in-process endpoints, a filesystem path for
/// inter-process endpoints and `host:port` for TCP. TCP endpoints are limited
/// to loopback addresses; one-way latency needs both ends on one clock.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub transport: Transport,
    pub address: String,
}

impl Endpoint {
    pub fn new(transport: Transport, address: impl Into<String>) -> Result<Self, BackendError> {
        let endpoint = Self {
            transport,
            address: address.into(),
        };
        endpoint.validate()?;
        Ok(endpoint)
    }

    pub fn inproc(name: impl Into<String>) -> Result<Self, BackendError> {
        Self::new(Transport::InProcess, name)
    }

    pub fn ipc(path: impl Into<String>) -> Result<Self, BackendError> {
        Self::new(Transport::InterProcess, path)
    }

    pub fn tcp(addr: impl Into<String>) -> Result<Self, BackendError> {
        Self::new(Transport::Tcp, addr)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.transport {
            Transport::InProcess => {
                if self.address.is_empty() || self.address.chars().any(char::is_whitespace) {
                    return Err(BackendError::InvalidEndpoint(format!(
                        "in-process name `{}` must be non-empty without whitespace",
                        self.address
                    )));
                }
            }
            Transport::InterProcess => {
                if self.address.is_empty() || self.address.contains('\0') {
                    return Err(BackendError::InvalidEndpoint(format!(
                        "`{}` is not a usable socket path",
                        self.address
                    )));
                }
                if self.address.len() > MAX_SOCKET_PATH {
                    return Err(BackendError::PathTooLong {
                        len: self.address.len(),
                    });
                }
            }
            Transport::Tcp => {
                let addr = self.socket_addr()?;
                if !addr.ip().is_loopback() {
                    return Err(BackendError::InvalidEndpoint(format!(
                        "{addr} is not a loopback address"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn socket_addr(&self) -> Result<SocketAddr, BackendError> {
        self.address
            .parse()
            .map_err(|_| BackendError::InvalidEndpoint(format!("`{}` is not host:port", self.address)))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}://{}", self.transport, self.address)
    }
}

impl FromStr for Endpoint {
    type Err = BackendError;

    /// Parses `inproc://name`, `ipc:///path` or `tcp://127.0.0.1:5555`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, rest) = s
            .split_once("://")
            .ok_or_else(|| BackendError::InvalidEndpoint(format!("`{s}` has no scheme")))?;
        Endpoint::new(scheme.parse()?, rest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    InTree,
    SubprocessAdapter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub kind: BackendKind,
    pub supported_transports: BTreeSet<Transport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_command: Option<Vec<String>>,
}

impl BackendDescriptor {
    pub fn in_tree(name: impl Into<String>, transports: impl IntoIterator<Item = Transport>) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::InTree,
            supported_transports: transports.into_iter().collect(),
            adapter_command: None,
        }
    }

    pub fn adapter(
        name: impl Into<String>,
        command: Vec<String>,
        transports: impl IntoIterator<Item = Transport>,
    ) -> Self {
        Self {
            name: name.into(),
            kind: BackendKind::SubprocessAdapter,
            supported_transports: transports.into_iter().collect(),
            adapter_command: Some(command),
        }
    }

    pub fn check_transport(&self, transport: Transport) -> Result<(), BackendError> {
        if !self.supported_transports.contains(&transport) {
            return Err(BackendError::UnsupportedTransport {
                backend: self.name.clone(),
                transport,
            });
        }
        // Adapter shims live in separate address spaces.
        if self.kind == BackendKind::SubprocessAdapter && transport == Transport::InProcess {
            return Err(BackendError::UnsupportedTransport {
                backend: self.name.clone(),
                transport,
            });
        }
        Ok(())
    }
}

/// Knobs that shift measured performance and therefore travel with the
/// experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tuning {
    /// Per-subscriber queue bound, in messages.
    pub queue_capacity: usize,
    /// Socket send/receive buffer size for stream transports, in bytes.
    pub socket_buffer_bytes: usize,
}

impl Default for Tuning {
    fn default() -> Self {
        Self {
            queue_capacity: 1000,
            socket_buffer_bytes: 64 * 1024,
        }
    }
}

/// A received message with the receive instant stamped by the backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub bytes: Vec<u8>,
    pub wall_ns: u64,
    pub mono_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reception {
    Message(Delivery),
    TimedOut,
    /// The publisher closed the stream; nothing more will arrive.
    Closed,
}

/// Per-subscriber delivery accounting on the publisher side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueStats {
    /// Messages offered to this subscriber's queue.
    pub offered: u64,
    /// Messages discarded because the queue was full.
    pub dropped: u64,
}

pub trait PublisherHandle: Send {
    /// The bound endpoint; for TCP this carries the resolved port.
    fn endpoint(&self) -> &Endpoint;

    fn send(&mut self, payload: &[u8]) -> Result<(), BackendError>;

    fn subscriber_count(&self) -> usize;

    /// Flush queued messages, disconnect subscribers and report accounting.
    fn close(&mut self) -> Result<Vec<QueueStats>, BackendError>;
}

pub trait SubscriberHandle: Send {
    fn receive(&mut self, timeout: Duration) -> Result<Reception, BackendError>;
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn bind(&self, endpoint: &Endpoint, tuning: &Tuning) -> Result<Box<dyn PublisherHandle>, BackendError>;

    fn connect(&self, endpoint: &Endpoint, tuning: &Tuning) -> Result<Box<dyn SubscriberHandle>, BackendError>;

    /// Clock for timestamps and pacing during one run. Called once per run.
    fn clock(&self) -> Arc<dyn Clock> {
        Arc::new(SystemClock)
    }
}

#[derive(Clone)]
pub enum BackendEntry {
    InTree(Arc<dyn Backend>),
    Adapter(BackendDescriptor),
}

impl BackendEntry {
    pub fn descriptor(&self) -> &BackendDescriptor {
        match self {
            BackendEntry::InTree(b) => b.descriptor(),
            BackendEntry::Adapter(d) => d,
        }
    }
}

impl fmt::Debug for BackendEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("BackendEntry").field(self.descriptor()).finish()
    }
}

/// Named backends available to the runner, in registration order.
#[derive(Debug, Clone, Default)]
pub struct BackendRegistry {
    entries: Vec<BackendEntry>,
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding the bundled reference backend.
    pub fn with_defaults() -> Self {
        let mut registry = Self::empty();
        registry.register(Arc::new(crate::refbus::Refbus::new()));
        registry
    }

    /// Adds or replaces the backend with the same name.
    pub fn register(&mut self, backend: Arc<dyn Backend>) {
        self.insert(BackendEntry::InTree(backend));
    }

    pub fn register_adapter(&mut self, descriptor: BackendDescriptor) {
        self.insert(BackendEntry::Adapter(descriptor));
    }

    fn insert(&mut self, entry: BackendEntry) {
        let name = entry.descriptor().name.clone();
        match self.entries.iter_mut().find(|e| e.descriptor().name == name) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn get(&self, name: &str) -> Option<&BackendEntry> {
        self.entries.iter().find(|e| e.descriptor().name == name)
    }

    pub fn descriptors(&self) -> impl Iterator<Item = &BackendDescriptor> {
        self.entries.iter().map(BackendEntry::descriptor)
    }
}
