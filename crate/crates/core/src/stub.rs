//! Deterministic synthetic backend for exercising the measurement pipeline.
//!
//! [`StubBackend`] delivers every payload in memory and stamps its reception
//! at `send timestamp + configured latency` on a virtual clock, so the whole
//! pipeline output is an analytic function of the configuration and is
//! bit-reproducible.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use crate::backend::{
    Backend, BackendDescriptor, BackendError, Delivery, Endpoint, PublisherHandle, QueueStats, Reception,
    SubscriberHandle, Transport, Tuning,
};
use crate::clock::Clock;
use crate::codec;

/// Offset between the virtual monotonic and wall clocks.
pub const SIM_EPOCH_NS: u64 = 1_700_000_000_000_000_000;

/// Virtual clock: time only moves when someone sleeps.
#[derive(Debug, Default)]
pub struct SimClock {
    mono: AtomicU64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for SimClock {
    fn wall_ns(&self) -> u64 {
        SIM_EPOCH_NS + self.mono_ns()
    }

    fn mono_ns(&self) -> u64 {
        self.mono.load(Ordering::SeqCst)
    }

    fn sleep_until(&self, deadline_ns: u64) {
        self.mono.fetch_max(deadline_ns, Ordering::SeqCst);
    }
}

type Senders = Arc<Mutex<Option<Vec<Sender<Vec<u8>>>>>>;

/// Synthetic backend with fixed one-way latencies.
///
/// `latencies_ns[run][subscriber]` gives the latency of subscriber `j`
/// (in attach order) during run `k`; rows and columns wrap around. An
/// optional per-message pattern is added to every latency, indexed by the
/// message's position in the subscriber's stream.
pub struct StubBackend {
    descriptor: BackendDescriptor,
    latencies_ns: Vec<Vec<u64>>,
    pattern_ns: Vec<u64>,
    runs: AtomicUsize,
    clock: Mutex<Arc<SimClock>>,
    buses: Mutex<HashMap<String, Senders>>,
}

impl StubBackend {
    pub fn new(name: impl Into<String>, latency_ns: u64) -> Self {
        Self::with_latencies(name, vec![vec![latency_ns]])
    }

    pub fn with_latencies(name: impl Into<String>, latencies_ns: Vec<Vec<u64>>) -> Self {
        assert!(latencies_ns.iter().all(|r| !r.is_empty()) && !latencies_ns.is_empty());
        Self {
            descriptor: BackendDescriptor::in_tree(name, Transport::ALL),
            latencies_ns,
            pattern_ns: Vec::new(),
            runs: AtomicUsize::new(0),
            clock: Mutex::new(Arc::new(SimClock::new())),
            buses: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_pattern(mut self, pattern_ns: Vec<u64>) -> Self {
        self.pattern_ns = pattern_ns;
        self
    }
}

struct StubPublisher {
    endpoint: Endpoint,
    senders: Senders,
    offered: u64,
}

struct StubSubscriber {
    rx: Receiver<Vec<u8>>,
    latency_ns: u64,
    pattern_ns: Vec<u64>,
    received: usize,
}

impl Backend for StubBackend {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn bind(&self, endpoint: &Endpoint, _tuning: &Tuning) -> Result<Box<dyn PublisherHandle>, BackendError> {
        let key = endpoint.to_string();
        let senders: Senders = Arc::new(Mutex::new(Some(Vec::new())));
        let mut buses = self.buses.lock().expect("stub buses poisoned");
        if buses.get(&key).is_some_and(|s| s.lock().expect("poisoned").is_some()) {
            return Err(BackendError::DuplicateName(key));
        }
        buses.insert(key, Arc::clone(&senders));
        Ok(Box::new(StubPublisher {
            endpoint: endpoint.clone(),
            senders,
            offered: 0,
        }))
    }

    fn connect(&self, endpoint: &Endpoint, _tuning: &Tuning) -> Result<Box<dyn SubscriberHandle>, BackendError> {
        let key = endpoint.to_string();
        let senders = self
            .buses
            .lock()
            .expect("stub buses poisoned")
            .get(&key)
            .cloned()
            .ok_or_else(|| BackendError::ConnectionRefusedAfterRetries(key.clone()))?;
        let mut guard = senders.lock().expect("poisoned");
        let list = guard.as_mut().ok_or(BackendError::ConnectionRefusedAfterRetries(key))?;
        let (tx, rx) = unbounded();
        let index = list.len();
        list.push(tx);
        let run = self.runs.load(Ordering::SeqCst).saturating_sub(1);
        let row = &self.latencies_ns[run % self.latencies_ns.len()];
        Ok(Box::new(StubSubscriber {
            rx,
            latency_ns: row[index % row.len()],
            pattern_ns: self.pattern_ns.clone(),
            received: 0,
        }))
    }

    fn clock(&self) -> Arc<dyn Clock> {
        self.runs.fetch_add(1, Ordering::SeqCst);
        let fresh = Arc::new(SimClock::new());
        *self.clock.lock().expect("poisoned") = Arc::clone(&fresh);
        fresh
    }
}

impl PublisherHandle for StubPublisher {
    fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn send(&mut self, payload: &[u8]) -> Result<(), BackendError> {
        let guard = self.senders.lock().expect("poisoned");
        let list = guard.as_ref().ok_or(BackendError::HandleClosed)?;
        self.offered += 1;
        for tx in list {
            let _ = tx.send(payload.to_vec());
        }
        Ok(())
    }

    fn subscriber_count(&self) -> usize {
        self.senders.lock().expect("poisoned").as_ref().map_or(0, Vec::len)
    }

    fn close(&mut self) -> Result<Vec<QueueStats>, BackendError> {
        let list = self.senders.lock().expect("poisoned").take().ok_or(BackendError::HandleClosed)?;
        Ok(vec![
            QueueStats {
                offered: self.offered,
                dropped: 0,
            };
            list.len()
        ])
    }
}

impl SubscriberHandle for StubSubscriber {
    fn receive(&mut self, timeout: Duration) -> Result<Reception, BackendError> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => {
                let sent_wall = codec::decode(&bytes, bytes.len())?;
                let extra = if self.pattern_ns.is_empty() {
                    0
                } else {
                    self.pattern_ns[self.received % self.pattern_ns.len()]
                };
                self.received += 1;
                let wall_ns = sent_wall + self.latency_ns + extra;
                Ok(Reception::Message(Delivery {
                    bytes,
                    wall_ns,
                    mono_ns: wall_ns - SIM_EPOCH_NS,
                }))
            }
            Err(RecvTimeoutError::Timeout) => Ok(Reception::TimedOut),
            Err(RecvTimeoutError::Disconnected) => Ok(Reception::Closed),
        }
    }
}
