//! In-process transport: publisher and subscribers are threads of one
//! process and exchange payloads through in-memory queues.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use crossbeam_channel::RecvTimeoutError;

use super::queue::{fanout_send, subscriber_queue, QueueConsumer, QueueProducer, QueueSnapshot};
use super::CONNECT_BACKOFF;
use crate::backend::{
    BackendError, Delivery, Endpoint, PublisherHandle, QueueStats, Reception, SubscriberHandle, Transport,
};
use crate::clock::{mono_now_ns, wall_now_ns};

struct Bus {
    capacity: usize,
    // None once the publisher closed.
    subscribers: Mutex<Option<Vec<QueueProducer<Vec<u8>>>>>,
}

fn registry() -> &'static Mutex<HashMap<String, Arc<Bus>>> {
    static REGISTRY: OnceLock<Mutex<HashMap<String, Arc<Bus>>>> = OnceLock::new();
    REGISTRY.get_or_init(Default::default)
}

pub struct InprocPublisher {
    endpoint: Endpoint,
    bus: Arc<Bus>,
}

pub struct InprocSubscriber {
    queue: QueueConsumer<Vec<u8>>,
}

/// Register `name` in this process. Fails if another live publisher holds it.
pub fn bind(name: &str, queue_capacity: usize) -> Result<InprocPublisher, BackendError> {
    let endpoint = Endpoint::new(Transport::InProcess, name)?;
    let mut map = registry().lock().expect("inproc registry poisoned");
    if map.contains_key(name) {
        return Err(BackendError::DuplicateName(name.into()));
    }
    let bus = Arc::new(Bus {
        capacity: queue_capacity,
        subscribers: Mutex::new(Some(Vec::new())),
    });
    map.insert(name.into(), Arc::clone(&bus));
    Ok(InprocPublisher { endpoint, bus })
}

/// Attach a subscriber queue to the publisher bound at `name`, retrying until
/// it appears or `timeout` elapses.
pub fn connect(name: &str, timeout: Duration) -> Result<InprocSubscriber, BackendError> {
    let deadline = Instant::now() + timeout;
    loop {
        let bus = registry().lock().expect("inproc registry poisoned").get(name).cloned();
        if let Some(bus) = bus {
            let mut subs = bus.subscribers.lock().expect("inproc bus poisoned");
            if let Some(list) = subs.as_mut() {
                let (producer, consumer) = subscriber_queue(bus.capacity);
                list.push(producer);
                return Ok(InprocSubscriber { queue: consumer });
            }
        }
        if Instant::now() >= deadline {
            return Err(BackendError::ConnectionRefusedAfterRetries(format!("inproc://{name}")));
        }
        std::thread::sleep(CONNECT_BACKOFF);
    }
}

/// A bound publisher plus one connected subscriber, both in this process.
pub fn inproc_channel(name: &str, queue_capacity: usize) -> Result<(InprocPublisher, InprocSubscriber), BackendError> {
    let publisher = bind(name, queue_capacity)?;
    let subscriber = connect(name, Duration::ZERO)?;
    Ok((publisher, subscriber))
}

impl InprocPublisher {
    /// Queue accounting for every attached subscriber, in attach order.
    pub fn snapshots(&self) -> Vec<QueueSnapshot> {
        let subs = self.bus.subscribers.lock().expect("inproc bus poisoned");
        subs.iter().flatten().map(QueueProducer::snapshot).collect()
    }

    fn unregister(&self) {
        let mut map = registry().lock().expect("inproc registry poisoned");
        if map.get(&self.endpoint.address).is_some_and(|b| Arc::ptr_eq(b, &self.bus)) {
            map.remove(&self.endpoint.address);
        }
    }
}

impl PublisherHandle for InprocPublisher {
    fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn send(&mut self, payload: &[u8]) -> Result<(), BackendError> {
        let subs = self.bus.subscribers.lock().expect("inproc bus poisoned");
        let list = subs.as_ref().ok_or(BackendError::HandleClosed)?;
        fanout_send(list, payload);
        Ok(())
    }

    fn subscriber_count(&self) -> usize {
        let subs = self.bus.subscribers.lock().expect("inproc bus poisoned");
        subs.as_ref().map_or(0, Vec::len)
    }

    fn close(&mut self) -> Result<Vec<QueueStats>, BackendError> {
        self.unregister();
        let taken = self.bus.subscribers.lock().expect("inproc bus poisoned").take();
        let list = taken.ok_or(BackendError::HandleClosed)?;
        // Dropping the producers lets subscribers drain and then observe Closed.
        Ok(list.iter().map(QueueProducer::stats).collect())
    }
}

impl Drop for InprocPublisher {
    fn drop(&mut self) {
        self.unregister();
        self.bus.subscribers.lock().map(|mut s| s.take()).ok();
    }
}

impl InprocSubscriber {
    pub fn snapshot(&self) -> QueueSnapshot {
        self.queue.snapshot()
    }
}

impl SubscriberHandle for InprocSubscriber {
    fn receive(&mut self, timeout: Duration) -> Result<Reception, BackendError> {
        match self.queue.recv_timeout(timeout) {
            Ok(bytes) => Ok(Reception::Message(Delivery {
                bytes,
                wall_ns: wall_now_ns(),
                mono_ns: mono_now_ns(),
            })),
            Err(RecvTimeoutError::Timeout) => Ok(Reception::TimedOut),
            Err(RecvTimeoutError::Disconnected) => Ok(Reception::Closed),
        }
    }
}
