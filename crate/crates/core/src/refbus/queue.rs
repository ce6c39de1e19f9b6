//! Bounded per-subscriber delivery queue with drop-newest overflow.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender, TrySendError};

use crate::backend::QueueStats;

#[derive(Debug, Default)]
struct Counters {
    offered: AtomicU64,
    dropped: AtomicU64,
    consumed: AtomicU64,
}

/// Accounting of one queue at a point in time.
///
/// For a torn-down queue `offered == consumed + dropped + in_flight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueSnapshot {
    pub offered: u64,
    pub consumed: u64,
    pub dropped: u64,
    pub in_flight: u64,
}

impl QueueSnapshot {
    pub fn is_conserved(&self) -> bool {
        self.offered == self.consumed + self.dropped + self.in_flight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Enqueued,
    /// Queue full, the offered message was discarded.
    Dropped,
    /// Consumer is gone; counted as dropped.
    Disconnected,
}

pub struct QueueProducer<T> {
    tx: Sender<T>,
    counters: Arc<Counters>,
    capacity: usize,
}

pub struct QueueConsumer<T> {
    rx: Receiver<T>,
    counters: Arc<Counters>,
}

/// Create a queue holding at most `capacity` messages (minimum 1).
pub fn subscriber_queue<T>(capacity: usize) -> (QueueProducer<T>, QueueConsumer<T>) {
    let capacity = capacity.max(1);
    let (tx, rx) = crossbeam_channel::bounded(capacity);
    let counters = Arc::new(Counters::default());
    (
        QueueProducer {
            tx,
            counters: Arc::clone(&counters),
            capacity,
        },
        QueueConsumer { rx, counters },
    )
}

impl<T> QueueProducer<T> {
    pub fn offer(&self, item: T) -> Offer {
        self.counters.offered.fetch_add(1, Ordering::Relaxed);
        match self.tx.try_send(item) {
            Ok(()) => Offer::Enqueued,
            Err(TrySendError::Full(_)) => {
                self.counters.dropped.fetch_add(1, Ordering::Relaxed);
                Offer::Dropped
            }
            Err(TrySendError::Disconnected(_)) => {
                self.counters.dropped.fetch_add(1, Ordering::Relaxed);
                Offer::Disconnected
            }
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.tx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tx.is_empty()
    }

    pub fn stats(&self) -> QueueStats {
        QueueStats {
            offered: self.counters.offered.load(Ordering::Relaxed),
            dropped: self.counters.dropped.load(Ordering::Relaxed),
        }
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        snapshot(&self.counters, self.tx.len())
    }
}

impl<T> QueueConsumer<T> {
    /// `Err(Disconnected)` only once the producer is gone and the queue drained.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<T, RecvTimeoutError> {
        let item = self.rx.recv_timeout(timeout)?;
        self.counters.consumed.fetch_add(1, Ordering::Relaxed);
        Ok(item)
    }

    pub fn recv(&self) -> Option<T> {
        let item = self.rx.recv().ok()?;
        self.counters.consumed.fetch_add(1, Ordering::Relaxed);
        Some(item)
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        snapshot(&self.counters, self.rx.len())
    }
}

fn snapshot(counters: &Counters, in_flight: usize) -> QueueSnapshot {
    QueueSnapshot {
        offered: counters.offered.load(Ordering::Relaxed),
        consumed: counters.consumed.load(Ordering::Relaxed),
        dropped: counters.dropped.load(Ordering::Relaxed),
        in_flight: in_flight as u64,
    }
}

/// Offer one copy of `payload` to every subscriber queue. Returns how many
/// queues accepted it.
pub fn fanout_send(queues: &[QueueProducer<Vec<u8>>], payload: &[u8]) -> usize {
    queues
        .iter()
        .filter(|q| q.offer(payload.to_vec()) == Offer::Enqueued)
        .count()
}
