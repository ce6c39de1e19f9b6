//! Reference brokerless PUB/SUB backend.
//!
//! Supports all three transports with no external dependencies. Every
//! subscriber owns a bounded queue ([`queue`]); when it is full the newest
//! message is dropped for that subscriber and counted. Stream transports use
//! [`frame`] for length-prefixed framing, with Nagle's algorithm disabled on
//! TCP.

use std::time::Duration;

use crate::backend::{
    Backend, BackendDescriptor, BackendError, Endpoint, PublisherHandle, SubscriberHandle, Transport, Tuning,
};

pub mod frame;
pub mod inproc;
pub mod queue;
pub mod stream;

pub const NAME: &str = "refbus";

/// Delay between connection attempts of a subscriber.
pub const CONNECT_BACKOFF: Duration = Duration::from_millis(10);

/// Total time a subscriber keeps retrying before giving up.
pub const DEFAULT_CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct Refbus {
    descriptor: BackendDescriptor,
    connect_timeout: Duration,
}

impl Refbus {
    pub fn new() -> Self {
        Self {
            descriptor: BackendDescriptor::in_tree(NAME, Transport::ALL),
            connect_timeout: DEFAULT_CONNECT_TIMEOUT,
        }
    }

    pub fn with_connect_timeout(mut self, timeout: Duration) -> Self {
        self.connect_timeout = timeout;
        self
    }
}

impl Default for Refbus {
    fn default() -> Self {
        Self::new()
    }
}

impl Backend for Refbus {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn bind(&self, endpoint: &Endpoint, tuning: &Tuning) -> Result<Box<dyn PublisherHandle>, BackendError> {
        endpoint.validate()?;
        Ok(match endpoint.transport {
            Transport::InProcess => Box::new(inproc::bind(&endpoint.address, tuning.queue_capacity)?),
            Transport::InterProcess => Box::new(stream::ipc_listen(
                &endpoint.address,
                tuning.queue_capacity,
                tuning.socket_buffer_bytes,
            )?),
            Transport::Tcp => Box::new(stream::tcp_listen(
                &endpoint.address,
                tuning.queue_capacity,
                tuning.socket_buffer_bytes,
            )?),
        })
    }

    fn connect(&self, endpoint: &Endpoint, tuning: &Tuning) -> Result<Box<dyn SubscriberHandle>, BackendError> {
        endpoint.validate()?;
        Ok(match endpoint.transport {
            Transport::InProcess => Box::new(inproc::connect(&endpoint.address, self.connect_timeout)?),
            Transport::InterProcess => Box::new(stream::ipc_connect(
                &endpoint.address,
                tuning.socket_buffer_bytes,
                self.connect_timeout,
            )?),
            Transport::Tcp => Box::new(stream::tcp_connect(
                &endpoint.address,
                tuning.socket_buffer_bytes,
                self.connect_timeout,
            )?),
        })
    }
}
