//! Iterate exchange between agents and state-measurement delivery.
//!
//! Every agent owns an [`Endpoint`]. Iterates are published under a
//! [`MessageKey`] and fetched by key; the in-process hub is exact and
//! lossless, the UDP transport adds loss injection and receiver-driven
//! resends. Measurements use a separate [`MeasurementBus`].

mod inproc;
mod measurement;
mod udp;
mod wire;

pub use inproc::{InProcEndpoint, InProcHub};
pub use measurement::{MeasurementBus, MeasurementMessage, MeasurementRead};
pub use udp::{UdpConfig, UdpEndpoint, UdpNetwork};
pub use wire::{IterateMessage, MessageKey, WireError, MAX_DATAGRAM, MAX_PAYLOAD, RESEND_FLAG};

use std::collections::HashMap;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const PHASE_COPIES: u8 = 0;
pub const PHASE_AVERAGES: u8 = 1;
pub const PHASE_REDUCE: u8 = 2;

/// Entries more than this many MPC steps behind the newest one are evicted.
pub const CACHE_STEPS: u32 = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("agent {agent} timed out after {waited_ms} ms waiting for {key:?}")]
    Timeout { agent: usize, key: MessageKey, waited_ms: u128 },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("socket error: {0}")]
    Io(String),
    #[error("no measurement ever received for robot {0}")]
    NoMeasurement(usize),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransportStats {
    pub published: u64,
    pub datagrams_sent: u64,
    pub datagrams_dropped: u64,
    pub resend_requests: u64,
    pub resends_served: u64,
    pub corrupt: u64,
}

/// One agent's view of the iterate channel.
pub trait Endpoint: Send {
    fn id(&self) -> usize;

    fn publish(&mut self, key: MessageKey, payload: &[f64]) -> Result<(), TransportError>;

    /// Block until the message for `key` is available or the timeout expires.
    fn await_payload(&mut self, key: MessageKey) -> Result<Vec<f64>, TransportError>;

    fn stats(&self) -> TransportStats {
        TransportStats::default()
    }
}

/// Keyed message store shared between a receive context and a compute
/// context. A higher sequence number replaces a lower one under the same key.
#[derive(Debug, Default)]
pub struct IterateCache {
    inner: Mutex<CacheInner>,
    ready: Condvar,
}

#[derive(Debug, Default)]
struct CacheInner {
    entries: HashMap<MessageKey, (u32, Vec<f64>)>,
    newest_step: u32,
}

impl IterateCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true when the message was stored.
    pub fn insert(&self, key: MessageKey, seq: u32, payload: Vec<f64>) -> bool {
        let mut inner = self.inner.lock().expect("cache poisoned");
        if key.mpc_step + CACHE_STEPS < inner.newest_step {
            return false;
        }
        if inner.entries.get(&key).is_some_and(|(s, _)| *s >= seq) {
            return false;
        }
        inner.entries.insert(key, (seq, payload));
        if key.mpc_step > inner.newest_step {
            let newest = key.mpc_step;
            inner.newest_step = newest;
            inner.entries.retain(|k, _| k.mpc_step + CACHE_STEPS >= newest);
        }
        drop(inner);
        self.ready.notify_all();
        true
    }

    pub fn get(&self, key: &MessageKey) -> Option<Vec<f64>> {
        self.inner.lock().expect("cache poisoned").entries.get(key).map(|(_, p)| p.clone())
    }

    pub fn seq(&self, key: &MessageKey) -> Option<u32> {
        self.inner.lock().expect("cache poisoned").entries.get(key).map(|(s, _)| *s)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache poisoned").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wait until `key` is present or `deadline` passes.
    pub fn wait_until(&self, key: &MessageKey, deadline: Instant) -> Option<Vec<f64>> {
        let mut inner = self.inner.lock().expect("cache poisoned");
        loop {
            if let Some((_, p)) = inner.entries.get(key) {
                return Some(p.clone());
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            inner = self.ready.wait_timeout(inner, deadline - now).expect("cache poisoned").0;
        }
    }
}

/// Delivered-iterate log used to compare runs across transports.
pub type IterateLog = Arc<Mutex<Vec<(MessageKey, Vec<u64>)>>>;

/// Endpoint wrapper that records every delivered payload bit pattern.
pub struct RecordingEndpoint {
    inner: Box<dyn Endpoint>,
    log: IterateLog,
}

impl RecordingEndpoint {
    pub fn new(inner: Box<dyn Endpoint>) -> (Self, IterateLog) {
        let log = IterateLog::default();
        (
            Self {
                inner,
                log: log.clone(),
            },
            log,
        )
    }
}

impl Endpoint for RecordingEndpoint {
    fn id(&self) -> usize {
        self.inner.id()
    }

    fn publish(&mut self, key: MessageKey, payload: &[f64]) -> Result<(), TransportError> {
        self.inner.publish(key, payload)
    }

    fn await_payload(&mut self, key: MessageKey) -> Result<Vec<f64>, TransportError> {
        let p = self.inner.await_payload(key)?;
        self.log
            .lock()
            .expect("log poisoned")
            .push((key, p.iter().map(|v| v.to_bits()).collect()));
        Ok(p)
    }

    fn stats(&self) -> TransportStats {
        self.inner.stats()
    }
}

pub(crate) fn timeout_error(agent: usize, key: MessageKey, started: Instant) -> TransportError {
    TransportError::Timeout {
        agent,
        key,
        waited_ms: started.elapsed().as_millis(),
    }
}

pub const DEFAULT_RESEND_INTERVAL: Duration = Duration::from_millis(5);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(150);
