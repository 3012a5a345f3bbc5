use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{timeout_error, Endpoint, IterateCache, MessageKey, TransportError, TransportStats, DEFAULT_TIMEOUT};

/// Lossless shared-memory transport; every published message is visible to
/// every endpoint of the hub exactly once per key.
#[derive(Debug, Clone)]
pub struct InProcHub {
    cache: Arc<IterateCache>,
    timeout: Duration,
}

impl Default for InProcHub {
    fn default() -> Self {
        Self::new()
    }
}

impl InProcHub {
    pub fn new() -> Self {
        Self {
            cache: Arc::new(IterateCache::new()),
            timeout: DEFAULT_TIMEOUT,
        }
    }

    pub fn with_timeout(timeout: Duration) -> Self {
        Self {
            timeout,
            ..Self::new()
        }
    }

    pub fn endpoint(&self, id: usize) -> InProcEndpoint {
        InProcEndpoint {
            id,
            cache: self.cache.clone(),
            timeout: self.timeout,
            seq: 0,
            stats: TransportStats::default(),
        }
    }

    pub fn endpoints(&self, n: usize) -> Vec<Box<dyn Endpoint>> {
        (0..n).map(|i| Box::new(self.endpoint(i)) as Box<dyn Endpoint>).collect()
    }
}

#[derive(Debug)]
pub struct InProcEndpoint {
    id: usize,
    cache: Arc<IterateCache>,
    timeout: Duration,
    seq: u32,
    stats: TransportStats,
}

impl Endpoint for InProcEndpoint {
    fn id(&self) -> usize {
        self.id
    }

    fn publish(&mut self, key: MessageKey, payload: &[f64]) -> Result<(), TransportError> {
        self.seq = self.seq.wrapping_add(1);
        self.cache.insert(key, self.seq, payload.to_vec());
        self.stats.published += 1;
        Ok(())
    }

    fn await_payload(&mut self, key: MessageKey) -> Result<Vec<f64>, TransportError> {
        let started = Instant::now();
        self.cache
            .wait_until(&key, started + self.timeout)
            .ok_or_else(|| timeout_error(self.id, key, started))
    }

    fn stats(&self) -> TransportStats {
        self.stats
    }
}
