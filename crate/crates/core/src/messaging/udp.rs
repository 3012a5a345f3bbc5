use std::collections::HashMap;
use std::io::ErrorKind;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    timeout_error, Endpoint, IterateCache, IterateMessage, MessageKey, TransportError, TransportStats, CACHE_STEPS,
    DEFAULT_RESEND_INTERVAL, DEFAULT_TIMEOUT,
};

#[derive(Debug, Clone)]
pub struct UdpConfig {
    /// Address every agent socket binds to.
    pub host: IpAddr,
    /// Agent `i` binds `base_port + i`; zero picks ephemeral ports.
    pub base_port: u16,
    /// Probability of dropping any outgoing datagram.
    pub loss: f64,
    pub seed: u64,
    pub scenario_id: u32,
    pub resend_interval: Duration,
    pub timeout: Duration,
}

impl Default for UdpConfig {
    fn default() -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            base_port: 0,
            loss: 0.0,
            seed: 0,
            scenario_id: 0,
            resend_interval: DEFAULT_RESEND_INTERVAL,
            timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    published: AtomicU64,
    sent: AtomicU64,
    dropped: AtomicU64,
    requests: AtomicU64,
    served: AtomicU64,
    corrupt: AtomicU64,
}

/// Shared between an endpoint and its receive thread.
struct Shared {
    id: usize,
    socket: UdpSocket,
    cache: IterateCache,
    outbox: Mutex<HashMap<MessageKey, Vec<u8>>>,
    loss: f64,
    rng: Mutex<ChaCha8Rng>,
    stop: AtomicBool,
    counters: Counters,
    scenario_id: u32,
}

impl Shared {
    /// Send one datagram unless loss injection drops it.
    fn send(&self, buf: &[u8], to: SocketAddr) {
        if self.loss > 0.0 && self.rng.lock().expect("rng poisoned").random::<f64>() < self.loss {
            self.counters.dropped.fetch_add(1, Ordering::Relaxed);
            return;
        }
        match self.socket.send_to(buf, to) {
            Ok(_) => {
                self.counters.sent.fetch_add(1, Ordering::Relaxed);
            }
            Err(e) => warn!("agent {}: send to {to} failed: {e}", self.id),
        }
    }

    fn receive_loop(&self) {
        let mut buf = [0u8; 2048];
        while !self.stop.load(Ordering::Relaxed) {
            let (len, from) = match self.socket.recv_from(&mut buf) {
                Ok(r) => r,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
                Err(e) => {
                    debug!("agent {}: receive error {e}", self.id);
                    continue;
                }
            };
            let msg = match IterateMessage::decode(&buf[..len]) {
                Ok(m) => m,
                Err(_) => {
                    self.counters.corrupt.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
            };
            if msg.scenario_id != self.scenario_id {
                continue;
            }
            if msg.is_resend_request() {
                let wanted = msg.requested_key();
                let stored = self.outbox.lock().expect("outbox poisoned").get(&wanted).cloned();
                if let Some(bytes) = stored {
                    self.counters.served.fetch_add(1, Ordering::Relaxed);
                    self.send(&bytes, from);
                }
            } else {
                self.cache.insert(msg.key, msg.seq, msg.payload);
            }
        }
    }
}

/// Builder for a set of loopback agents.
pub struct UdpNetwork;

impl UdpNetwork {
    /// Bind one socket per agent and start the receive threads.
    pub fn create(n: usize, config: &UdpConfig) -> Result<Vec<UdpEndpoint>, TransportError> {
        let io = |e: std::io::Error| TransportError::Io(e.to_string());
        let mut sockets = Vec::with_capacity(n);
        for i in 0..n {
            let port = if config.base_port == 0 {
                0
            } else {
                config.base_port.checked_add(i as u16).ok_or_else(|| TransportError::Io("port overflow".into()))?
            };
            let socket = UdpSocket::bind(SocketAddr::new(config.host, port)).map_err(io)?;
            socket.set_read_timeout(Some(Duration::from_millis(10))).map_err(io)?;
            sockets.push(socket);
        }
        let peers: Vec<SocketAddr> = sockets.iter().map(|s| s.local_addr()).collect::<Result<_, _>>().map_err(io)?;
        let mut endpoints = Vec::with_capacity(n);
        for (i, socket) in sockets.into_iter().enumerate() {
            let shared = Arc::new(Shared {
                id: i,
                socket,
                cache: IterateCache::new(),
                outbox: Mutex::new(HashMap::new()),
                loss: config.loss,
                rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)))),
                stop: AtomicBool::new(false),
                counters: Counters::default(),
                scenario_id: config.scenario_id,
            });
            let worker = shared.clone();
            let handle = std::thread::Builder::new()
                .name(format!("udp-rx-{i}"))
                .spawn(move || worker.receive_loop())
                .map_err(io)?;
            endpoints.push(UdpEndpoint {
                shared,
                peers: peers.clone(),
                seq: 0,
                resend_interval: config.resend_interval,
                timeout: config.timeout,
                handle: Some(handle),
            });
        }
        Ok(endpoints)
    }

    pub fn boxed(n: usize, config: &UdpConfig) -> Result<Vec<Box<dyn Endpoint>>, TransportError> {
        Ok(Self::create(n, config)?.into_iter().map(|e| Box::new(e) as Box<dyn Endpoint>).collect())
    }
}

/// Loopback UDP endpoint with fan-out publishing and receiver-driven resend.
pub struct UdpEndpoint {
    shared: Arc<Shared>,
    peers: Vec<SocketAddr>,
    seq: u32,
    resend_interval: Duration,
    timeout: Duration,
    handle: Option<JoinHandle<()>>,
}

impl UdpEndpoint {
    pub fn local_addr(&self) -> SocketAddr {
        self.peers[self.shared.id]
    }
}

impl Endpoint for UdpEndpoint {
    fn id(&self) -> usize {
        self.shared.id
    }

    fn publish(&mut self, key: MessageKey, payload: &[f64]) -> Result<(), TransportError> {
        self.seq = self.seq.wrapping_add(1);
        let msg = IterateMessage {
            scenario_id: self.shared.scenario_id,
            key,
            seq: self.seq,
            payload: payload.to_vec(),
        };
        let bytes = msg.encode()?;
        {
            let mut outbox = self.shared.outbox.lock().expect("outbox poisoned");
            outbox.insert(key, bytes.clone());
            outbox.retain(|k, _| k.mpc_step + CACHE_STEPS >= key.mpc_step);
        }
        // The own copy goes straight to the local cache.
        self.shared.cache.insert(key, self.seq, msg.payload);
        self.shared.counters.published.fetch_add(1, Ordering::Relaxed);
        for (j, addr) in self.peers.iter().enumerate() {
            if j != self.shared.id {
                self.shared.send(&bytes, *addr);
            }
        }
        Ok(())
    }

    fn await_payload(&mut self, key: MessageKey) -> Result<Vec<f64>, TransportError> {
        let started = Instant::now();
        let deadline = started + self.timeout;
        let owner = self.peers.get(key.sender as usize).copied();
        loop {
            let wake = (Instant::now() + self.resend_interval).min(deadline);
            if let Some(p) = self.shared.cache.wait_until(&key, wake) {
                return Ok(p);
            }
            if Instant::now() >= deadline {
                return Err(timeout_error(self.shared.id, key, started));
            }
            if let Some(addr) = owner {
                let req = IterateMessage::resend_request(self.shared.scenario_id, key).encode()?;
                self.shared.counters.requests.fetch_add(1, Ordering::Relaxed);
                self.shared.send(&req, addr);
            }
        }
    }

    fn stats(&self) -> TransportStats {
        let c = &self.shared.counters;
        TransportStats {
            published: c.published.load(Ordering::Relaxed),
            datagrams_sent: c.sent.load(Ordering::Relaxed),
            datagrams_dropped: c.dropped.load(Ordering::Relaxed),
            resend_requests: c.requests.load(Ordering::Relaxed),
            resends_served: c.served.load(Ordering::Relaxed),
            corrupt: c.corrupt.load(Ordering::Relaxed),
        }
    }
}

impl Drop for UdpEndpoint {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
