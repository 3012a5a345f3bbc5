use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use nalgebra::Vector2;

use super::TransportError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementMessage {
    pub robot: usize,
    pub timestamp_ns: u64,
    pub position: Vector2<f64>,
}

/// Result of [`MeasurementBus::await_measurement`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementRead {
    pub message: MeasurementMessage,
    /// True when no new measurement arrived within the waiting window and
    /// the previously delivered value is returned again.
    pub stale: bool,
}

#[derive(Debug, Default, Clone, Copy)]
struct Slot {
    latest: Option<MeasurementMessage>,
    delivered_ns: Option<u64>,
}

/// Pose channel, separate from the iterate channel.
#[derive(Debug)]
pub struct MeasurementBus {
    slots: Mutex<Vec<Slot>>,
    arrived: Condvar,
}

impl MeasurementBus {
    pub fn new(robots: usize) -> Self {
        Self {
            slots: Mutex::new(vec![Slot::default(); robots]),
            arrived: Condvar::new(),
        }
    }

    /// Store a measurement. Out-of-order timestamps are ignored.
    pub fn publish(&self, msg: MeasurementMessage) -> bool {
        let mut slots = self.slots.lock().expect("bus poisoned");
        let Some(slot) = slots.get_mut(msg.robot) else { return false };
        if slot.latest.is_some_and(|m| m.timestamp_ns > msg.timestamp_ns) {
            return false;
        }
        slot.latest = Some(msg);
        drop(slots);
        self.arrived.notify_all();
        true
    }

    pub fn await_measurement(&self, robot: usize, max_wait: Duration) -> Result<MeasurementRead, TransportError> {
        let deadline = Instant::now() + max_wait;
        let mut slots = self.slots.lock().expect("bus poisoned");
        loop {
            let slot = slots.get_mut(robot).ok_or(TransportError::NoMeasurement(robot))?;
            if let Some(m) = slot.latest {
                if slot.delivered_ns.is_none_or(|t| m.timestamp_ns > t) {
                    slot.delivered_ns = Some(m.timestamp_ns);
                    return Ok(MeasurementRead { message: m, stale: false });
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return match slot.latest {
                    Some(m) => Ok(MeasurementRead { message: m, stale: true }),
                    None => Err(TransportError::NoMeasurement(robot)),
                };
            }
            slots = self.arrived.wait_timeout(slots, deadline - now).expect("bus poisoned").0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(t: u64, x: f64) -> MeasurementMessage {
        MeasurementMessage {
            robot: 0,
            timestamp_ns: t,
            position: Vector2::new(x, 0.0),
        }
    }

    #[test]
    fn fresh_then_stale() {
        let bus = MeasurementBus::new(1);
        bus.publish(msg(1, 1.0));
        let r = bus.await_measurement(0, Duration::ZERO).unwrap();
        assert!(!r.stale);
        let r = bus.await_measurement(0, Duration::from_millis(5)).unwrap();
        assert!(r.stale);
        assert_eq!(r.message.position.x, 1.0);
        assert!(!bus.publish(msg(0, 9.0)));
        bus.publish(msg(2, 2.0));
        let r = bus.await_measurement(0, Duration::ZERO).unwrap();
        assert!(!r.stale && r.message.position.x == 2.0);
    }

    #[test]
    fn never_received_is_error() {
        let bus = MeasurementBus::new(2);
        assert_eq!(bus.await_measurement(1, Duration::ZERO), Err(TransportError::NoMeasurement(1)));
    }
}
