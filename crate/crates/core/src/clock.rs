//! Time sources. Simulated and wall-clock runs share the device code path
//! and differ only in the clock they hand it.

use std::time::{Duration, Instant};

pub trait Clock {
    /// Seconds since the clock's origin.
    fn now(&self) -> f64;
    /// Accounts for `dt` seconds of local computation.
    fn spend(&mut self, dt: f64);
    /// Idles until `t`; no-op if `t` is already past.
    fn wait_until(&mut self, t: f64);
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SimClock {
    now: f64,
}

impl SimClock {
    pub fn new(start: f64) -> Self {
        Self { now: start }
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        self.now
    }

    fn spend(&mut self, dt: f64) {
        self.now += dt.max(0.0);
    }

    fn wait_until(&mut self, t: f64) {
        if t > self.now {
            self.now = t;
        }
    }
}

/// Real time. With `emulate_compute`, `spend` sleeps so that toy models
/// take as long as the device cost model says.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
    emulate_compute: bool,
}

impl WallClock {
    pub fn new(emulate_compute: bool) -> Self {
        Self {
            origin: Instant::now(),
            emulate_compute,
        }
    }
}

impl Clock for WallClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    fn spend(&mut self, dt: f64) {
        if self.emulate_compute && dt > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(dt));
        }
    }

    fn wait_until(&mut self, t: f64) {
        let now = self.now();
        if t > now {
            std::thread::sleep(Duration::from_secs_f64(t - now));
        }
    }
}
