//! Time sources for event logs.
//!
//! All timestamps are seconds on a monotonic timeline starting at zero.
//! [`MonotonicClock`] follows real elapsed time; [`ModeledClock`] advances only
//! when work is charged to it, using a fixed [`CostModel`]. Injected delays
//! (network, server latency, re-prefill penalty) go through [`Clock::inject`]
//! so they land in the log without necessarily sleeping.

use std::sync::Mutex;
use std::time::{Duration, Instant};

/// Unit of local compute charged to a clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Work {
    Prefill { tokens: usize },
    DecodeStep,
    Router,
    /// Decode-stepping externally produced tokens into an existing cache.
    CacheExtend { tokens: usize },
}

pub trait Clock: Send + Sync {
    fn now(&self) -> f64;

    /// Accounts for local compute that just ran. Real clocks ignore this.
    fn charge(&self, work: Work);

    /// Adds a simulated delay of `seconds`.
    fn inject(&self, seconds: f64);

    /// Makes sure at least `min_duration` seconds have elapsed since `start`.
    fn settle(&self, start: f64, min_duration: f64) {
        let elapsed = self.now() - start;
        if elapsed < min_duration {
            self.inject(min_duration - elapsed);
        }
    }
}

/// Per-operation costs in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub prefill_base: f64,
    pub prefill_per_token: f64,
    pub decode_step: f64,
    pub router: f64,
}

impl Default for CostModel {
    /// Roughly a 0.5B model on a laptop CPU: ~4 tokens/s decode.
    fn default() -> Self {
        CostModel { prefill_base: 0.30, prefill_per_token: 0.002, decode_step: 0.28, router: 0.0005 }
    }
}

impl CostModel {
    pub fn zero() -> Self {
        CostModel { prefill_base: 0.0, prefill_per_token: 0.0, decode_step: 0.0, router: 0.0 }
    }

    pub fn cost(&self, work: Work) -> f64 {
        match work {
            Work::Prefill { tokens } => self.prefill_base + self.prefill_per_token * tokens as f64,
            Work::DecodeStep => self.decode_step,
            Work::Router => self.router,
            Work::CacheExtend { tokens } => self.decode_step * tokens as f64,
        }
    }
}

/// Deterministic simulated clock.
#[derive(Debug, Default)]
pub struct ModeledClock {
    model: CostModel,
    now: Mutex<f64>,
}

impl ModeledClock {
    pub fn new(model: CostModel) -> Self {
        ModeledClock { model, now: Mutex::new(0.0) }
    }

    pub fn model(&self) -> &CostModel {
        &self.model
    }

    fn advance(&self, seconds: f64) {
        if seconds > 0.0 {
            *self.now.lock().unwrap() += seconds;
        }
    }
}

impl Clock for ModeledClock {
    fn now(&self) -> f64 {
        *self.now.lock().unwrap()
    }

    fn charge(&self, work: Work) {
        self.advance(self.model.cost(work));
    }

    fn inject(&self, seconds: f64) {
        self.advance(seconds);
    }
}

/// Real elapsed time. Injected delays either sleep or shift an offset.
#[derive(Debug)]
pub struct MonotonicClock {
    origin: Instant,
    offset: Mutex<f64>,
    real_sleeps: bool,
}

impl MonotonicClock {
    pub fn new(real_sleeps: bool) -> Self {
        MonotonicClock { origin: Instant::now(), offset: Mutex::new(0.0), real_sleeps }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() + *self.offset.lock().unwrap()
    }

    fn charge(&self, _work: Work) {}

    fn inject(&self, seconds: f64) {
        if seconds <= 0.0 {
            return;
        }
        if self.real_sleeps {
            std::thread::sleep(Duration::from_secs_f64(seconds));
        } else {
            *self.offset.lock().unwrap() += seconds;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modeled_clock_sums_costs() {
        let c = ModeledClock::new(CostModel::default());
        c.charge(Work::Prefill { tokens: 10 });
        c.charge(Work::DecodeStep);
        c.inject(0.17);
        assert!((c.now() - (0.30 + 0.02 + 0.28 + 0.17)).abs() < 1e-12);
    }

    #[test]
    fn settle_tops_up_only_when_short() {
        let c = ModeledClock::new(CostModel::zero());
        c.settle(0.0, 1.07);
        assert!((c.now() - 1.07).abs() < 1e-12);
        c.settle(0.0, 0.5);
        assert!((c.now() - 1.07).abs() < 1e-12);
    }

    #[test]
    fn monotonic_clock_offsets_without_sleeping() {
        let c = MonotonicClock::new(false);
        let t0 = c.now();
        c.inject(100.0);
        assert!(c.now() - t0 >= 100.0);
        let a = c.now();
        assert!(c.now() >= a);
    }
}
