//! Emulated time for live processes: wall-clock time divided by the time scale.

use std::time::Duration;

use tokio::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct EmuClock {
    epoch: Instant,
    time_scale: f64,
}

impl EmuClock {
    pub fn start(time_scale: f64) -> Self {
        assert!(time_scale > 0.0, "time scale must be positive");
        EmuClock {
            epoch: Instant::now(),
            time_scale,
        }
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    /// Emulated seconds since the clock started.
    pub fn now(&self) -> f64 {
        self.epoch.elapsed().as_secs_f64() / self.time_scale
    }

    pub fn wall(&self, emulated: f64) -> Duration {
        Duration::from_secs_f64((emulated * self.time_scale).max(0.0))
    }

    /// Wall instant at which the emulated clock reads `t`.
    pub fn instant_at(&self, t: f64) -> Instant {
        self.epoch + self.wall(t)
    }

    pub async fn sleep_until(&self, t: f64) {
        tokio::time::sleep_until(self.instant_at(t)).await;
    }

    pub async fn sleep(&self, emulated: f64) {
        tokio::time::sleep(self.wall(emulated)).await;
    }
}
