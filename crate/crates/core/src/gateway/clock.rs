use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};

/// An opaque start mark handed out by a [`Clock`].
#[derive(Debug, Clone, Copy)]
pub struct Mark(Option<Instant>);

/// Time source for query timing, timestamps and retry backoff.
pub trait Clock: Send + Sync {
    fn mark(&self) -> Mark;
    fn elapsed(&self, since: Mark) -> Duration;
    fn now(&self) -> DateTime<Utc>;
    fn sleep(&self, d: Duration);
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn mark(&self) -> Mark {
        Mark(Some(Instant::now()))
    }

    fn elapsed(&self, since: Mark) -> Duration {
        since.0.map_or(Duration::ZERO, |i| i.elapsed())
    }

    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Every measured interval lasts `step`, the wall clock never moves and
/// sleeps return immediately. Makes run logs reproducible byte for byte.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock {
    pub step: Duration,
    pub at: DateTime<Utc>,
}

impl FixedClock {
    pub fn new(step: Duration) -> Self {
        FixedClock {
            step,
            at: DateTime::<Utc>::UNIX_EPOCH,
        }
    }
}

impl Clock for FixedClock {
    fn mark(&self) -> Mark {
        Mark(None)
    }

    fn elapsed(&self, _since: Mark) -> Duration {
        self.step
    }

    fn now(&self) -> DateTime<Utc> {
        self.at
    }

    fn sleep(&self, _d: Duration) {}
}
