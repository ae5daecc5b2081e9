//! Wall and virtual time.
//!
//! Both modes read `tokio::time::Instant`. Virtual mode runs on a
//! current-thread runtime with the timer paused: time only moves when every
//! task is idle, and then jumps straight to the next timer deadline. Sleep
//! costs therefore show up in timestamps exactly, with no scheduling noise.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Duration;

use tokio::runtime::{Builder, Runtime};
use tokio::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClockKind {
    Wall,
    Virtual,
}

impl fmt::Display for ClockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClockKind::Wall => "wall",
            ClockKind::Virtual => "virtual",
        })
    }
}

impl FromStr for ClockKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "wall" => Ok(ClockKind::Wall),
            "virtual" => Ok(ClockKind::Virtual),
            other => Err(format!("unknown clock `{other}`")),
        }
    }
}

/// Time source measuring from a fixed origin.
#[derive(Clone, Copy, Debug)]
pub struct Clock {
    kind: ClockKind,
    origin: Instant,
}

impl Clock {
    /// Must be called inside the runtime the clock will be used with.
    pub fn start(kind: ClockKind) -> Self {
        Clock {
            kind,
            origin: Instant::now(),
        }
    }

    pub fn kind(&self) -> ClockKind {
        self.kind
    }

    pub fn now(&self) -> Duration {
        Instant::now().saturating_duration_since(self.origin)
    }

    pub async fn sleep(&self, d: Duration) {
        tokio::time::sleep(d).await
    }
}

/// Builds a runtime suited to `kind`.
pub fn build_runtime(kind: ClockKind) -> io::Result<Runtime> {
    match kind {
        ClockKind::Virtual => Builder::new_current_thread()
            .enable_time()
            .start_paused(true)
            .build(),
        ClockKind::Wall => Builder::new_multi_thread().enable_all().build(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_time_is_exact() {
        let rt = build_runtime(ClockKind::Virtual).unwrap();
        rt.block_on(async {
            let clock = Clock::start(ClockKind::Virtual);
            assert_eq!(clock.now(), Duration::ZERO);
            clock.sleep(Duration::from_millis(1500)).await;
            assert_eq!(clock.now(), Duration::from_millis(1500));
        });
    }

    #[test]
    fn parse_kind() {
        assert_eq!("virtual".parse::<ClockKind>(), Ok(ClockKind::Virtual));
        assert!("cpu".parse::<ClockKind>().is_err());
    }
}
