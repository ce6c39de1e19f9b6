//! Time sources used by publishers, subscribers and the orchestrator.
//!
//! Two clocks are involved in every run. Embedded send timestamps and
//! receive stamps use the system real-time clock so that one-way latency can
//! be computed across process boundaries on a single host. Spans (throughput,
//! pacing) use the monotonic clock, which on Linux is shared by every process.

use std::time::Duration;

/// Final stretch before a deadline that is spent spinning instead of sleeping.
pub const SPIN_WINDOW_NS: u64 = 50_000;

pub trait Clock: Send + Sync {
    /// Nanoseconds since the UNIX epoch.
    fn wall_ns(&self) -> u64;

    /// Nanoseconds on a monotonic, host-wide clock.
    fn mono_ns(&self) -> u64;

    /// Block until `mono_ns() >= deadline_ns`.
    fn sleep_until(&self, deadline_ns: u64);

    fn sleep(&self, duration: Duration) {
        let deadline = self.mono_ns().saturating_add(duration.as_nanos() as u64);
        self.sleep_until(deadline);
    }
}

/// Real-time and `CLOCK_MONOTONIC` clocks of the host.
#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

fn read_clock(id: libc::clockid_t) -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and `id` is a clock the
    // kernel always provides.
    let rc = unsafe { libc::clock_gettime(id, &mut ts) };
    assert_eq!(rc, 0, "clock_gettime failed");
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

pub fn wall_now_ns() -> u64 {
    read_clock(libc::CLOCK_REALTIME)
}

pub fn mono_now_ns() -> u64 {
    read_clock(libc::CLOCK_MONOTONIC)
}

impl Clock for SystemClock {
    fn wall_ns(&self) -> u64 {
        wall_now_ns()
    }

    fn mono_ns(&self) -> u64 {
        mono_now_ns()
    }

    fn sleep_until(&self, deadline_ns: u64) {
        let now = mono_now_ns();
        if deadline_ns > now + SPIN_WINDOW_NS {
            std::thread::sleep(Duration::from_nanos(deadline_ns - now - SPIN_WINDOW_NS));
        }
        while mono_now_ns() < deadline_ns {
            std::hint::spin_loop();
        }
    }
}
