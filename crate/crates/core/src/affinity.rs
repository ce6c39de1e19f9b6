//! Core pinning for publisher and subscriber execution units.
//!
//! Layout: the publisher runs on the first listed core and subscriber `i` on
//! core `1 + i`. The sampler stays unpinned. A core that cannot be used is
//! logged and the unit runs floating.

use std::io;
use std::mem;

pub const CORES_ENV: &str = "BROKERBENCH_CORES";

/// Parse a core list such as `2,3,4` or `2-5,8`.
pub fn parse_core_list(s: &str) -> Result<Vec<usize>, String> {
    let mut cores = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| format!("bad core range `{part}`"))?;
                let b: usize = b.trim().parse().map_err(|_| format!("bad core range `{part}`"))?;
                if b < a {
                    return Err(format!("empty core range `{part}`"));
                }
                cores.extend(a..=b);
            }
            None => cores.push(part.parse().map_err(|_| format!("bad core id `{part}`"))?),
        }
    }
    Ok(cores)
}

/// Cores from the environment, if set.
pub fn cores_from_env() -> Result<Option<Vec<usize>>, String> {
    match std::env::var(CORES_ENV) {
        Ok(v) if !v.trim().is_empty() => parse_core_list(&v).map(Some),
        _ => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorePlan {
    pub publisher: Option<usize>,
    pub subscribers: Vec<Option<usize>>,
}

impl CorePlan {
    /// An empty core list disables pinning.
    pub fn new(cores: &[usize], subscribers: usize) -> Result<Self, String> {
        if cores.is_empty() {
            return Ok(Self {
                publisher: None,
                subscribers: vec![None; subscribers],
            });
        }
        if cores.len() < subscribers + 1 {
            return Err(format!(
                "{} cores listed but {} are needed (1 publisher + {subscribers} subscribers)",
                cores.len(),
                subscribers + 1
            ));
        }
        Ok(Self {
            publisher: Some(cores[0]),
            subscribers: cores[1..=subscribers].iter().copied().map(Some).collect(),
        })
    }
}

fn cpu_set(core: usize) -> io::Result<libc::cpu_set_t> {
    if core >= libc::CPU_SETSIZE as usize {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("core {core} out of range")));
    }
    // SAFETY: cpu_set_t is plain bit storage; all-zero is the empty set, and
    // `core` was bounds-checked above.
    let mut set: libc::cpu_set_t = unsafe { mem::zeroed() };
    unsafe { libc::CPU_SET(core, &mut set) };
    Ok(set)
}

/// Pin the calling thread to `core`.
pub fn pin_current_thread(core: usize) -> io::Result<()> {
    let set = cpu_set(core)?;
    // SAFETY: pid 0 is the calling thread; `set` is a valid cpu_set_t.
    let rc = unsafe { libc::sched_setaffinity(0, mem::size_of::<libc::cpu_set_t>(), &set) };
    if rc != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Pin if a core is given; failure is logged, never fatal.
pub fn pin_or_warn(core: Option<usize>, who: &str) {
    if let Some(core) = core {
        if let Err(e) = pin_current_thread(core) {
            log::warn!("could not pin {who} to core {core}: {e}; running floating");
        }
    }
}

/// Cores this process may run on.
pub fn allowed_cores() -> Vec<usize> {
    // SAFETY: zeroed cpu_set_t is valid; the kernel fills it for pid 0.
    let mut set: libc::cpu_set_t = unsafe { mem::zeroed() };
    let rc = unsafe { libc::sched_getaffinity(0, mem::size_of::<libc::cpu_set_t>(), &mut set) };
    if rc != 0 {
        return vec![0];
    }
    (0..libc::CPU_SETSIZE as usize)
        .filter(|c| unsafe { libc::CPU_ISSET(*c, &set) })
        .collect()
}

/// Pin a child process to `core` between fork and exec.
#[cfg(unix)]
pub fn pin_child(command: &mut std::process::Command, core: usize) {
    use std::os::unix::process::CommandExt;
    let Ok(set) = cpu_set(core) else {
        log::warn!("core {core} out of range; child runs floating");
        return;
    };
    // SAFETY: the closure only calls the async-signal-safe sched_setaffinity
    // on a stack copy of the set.
    unsafe {
        command.pre_exec(move || {
            if libc::sched_setaffinity(0, mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                // Keep going unpinned, same as threads do.
            }
            Ok(())
        });
    }
}
