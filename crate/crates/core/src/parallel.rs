//! Fixed-size rayon pools keyed by thread count and optional core mask.
//!
//! Kernels only use tensor parallelism inside a single call; the pool size
//! fixes the number of workers so results never depend on scheduling.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

type PoolKey = (usize, Option<Vec<usize>>);

fn pools() -> &'static Mutex<HashMap<PoolKey, Arc<ThreadPool>>> {
    static POOLS: OnceLock<Mutex<HashMap<PoolKey, Arc<ThreadPool>>>> = OnceLock::new();
    POOLS.get_or_init(Default::default)
}

fn pool(threads: usize, pin: Option<&[usize]>) -> Arc<ThreadPool> {
    let threads = threads.max(1);
    let key = (threads, pin.map(<[usize]>::to_vec));
    let mut map = pools().lock().unwrap_or_else(|e| e.into_inner());
    map.entry(key)
        .or_insert_with(|| {
            let mask = pin.map(<[usize]>::to_vec);
            let mut builder = ThreadPoolBuilder::new()
                .num_threads(threads)
                .thread_name(move |i| format!("convbench-{threads}-{i}"));
            if let Some(mask) = mask.filter(|m| !m.is_empty()) {
                builder = builder.start_handler(move |i| pin_current_thread(mask[i % mask.len()]));
            }
            Arc::new(builder.build().expect("thread pool"))
        })
        .clone()
}

/// Runs `f` on a pool of exactly `threads` workers. Calls made from inside a
/// pool of the same size run in place, so an outer pinned pool is kept.
pub fn install<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if rayon::current_thread_index().is_some() && rayon::current_num_threads() == threads.max(1) {
        return f();
    }
    pool(threads, None).install(f)
}

/// Like [`install`], pinning worker `i` to `mask[i % mask.len()]`.
pub fn install_pinned<R: Send>(threads: usize, mask: Option<&[usize]>, f: impl FnOnce() -> R + Send) -> R {
    match mask {
        Some(m) if !m.is_empty() => pool(threads, Some(m)).install(f),
        _ => install(threads, f),
    }
}

#[cfg(target_os = "linux")]
fn pin_current_thread(cpu: usize) {
    // SAFETY: cpu_set_t is plain data; CPU_SET bounds-checks against its size.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            eprintln!("warning: could not pin worker to cpu {cpu}");
        }
    }
}

#[cfg(not(target_os = "linux"))]
fn pin_current_thread(_cpu: usize) {}
