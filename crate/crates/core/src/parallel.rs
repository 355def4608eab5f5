//! Worker-thread cap shared by the convolution kernels.
//!
//! Work is split over independent output planes only, so results do not
//! depend on the thread count.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;

static THREADS: AtomicUsize = AtomicUsize::new(0);

/// Environment variable read on first use.
pub const THREADS_ENV: &str = "GSF_THREADS";

pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    match THREADS.load(Ordering::Relaxed) {
        0 => {
            let available = thread::available_parallelism().map_or(1, |n| n.get());
            let n = std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .map_or(available, |cap| cap.clamp(1, available.max(1)));
            THREADS.store(n, Ordering::Relaxed);
            n
        }
        n => n,
    }
}

/// Calls `f(plane_index, plane)` for each `plane_len`-sized chunk of `out`.
pub(crate) fn for_each_plane<T, F>(out: &mut [T], plane_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    if plane_len == 0 {
        return;
    }
    let planes = out.len() / plane_len;
    let workers = threads().min(planes);
    // Small jobs are not worth a spawn.
    if workers <= 1 || out.len() < 4096 {
        for (i, chunk) in out.chunks_mut(plane_len).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let per_worker = planes.div_ceil(workers);
    thread::scope(|scope| {
        for (w, block) in out.chunks_mut(per_worker * plane_len).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (i, chunk) in block.chunks_mut(plane_len).enumerate() {
                    f(w * per_worker + i, chunk);
                }
            });
        }
    });
}
