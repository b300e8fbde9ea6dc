//! Process-wide threading switch.
//!
//! In single-threaded mode every kernel runs sequentially and results are
//! bitwise reproducible. In parallel mode the sparse product is split across
//! rows with rayon and dense products may use several BLAS threads.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Single,
    Auto,
}

#[cfg(feature = "openblas")]
extern "C" {
    fn openblas_set_num_threads(n: std::os::raw::c_int);
}

pub fn set_threads(mode: Threads) {
    PARALLEL.store(mode == Threads::Auto, Ordering::Relaxed);
    #[cfg(feature = "openblas")]
    {
        let n = match mode {
            Threads::Single => 1,
            Threads::Auto => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        };
        // SAFETY: plain setter on the OpenBLAS runtime; it takes no pointers.
        unsafe { openblas_set_num_threads(n as std::os::raw::c_int) };
    }
}

pub fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}
