//! Data-parallel execution switch.
//!
//! Heavy kernels (convolution, matmul, the ablation suite) come in a
//! sequential and, with the `parallel` feature, a rayon-backed variant.
//! Both variants produce bit-identical results: parallel loops only split
//! work across disjoint output regions and every accumulation runs in a
//! fixed sequential order. The runtime toggle exists so benches and tests
//! can compare the two paths inside one binary.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static ENABLED: AtomicBool = AtomicBool::new(true);

/// Whether parallel kernels are active.
#[cfg(feature = "parallel")]
pub fn enabled() -> bool {
    ENABLED.load(Ordering::Relaxed)
}

/// Always false without the `parallel` feature.
#[cfg(not(feature = "parallel"))]
pub fn enabled() -> bool {
    false
}

/// Switch parallel kernels on or off at runtime. No-op without the feature.
pub fn set_enabled(on: bool) {
    #[cfg(feature = "parallel")]
    ENABLED.store(on, Ordering::Relaxed);
    #[cfg(not(feature = "parallel"))]
    let _ = on;
}

/// Number of worker threads the parallel path would use.
pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if enabled() {
            return rayon::current_num_threads();
        }
    }
    1
}
