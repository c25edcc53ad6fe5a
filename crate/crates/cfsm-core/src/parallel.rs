//! Data-parallel helpers with a sequential fallback.
//!
//! Compiled with the `parallel` feature (default) these fan work out over a
//! rayon pool; without it, or after [`set_parallel_enabled`]`(false)`, they
//! run sequentially in the same order. Work is always partitioned into the
//! same chunks and partial results are combined in chunk order, so both lanes
//! produce bitwise-identical outputs — parallelism only changes wall time.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

static RUNTIME_ENABLED: AtomicBool = AtomicBool::new(true);
static ENV_DEFAULT: OnceLock<bool> = OnceLock::new();

/// Globally enables or disables the parallel lane at runtime (used by the
/// bench suite to compare lanes within one build).
pub fn set_parallel_enabled(enabled: bool) {
    RUNTIME_ENABLED.store(enabled, Ordering::Relaxed);
}

/// True when work may be fanned out over threads.
pub fn parallel_enabled() -> bool {
    if !cfg!(feature = "parallel") {
        return false;
    }
    let env_ok = *ENV_DEFAULT
        .get_or_init(|| std::env::var_os("CFSM_SEQUENTIAL").is_none_or(|v| v == "0"));
    env_ok && RUNTIME_ENABLED.load(Ordering::Relaxed)
}

/// Maps `f` over `items`, preserving order in the output.
pub fn map_vec<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel_enabled() {
            return items.into_par_iter().map(f).collect();
        }
    }
    items.into_iter().map(f).collect()
}

/// Runs `f` for each item; items must own disjoint outputs.
pub fn for_each_vec<T, F>(items: Vec<T>, f: F)
where
    T: Send,
    F: Fn(T) + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel_enabled() {
            items.into_par_iter().for_each(f);
            return;
        }
    }
    items.into_iter().for_each(f);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_vec_preserves_order() {
        let inputs: Vec<u64> = (0..257).collect();
        let out = map_vec(inputs.clone(), |x| x * x);
        let expect: Vec<u64> = inputs.iter().map(|x| x * x).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn lanes_produce_identical_results() {
        let inputs: Vec<f32> = (0..1000).map(|i| i as f32 * 0.37).collect();
        let was = parallel_enabled();
        set_parallel_enabled(true);
        let a = map_vec(inputs.clone(), |x| (x.sin() * 1e4).round());
        set_parallel_enabled(false);
        let b = map_vec(inputs, |x| (x.sin() * 1e4).round());
        set_parallel_enabled(was);
        assert_eq!(a, b);
    }
}
