//! Scalar-versus-oracle benchmark: wall time and transient allocation of
//! posterior + KL evaluation as the vocabulary grows.
//!
//! Allocation is measured by [`CountingAllocator`], which a binary or test
//! target must register:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: xdlm_core::bench::CountingAllocator = xdlm_core::bench::CountingAllocator;
//! ```
//!
//! Counters are per thread, so concurrent work on other threads does not leak
//! into a measurement.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::oracle::{kl_matrix, max_abs_diff, posterior_matrix, MAX_ORACLE_VOCAB};
use crate::scalar::{Dist, DEFAULT_EPS_LOG};
use crate::verify::{random_instance, Instance, KL_TOL, POSTERIOR_TOL};
use crate::{Error, Result};

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Wraps the system allocator with per-thread live and peak byte counters.
pub struct CountingAllocator;

fn on_alloc(size: usize) {
    let _ = CURRENT.try_with(|c| {
        let now = c.get() + size;
        c.set(now);
        let _ = PEAK.try_with(|p| p.set(p.get().max(now)));
    });
}

fn on_dealloc(size: usize) {
    let _ = CURRENT.try_with(|c| c.set(c.get().saturating_sub(size)));
}

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            on_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        on_dealloc(layout.size());
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            on_dealloc(layout.size());
            on_alloc(new_size);
        }
        p
    }
}

/// Live bytes allocated by this thread, as seen by [`CountingAllocator`].
pub fn live_bytes() -> usize {
    CURRENT.with(Cell::get)
}

/// Whether [`CountingAllocator`] is the registered global allocator.
pub fn allocator_installed() -> bool {
    let before = live_bytes();
    let probe = black_box(vec![0u8; 4096]);
    let during = live_bytes();
    drop(probe);
    during >= before + 4096
}

/// Runs `f` and returns its result with the peak number of bytes it held
/// above the live total at entry.
pub fn measure_transient<T>(f: impl FnOnce() -> T) -> (T, usize) {
    let base = live_bytes();
    PEAK.with(|p| p.set(base));
    let out = f();
    let peak = PEAK.with(Cell::get);
    (out, peak.saturating_sub(base))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Implementation {
    Scalar,
    Oracle,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub implementation: Implementation,
    pub n: usize,
    /// Seconds per 10^4 posterior + KL evaluations, averaged over the timed reps.
    pub secs_per_1e4_mean: f64,
    pub secs_per_1e4_min: f64,
    /// Largest transient allocation of a single evaluation.
    pub peak_transient_bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub batch: usize,
    pub reps: usize,
    pub warmup: usize,
    pub allocator_instrumented: bool,
    pub gate_passed: bool,
    pub gate_max_posterior_error: f64,
    pub gate_max_kl_error: f64,
    /// Empty when the correctness gate fails.
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, implementation: Implementation, n: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.implementation == implementation && r.n == n)
    }

    /// Least-squares slope of `ln(peak bytes)` against `ln(N)`.
    pub fn allocation_slope(&self, implementation: Implementation) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.implementation == implementation && r.peak_transient_bytes > 0)
            .map(|r| ((r.n as f64).ln(), (r.peak_transient_bytes as f64).ln()))
            .collect();
        loglog_slope(&pts)
    }

    /// Scalar over oracle mean wall time at `n`.
    pub fn time_ratio(&self, n: usize) -> Option<f64> {
        let s = self.row(Implementation::Scalar, n)?;
        let o = self.row(Implementation::Oracle, n)?;
        Some(s.secs_per_1e4_mean / o.secs_per_1e4_mean)
    }

    /// Plain-text table.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>6} {:>16} {:>16} {:>14}\n",
            "impl", "N", "s/1e4 mean", "s/1e4 min", "peak bytes"
        );
        for r in &self.rows {
            let name = match r.implementation {
                Implementation::Scalar => "scalar",
                Implementation::Oracle => "oracle",
            };
            out += &format!(
                "{:<8} {:>6} {:>16.6} {:>16.6} {:>14}\n",
                name, r.n, r.secs_per_1e4_mean, r.secs_per_1e4_min, r.peak_transient_bytes
            );
        }
        out
    }
}

pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn probes(n: usize, batch: usize, seed: u64) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
    (0..batch)
        .map(|_| random_instance(&mut rng, n..=n, &[0.1]))
        .collect()
}

fn eval_scalar(inst: &Instance) -> Result<f64> {
    let x = Dist::Probs(&inst.x);
    let post = inst.ctx.posterior(inst.s, inst.t, inst.zt, x)?;
    let kl = inst
        .ctx
        .kl_scalar(inst.s, inst.t, inst.zt, x, &inst.x_pred)?;
    Ok(post.probs()[inst.zt] + kl)
}

fn eval_oracle(inst: &Instance) -> Result<f64> {
    let (k, sch) = (&inst.ctx.kernel, &inst.ctx.schedule);
    let x = Dist::Probs(&inst.x);
    let post = posterior_matrix(k, sch, inst.s, inst.t, inst.zt, x)?;
    let kl = kl_matrix(
        k,
        sch,
        inst.s,
        inst.t,
        inst.zt,
        x,
        inst.x_pred.probs(),
        DEFAULT_EPS_LOG,
    )?;
    Ok(post.probs[inst.zt] + kl)
}

/// Largest posterior and KL disagreement between the two paths on `probes`.
fn gate(probes: &[Instance]) -> Result<(f64, f64)> {
    let mut worst = (0.0f64, 0.0f64);
    for inst in probes {
        let (k, sch) = (&inst.ctx.kernel, &inst.ctx.schedule);
        let x = Dist::Probs(&inst.x);
        let a = inst.ctx.posterior(inst.s, inst.t, inst.zt, x)?;
        let b = posterior_matrix(k, sch, inst.s, inst.t, inst.zt, x)?;
        let kl_a = inst
            .ctx
            .kl_scalar(inst.s, inst.t, inst.zt, x, &inst.x_pred)?;
        let kl_b = kl_matrix(
            k,
            sch,
            inst.s,
            inst.t,
            inst.zt,
            x,
            inst.x_pred.probs(),
            DEFAULT_EPS_LOG,
        )?;
        worst.0 = worst.0.max(max_abs_diff(a.probs(), &b.probs));
        worst.1 = worst.1.max((kl_a - kl_b).abs());
    }
    Ok(worst)
}

fn time_impl(
    implementation: Implementation,
    n: usize,
    probes: &[Instance],
    reps: usize,
) -> Result<BenchRow> {
    let eval = match implementation {
        Implementation::Scalar => eval_scalar,
        Implementation::Oracle => eval_oracle,
    };
    let mut peak = 0;
    for inst in probes {
        let (r, bytes) = measure_transient(|| eval(inst));
        black_box(r?);
        peak = peak.max(bytes);
    }
    let mut times = Vec::with_capacity(reps);
    for rep in 0..=reps {
        let start = Instant::now();
        for inst in probes {
            black_box(eval(black_box(inst))?);
        }
        let per_1e4 = start.elapsed().as_secs_f64() / probes.len() as f64 * 1e4;
        // rep 0 is the warmup
        if rep > 0 {
            times.push(per_1e4);
        }
    }
    Ok(BenchRow {
        implementation,
        n,
        secs_per_1e4_mean: times.iter().sum::<f64>() / times.len() as f64,
        secs_per_1e4_min: times.iter().copied().fold(f64::INFINITY, f64::min),
        peak_transient_bytes: peak,
    })
}

/// Times scalar and oracle evaluation for every `N` in `sizes`.
///
/// A probe set of `batch` instances per size is checked first; if any
/// posterior or KL disagrees beyond tolerance no timings are taken.
pub fn run_bench(sizes: &[usize], batch: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if sizes.is_empty() || batch == 0 {
        return Err(Error::Empty("benchmark sizes or batch"));
    }
    if reps < 5 {
        return Err(Error::Domain(format!(
            "at least 5 timed repetitions are required, got {reps}"
        )));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n < 2 || n > MAX_ORACLE_VOCAB) {
        return Err(Error::Domain(format!(
            "benchmark size {n} is outside [2, {MAX_ORACLE_VOCAB}]"
        )));
    }
    let sets: Vec<Vec<Instance>> = sizes.iter().map(|&n| probes(n, batch, seed)).collect();
    let mut gate_err = (0.0f64, 0.0f64);
    for set in &sets {
        let (p, k) = gate(set)?;
        gate_err = (gate_err.0.max(p), gate_err.1.max(k));
    }
    let gate_passed = gate_err.0 <= POSTERIOR_TOL && gate_err.1 <= KL_TOL;
    let mut rows = Vec::new();
    if gate_passed {
        for (&n, set) in sizes.iter().zip(&sets) {
            for imp in [Implementation::Scalar, Implementation::Oracle] {
                rows.push(time_impl(imp, n, set, reps)?);
            }
        }
    }
    Ok(BenchReport {
        batch,
        reps,
        warmup: 1,
        allocator_instrumented: allocator_installed(),
        gate_passed,
        gate_max_posterior_error: gate_err.0,
        gate_max_kl_error: gate_err.1,
        rows,
    })
}
