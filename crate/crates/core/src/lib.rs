//! Physics-embedded spectral operator for electric-vehicle parameter
//! identification and battery-power prediction.
//!
//! The library ingests speed/voltage/current drive logs, estimates
//! time-varying physical parameters (motor and regenerative-braking
//! efficiency, drag, rolling resistance, effective mass, auxiliary power)
//! with a 1-D spectral neural operator, and predicts battery power through
//! a differentiable longitudinal-dynamics model embedded in the forward
//! pass.
//!
//! Module map:
//! - [`tensor`], [`fft`]: minimal f64 autodiff and real-input FFT
//! - [`signal`]: Savitzky–Golay smoothing/derivative, band-limited resampling
//! - [`dataset`]: log ingestion, windowing, standardization, splits
//! - [`physics`]: the differentiable vehicle power model
//! - [`operator`]: lift + spectral blocks + parameter heads
//! - [`training`]: hybrid loss, Adam, two-stage loop
//! - [`evaluation`]: metrics, Welch PSD, resolution harness
//! - [`synth`]: synthetic log generation with an independent oracle

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fft;
pub mod gradcheck;
mod fastmath;
mod linalg;
pub mod operator;
pub mod physics;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{no_grad, Parameter, Tensor};

/// Initializes the global worker pool from the `EVPINO_THREADS`
/// environment variable. A no-op if the pool is already set up.
pub fn init_threads() {
    tune_allocator();
    if let Ok(v) = std::env::var("EVPINO_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

/// Keeps glibc from servicing the training loop's large short-lived
/// buffers with mmap/munmap round trips.
pub(crate) fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

/// Benchmark hook; not part of the public contract.
#[doc(hidden)]
pub fn bench_matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    linalg::matmul_acc(a, b, c, m, k, n);
}
