//! Complex FFT over `rustfft`, with plans cached per thread. Transforms are
//! unnormalised; the caller divides by `n` after an inverse transform.

use std::cell::RefCell;
use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub fn fft(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        PLANNER.with(|p| p.borrow_mut().plan_fft_forward(buf.len()).process(buf));
    }
}

pub fn ifft(buf: &mut [Complex64]) {
    if buf.len() > 1 {
        PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(buf.len()).process(buf));
    }
}

/// O(n^2) direct evaluation of the forward transform. Reference only.
pub fn dft_direct(x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, v)| {
                    let ang = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    v * Complex64::from_polar(1.0, ang)
                })
                .sum()
        })
        .collect()
}
