//! Complex FFT plans over power-of-two lengths.
//!
//! Callers zero-pad with [`next_pow2`].

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub fn next_pow2(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// Forward and inverse transforms for one length.
#[derive(Clone)]
pub struct FftPlan {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FftPlan").field("n", &self.n).finish()
    }
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
        let mut planner = FftPlanner::new();
        FftPlan {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place unnormalized forward transform, `X_k = Σ x_j e^{-2πijk/n}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        self.fwd.process(buf);
    }

    /// In-place inverse transform including the `1/n` factor.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length does not match plan");
        self.inv.process(buf);
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

/// Forward transform of `x` zero-padded to `n` (a power of two).
pub fn fft(x: &[Complex64], n: usize) -> Vec<Complex64> {
    let plan = FftPlan::new(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let m = x.len().min(n);
    buf[..m].copy_from_slice(&x[..m]);
    plan.forward(&mut buf);
    buf
}

/// Inverse transform of `x` zero-padded to `n` (a power of two).
pub fn ifft(x: &[Complex64], n: usize) -> Vec<Complex64> {
    let plan = FftPlan::new(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let m = x.len().min(n);
    buf[..m].copy_from_slice(&x[..m]);
    plan.inverse(&mut buf);
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft(x: &[Complex64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter().enumerate().fold(Complex64::new(0.0, 0.0), |acc, (j, &v)| {
                    let ang = -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64;
                    acc + v * Complex64::from_polar(1.0, ang)
                })
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 4, 16, 64] {
            let x: Vec<_> = (0..n)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let fast = fft(&x, n);
            let slow = naive_dft(&x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).norm() < 1e-10, "n={n}");
            }
        }
    }

    #[test]
    fn round_trip_length_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<_> = (0..256)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), 0.0))
            .collect();
        let back = ifft(&fft(&x, 256), 256);
        let err = x
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "round-trip error {err}");
    }

    #[test]
    fn zero_pads_short_input() {
        let x = [Complex64::new(1.0, 0.0)];
        let spec = fft(&x, 8);
        assert!(spec.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
    }
}
