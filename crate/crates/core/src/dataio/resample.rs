use std::f64::consts::PI;

use super::record::EcgRecord;
use crate::error::{Error, Result};

/// Sinc zero crossings on each side of the filter centre.
const ZEROS: usize = 16;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(u: f64) -> f64 {
    // u in [-1, 1]
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let x = (u + 1.0) / 2.0;
    0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos()
}

/// Polyphase windowed-sinc resampler for the ratio `up / down`.
struct Polyphase {
    up: usize,
    down: usize,
    half: isize,
    /// `up` phases of `2 * half` taps, each normalized to unit DC gain.
    taps: Vec<Vec<f64>>,
}

impl Polyphase {
    fn new(up: usize, down: usize) -> Self {
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half = (ZEROS as f64 / cutoff).ceil() as isize;
        let width = half as f64;
        let taps = (0..up)
            .map(|phase| {
                let frac = phase as f64 / up as f64;
                let mut h: Vec<f64> = (-half + 1..=half)
                    .map(|k| {
                        let x = k as f64 - frac;
                        cutoff * sinc(cutoff * x) * blackman(x / width)
                    })
                    .collect();
                let s: f64 = h.iter().sum();
                h.iter_mut().for_each(|v| *v /= s);
                h
            })
            .collect();
        Polyphase {
            up,
            down,
            half,
            taps,
        }
    }

    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n = x.len() as isize;
        (0..out_len)
            .map(|j| {
                let pos = j * self.down;
                let base = (pos / self.up) as isize;
                let h = &self.taps[pos % self.up];
                h.iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let idx = (base - self.half + 1 + i as isize).clamp(0, n - 1);
                        w * x[idx as usize]
                    })
                    .sum()
            })
            .collect()
    }
}

/// Resamples every lead to `target_hz`, with anti-aliasing when downsampling.
/// Output length is `round(samples * target_hz / sampling_rate)`; samples
/// beyond the record edges are taken as the nearest edge value.
pub fn resample(record: &EcgRecord, target_hz: u32) -> Result<EcgRecord> {
    if target_hz == 0 {
        return Err(Error::InvalidParameter("target rate must be positive".into()));
    }
    let src = record.sampling_rate();
    if src == target_hz {
        return Ok(record.clone());
    }
    let g = gcd(u64::from(src), u64::from(target_hz));
    let up = (u64::from(target_hz) / g) as usize;
    let down = (u64::from(src) / g) as usize;
    let n = record.n_samples();
    let out_len = ((n as f64) * f64::from(target_hz) / f64::from(src)).round() as usize;
    if out_len == 0 {
        return Err(Error::InvalidParameter(format!(
            "record `{}` is too short to resample to {target_hz} Hz",
            record.record_id()
        )));
    }
    let filter = Polyphase::new(up, down);
    let signal = (0..record.n_leads())
        .flat_map(|l| filter.apply(record.lead(l), out_len))
        .collect();
    Ok(record.with_signal(target_hz, signal))
}
