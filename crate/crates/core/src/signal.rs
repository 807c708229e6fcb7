//! Signal preprocessing: radix-2 FFT, one-sided magnitude spectra, linear
//! resampling, windowing and per-segment normalization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

/// Unified sample rate every segment is brought to before modeling.
pub const TARGET_RATE_HZ: f64 = 25_600.0;
/// Default segment window in samples (160 ms at 25.6 kHz).
pub const DEFAULT_WINDOW: usize = 4096;
/// Floor applied to the standard deviation in [`zscore`].
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn power(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(r, i)| r * r + i * i).sum()
    }

    pub fn magnitude(&self, k: usize) -> f64 {
        libm::hypot(self.re[k], self.im[k])
    }
}

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

/// In-place iterative radix-2 decimation-in-time transform.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let bits = n.trailing_zeros();
    if n > 1 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * PI / len as f64;
        for k in 0..half {
            // twiddles computed directly per index rather than by recurrence to
            // keep the error at the level of a single sin/cos
            let (s, c) = libm::sincos(step * k as f64);
            let mut start = 0;
            while start < n {
                let a = start + k;
                let b = a + half;
                let tr = re[b] * c - im[b] * s;
                let ti = re[b] * s + im[b] * c;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Forward DFT `X[k] = sum_t x[t] e^{-2 pi i k t / n}` of a real signal.
pub fn fft(x: &[f64]) -> Result<ComplexSpectrum> {
    check_pow2(x.len())?;
    let mut re = x.to_vec();
    let mut im = vec![0.0; x.len()];
    fft_in_place(&mut re, &mut im);
    let spec = ComplexSpectrum { re, im };
    debug_assert!({
        let e: f64 = x.iter().map(|v| v * v).sum();
        let p = spec.power() / x.len() as f64;
        (e - p).abs() <= 1e-9 * e.max(1e-300)
    });
    Ok(spec)
}

/// Forward transform of a complex sequence.
pub fn fft_complex(re: &[f64], im: &[f64]) -> Result<ComplexSpectrum> {
    check_pow2(re.len())?;
    if im.len() != re.len() {
        return Err(Error::shape("fft_complex", &[re.len()], &[im.len()]));
    }
    let mut r = re.to_vec();
    let mut i = im.to_vec();
    fft_in_place(&mut r, &mut i);
    Ok(ComplexSpectrum { re: r, im: i })
}

/// Inverse transform via conjugation: `ifft(X) = conj(fft(conj(X))) / n`.
pub fn ifft(spec: &ComplexSpectrum) -> Result<ComplexSpectrum> {
    let n = spec.len();
    let neg: Vec<f64> = spec.im.iter().map(|v| -v).collect();
    let mut out = fft_complex(&spec.re, &neg)?;
    let inv = 1.0 / n as f64;
    out.re.iter_mut().for_each(|v| *v *= inv);
    out.im.iter_mut().for_each(|v| *v *= -inv);
    Ok(out)
}

/// One-sided amplitude spectrum, bins `0..n/2`. Bins are scaled by `2/n`
/// (DC by `1/n`) so a unit-amplitude sinusoid reads 1.0 at its bin.
pub fn magnitude_spectrum(x: &[f64]) -> Result<Vec<f64>> {
    let spec = fft(x)?;
    let n = x.len();
    Ok((0..(n / 2).max(1))
        .map(|k| {
            let scale = if k == 0 { 1.0 } else { 2.0 } / n as f64;
            spec.magnitude(k) * scale
        })
        .collect())
}

/// Linear-interpolation resampling onto a grid at `to_hz`. Output length is
/// `floor(len * to_hz / from_hz)`.
pub fn resample(x: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if !(from_hz > 0.0 && to_hz > 0.0) || !from_hz.is_finite() || !to_hz.is_finite() {
        return Err(Error::Config(format!(
            "sample rates must be positive, got {from_hz} -> {to_hz}"
        )));
    }
    if from_hz == to_hz {
        return Ok(x.to_vec());
    }
    let n_out = libm::floor(x.len() as f64 * to_hz / from_hz) as usize;
    let ratio = from_hz / to_hz;
    let last = x.len().saturating_sub(1);
    Ok((0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = (libm::floor(pos) as usize).min(last);
            let frac = pos - j as f64;
            if j >= last || frac == 0.0 {
                x[j]
            } else {
                x[j] + frac * (x[j + 1] - x[j])
            }
        })
        .collect())
}

/// Frames of `window` samples at offsets `0, hop, 2*hop, ...`; a trailing
/// partial frame is dropped.
pub fn segment(x: &[f64], window: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if window == 0 || hop == 0 {
        return Err(Error::config("window and hop must be positive"));
    }
    if window > x.len() {
        return Ok(Vec::new());
    }
    Ok((0..=(x.len() - window) / hop)
        .map(|i| x[i * hop..i * hop + window].to_vec())
        .collect())
}

/// `(x - mean) / max(std, 1e-8)` with the population standard deviation.
pub fn zscore(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = libm::sqrt(var).max(STD_FLOOR);
    x.iter().map(|v| (v - mean) / std).collect()
}
