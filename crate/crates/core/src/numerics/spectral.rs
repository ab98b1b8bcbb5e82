//! Token-axis frequency filtering.
//!
//! The discrete Fourier transform is evaluated with an iterative radix-2
//! Cooley-Tukey pass when the length is a power of two and by direct
//! summation otherwise.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::Tensor;
use crate::error::{Error, Result};

/// In-place DFT. The inverse transform includes the `1/n` normalization.
pub fn dft_in_place(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        direct(buf, inverse);
    }
    if inverse {
        let k = 1.0 / n as f64;
        buf.iter_mut().for_each(|v| *v *= k);
    }
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = Complex64::from_polar(1.0, ang * k as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn direct(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    let twiddle: Vec<Complex64> = (0..n)
        .map(|m| Complex64::from_polar(1.0, sign * 2.0 * PI * m as f64 / n as f64))
        .collect();
    let src = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (j, &v) in src.iter().enumerate() {
            acc += v * twiddle[(j * k) % n];
        }
        *out = acc;
    }
}

/// Filters `x: [..., N, C]` along the token axis `N`: per channel, forward
/// DFT, multiply by `filter`, inverse DFT, keep the real part.
pub fn spectral_filter(x: &Tensor, filter: &[Complex64]) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::invalid(format!(
            "spectral_filter needs [..., N, C], got {:?}",
            x.shape()
        )));
    }
    let s = x.shape();
    let (n, c) = (s[s.len() - 2], s[s.len() - 1]);
    if filter.len() != n {
        return Err(Error::shape("spectral_filter", s, &[filter.len()]));
    }
    let batch = x.numel() / (n * c);
    let mut out = Tensor::zeros(s);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let (src, dst) = (x.data(), out.data_mut());
    for b in 0..batch {
        let base = b * n * c;
        for ch in 0..c {
            for (t, slot) in buf.iter_mut().enumerate() {
                *slot = Complex64::new(src[base + t * c + ch], 0.0);
            }
            dft_in_place(&mut buf, false);
            for (v, f) in buf.iter_mut().zip(filter) {
                *v *= f;
            }
            dft_in_place(&mut buf, true);
            for (t, v) in buf.iter().enumerate() {
                dst[base + t * c + ch] = v.re;
            }
        }
    }
    Ok(out)
}
