//! Power-of-two FFTs: an iterative radix-2 complex transform and a real-input
//! transform built on a half-length complex transform.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::math::{cos, sin, TAU};
use crate::{Error, Result};

/// Radix-2 complex FFT of a fixed power-of-two length.
#[derive(Debug, Clone)]
pub struct Fft {
    n: usize,
    twiddles: Vec<Complex64>,
    rev: Vec<usize>,
}

impl Fft {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::param("fft_len", alloc::format!("{n} is not a power of two")));
        }
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -TAU * k as f64 / n as f64;
                Complex64::new(cos(a), sin(a))
            })
            .collect();
        let bits = n.trailing_zeros();
        let rev = (0..n)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self { n, twiddles, rev })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// In-place forward transform, `X_k = sum_n x_n e^{-2 pi i k n / N}`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, false);
    }

    /// In-place inverse transform without the `1/N` factor.
    pub fn inverse_unnormalized(&self, buf: &mut [Complex64]) {
        self.transform(buf, true);
    }

    fn transform(&self, buf: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(buf.len(), n, "fft buffer length");
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let mut w = self.twiddles[j * step];
                    if inverse {
                        w.im = -w.im;
                    }
                    let u = buf[start + j];
                    let v = buf[start + j + half] * w;
                    buf[start + j] = u + v;
                    buf[start + j + half] = u - v;
                }
            }
            len <<= 1;
        }
    }
}

/// Real-input FFT of even power-of-two length `n` producing `n/2 + 1` bins.
#[derive(Debug, Clone)]
pub struct RealFft {
    n: usize,
    half: Fft,
    twiddles: Vec<Complex64>,
}

impl RealFft {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::param("fft_len", alloc::format!("{n} is not a power of two >= 2")));
        }
        let half = Fft::new(n / 2)?;
        let twiddles = (0..n / 2)
            .map(|k| {
                let a = -TAU * k as f64 / n as f64;
                Complex64::new(cos(a), sin(a))
            })
            .collect();
        Ok(Self { n, half, twiddles })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bins(&self) -> usize {
        self.n / 2 + 1
    }

    pub fn scratch(&self) -> Vec<Complex64> {
        vec![Complex64::new(0.0, 0.0); self.n / 2]
    }

    /// Forward transform of `input` (length `n`) into `out` (length `n/2 + 1`).
    pub fn forward(&self, input: &[f64], out: &mut [Complex64], scratch: &mut [Complex64]) {
        let m = self.n / 2;
        assert_eq!(input.len(), self.n);
        assert_eq!(out.len(), m + 1);
        for (i, z) in scratch[..m].iter_mut().enumerate() {
            *z = Complex64::new(input[2 * i], input[2 * i + 1]);
        }
        self.half.forward(&mut scratch[..m]);
        for k in 0..=m {
            let zk = scratch[k % m];
            let zr = scratch[(m - k) % m].conj();
            let even = (zk + zr) * 0.5;
            let odd = (zk - zr) * Complex64::new(0.0, -0.5);
            let w = if k == m { Complex64::new(-1.0, 0.0) } else { self.twiddles[k] };
            out[k] = even + w * odd;
        }
    }

    /// Unnormalized inverse of a Hermitian spectrum given by its `n/2 + 1`
    /// non-negative-frequency bins: `x_n = sum_{k=0}^{N-1} X_k e^{2 pi i k n / N}`.
    /// Imaginary parts of the DC and Nyquist bins are ignored.
    pub fn inverse_unnormalized(&self, spec: &[Complex64], out: &mut [f64], scratch: &mut [Complex64]) {
        let m = self.n / 2;
        assert_eq!(spec.len(), m + 1);
        assert_eq!(out.len(), self.n);
        let dc = Complex64::new(spec[0].re, 0.0);
        let ny = Complex64::new(spec[m].re, 0.0);
        let bin = |k: usize| -> Complex64 {
            if k == 0 {
                dc
            } else if k == m {
                ny
            } else {
                spec[k]
            }
        };
        for (k, z) in scratch[..m].iter_mut().enumerate() {
            let xk = bin(k);
            let xr = bin(m - k).conj();
            let w = self.twiddles[k].conj();
            let even = xk + xr;
            let odd = (xk - xr) * w;
            *z = even + Complex64::new(0.0, 1.0) * odd;
        }
        self.half.inverse_unnormalized(&mut scratch[..m]);
        for (i, z) in scratch[..m].iter().enumerate() {
            out[2 * i] = z.re;
            out[2 * i + 1] = z.im;
        }
    }
}
