//! Arbitrary-length discrete Fourier transforms and circular convolution.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley–Tukey transform.
//! Every other length goes through Bluestein's chirp-z identity
//!
//! ```text
//! jk = (j² + k² − (k − j)²) / 2
//! ```
//!
//! which turns the length-n DFT into a linear convolution with the chirp
//! `w_j = exp(−iπ j²/n)`, evaluated with a power-of-two FFT of length
//! at least 2n − 1. Block vectors here are 33·33 = 1089 long, so this path
//! carries the circulant layers.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Vec<u32>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bitrev = (0..n as u32)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (32 - bits) })
            .collect();
        Radix2 { n, twiddles, bitrev }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bitrev[i] as usize;
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for j in 0..half {
                    let w = self.twiddles[j * stride];
                    let a = buf[start + j];
                    let b = buf[start + j + half] * w;
                    buf[start + j] = a + b;
                    buf[start + j + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

#[derive(Clone, Debug)]
struct Bluestein {
    chirp: Vec<Complex64>,
    /// Transform of the zero-padded, wrapped conjugate chirp.
    kernel: Vec<Complex64>,
    inner: Radix2,
}

impl Bluestein {
    fn new(n: usize) -> Self {
        let m = (2 * n - 1).next_power_of_two();
        let inner = Radix2::new(m);
        // j² mod 2n keeps the phase argument small and exact.
        let modulus = 2 * n as u128;
        let chirp: Vec<Complex64> = (0..n)
            .map(|j| {
                let jj = ((j as u128 * j as u128) % modulus) as f64;
                Complex64::from_polar(1.0, -PI * jj / n as f64)
            })
            .collect();
        let mut kernel = vec![Complex64::new(0.0, 0.0); m];
        kernel[0] = chirp[0].conj();
        for j in 1..n {
            kernel[j] = chirp[j].conj();
            kernel[m - j] = chirp[j].conj();
        }
        inner.forward(&mut kernel);
        Bluestein { chirp, kernel, inner }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.chirp.len();
        let m = self.inner.n;
        let mut work = vec![Complex64::new(0.0, 0.0); m];
        for j in 0..n {
            work[j] = buf[j] * self.chirp[j];
        }
        self.inner.forward(&mut work);
        for (w, k) in work.iter_mut().zip(&self.kernel) {
            *w *= k;
        }
        // Inverse via conjugation; the 1/m scale is folded into the output.
        for w in work.iter_mut() {
            *w = w.conj();
        }
        self.inner.forward(&mut work);
        let scale = 1.0 / m as f64;
        for k in 0..n {
            buf[k] = work[k].conj() * scale * self.chirp[k];
        }
    }
}

#[derive(Clone, Debug)]
enum Algorithm {
    Radix2(Radix2),
    Bluestein(Bluestein),
}

/// A precomputed transform of one length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    n: usize,
    algorithm: Algorithm,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "transform length must be positive");
        let algorithm = if n.is_power_of_two() {
            Algorithm::Radix2(Radix2::new(n))
        } else {
            Algorithm::Bluestein(Bluestein::new(n))
        };
        FftPlan { n, algorithm }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// In-place forward DFT, `X_k = Σ_j x_j exp(−2πi jk/n)`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.n, "buffer length differs from plan");
        match &self.algorithm {
            Algorithm::Radix2(p) => p.forward(buf),
            Algorithm::Bluestein(p) => p.forward(buf),
        }
    }

    /// In-place inverse DFT including the 1/n normalization.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        for v in buf.iter_mut() {
            *v = v.conj();
        }
        self.forward(buf);
        let scale = 1.0 / self.n as f64;
        for v in buf.iter_mut() {
            *v = v.conj() * scale;
        }
    }

    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Real part of the inverse transform of `spectrum`.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut spectrum);
        spectrum.into_iter().map(|c| c.re).collect()
    }

    /// `y = c ⊛ x` from precomputed spectra.
    pub fn convolve_spectra(&self, c_hat: &[Complex64], x_hat: &[Complex64]) -> Vec<f64> {
        let prod = c_hat.iter().zip(x_hat).map(|(a, b)| a * b).collect();
        self.inverse_real(prod)
    }

    /// `r[k] = Σ_i a[i]·b[(i − k) mod n]` from precomputed spectra.
    pub fn correlate_spectra(&self, a_hat: &[Complex64], b_hat: &[Complex64]) -> Vec<f64> {
        let prod = a_hat.iter().zip(b_hat).map(|(a, b)| a * b.conj()).collect();
        self.inverse_real(prod)
    }
}

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "circular operands differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::shape("circular operands are empty"));
    }
    Ok(())
}

/// `y[i] = Σ_j c[(i − j) mod n]·x[j]`, evaluated directly in O(n²).
pub fn circular_convolve_direct(c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_lengths(c, x)?;
    let n = c.len();
    Ok((0..n)
        .map(|i| (0..n).map(|j| c[(i + n - j) % n] * x[j]).sum::<f64>())
        .collect())
}

/// Circular convolution through the transform, `F⁻¹(F(c) ∘ F(x))`.
pub fn circular_convolve_fft(c: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_lengths(c, x)?;
    let plan = FftPlan::new(c.len());
    Ok(plan.convolve_spectra(&plan.forward_real(c), &plan.forward_real(x)))
}

/// Circular cross-correlation `r[k] = Σ_i a[i]·b[(i − k) mod n]`.
pub fn circular_correlate_fft(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_lengths(a, b)?;
    let plan = FftPlan::new(a.len());
    Ok(plan.correlate_spectra(&plan.forward_real(a), &plan.forward_real(b)))
}
