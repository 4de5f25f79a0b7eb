//! Iterative radix-2 FFT and the real-input half-spectrum transforms.
//!
//! A real signal of length `L = 2M` is packed into `M` complex samples
//! (even samples in the real part, odd samples in the imaginary part),
//! transformed with a length-`M` complex FFT and untangled into the
//! `M + 1` non-redundant bins.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::rc::Rc;

use num_complex::Complex64;

use super::Tensor;
use crate::error::{sizing, Result};

/// Half spectrum of a real signal: bins `0..=L/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    bins: Vec<Complex64>,
    original_length: usize,
}

impl ComplexSpectrum {
    pub fn new(bins: Vec<Complex64>, original_length: usize) -> Result<Self> {
        if original_length == 0 || bins.len() != original_length / 2 + 1 {
            return Err(sizing(format!(
                "spectrum of a length-{original_length} signal needs {} bins, got {}",
                original_length / 2 + 1,
                bins.len()
            )));
        }
        Ok(Self {
            bins,
            original_length,
        })
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn bins_mut(&mut self) -> &mut [Complex64] {
        &mut self.bins
    }

    pub fn original_length(&self) -> usize {
        self.original_length
    }
}

/// Precomputed tables for one transform length.
struct Plan {
    /// `e^{-2πij/M}` for `j < M/2` (complex stage twiddles).
    twiddles: Vec<Complex64>,
    /// `e^{-2πik/L}` for `k <= M` (real untangling).
    real_twiddles: Vec<Complex64>,
    bitrev: Vec<usize>,
}

impl Plan {
    fn new(len: usize) -> Self {
        let m = len / 2;
        let twiddles = (0..m / 2)
            .map(|j| Complex64::from_polar(1.0, -2.0 * PI * j as f64 / m as f64))
            .collect();
        let real_twiddles = (0..=m)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / len as f64))
            .collect();
        let bits = m.trailing_zeros();
        let bitrev = (0..m)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        Self {
            twiddles,
            real_twiddles,
            bitrev,
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<usize, Rc<Plan>>> = RefCell::new(HashMap::new());
}

fn plan_for(len: usize) -> Rc<Plan> {
    PLANS.with(|plans| {
        plans
            .borrow_mut()
            .entry(len)
            .or_insert_with(|| Rc::new(Plan::new(len)))
            .clone()
    })
}

fn check_len(len: usize) -> Result<()> {
    if len == 0 || !len.is_power_of_two() {
        return Err(sizing(format!(
            "FFT length must be a power of two, got {len}"
        )));
    }
    Ok(())
}

/// In-place complex FFT of length `plan.bitrev.len()`; `inverse` uses the
/// conjugate twiddles and does not rescale.
fn complex_fft(buf: &mut [Complex64], plan: &Plan, inverse: bool) {
    let n = buf.len();
    for i in 0..n {
        let j = plan.bitrev[i];
        if i < j {
            buf.swap(i, j);
        }
    }
    let mut half = 1;
    while half < n {
        let step = n / (2 * half);
        for start in (0..n).step_by(2 * half) {
            for j in 0..half {
                let w = plan.twiddles[j * step];
                let w = if inverse { w.conj() } else { w };
                let a = buf[start + j];
                let b = buf[start + j + half] * w;
                buf[start + j] = a + b;
                buf[start + j + half] = a - b;
            }
        }
        half *= 2;
    }
}

/// Forward real FFT of `x` into `out` (`x.len()/2 + 1` bins).
pub(crate) fn rfft_into(x: &[f64], out: &mut [Complex64]) {
    let len = x.len();
    if len == 1 {
        out[0] = Complex64::new(x[0], 0.0);
        return;
    }
    let m = len / 2;
    let plan = plan_for(len);
    let mut z: Vec<Complex64> = (0..m)
        .map(|i| Complex64::new(x[2 * i], x[2 * i + 1]))
        .collect();
    complex_fft(&mut z, &plan, false);
    for k in 0..=m {
        let zk = z[k % m];
        let zc = z[(m - k) % m].conj();
        let even = (zk + zc) * 0.5;
        let odd = (zk - zc) * Complex64::new(0.0, -0.5);
        out[k] = even + plan.real_twiddles[k] * odd;
    }
    out[0].im = 0.0;
    out[m].im = 0.0;
}

/// Inverse real FFT of a half spectrum into `out` (length `L`). The
/// imaginary parts of bin 0 and the Nyquist bin are ignored.
pub(crate) fn irfft_into(bins: &[Complex64], out: &mut [f64]) {
    let len = out.len();
    if len == 1 {
        out[0] = bins[0].re;
        return;
    }
    let m = len / 2;
    let plan = plan_for(len);
    let mut spec = bins.to_vec();
    spec[0].im = 0.0;
    spec[m].im = 0.0;
    let mut z: Vec<Complex64> = (0..m)
        .map(|k| {
            let xk = spec[k];
            let xc = spec[m - k].conj();
            let even = (xk + xc) * 0.5;
            let odd = (xk - xc) * 0.5 * plan.real_twiddles[k].conj();
            even + Complex64::new(0.0, 1.0) * odd
        })
        .collect();
    complex_fft(&mut z, &plan, true);
    let scale = 1.0 / m as f64;
    for (i, v) in z.iter().enumerate() {
        out[2 * i] = v.re * scale;
        out[2 * i + 1] = v.im * scale;
    }
}

/// Real-input FFT of a rank-1 tensor whose length is a power of two.
pub fn rfft(x: &Tensor) -> Result<ComplexSpectrum> {
    if x.rank() != 1 {
        return Err(sizing(format!(
            "rfft expects a rank-1 tensor, got {:?}",
            x.shape()
        )));
    }
    let len = x.numel();
    check_len(len)?;
    let mut bins = vec![Complex64::new(0.0, 0.0); len / 2 + 1];
    rfft_into(x.data(), &mut bins);
    Ok(ComplexSpectrum {
        bins,
        original_length: len,
    })
}

/// Inverse of [`rfft`].
pub fn irfft(s: &ComplexSpectrum) -> Result<Tensor> {
    let len = s.original_length;
    check_len(len)?;
    if s.bins.len() != len / 2 + 1 {
        return Err(sizing(
            "spectrum bin count does not match its original length",
        ));
    }
    let mut out = vec![0.0; len];
    irfft_into(&s.bins, &mut out);
    Tensor::new(vec![len], out)
}

pub(crate) fn require_pow2(len: usize) -> Result<()> {
    check_len(len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_has_flat_spectrum() {
        let s = rfft(&Tensor::from_vec(vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        for b in s.bins() {
            assert_eq!(*b, Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn constant_concentrates_in_dc() {
        let s = rfft(&Tensor::from_vec(vec![1.0; 4])).unwrap();
        assert_eq!(s.bins().len(), 3);
        assert!((s.bins()[0] - Complex64::new(4.0, 0.0)).norm() < 1e-15);
        assert!(s.bins()[1].norm() < 1e-15);
        assert!(s.bins()[2].norm() < 1e-15);
    }

    #[test]
    fn inverse_of_constant() {
        let s = ComplexSpectrum::new(
            vec![
                Complex64::new(4.0, 0.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
            4,
        )
        .unwrap();
        let x = irfft(&s).unwrap();
        for v in x.data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let err = rfft(&Tensor::from_vec(vec![0.0; 6])).unwrap_err();
        assert!(matches!(err, crate::Error::Sizing(_)));
    }

    #[test]
    fn rejects_bin_count_mismatch() {
        assert!(ComplexSpectrum::new(vec![Complex64::new(0.0, 0.0); 4], 4).is_err());
    }

    #[test]
    fn tiny_lengths() {
        let s = rfft(&Tensor::from_vec(vec![3.0])).unwrap();
        assert_eq!(s.bins(), &[Complex64::new(3.0, 0.0)]);
        let s = rfft(&Tensor::from_vec(vec![3.0, 1.0])).unwrap();
        assert_eq!(
            s.bins(),
            &[Complex64::new(4.0, 0.0), Complex64::new(2.0, 0.0)]
        );
        assert_eq!(irfft(&s).unwrap().data(), &[3.0, 1.0]);
    }
}
