//! Real-input discrete Fourier transform as dense matrix products.
//!
//! The transform length is small (32 for every time-embedding config), so an
//! `O(G^2)` product is cheap and keeps the result independent of any FFT
//! factorization. Angles are reduced as `(g * j) mod G` before the cosine so
//! large products do not lose precision.

use std::f64::consts::TAU;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Half spectrum of a real signal: bins `0..=G/2` along the last axis.
#[derive(Clone, Debug)]
pub struct ComplexSpectrum<T: Scalar = f32> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
    pub original_length: usize,
}

/// Forward and inverse transform matrices for one length.
#[derive(Clone, Debug)]
pub struct DftMatrices<T: Scalar = f32> {
    len: usize,
    /// `(G, G/2+1)`: `x @ fwd_re` is the real part of the spectrum.
    fwd_re: Tensor<T>,
    fwd_im: Tensor<T>,
    /// `(G/2+1, G)`: `re @ inv_re + im @ inv_im` is the inverse.
    inv_re: Tensor<T>,
    inv_im: Tensor<T>,
}

impl<T: Scalar> DftMatrices<T> {
    pub fn new(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::dim("dft", format!("length must be >= 2, got {len}")));
        }
        let bins = len / 2 + 1;
        let angle = |g: usize, j: usize| TAU * ((g * j) % len) as f64 / len as f64;
        let fwd_re = Tensor::from_fn(&[len, bins], |i| T::of(angle(i % bins, i / bins).cos()));
        let fwd_im = Tensor::from_fn(&[len, bins], |i| T::of(-angle(i % bins, i / bins).sin()));
        let weight = |g: usize| {
            let edge = g == 0 || (len.is_multiple_of(2) && g == len / 2);
            if edge { 1.0 } else { 2.0 }
        };
        let inv_re = Tensor::from_fn(&[bins, len], |i| {
            let (g, j) = (i / len, i % len);
            T::of(weight(g) * angle(g, j).cos() / len as f64)
        });
        let inv_im = Tensor::from_fn(&[bins, len], |i| {
            let (g, j) = (i / len, i % len);
            T::of(-weight(g) * angle(g, j).sin() / len as f64)
        });
        Ok(Self {
            len,
            fwd_re,
            fwd_im,
            inv_re,
            inv_im,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// Differentiable forward transform of the last axis: `(real, imag)`.
    pub fn forward(&self, tape: &Tape<T>, x: Var) -> Result<(Var, Var)> {
        self.check_len(*tape.shape(x).last().unwrap_or(&0), "dft")?;
        let re = tape.constant(self.fwd_re.clone());
        let im = tape.constant(self.fwd_im.clone());
        Ok((tape.matmul(x, re)?, tape.matmul(x, im)?))
    }

    /// Differentiable inverse of [`DftMatrices::forward`].
    pub fn inverse(&self, tape: &Tape<T>, re: Var, im: Var) -> Result<Var> {
        let bins = *tape.shape(re).last().unwrap_or(&0);
        if bins != self.bins() || tape.shape(im) != tape.shape(re) {
            return Err(Error::dim(
                "idft",
                format!(
                    "spectrum shapes {:?}/{:?} do not match length {}",
                    tape.shape(re),
                    tape.shape(im),
                    self.len
                ),
            ));
        }
        let ar = tape.constant(self.inv_re.clone());
        let ai = tape.constant(self.inv_im.clone());
        let a = tape.matmul(re, ar)?;
        let b = tape.matmul(im, ai)?;
        tape.add(a, b)
    }

    fn check_len(&self, got: usize, op: &'static str) -> Result<()> {
        if got != self.len {
            return Err(Error::dim(
                op,
                format!("last axis {got} does not match transform length {}", self.len),
            ));
        }
        Ok(())
    }
}

/// Forward transform of the last axis of `x`.
pub fn dft_real<T: Scalar>(x: &Tensor<T>) -> Result<ComplexSpectrum<T>> {
    let len = *x.shape().last().ok_or_else(|| Error::dim("dft", "scalar input"))?;
    let mats = DftMatrices::<T>::new(len)?;
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().unwrap() = mats.bins();
    let tape = Tape::new();
    let v = tape.constant(x.clone().reshape(&[x.numel() / len, len])?);
    let (re, im) = mats.forward(&tape, v)?;
    Ok(ComplexSpectrum {
        real: (*tape.value(re)).clone().reshape(&out_shape)?,
        imag: (*tape.value(im)).clone().reshape(&out_shape)?,
        original_length: len,
    })
}

/// Inverse of [`dft_real`]; `len` must equal the spectrum's original length.
pub fn idft_real<T: Scalar>(s: &ComplexSpectrum<T>, len: usize) -> Result<Tensor<T>> {
    if len != s.original_length {
        return Err(Error::dim(
            "idft",
            format!("requested length {len}, spectrum came from length {}", s.original_length),
        ));
    }
    let mats = DftMatrices::<T>::new(len)?;
    let bins = mats.bins();
    if s.real.shape().last() != Some(&bins) || s.real.shape() != s.imag.shape() {
        return Err(Error::dim(
            "idft",
            format!("spectrum shapes {:?}/{:?} for length {len}", s.real.shape(), s.imag.shape()),
        ));
    }
    let rows = s.real.numel() / bins;
    let mut out_shape = s.real.shape().to_vec();
    *out_shape.last_mut().unwrap() = len;
    let tape = Tape::new();
    let re = tape.constant(s.real.clone().reshape(&[rows, bins])?);
    let im = tape.constant(s.imag.clone().reshape(&[rows, bins])?);
    let out = mats.inverse(&tape, re, im)?;
    (*tape.value(out)).clone().reshape(&out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn naive(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = x.len();
        let mut re = vec![0.0; g / 2 + 1];
        let mut im = vec![0.0; g / 2 + 1];
        for k in 0..=g / 2 {
            for (j, &v) in x.iter().enumerate() {
                let a = -TAU * (k * j) as f64 / g as f64;
                re[k] += v * a.cos();
                im[k] += v * a.sin();
            }
        }
        (re, im)
    }

    #[test]
    fn constant_signal_is_dc_only() {
        let x = Tensor::<f64>::full(&[32], 0.75);
        let s = dft_real(&x).unwrap();
        assert!((s.real.data()[0] - 24.0).abs() < 1e-12);
        for k in 1..17 {
            assert!(s.real.data()[k].abs() < 1e-12);
            assert!(s.imag.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn single_cosine_lands_in_bin_one() {
        let x = Tensor::<f64>::from_fn(&[32], |j| (TAU * j as f64 / 32.0).cos());
        let s = dft_real(&x).unwrap();
        assert!((s.real.data()[1] - 16.0).abs() < 1e-12);
        for k in 0..17 {
            if k != 1 {
                assert!(s.real.data()[k].abs() < 1e-12);
            }
            assert!(s.imag.data()[k].abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = Rng::new(17);
        let x = Tensor::<f32>::randn(&[32], &mut rng);
        let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
        let (re, im) = naive(&xd);
        let s = dft_real(&x).unwrap();
        for k in 0..17 {
            assert!((s.real.data()[k] as f64 - re[k]).abs() <= 1e-5);
            assert!((s.imag.data()[k] as f64 - im[k]).abs() <= 1e-5);
        }
    }

    #[test]
    fn round_trip_recovers_signal() {
        let mut rng = Rng::new(4);
        let x = Tensor::<f32>::randn(&[3, 32], &mut rng);
        let back = idft_real(&dft_real(&x).unwrap(), 32).unwrap();
        assert!(back.max_abs_diff(&x) <= 1e-5);
    }

    #[test]
    fn zero_spectrum_is_zero_signal() {
        let s = ComplexSpectrum {
            real: Tensor::<f64>::zeros(&[17]),
            imag: Tensor::zeros(&[17]),
            original_length: 32,
        };
        assert!(idft_real(&s, 32).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_bin_inverse_closed_form() {
        let (a, b) = (0.7, -1.3);
        let mut real = Tensor::<f64>::zeros(&[17]);
        let mut imag = Tensor::<f64>::zeros(&[17]);
        real.data_mut()[1] = a;
        imag.data_mut()[1] = b;
        let s = ComplexSpectrum {
            real,
            imag,
            original_length: 32,
        };
        let x = idft_real(&s, 32).unwrap();
        for j in 0..32 {
            let th = TAU * j as f64 / 32.0;
            let expected = 2.0 / 32.0 * (a * th.cos() - b * th.sin());
            assert!((x.data()[j] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let s = dft_real(&Tensor::<f64>::ones(&[8])).unwrap();
        assert!(idft_real(&s, 16).is_err());
        assert!(DftMatrices::<f64>::new(1).is_err());
    }

    #[test]
    fn real_input_edge_bins_have_zero_imaginary_part() {
        let mut rng = Rng::new(8);
        let x = Tensor::<f64>::randn(&[32], &mut rng);
        let s = dft_real(&x).unwrap();
        assert!(s.imag.data()[0].abs() < 1e-12);
        assert!(s.imag.data()[16].abs() < 1e-12);
    }
}
