//! Radix-2 FFT and spectral derivatives on power-of-two grids.
//!
//! Grid sides are restricted to powers of two crate-wide, so a plain
//! iterative radix-2 transform covers every case without pulling a
//! std-only FFT dependency into the core.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    #[inline]
    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    #[inline]
    pub fn mul(self, o: Complex) -> Complex {
        Complex::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }

    #[inline]
    pub fn add(self, o: Complex) -> Complex {
        Complex::new(self.re + o.re, self.im + o.im)
    }

    #[inline]
    pub fn sub(self, o: Complex) -> Complex {
        Complex::new(self.re - o.re, self.im - o.im)
    }

    #[inline]
    pub fn scale(self, s: f64) -> Complex {
        Complex::new(self.re * s, self.im * s)
    }
}

/// In-place iterative Cooley-Tukey transform. `inverse` applies the
/// conjugate transform and the 1/n normalization.
pub fn fft_inplace(buf: &mut [Complex], inverse: bool) -> Result<()> {
    let n = buf.len();
    if !n.is_power_of_two() {
        return Err(Error::Domain(alloc::format!(
            "FFT length {n} is not a power of two"
        )));
    }
    // bit-reversal permutation
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) & (n - 1);
        if j > i {
            buf.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * core::f64::consts::PI / len as f64;
        let wlen = Complex::new(math::cos(ang), math::sin(ang));
        for start in (0..n).step_by(len) {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..len / 2 {
                let a = buf[start + k];
                let b = buf[start + k + len / 2].mul(w);
                buf[start + k] = a.add(b);
                buf[start + k + len / 2] = a.sub(b);
                w = w.mul(wlen);
            }
        }
        len <<= 1;
    }
    if inverse {
        let inv = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v = v.scale(inv);
        }
    }
    Ok(())
}

/// 2D transform of a square complex buffer (rows then columns).
pub fn fft2_inplace(buf: &mut [Complex], side: usize, inverse: bool) -> Result<()> {
    debug_assert_eq!(buf.len(), side * side);
    for row in buf.chunks_mut(side) {
        fft_inplace(row, inverse)?;
    }
    let mut col = vec![Complex::ZERO; side];
    for j in 0..side {
        for i in 0..side {
            col[i] = buf[i * side + j];
        }
        fft_inplace(&mut col, inverse)?;
        for i in 0..side {
            buf[i * side + j] = col[i];
        }
    }
    Ok(())
}

pub fn forward2(real: &Grid<f64>) -> Result<Vec<Complex>> {
    let mut buf: Vec<Complex> = real.values().iter().map(|v| Complex::new(*v, 0.0)).collect();
    fft2_inplace(&mut buf, real.side(), false)?;
    Ok(buf)
}

/// Signed wavenumber index for DFT bin `i` of length `n`.
#[inline]
pub fn wavenumber(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Spectral partial derivatives (d/dcol, d/drow) under periodic boundaries,
/// in units of field-value per pixel.
pub fn gradient(field: &Grid<f64>) -> Result<(Grid<f64>, Grid<f64>)> {
    let n = field.side();
    let spec = forward2(field)?;
    let two_pi_over_n = 2.0 * core::f64::consts::PI / n as f64;
    let mut dx = vec![Complex::ZERO; n * n];
    let mut dy = vec![Complex::ZERO; n * n];
    for i in 0..n {
        // Zero the Nyquist mode: its derivative is not representable as a
        // real signal with an odd multiplier.
        let ky = if i == n / 2 { 0.0 } else { wavenumber(i, n) * two_pi_over_n };
        for j in 0..n {
            let kx = if j == n / 2 { 0.0 } else { wavenumber(j, n) * two_pi_over_n };
            let s = spec[i * n + j];
            dx[i * n + j] = Complex::new(-kx * s.im, kx * s.re);
            dy[i * n + j] = Complex::new(-ky * s.im, ky * s.re);
        }
    }
    fft2_inplace(&mut dx, n, true)?;
    fft2_inplace(&mut dy, n, true)?;
    let dxg = Grid::from_vec(n, dx.iter().map(|c| c.re).collect())?;
    let dyg = Grid::from_vec(n, dy.iter().map(|c| c.re).collect())?;
    Ok((dxg, dyg))
}

/// Gaussian low-pass in Fourier space; sigma in pixels, applied in the
/// spatial domain sense (transfer function exp(-k^2 sigma^2 / 2)).
pub fn gaussian_smooth(field: &Grid<f64>, sigma: f64) -> Result<Grid<f64>> {
    if sigma <= 0.0 {
        return Ok(field.clone());
    }
    let n = field.side();
    let mut spec = forward2(field)?;
    let two_pi_over_n = 2.0 * core::f64::consts::PI / n as f64;
    for i in 0..n {
        let ky = wavenumber(i, n) * two_pi_over_n;
        for j in 0..n {
            let kx = wavenumber(j, n) * two_pi_over_n;
            let att = math::exp(-0.5 * (kx * kx + ky * ky) * sigma * sigma);
            spec[i * n + j] = spec[i * n + j].scale(att);
        }
    }
    fft2_inplace(&mut spec, n, true)?;
    Grid::from_vec(n, spec.iter().map(|c| c.re).collect())
}
