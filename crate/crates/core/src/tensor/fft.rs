use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::scalar::Scalar;

/// In-place 2-D FFT of a row-major `h × w` complex grid. Unnormalized in both
/// directions; callers apply scaling.
pub fn fft2_in_place<T: Scalar>(buf: &mut [Complex<T>], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<T>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Real part of the orthonormal inverse 2-D DFT for each channel of a
/// `[c, h, w, 2]` (re, im) coefficient tensor.
pub fn ifft2_real<T: Scalar>(coeffs: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let scale = T::one() / T::from_f64_lossy(((h * w) as f64).sqrt());
    let mut out = Vec::with_capacity(c * h * w);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for ch in 0..c {
        let base = ch * h * w * 2;
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(coeffs[base + 2 * i], coeffs[base + 2 * i + 1]);
        }
        fft2_in_place(&mut buf, h, w, true);
        out.extend(buf.iter().map(|z| z.re * scale));
    }
    out
}

/// Adjoint of [`ifft2_real`]: maps a `[c, h, w]` image gradient back onto the
/// `[c, h, w, 2]` coefficients.
pub fn ifft2_real_adjoint<T: Scalar>(grad: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let scale = T::one() / T::from_f64_lossy(((h * w) as f64).sqrt());
    let mut out = Vec::with_capacity(c * h * w * 2);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for (i, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(grad[base + i], T::zero());
        }
        fft2_in_place(&mut buf, h, w, false);
        for z in &buf {
            out.push(z.re * scale);
            out.push(z.im * scale);
        }
    }
    out
}
