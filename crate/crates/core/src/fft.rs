//! Thin 2-D FFT wrapper over `rustfft` (unnormalized forward, `1/(ny*nx)` inverse).

use ndarray::{Array2, Axis};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

pub fn fft2(a: &mut Array2<Complex64>, inverse: bool) {
    let (ny, nx) = a.dim();
    let mut planner = FftPlanner::<f64>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(nx), planner.plan_fft_inverse(ny))
    } else {
        (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny))
    };
    let mut buf = vec![Complex64::default(); nx.max(ny)];
    for mut r in a.axis_iter_mut(Axis(0)) {
        for (b, v) in buf.iter_mut().zip(r.iter()) {
            *b = *v;
        }
        row.process(&mut buf[..nx]);
        for (v, b) in r.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
    for mut c in a.axis_iter_mut(Axis(1)) {
        for (b, v) in buf.iter_mut().zip(c.iter()) {
            *b = *v;
        }
        col.process(&mut buf[..ny]);
        for (v, b) in c.iter_mut().zip(&buf) {
            *v = *b;
        }
    }
    if inverse {
        let scale = 1.0 / (nx * ny) as f64;
        a.mapv_inplace(|v| v * scale);
    }
}

/// Signed integer wavenumber of FFT bin `i` on an axis of length `n`.
#[inline]
pub fn signed_k(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

pub fn to_complex(a: &Array2<f64>) -> Array2<Complex64> {
    a.mapv(|v| Complex64::new(v, 0.0))
}

/// Multiplies the spectrum of `a` by `filter(ky, kx)` and returns the real part.
pub fn filter_real(a: &Array2<f64>, filter: impl Fn(i64, i64) -> f64) -> Array2<f64> {
    let (ny, nx) = a.dim();
    let mut spec = to_complex(a);
    fft2(&mut spec, false);
    for ((iy, ix), v) in spec.indexed_iter_mut() {
        *v *= filter(signed_k(iy, ny), signed_k(ix, nx));
    }
    fft2(&mut spec, true);
    spec.mapv(|v| v.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_inverse_round_trip() {
        let a = Array2::from_shape_fn((6, 10), |(y, x)| ((y * 13 + x * 7) % 11) as f64 - 5.0);
        let mut c = to_complex(&a);
        fft2(&mut c, false);
        fft2(&mut c, true);
        for (x, y) in a.iter().zip(c.iter()) {
            assert!((x - y.re).abs() < 1e-12 && y.im.abs() < 1e-12);
        }
    }

    #[test]
    fn signed_wavenumbers() {
        assert_eq!((0..8).map(|i| signed_k(i, 8)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, -3, -2, -1]);
    }
}
