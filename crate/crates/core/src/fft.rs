//! Multi-dimensional FFTs over row-major arrays and the type-I sine transform.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward and inverse transforms for a fixed row-major shape.
/// The inverse is normalized, so `inverse(forward(x)) == x` up to rounding.
pub struct NdFft {
    shape: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl NdFft {
    pub fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        NdFft {
            shape: shape.to_vec(),
            forward: shape.iter().map(|&n| planner.plan_fft_forward(n)).collect(),
            inverse: shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply(data, &self.forward, None);
    }

    /// Forward transform along the listed axes only.
    pub fn forward_axes(&self, data: &mut [Complex64], axes: &[usize]) {
        self.apply(data, &self.forward, Some(axes));
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply(data, &self.inverse, None);
        let s = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn inverse_axes(&self, data: &mut [Complex64], axes: &[usize]) {
        self.apply(data, &self.inverse, Some(axes));
        let s = 1.0 / axes.iter().map(|&a| self.shape[a]).product::<usize>() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    fn apply(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>], axes: Option<&[usize]>) {
        assert_eq!(data.len(), self.len());
        let all: Vec<usize> = (0..self.shape.len()).collect();
        for &axis in axes.unwrap_or(&all) {
            let n = self.shape[axis];
            if n == 1 {
                continue;
            }
            let plan = &plans[axis];
            if axis + 1 == self.shape.len() {
                // contiguous lines
                plan.process(data);
                continue;
            }
            let stride: usize = self.shape[axis + 1..].iter().product();
            let outer = self.len() / (n * stride);
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
            for o in 0..outer {
                for s in 0..stride {
                    let base = o * n * stride + s;
                    for (j, v) in line.iter_mut().enumerate() {
                        *v = data[base + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride] = *v;
                    }
                }
            }
        }
    }
}

/// Integer frequency of FFT bin `j` for a length-`n` transform, in
/// `(-n/2, n/2]`.
#[inline]
pub fn frequency(j: usize, n: usize) -> i64 {
    if 2 * j > n {
        j as i64 - n as i64
    } else {
        j as i64
    }
}

pub fn to_complex(xs: &[f64]) -> Vec<Complex64> {
    xs.iter().map(|&x| Complex64::new(x, 0.0)).collect()
}

/// Type-I discrete sine transform `X_k = sum_j x_j sin(pi j k / (n + 1))`,
/// `j, k = 1..=n`, computed through an odd extension of length `2(n+1)`.
/// Applying it twice multiplies by `(n + 1) / 2`.
pub struct Dst1 {
    n: usize,
    plan: Arc<dyn Fft<f64>>,
}

impl Dst1 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Dst1 {
            n,
            plan: planner.plan_fft_forward(2 * (n + 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn transform(&self, x: &mut [f64], buf: &mut Vec<Complex64>) {
        let n = self.n;
        buf.clear();
        buf.resize(2 * (n + 1), Complex64::new(0.0, 0.0));
        for j in 0..n {
            buf[j + 1] = Complex64::new(x[j], 0.0);
            buf[2 * n + 1 - j] = Complex64::new(-x[j], 0.0);
        }
        self.plan.process(buf);
        for k in 0..n {
            x[k] = -0.5 * buf[k + 1].im;
        }
    }

    /// Applies the transform along `axis` of a row-major array of `shape`.
    pub fn transform_axis(&self, data: &mut [f64], shape: &[usize], axis: usize) {
        let n = shape[axis];
        assert_eq!(n, self.n);
        let stride: usize = shape[axis + 1..].iter().product();
        let outer = data.len() / (n * stride);
        let mut line = vec![0.0; n];
        let mut buf = Vec::new();
        for o in 0..outer {
            for s in 0..stride {
                let base = o * n * stride + s;
                for (j, v) in line.iter_mut().enumerate() {
                    *v = data[base + j * stride];
                }
                self.transform(&mut line, &mut buf);
                for (j, v) in line.iter().enumerate() {
                    data[base + j * stride] = *v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn naive_dft_2d(x: &[Complex64], n0: usize, n1: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); n0 * n1];
        for k0 in 0..n0 {
            for k1 in 0..n1 {
                let mut s = Complex64::new(0.0, 0.0);
                for j0 in 0..n0 {
                    for j1 in 0..n1 {
                        let ph = -2.0 * PI * ((j0 * k0) as f64 / n0 as f64 + (j1 * k1) as f64 / n1 as f64);
                        s += x[j0 * n1 + j1] * Complex64::new(ph.cos(), ph.sin());
                    }
                }
                out[k0 * n1 + k1] = s;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft_on_rectangular_shape() {
        let (n0, n1) = (4, 6);
        let x: Vec<Complex64> = (0..n0 * n1)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 1.1).cos()))
            .collect();
        let plan = NdFft::new(&[n0, n1]);
        let mut y = x.clone();
        plan.forward(&mut y);
        let want = naive_dft_2d(&x, n0, n1);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).norm() < 1e-12);
        }
        plan.inverse(&mut y);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn dst_matches_definition_and_inverts() {
        let n = 7;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.3).ln()).collect();
        let dst = Dst1::new(n);
        let mut y = x.clone();
        let mut buf = Vec::new();
        dst.transform(&mut y, &mut buf);
        for k in 1..=n {
            let want: f64 = (1..=n)
                .map(|j| x[j - 1] * (PI * (j * k) as f64 / (n + 1) as f64).sin())
                .sum();
            assert!((y[k - 1] - want).abs() < 1e-12);
        }
        dst.transform(&mut y, &mut buf);
        let s = 2.0 / (n + 1) as f64;
        for (a, b) in y.iter().zip(&x) {
            assert!((a * s - b).abs() < 1e-13);
        }
    }

    #[test]
    fn frequencies_are_symmetric() {
        let f: Vec<i64> = (0..6).map(|j| frequency(j, 6)).collect();
        assert_eq!(f, vec![0, 1, 2, 3, -2, -1]);
    }
}
