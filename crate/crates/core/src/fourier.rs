//! Discrete Fourier transforms on a [`LatticeGrid`] that approximate the
//! continuous transform `f̂(ξ) = ∫ f(x) e^{-2πi x·ξ} dx` and its inverse.
//!
//! With nodes `x_m = −E + m·h` and frequencies `ξ_k = k/(2E)`,
//! `f̂(ξ_k) ≈ hⁿ·(−1)^{Σk}·DFT[f](k)`.

use num_complex::Complex64;
use rayon::prelude::*;
use std::sync::Arc;

use rustfft::{Fft, FftDirection, FftPlanner};

use crate::lattice::LatticeGrid;

/// Planned n-dimensional FFT for one row-major shape.
#[derive(Clone)]
pub struct NdFft {
    shape: Vec<usize>,
    plans: Vec<Arc<dyn Fft<f64>>>,
}

impl NdFft {
    pub fn new(shape: &[usize], direction: FftDirection) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        let plans = shape.iter().map(|&len| planner.plan_fft(len, direction)).collect();
        Self { shape: shape.to_vec(), plans }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequential transform, for use inside an outer parallel loop.
    pub fn process(&self, data: &mut [Complex64], scratch: &mut Vec<Complex64>) {
        assert_eq!(data.len(), self.len(), "array length does not match shape");
        let mut stride = data.len();
        for (&len, fft) in self.shape.iter().zip(&self.plans) {
            stride /= len;
            if stride == 1 {
                data.chunks_mut(len).for_each(|row| fft.process(row));
                continue;
            }
            scratch.resize(len, Complex64::new(0.0, 0.0));
            for chunk in data.chunks_mut(len * stride) {
                for s in 0..stride {
                    for k in 0..len {
                        scratch[k] = chunk[k * stride + s];
                    }
                    fft.process(scratch);
                    for k in 0..len {
                        chunk[k * stride + s] = scratch[k];
                    }
                }
            }
        }
    }

    /// Transform with lines processed in parallel.
    pub fn process_par(&self, data: &mut [Complex64]) {
        assert_eq!(data.len(), self.len(), "array length does not match shape");
        let mut stride = data.len();
        for (&len, fft) in self.shape.iter().zip(&self.plans) {
            stride /= len;
            if stride == 1 {
                data.par_chunks_mut(len).for_each(|row| fft.process(row));
                continue;
            }
            // Lines of one outer block are independent, so blocks run in
            // parallel; when there is a single block, split its columns.
            let block = len * stride;
            if data.len() > block {
                data.par_chunks_mut(block).for_each(|chunk| {
                    let mut line = vec![Complex64::new(0.0, 0.0); len];
                    for s in 0..stride {
                        for k in 0..len {
                            line[k] = chunk[k * stride + s];
                        }
                        fft.process(&mut line);
                        for k in 0..len {
                            chunk[k * stride + s] = line[k];
                        }
                    }
                });
            } else {
                let mut t = vec![Complex64::new(0.0, 0.0); data.len()];
                for k in 0..len {
                    for s in 0..stride {
                        t[s * len + k] = data[k * stride + s];
                    }
                }
                t.par_chunks_mut(len).for_each(|row| fft.process(row));
                for k in 0..len {
                    for s in 0..stride {
                        data[k * stride + s] = t[s * len + k];
                    }
                }
            }
        }
    }
}

/// In-place n-dimensional FFT over a row-major array with the given shape.
pub fn fft_nd(data: &mut [Complex64], shape: &[usize], direction: FftDirection) {
    NdFft::new(shape, direction).process_par(data);
}

pub(crate) fn sign_of(grid: &LatticeGrid, node: usize) -> f64 {
    let mut rem = node;
    let mut parity = 0usize;
    for a in (0..grid.n()).rev() {
        let p = grid.points(a);
        let k = rem % p;
        rem /= p;
        parity += grid.freq_index(a, k).unsigned_abs() as usize;
    }
    if parity % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Per-node `(−1)^{Σk}` in FFT order.
pub fn parity_signs(grid: &LatticeGrid) -> Vec<f64> {
    (0..grid.node_count()).map(|k| sign_of(grid, k)).collect()
}

/// `f̂` on the frequency grid (FFT ordering).
pub fn forward(grid: &LatticeGrid, values: &[Complex64]) -> Vec<Complex64> {
    let mut out = values.to_vec();
    fft_nd(&mut out, grid.point_counts(), FftDirection::Forward);
    let cell = grid.cell_volume();
    out.par_iter_mut().enumerate().for_each(|(k, v)| *v *= cell * sign_of(grid, k));
    out
}

/// `Σ_ξ e^{2πi x·ξ} G(ξ) Δξ` at every node.
pub fn inverse(grid: &LatticeGrid, spectrum: &[Complex64]) -> Vec<Complex64> {
    let dxi = grid.frequency_cell_volume();
    let mut out: Vec<Complex64> =
        spectrum.par_iter().enumerate().map(|(k, v)| v * (dxi * sign_of(grid, k))).collect();
    fft_nd(&mut out, grid.point_counts(), FftDirection::Inverse);
    out
}

/// Adjoint of [`forward`] with respect to the plain Euclidean inner product:
/// `hⁿ·Σ_ξ e^{2πi x·ξ} G(ξ)`.
pub fn forward_adjoint(grid: &LatticeGrid, spectrum: &[Complex64]) -> Vec<Complex64> {
    let cell = grid.cell_volume();
    let mut out: Vec<Complex64> =
        spectrum.par_iter().enumerate().map(|(k, v)| v * (cell * sign_of(grid, k))).collect();
    fft_nd(&mut out, grid.point_counts(), FftDirection::Inverse);
    out
}

/// Adjoint of [`inverse`]: `Δξ·Σ_x e^{-2πi x·ξ} g(x)`.
pub fn inverse_adjoint(grid: &LatticeGrid, values: &[Complex64]) -> Vec<Complex64> {
    let mut out = values.to_vec();
    fft_nd(&mut out, grid.point_counts(), FftDirection::Forward);
    let dxi = grid.frequency_cell_volume();
    out.par_iter_mut().enumerate().for_each(|(k, v)| *v *= dxi * sign_of(grid, k));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{ProductSpace, SampledField};
    use std::f64::consts::PI;

    fn naive_forward(grid: &LatticeGrid, values: &[Complex64]) -> Vec<Complex64> {
        let n = grid.n();
        let mut x = vec![0.0; n];
        let mut xi = vec![0.0; n];
        (0..grid.node_count())
            .map(|k| {
                grid.node_frequency(k, &mut xi);
                let mut acc = Complex64::new(0.0, 0.0);
                for (m, v) in values.iter().enumerate() {
                    grid.node_coords(m, &mut x);
                    let ph: f64 = x.iter().zip(&xi).map(|(a, b)| a * b).sum();
                    acc += v * Complex64::from_polar(1.0, -2.0 * PI * ph);
                }
                acc * grid.cell_volume()
            })
            .collect()
    }

    #[test]
    fn matches_naive_sum() {
        let g = LatticeGrid::make(ProductSpace::new(&[1, 1]).unwrap(), &[1.0, 1.5], &[8, 10]).unwrap();
        let f = SampledField::from_fn(g.clone(), |x| Complex64::new(x[0].sin() + x[1], x[0] * x[1]));
        let fast = forward(&g, f.values());
        let slow = naive_forward(&g, f.values());
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).norm() < 1e-12);
        }
        let back = inverse(&g, &fast);
        for (a, b) in back.iter().zip(f.values()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn planned_transform_matches_parallel() {
        let shape = [4usize, 6, 8];
        let data: Vec<Complex64> = (0..192).map(|k| Complex64::new((k as f64).sin(), (k as f64 * 0.1).cos())).collect();
        let plan = NdFft::new(&shape, FftDirection::Forward);
        let mut a = data.clone();
        plan.process(&mut a, &mut Vec::new());
        let mut b = data.clone();
        plan.process_par(&mut b);
        assert_eq!(a, b);
        let mut c = data[..48].to_vec();
        fft_nd(&mut c, &[48], FftDirection::Forward);
        let mut d = data[..48].to_vec();
        NdFft::new(&[48], FftDirection::Forward).process(&mut d, &mut Vec::new());
        assert_eq!(c, d);
    }

    #[test]
    fn gaussian_transform() {
        let g = LatticeGrid::uniform(ProductSpace::new(&[1]).unwrap(), 6.0, 128).unwrap();
        let f = SampledField::from_fn(g.clone(), |x| Complex64::new((-PI * x[0] * x[0]).exp(), 0.0));
        let fh = forward(&g, f.values());
        for k in 0..128 {
            let xi = g.frequency(0, k);
            assert!((fh[k].re - (-PI * xi * xi).exp()).abs() < 1e-12);
            assert!(fh[k].im.abs() < 1e-12);
        }
    }

    #[test]
    fn adjoints_are_adjoint() {
        let g = LatticeGrid::make(ProductSpace::new(&[2]).unwrap(), &[1.0, 2.0], &[8, 12]).unwrap();
        let n = g.node_count();
        let u: Vec<Complex64> = (0..n).map(|k| Complex64::new((k as f64).sin(), (k as f64 * 0.3).cos())).collect();
        let v: Vec<Complex64> = (0..n).map(|k| Complex64::new((k as f64 * 0.7).cos(), (k as f64).sqrt())).collect();
        let ip = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(p, q)| p.conj() * q).sum() };
        let lhs = ip(&v, &forward(&g, &u));
        let rhs = ip(&forward_adjoint(&g, &v), &u);
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
        let lhs = ip(&v, &inverse(&g, &u));
        let rhs = ip(&inverse_adjoint(&g, &v), &u);
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
    }
}
