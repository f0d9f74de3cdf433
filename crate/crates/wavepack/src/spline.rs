//! Periodic cubic B-spline interpolation of real grid fields, with exact gradients.

use crate::grid::{Fft, Grid, C64};
use crate::vec3::{self, Vec3};

/// Interpolating periodic cubic spline coefficients for one field.
#[derive(Clone, Debug)]
pub struct PeriodicSpline {
    pub grid: Grid,
    coef: Vec<f64>,
}

impl PeriodicSpline {
    /// Prefilter the samples so that the spline passes through them.
    pub fn new(fft: &Fft, values: &[f64]) -> Self {
        let grid = fft.grid();
        let h = grid.spacing();
        let mut s: Vec<C64> = values.iter().map(|&v| C64::new(v, 0.0)).collect();
        fft.forward(&mut s);
        for (i, v) in s.iter_mut().enumerate() {
            let z = grid.freq(i);
            let mut d = 1.0;
            for za in z.iter().take(grid.n) {
                d *= (2.0 + (za * h).cos()) / 3.0;
            }
            *v /= d;
        }
        fft.inverse(&mut s);
        PeriodicSpline { grid, coef: s.iter().map(|v| v.re).collect() }
    }

    pub fn eval(&self, taps: &Taps) -> f64 {
        taps.sum(&self.coef)
    }

    pub fn eval_grad(&self, taps: &Taps) -> (f64, Vec3) {
        let mut v = 0.0;
        let mut g = vec3::ZERO;
        let [l0, l1, l2] = taps.lens();
        for i in 0..l0 {
            let mut v1 = 0.0;
            let mut g1 = [0.0; 3];
            for j in 0..l1 {
                let mut v2 = 0.0;
                let mut g2 = 0.0;
                let base = taps.off[0][i] + taps.off[1][j];
                for k in 0..l2 {
                    let c = self.coef[base + taps.off[2][k]];
                    v2 += taps.w[2][k] * c;
                    g2 += taps.dw[2][k] * c;
                }
                v1 += taps.w[1][j] * v2;
                g1[0] += taps.w[1][j] * v2;
                g1[1] += taps.dw[1][j] * v2;
                g1[2] += taps.w[1][j] * g2;
            }
            v += taps.w[0][i] * v1;
            g[0] += taps.dw[0][i] * g1[0];
            g[1] += taps.w[0][i] * g1[1];
            g[2] += taps.w[0][i] * g1[2];
        }
        (v, g)
    }
}

/// Separable cubic stencil at one point: per axis, four storage offsets with their
/// weights and weight derivatives. Unused axes carry a single unit tap.
#[derive(Clone, Copy, Debug)]
pub struct Taps {
    n: usize,
    off: [[usize; 4]; 3],
    w: [[f64; 4]; 3],
    dw: [[f64; 4]; 3],
}

#[inline]
fn basis(f: f64) -> ([f64; 4], [f64; 4]) {
    let g = 1.0 - f;
    let f2 = f * f;
    let f3 = f2 * f;
    (
        [g * g * g / 6.0, (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0, (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0, f3 / 6.0],
        [-0.5 * g * g, 1.5 * f2 - 2.0 * f, -1.5 * f2 + f + 0.5, 0.5 * f2],
    )
}

impl Taps {
    pub fn at(grid: &Grid, x: &Vec3) -> Self {
        let n = grid.n;
        let h = grid.spacing();
        let nn = grid.size as i64;
        let mut t = Taps { n, off: [[0; 4]; 3], w: [[1.0, 0.0, 0.0, 0.0]; 3], dw: [[0.0; 4]; 3] };
        // row-major storage: the last axis is contiguous
        let mut stride = 1usize;
        for a in (0..n).rev() {
            let s = x[a] / h;
            let i = s.floor();
            let (w, d) = basis(s - i);
            let base = i as i64 - 1;
            for k in 0..4 {
                t.off[a][k] = (base + k as i64).rem_euclid(nn) as usize * stride;
                t.dw[a][k] = d[k] / h;
            }
            t.w[a] = w;
            stride *= grid.size;
        }
        t
    }

    #[inline]
    fn lens(&self) -> [usize; 3] {
        [4, if self.n > 1 { 4 } else { 1 }, if self.n > 2 { 4 } else { 1 }]
    }

    /// Weighted sum of `coef` over the stencil.
    #[inline]
    pub fn sum<T>(&self, coef: &[T]) -> T
    where
        T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    {
        let [l0, l1, l2] = self.lens();
        let mut v = T::default();
        for i in 0..l0 {
            let mut v1 = T::default();
            for j in 0..l1 {
                let base = self.off[0][i] + self.off[1][j];
                let mut v2 = T::default();
                for k in 0..l2 {
                    v2 = v2 + coef[base + self.off[2][k]] * self.w[2][k];
                }
                v1 = v1 + v2 * self.w[1][j];
            }
            v = v + v1 * self.w[0][i];
        }
        v
    }
}
