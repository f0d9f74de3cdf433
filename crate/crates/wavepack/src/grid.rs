//! Periodic grids on the torus [0, 2pi)^n, n-dimensional FFTs and sampled fields.
//!
//! Fourier convention: `f(x) = sum_zeta fhat(zeta) e^{i zeta.x}` over integer
//! lattice frequencies, so the forward transform divides by `N^n`.

use std::f64::consts::TAU;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::{self, Vec3};

pub type C64 = Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub size: usize,
}

impl Grid {
    pub fn new(n: usize, size: usize) -> Result<Self> {
        if !(1..=3).contains(&n) {
            return Err(Error::Config(format!("dimension {n} not in 1..=3")));
        }
        if size < 4 || !size.is_power_of_two() {
            return Err(Error::Config(format!("grid size {size} must be a power of two >= 4")));
        }
        Ok(Grid { n, size })
    }

    pub fn len(&self) -> usize {
        self.size.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.size as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.n as i32)
    }

    /// Volume of the torus, (2pi)^n.
    pub fn volume(&self) -> f64 {
        TAU.powi(self.n as i32)
    }

    /// Radius of the resolved band: two thirds of Nyquist.
    pub fn band_edge(&self) -> f64 {
        self.size as f64 / 3.0
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        let mut r = idx;
        for a in (0..self.n).rev() {
            c[a] = r % self.size;
            r /= self.size;
        }
        c
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        let mut idx = 0;
        for &ci in c.iter().take(self.n) {
            idx = idx * self.size + ci;
        }
        idx
    }

    /// Signed lattice frequency of a storage index along one axis.
    #[inline]
    pub fn signed(&self, i: usize) -> i64 {
        if i < self.size / 2 {
            i as i64
        } else {
            i as i64 - self.size as i64
        }
    }

    /// Storage index of a signed lattice frequency along one axis.
    #[inline]
    pub fn unsigned(&self, k: i64) -> usize {
        k.rem_euclid(self.size as i64) as usize
    }

    #[inline]
    pub fn freq(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        let mut z = vec3::ZERO;
        for a in 0..self.n {
            z[a] = self.signed(c[a]) as f64;
        }
        z
    }

    #[inline]
    pub fn position(&self, idx: usize) -> Vec3 {
        let c = self.coords(idx);
        let h = self.spacing();
        let mut x = vec3::ZERO;
        for a in 0..self.n {
            x[a] = c[a] as f64 * h;
        }
        x
    }

    pub fn frequencies(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.freq(i)).collect()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        (0..self.len()).map(|i| self.position(i)).collect()
    }

    /// Storage indices of all lattice frequencies with |zeta| <= band edge.
    pub fn band_indices(&self) -> Vec<usize> {
        let edge = self.band_edge();
        (0..self.len()).filter(|&i| vec3::norm(&self.freq(i)) <= edge).collect()
    }
}

/// n-dimensional complex FFT on a [`Grid`]; cheap to clone.
#[derive(Clone)]
pub struct Fft {
    grid: Grid,
    fwd: Arc<dyn rustfft::Fft<f64>>,
    inv: Arc<dyn rustfft::Fft<f64>>,
}

impl Fft {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        Fft {
            grid,
            fwd: planner.plan_fft_forward(grid.size),
            inv: planner.plan_fft_inverse(grid.size),
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    /// Samples to coefficients, normalized by `N^n`.
    pub fn forward(&self, data: &mut [C64]) {
        self.run(data, true);
        let s = 1.0 / self.grid.len() as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }

    /// Coefficients to samples (unnormalized sum).
    pub fn inverse(&self, data: &mut [C64]) {
        self.run(data, false);
    }

    fn run(&self, data: &mut [C64], forward: bool) {
        let g = self.grid;
        assert_eq!(data.len(), g.len(), "fft buffer length");
        let plan = if forward { &self.fwd } else { &self.inv };
        let mut scratch = vec![C64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        let nn = g.size;
        // last axis is contiguous
        plan.process_with_scratch(data, &mut scratch);
        if g.n == 1 {
            return;
        }
        let mut buf = vec![C64::new(0.0, 0.0); data.len()];
        for axis in 0..g.n - 1 {
            let stride = nn.pow((g.n - 1 - axis) as u32);
            let block = nn * stride;
            let nblocks = data.len() / block;
            for b in 0..nblocks {
                let base = b * block;
                for i in 0..stride {
                    let line = (b * stride + i) * nn;
                    for k in 0..nn {
                        buf[line + k] = data[base + k * stride + i];
                    }
                }
            }
            plan.process_with_scratch(&mut buf, &mut scratch);
            for b in 0..nblocks {
                let base = b * block;
                for i in 0..stride {
                    let line = (b * stride + i) * nn;
                    for k in 0..nn {
                        data[base + k * stride + i] = buf[line + k];
                    }
                }
            }
        }
    }
}

/// Complex scalar field sampled on a periodic grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealField {
    pub grid: Grid,
    pub data: Vec<C64>,
    /// Largest |zeta| present in the spectrum, as declared by the producer.
    pub band_limit: f64,
}

impl RealField {
    pub fn zeros(grid: Grid) -> Self {
        RealField { grid, data: vec![C64::new(0.0, 0.0); grid.len()], band_limit: 0.0 }
    }

    pub fn from_data(grid: Grid, data: Vec<C64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!("field has {} samples, grid needs {}", data.len(), grid.len())));
        }
        Ok(RealField { grid, data, band_limit: grid.band_edge() })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&Vec3) -> C64) -> Self {
        let data = (0..grid.len()).map(|i| f(&grid.position(i))).collect();
        RealField { grid, data, band_limit: grid.size as f64 / 2.0 }
    }

    /// Field whose Fourier coefficients are given by `f(zeta)`.
    pub fn from_spectrum(fft: &Fft, f: impl Fn(&Vec3) -> C64) -> Self {
        let grid = fft.grid();
        let mut data: Vec<C64> = (0..grid.len()).map(|i| f(&grid.freq(i))).collect();
        let band_limit = (0..grid.len())
            .filter(|&i| data[i].norm_sqr() > 0.0)
            .map(|i| vec3::norm(&grid.freq(i)))
            .fold(0.0, f64::max);
        fft.inverse(&mut data);
        RealField { grid, data, band_limit }
    }

    pub fn spectrum(&self, fft: &Fft) -> Vec<C64> {
        let mut s = self.data.clone();
        fft.forward(&mut s);
        s
    }

    /// Random field with i.i.d. complex Gaussian coefficients on `lo <= |zeta| <= hi`.
    pub fn random_band<R: Rng>(fft: &Fft, lo: f64, hi: f64, rng: &mut R) -> Self {
        let grid = fft.grid();
        let mut data = vec![C64::new(0.0, 0.0); grid.len()];
        for (i, v) in data.iter_mut().enumerate() {
            let r = vec3::norm(&grid.freq(i));
            if r >= lo && r <= hi {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                *v = C64::new(a, b);
            }
        }
        fft.inverse(&mut data);
        let mut f = RealField { grid, data, band_limit: hi };
        let nrm = f.norm();
        if nrm > 0.0 {
            f.scale(1.0 / nrm);
        }
        f
    }

    /// Random field filling the resolved band.
    pub fn random_resolved<R: Rng>(fft: &Fft, rng: &mut R) -> Self {
        Self::random_band(fft, 0.0, fft.grid().band_edge(), rng)
    }

    /// L2 norm with cell volume (2pi/N)^n.
    pub fn norm(&self) -> f64 {
        (self.data.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }

    /// `<self, other> = int self * conj(other)`.
    pub fn inner(&self, other: &RealField) -> C64 {
        let s: C64 = self.data.iter().zip(&other.data).map(|(a, b)| a * b.conj()).sum();
        s * self.grid.cell_volume()
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn scale_c(&mut self, s: C64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: C64, other: &RealField) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        self.band_limit = self.band_limit.max(other.band_limit);
    }

    pub fn sub(&self, other: &RealField) -> RealField {
        let mut r = self.clone();
        r.axpy(C64::new(-1.0, 0.0), other);
        r
    }

    pub fn add(&self, other: &RealField) -> RealField {
        let mut r = self.clone();
        r.axpy(C64::new(1.0, 0.0), other);
        r
    }

    /// Relative L2 distance `|self - reference| / |reference|`.
    pub fn rel_err(&self, reference: &RealField) -> f64 {
        self.sub(reference).norm() / reference.norm()
    }

    /// Apply the Fourier multiplier `m(zeta)`.
    pub fn multiplier(&self, fft: &Fft, m: impl Fn(&Vec3) -> C64) -> RealField {
        let grid = self.grid;
        let mut s = self.spectrum(fft);
        for (i, v) in s.iter_mut().enumerate() {
            *v *= m(&grid.freq(i));
        }
        fft.inverse(&mut s);
        RealField { grid, data: s, band_limit: self.band_limit }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn plane_wave_has_single_coefficient() {
        for n in 1..=3 {
            let grid = Grid::new(n, 8).unwrap();
            let fft = Fft::new(grid);
            let zeta = [2.0, -3.0, 1.0];
            let f = RealField::from_fn(grid, |x| {
                let ph: f64 = (0..n).map(|a| zeta[a] * x[a]).sum();
                C64::from_polar(1.0, ph)
            });
            let s = f.spectrum(&fft);
            for (i, v) in s.iter().enumerate() {
                let z = grid.freq(i);
                let hit = (0..n).all(|a| z[a] == zeta[a]);
                let expect = if hit { 1.0 } else { 0.0 };
                assert!((v - C64::new(expect, 0.0)).norm() < 1e-12, "n={n} idx={i}");
            }
        }
    }

    #[test]
    fn fft_roundtrip_and_parseval() {
        let grid = Grid::new(2, 16).unwrap();
        let fft = Fft::new(grid);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let f = RealField::random_resolved(&fft, &mut rng);
        let s = f.spectrum(&fft);
        let parseval: f64 = s.iter().map(|v| v.norm_sqr()).sum::<f64>() * grid.volume();
        assert!((parseval.sqrt() - f.norm()).abs() < 1e-12);
        let mut back = s.clone();
        fft.inverse(&mut back);
        for (a, b) in back.iter().zip(&f.data) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn index_roundtrip() {
        let grid = Grid::new(3, 4).unwrap();
        for i in 0..grid.len() {
            assert_eq!(grid.index(grid.coords(i)), i);
        }
        assert_eq!(grid.signed(3), -1);
        assert_eq!(grid.unsigned(-1), 3);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(4, 8).is_err());
        assert!(Grid::new(2, 12).is_err());
    }
}
