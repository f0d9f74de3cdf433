//! Wave-packet analysis `W`, synthesis `W*` and the `WW*` kernel probe.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Fft, Grid, RealField, C64};
use crate::packets::PacketDictionary;
use crate::tent::{quasi_dist, SpherePoint};
use crate::vec3::{self, Vec3};

/// Phase-space samples `F(x_m, xi_k)`: one spatial slice per packet plus the low band.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    pub grid: Grid,
    pub packets: usize,
    /// Packet-major: slice k occupies `k*len .. (k+1)*len`.
    pub data: Vec<C64>,
    pub low: Vec<C64>,
}

impl PhaseField {
    pub fn zeros(dict: &PacketDictionary) -> Self {
        let len = dict.grid.len();
        PhaseField {
            grid: dict.grid,
            packets: dict.len(),
            data: vec![C64::new(0.0, 0.0); dict.len() * len],
            low: vec![C64::new(0.0, 0.0); len],
        }
    }

    pub fn slice(&self, k: usize) -> &[C64] {
        let len = self.grid.len();
        &self.data[k * len..(k + 1) * len]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [C64] {
        let len = self.grid.len();
        &mut self.data[k * len..(k + 1) * len]
    }

    pub fn check(&self, dict: &PacketDictionary) -> Result<()> {
        if self.grid != dict.grid || self.packets != dict.len() || self.data.len() != self.packets * self.grid.len() {
            return Err(Error::Shape(format!(
                "phase field ({} packets on {:?}) does not match dictionary ({} packets on {:?})",
                self.packets,
                self.grid,
                dict.len(),
                dict.grid
            )));
        }
        Ok(())
    }

    /// Weighted l2 norm `(sum_k w_k |F_k|^2 + w_low |F_low|^2)^{1/2}`.
    pub fn weighted_norm(&self, dict: &PacketDictionary) -> f64 {
        self.weighted_inner(self, dict).re.sqrt()
    }

    pub fn weighted_inner(&self, other: &PhaseField, dict: &PacketDictionary) -> C64 {
        let len = self.grid.len();
        let dv = self.grid.cell_volume();
        let mut s = C64::new(0.0, 0.0);
        for (k, p) in dict.packets.iter().enumerate() {
            let a = &self.data[k * len..(k + 1) * len];
            let b = &other.data[k * len..(k + 1) * len];
            let part: C64 = a.iter().zip(b).map(|(x, y)| x * y.conj()).sum();
            s += part * p.weight;
        }
        let part: C64 = self.low.iter().zip(&other.low).map(|(x, y)| x * y.conj()).sum();
        (s + part * dict.low.weight) * dv
    }

    pub fn scale(&mut self, c: C64) {
        for v in self.data.iter_mut().chain(self.low.iter_mut()) {
            *v *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().chain(&self.low).all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Memory footprint of the coefficient storage in bytes.
    pub fn bytes(&self) -> usize {
        (self.data.len() + self.low.len()) * std::mem::size_of::<C64>()
    }
}

fn check_field(f: &RealField, dict: &PacketDictionary) -> Result<()> {
    if f.grid != dict.grid {
        return Err(Error::Shape(format!("field grid {:?} vs dictionary grid {:?}", f.grid, dict.grid)));
    }
    Ok(())
}

/// `Wf(x_m, xi_k) = psi_k(D) f (x_m)`, low band `q(D) f`.
pub fn analyze(f: &RealField, dict: &PacketDictionary, fft: &Fft) -> Result<PhaseField> {
    check_field(f, dict)?;
    let spec = f.spectrum(fft);
    Ok(analyze_spectrum(&spec, dict, fft))
}

pub fn analyze_spectrum(spec: &[C64], dict: &PacketDictionary, fft: &Fft) -> PhaseField {
    let mut out = PhaseField::zeros(dict);
    for (k, p) in dict.packets.iter().enumerate() {
        let slice = out.slice_mut(k);
        for &(i, v) in &p.support {
            slice[i as usize] = spec[i as usize] * v;
        }
        fft.inverse(slice);
    }
    for &(i, v) in &dict.low.support {
        out.low[i as usize] = spec[i as usize] * v;
    }
    fft.inverse(&mut out.low);
    out
}

/// `W*F = sum_k w_k psi_k(D) F_k + w_low q(D) F_low`.
pub fn synthesize(field: &PhaseField, dict: &PacketDictionary, fft: &Fft) -> Result<RealField> {
    field.check(dict)?;
    let grid = dict.grid;
    let mut acc = vec![C64::new(0.0, 0.0); grid.len()];
    let mut buf = vec![C64::new(0.0, 0.0); grid.len()];
    for (k, p) in dict.packets.iter().enumerate() {
        buf.copy_from_slice(field.slice(k));
        fft.forward(&mut buf);
        for &(i, v) in &p.support {
            acc[i as usize] += buf[i as usize] * (p.weight * v);
        }
    }
    buf.copy_from_slice(&field.low);
    fft.forward(&mut buf);
    for &(i, v) in &dict.low.support {
        acc[i as usize] += buf[i as usize] * (dict.low.weight * v);
    }
    fft.inverse(&mut acc);
    Ok(RealField { grid, data: acc, band_limit: grid.band_edge() })
}

/// A phase-space sample `(x, xi)` with `xi` in lattice units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSample {
    pub x: Vec3,
    pub xi: Vec3,
}

/// `K(x,xi; y,eta) = (2pi)^{-n} sum_zeta psi_xi(zeta) psi_eta(zeta) e^{i zeta.(x-y)}` using
/// the packet formula on the lattice of the dictionary's grid.
pub fn ww_star_kernel(dict: &PacketDictionary, a: &PhaseSample, b: &PhaseSample) -> C64 {
    let n = dict.n();
    let ra = vec3::norm(&a.xi);
    let rb = vec3::norm(&b.xi);
    let lo = (ra.max(rb) / 2.0).max(1e-12);
    let hi = 2.0 * ra.min(rb);
    if lo >= hi {
        return C64::new(0.0, 0.0);
    }
    let ca = crate::packets::c_norm(&dict.profiles, n, ra);
    let cb = crate::packets::c_norm(&dict.profiles, n, rb);
    let d = vec3::sub(&a.x, &b.x);
    let m = hi.ceil() as i64;
    let mut s = C64::new(0.0, 0.0);
    let range = |ax: usize| if ax < n { -m..=m } else { 0..=0 };
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let z = [i as f64, j as f64, k as f64];
                let r = vec3::norm(&z);
                if r <= lo || r >= hi {
                    continue;
                }
                let pa = crate::packets::packet_value(&dict.profiles, n, ca, &a.xi, &z);
                if pa == 0.0 {
                    continue;
                }
                let pb = crate::packets::packet_value(&dict.profiles, n, cb, &b.xi, &z);
                if pb == 0.0 {
                    continue;
                }
                s += Complex64::from_polar(pa * pb, vec3::dot(&z, &d));
            }
        }
    }
    s / TAU.powi(n as i32)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayReport {
    pub order: f64,
    pub kernels: Vec<f64>,
    pub envelopes: Vec<f64>,
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// `Upsilon(t) = min(t, 1/t)`.
pub fn upsilon(t: f64) -> f64 {
    t.min(1.0 / t)
}

/// Off-singularity envelope `Upsilon(|xi|/|eta|)^N (1 + rho^{-1} d^2)^{-N}`.
pub fn kernel_envelope(n: usize, a: &PhaseSample, b: &PhaseSample, order: f64) -> f64 {
    let ra = vec3::norm(&a.xi);
    let rb = vec3::norm(&b.xi);
    let rho = (1.0 / ra).min(1.0 / rb);
    let pa = SpherePoint { x: a.x, omega: vec3::unit(&a.xi) };
    let pb = SpherePoint { x: b.x, omega: vec3::unit(&b.xi) };
    let d = quasi_dist(&pa, &pb, n);
    upsilon(ra / rb).powf(order) * (1.0 + d * d / rho).powf(-order)
}

pub fn ww_star_kernel_probe(dict: &PacketDictionary, pairs: &[(PhaseSample, PhaseSample)], order: f64) -> DecayReport {
    let mut kernels = Vec::with_capacity(pairs.len());
    let mut envelopes = Vec::with_capacity(pairs.len());
    let mut ratios = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let k = ww_star_kernel(dict, a, b).norm();
        let e = kernel_envelope(dict.n(), a, b, order);
        kernels.push(k);
        envelopes.push(e);
        ratios.push(k / e);
    }
    let max_ratio = ratios.iter().cloned().fold(0.0, f64::max);
    DecayReport { order, kernels, envelopes, ratios, max_ratio }
}

/// Random probe pairs near the diagonal: `|xi|` log-uniform on `[xi_lo, xi_hi]`, `|eta|/|xi|`
/// in `[2/3, 3/2]`, directions within `2|xi|^{-1/2}` and positions within `3|xi|^{-1/2}`
/// of each other, so both the scale factor and the quasi-distance term are exercised.
pub fn sample_probe_pairs<R: Rng>(n: usize, count: usize, xi_lo: f64, xi_hi: f64, rng: &mut R) -> Vec<(PhaseSample, PhaseSample)> {
    let gauss = |rng: &mut R| {
        let mut v = vec3::ZERO;
        for c in v.iter_mut().take(n) {
            *c = rng.sample(StandardNormal);
        }
        v
    };
    (0..count)
        .map(|_| {
            let r = (xi_lo.ln() + rng.random::<f64>() * (xi_hi / xi_lo).ln()).exp();
            let mut x = vec3::ZERO;
            for c in x.iter_mut().take(n) {
                *c = rng.random::<f64>() * TAU;
            }
            let om = vec3::unit(&gauss(rng));
            let spread = r.powf(-0.5);
            let nu = vec3::unit(&vec3::axpy(&om, 2.0 * spread * rng.random::<f64>(), &vec3::unit(&gauss(rng))));
            let rb = r * (2.0 / 3.0) * (2.25f64).powf(rng.random::<f64>());
            let y = vec3::axpy(&x, 3.0 * spread * rng.random::<f64>(), &vec3::unit(&gauss(rng)));
            (PhaseSample { x, xi: vec3::scale(r, &om) }, PhaseSample { x: y, xi: vec3::scale(rb, &nu) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packets::{DictionaryParams, FrameMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn dict(mode: FrameMode) -> PacketDictionary {
        let mut p = DictionaryParams::new(2, 32);
        p.mode = mode;
        PacketDictionary::build(&p).unwrap()
    }

    #[test]
    fn roundtrip_and_isometry_renormalized() {
        let d = dict(FrameMode::Renormalized);
        let fft = Fft::new(d.grid);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..3 {
            let f = RealField::random_resolved(&fft, &mut rng);
            let w = analyze(&f, &d, &fft).unwrap();
            assert!((w.weighted_norm(&d) / f.norm() - 1.0).abs() < 1e-12);
            let g = synthesize(&w, &d, &fft).unwrap();
            assert!(g.rel_err(&f) < 1e-12);
        }
    }

    #[test]
    fn adjointness() {
        let d = dict(FrameMode::Raw);
        let fft = Fft::new(d.grid);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let f = RealField::random_resolved(&fft, &mut rng);
        let g = RealField::random_resolved(&fft, &mut rng);
        let mut big = analyze(&g, &d, &fft).unwrap();
        // perturb G off the range of W
        for (i, v) in big.data.iter_mut().enumerate() {
            *v += C64::new((i % 7) as f64 * 0.01, 0.0);
        }
        let lhs = analyze(&f, &d, &fft).unwrap().weighted_inner(&big, &d);
        let rhs = f.inner(&synthesize(&big, &d, &fft).unwrap());
        assert!((lhs - rhs).norm() < 1e-10 * lhs.norm().max(1.0));
    }

    #[test]
    fn low_frequency_field_lives_in_low_band() {
        let d = dict(FrameMode::Renormalized);
        let fft = Fft::new(d.grid);
        let f = RealField::from_spectrum(&fft, |z| if vec3::norm(z) == 0.0 { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
        let w = analyze(&f, &d, &fft).unwrap();
        assert!(w.data.iter().all(|v| v.norm() == 0.0));
        let expect = (3.0 * std::f64::consts::PI / 4.0).powf(-0.5);
        for (a, b) in w.low.iter().zip(&f.data) {
            assert!((a - b * expect).norm() < 1e-13);
        }
    }

    #[test]
    fn kernel_vanishes_for_separated_scales() {
        let d = dict(FrameMode::Raw);
        let a = PhaseSample { x: [0.0; 3], xi: [2.0, 0.0, 0.0] };
        let b = PhaseSample { x: [0.0; 3], xi: [32.0, 0.0, 0.0] };
        assert_eq!(ww_star_kernel(&d, &a, &b).norm(), 0.0);
        let k0 = ww_star_kernel(&d, &a, &a).norm();
        assert!(k0 > 0.0);
    }
}
