//! Radial profiles, anisotropic wave packets and the discrete packet dictionary.
//!
//! A packet centred at `xi` with `rho = |xi|` is
//! `psi_xi(zeta) = rho^{-n/2} c(rho) Psi(|zeta|/rho) phi(rho^{1/2} |zhat - xihat|)`,
//! supported where `rho/2 <= |zeta| <= 2 rho` and `|zhat - xihat| <= rho^{-1/2}`.

use std::f64::consts::{LN_2, PI};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::quad::{integrate, HermiteTable};
use crate::vec3::{self, Vec3};

#[inline]
fn mollifier(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        (-1.0 / x).exp()
    }
}

/// Plateau bump: 1 on [0, 1/2], 0 on [1, inf), smooth in between.
pub fn eta_exact(t: f64) -> f64 {
    eta_with_deriv(t).0
}

/// Plateau bump and its derivative.
pub fn eta_with_deriv(t: f64) -> (f64, f64) {
    if t <= 0.5 {
        return (1.0, 0.0);
    }
    if t >= 1.0 {
        return (0.0, 0.0);
    }
    let s = 2.0 * t - 1.0;
    let a = mollifier(1.0 - s);
    let b = mollifier(s);
    let da = -a / ((1.0 - s) * (1.0 - s));
    let db = if s > 0.0 { b / (s * s) } else { 0.0 };
    let den = a + b;
    (a / den, 2.0 * (da * b - a * db) / (den * den))
}

/// Bump in the log variable `u = log2 |zeta|`, supported in [-1, 1], peak 1 at u = 0.
pub fn theta_exact(u: f64) -> f64 {
    theta_with_deriv(u).0
}

pub fn theta_with_deriv(u: f64) -> (f64, f64) {
    if u.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let d = 1.0 - u * u;
    let v = (1.0 - 1.0 / d).exp();
    (v, v * (-2.0 * u / (d * d)))
}

/// Surface area of the unit sphere in R^n.
pub fn sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!("dimension {n}"),
    }
}

/// Volume of the annulus 1/2 <= |zeta| <= 1.
pub fn annulus_volume(n: usize) -> f64 {
    sphere_area(n) / n as f64 * (1.0 - 0.5f64.powi(n as i32))
}

/// Tabulated phi, Psi and the low-frequency profile.
#[derive(Clone, Debug)]
pub struct RadialProfiles {
    resolution: usize,
    kappa: f64,
    eta: HermiteTable,
    theta: HermiteTable,
    /// `int_u^1 theta^2`, normalized to 1 at u = -1.
    tail: HermiteTable,
}

/// Tolerance for the tables against the closed forms.
pub const TABLE_TOL: f64 = 1e-12;
/// Tolerance for the Calderon integral.
pub const CALDERON_TOL: f64 = 1e-10;

impl RadialProfiles {
    pub fn build(resolution: usize) -> Result<Self> {
        if resolution < 256 {
            return Err(Error::Config(format!("table resolution {resolution} below 256")));
        }
        let theta_sq = |u: f64| theta_exact(u).powi(2);
        let total = integrate(theta_sq, -1.0, 1.0, 512);
        let kappa = (LN_2 * total).sqrt();
        let eta = HermiteTable::build(0.5, 1.0, resolution, eta_with_deriv);
        let theta = HermiteTable::build(-1.0, 1.0, resolution, theta_with_deriv);
        let h = 2.0 / resolution as f64;
        let mut acc = vec![0.0; resolution + 1];
        for i in (0..resolution).rev() {
            let a = -1.0 + i as f64 * h;
            acc[i] = acc[i + 1] + integrate(theta_sq, a, a + h, 1);
        }
        let tail = HermiteTable::build(-1.0, 1.0, resolution, |u| {
            let i = (((u + 1.0) / h).round() as usize).min(resolution);
            (acc[i] / total, -theta_sq(u) / total)
        });
        let p = RadialProfiles { resolution, kappa, eta, theta, tail };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let m = self.resolution;
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for frac in [0.25, 0.5, 0.75] {
                let t = 0.5 + 0.5 * (i as f64 + frac) / m as f64;
                worst = worst.max((self.eta.eval(t) - eta_exact(t)).abs());
                let u = -1.0 + 2.0 * (i as f64 + frac) / m as f64;
                worst = worst.max((self.theta.eval(u) - theta_exact(u)).abs());
            }
        }
        if worst > TABLE_TOL {
            return Err(Error::Calibration(format!(
                "profile tables deviate from closed form by {worst:.3e} at resolution {m}"
            )));
        }
        let cal = self.calderon();
        if (cal - 1.0).abs() > CALDERON_TOL {
            return Err(Error::Calibration(format!("Calderon integral {cal} at resolution {m}")));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// `int_0^inf Psi(sigma zeta)^2 dsigma/sigma` evaluated from the tables
    /// (independent of zeta; substitute sigma |zeta| = 2^u).
    pub fn calderon(&self) -> f64 {
        let f = |u: f64| self.theta.eval(u).powi(2);
        LN_2 * integrate(f, -1.0, 1.0, self.resolution) / (self.kappa * self.kappa)
    }

    /// Radial bump phi(|zeta|) = eta(|zeta|).
    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        if r <= 0.5 {
            1.0
        } else if r >= 1.0 {
            0.0
        } else {
            self.eta.eval(r)
        }
    }

    #[inline]
    pub fn phi_deriv(&self, r: f64) -> f64 {
        if r <= 0.5 || r >= 1.0 {
            0.0
        } else {
            self.eta.deriv(r)
        }
    }

    /// Annular profile Psi(|zeta|), supported in [1/2, 2].
    #[inline]
    pub fn psi(&self, r: f64) -> f64 {
        if r <= 0.5 || r >= 2.0 {
            0.0
        } else {
            self.theta.eval(r.log2()) / self.kappa
        }
    }

    #[inline]
    pub fn psi_deriv(&self, r: f64) -> f64 {
        if r <= 0.5 || r >= 2.0 {
            0.0
        } else {
            self.theta.deriv(r.log2()) / (self.kappa * r * LN_2)
        }
    }

    /// Low-frequency profile q(|zeta|) in dimension n.
    #[inline]
    pub fn q(&self, r: f64, n: usize) -> f64 {
        if r >= 2.0 {
            return 0.0;
        }
        let u = if r <= 0.5 { -1.0 } else { r.log2() };
        (self.tail.eval(u).max(0.0) / annulus_volume(n)).sqrt()
    }
}

/// Packet normalization `c(rho) = (int_{S^{n-1}} phi(rho^{1/2}(e1 - nu))^2 dnu)^{-1/2}`.
pub fn c_norm(profiles: &RadialProfiles, n: usize, magnitude: f64) -> f64 {
    c_norm_with(profiles, n, magnitude, 4096)
}

/// [`c_norm`] with an explicit quadrature size.
pub fn c_norm_with(profiles: &RadialProfiles, n: usize, magnitude: f64, points: usize) -> f64 {
    assert!(magnitude > 0.0, "c_norm needs a positive magnitude");
    let sq = magnitude.sqrt();
    let integral = match n {
        1 => 1.0 + profiles.phi(2.0 * sq).powi(2),
        2 => {
            // phi depends on the chord 2 sin(theta/2); the integrand is smooth
            // and flat at the edge of its support, so the trapezoid rule is spectral.
            let x = 0.5 / sq;
            let tmax = if x >= 1.0 { PI } else { 2.0 * x.asin() };
            let h = 2.0 * tmax / points as f64;
            let mut s = 0.0;
            for i in 0..points {
                let th = -tmax + i as f64 * h;
                s += profiles.phi(2.0 * sq * (0.5 * th).abs().sin()).powi(2);
            }
            s * h
        }
        3 => {
            // area element in the chord variable s is 2 pi s ds
            let top = 2.0 * sq;
            let flat = top.min(0.5);
            let mut s = 0.5 * flat * flat;
            if top > 0.5 {
                let f = |t: f64| profiles.phi(t).powi(2) * t;
                s += integrate(f, 0.5, top.min(1.0), points / 8);
            }
            2.0 * PI * s / magnitude
        }
        _ => unreachable!(),
    };
    integral.powf(-0.5)
}

/// Evaluate the packet formula for an arbitrary centre.
pub fn packet_value(profiles: &RadialProfiles, n: usize, c: f64, xi: &Vec3, zeta: &Vec3) -> f64 {
    let rho = vec3::norm(xi);
    let r = vec3::norm(zeta);
    if r == 0.0 || rho == 0.0 {
        return 0.0;
    }
    let radial = profiles.psi(r / rho);
    if radial == 0.0 {
        return 0.0;
    }
    let chord = vec3::norm(&vec3::sub(&vec3::scale(1.0 / r, zeta), &vec3::scale(1.0 / rho, xi)));
    let ang = profiles.phi(rho.sqrt() * chord);
    if ang == 0.0 {
        return 0.0;
    }
    rho.powf(-0.5 * n as f64) * c * radial * ang
}

/// Directions used by an annulus.
pub fn directions(n: usize, count: usize) -> Vec<Vec3> {
    match n {
        1 => vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        2 => (0..count)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / count as f64;
                [a.cos(), a.sin(), 0.0]
            })
            .collect(),
        3 => {
            // Fibonacci sphere
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / count as f64;
                    let rr = (1.0 - z * z).max(0.0).sqrt();
                    let a = golden * k as f64;
                    [rr * a.cos(), rr * a.sin(), z]
                })
                .collect()
        }
        _ => unreachable!(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    Raw,
    Renormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DictionaryParams {
    pub n: usize,
    pub grid_size: usize,
    pub c_ang: f64,
    pub radial_nodes: usize,
    pub mode: FrameMode,
    pub table_resolution: usize,
}

impl DictionaryParams {
    pub fn new(n: usize, grid_size: usize) -> Self {
        DictionaryParams {
            n,
            grid_size,
            c_ang: DEFAULT_C_ANG,
            radial_nodes: 3,
            mode: FrameMode::Renormalized,
            table_resolution: 1 << 14,
        }
    }
}

/// Default angular density constant.
pub const DEFAULT_C_ANG: f64 = 8.0;

/// Sparse spectral profile: (lattice index, value) pairs inside the band.
pub type Sparse = Vec<(u32, f64)>;

#[derive(Clone, Debug)]
pub struct Packet {
    pub annulus: i32,
    pub radial: u32,
    pub direction: u32,
    pub center: Vec3,
    pub weight: f64,
    pub support: Sparse,
}

/// One radial node: a magnitude shared by all directions of its annulus.
#[derive(Clone, Debug)]
pub struct RadialNode {
    pub magnitude: f64,
    pub annulus: i32,
    pub level: u32,
    pub c: f64,
    pub first: usize,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct LowBand {
    pub weight: f64,
    pub support: Sparse,
}

/// Immutable discretized packet family on a grid.
#[derive(Clone, Debug)]
pub struct PacketDictionary {
    pub params: DictionaryParams,
    pub grid: Grid,
    pub profiles: Arc<RadialProfiles>,
    pub packets: Vec<Packet>,
    pub nodes: Vec<RadialNode>,
    pub low: LowBand,
    /// Raw partition function on the lattice (zero outside the band).
    pub partition: Vec<f64>,
    /// Maximal deviation of the raw partition function from 1 on the band.
    pub eps_frame: f64,
}

impl PacketDictionary {
    pub fn build(params: &DictionaryParams) -> Result<Self> {
        let profiles = Arc::new(RadialProfiles::build(params.table_resolution)?);
        Self::build_with(profiles, params)
    }

    pub fn build_with(profiles: Arc<RadialProfiles>, params: &DictionaryParams) -> Result<Self> {
        if params.grid_size < 32 {
            return Err(Error::Config(format!("grid size {} leaves no resolved band", params.grid_size)));
        }
        if params.c_ang < 1.0 || params.radial_nodes < 1 {
            return Err(Error::Config("need C_ang >= 1 and at least one radial node".into()));
        }
        let grid = Grid::new(params.n, params.grid_size)?;
        let n = params.n;
        let rn = params.radial_nodes;
        let edge = grid.band_edge();
        let area = sphere_area(n);

        let mut nodes = Vec::new();
        let mut packets = Vec::new();
        'outer: for j in 0.. {
            let count = match n {
                1 => 2,
                _ => (params.c_ang * 2f64.powf(j as f64 * (n as f64 - 1.0) / 2.0)).ceil() as usize,
            };
            let dirs = directions(n, count);
            for l in 0..rn {
                let rho = 2f64.powf(j as f64 + (l as f64 + 0.5) / rn as f64);
                if rho / 2.0 >= edge {
                    break 'outer;
                }
                let c = c_norm(&profiles, n, rho);
                let weight = rho.powi(n as i32) * LN_2 / rn as f64 * area / count as f64;
                nodes.push(RadialNode { magnitude: rho, annulus: j, level: l as u32, c, first: packets.len(), count });
                for (k, d) in dirs.iter().enumerate() {
                    packets.push(Packet {
                        annulus: j,
                        radial: l as u32,
                        direction: k as u32,
                        center: vec3::scale(rho, d),
                        weight,
                        support: Vec::new(),
                    });
                }
            }
        }

        let band = grid.band_indices();
        let mut partition = vec![0.0; grid.len()];
        let low_weight = annulus_volume(n);
        let mut low = LowBand { weight: low_weight, support: Vec::new() };
        for &idx in &band {
            let z = grid.freq(idx);
            let r = vec3::norm(&z);
            let qv = profiles.q(r, n);
            if qv != 0.0 {
                low.support.push((idx as u32, qv));
                partition[idx] += low_weight * qv * qv;
            }
            if r == 0.0 {
                continue;
            }
            let zhat = vec3::scale(1.0 / r, &z);
            for node in &nodes {
                let radial = profiles.psi(r / node.magnitude);
                if radial == 0.0 {
                    continue;
                }
                let sq = node.magnitude.sqrt();
                let amp = node.magnitude.powf(-0.5 * n as f64) * node.c * radial;
                for p in &mut packets[node.first..node.first + node.count] {
                    let dir = vec3::scale(1.0 / node.magnitude, &p.center);
                    let chord = vec3::norm(&vec3::sub(&zhat, &dir));
                    if chord * sq >= 1.0 {
                        continue;
                    }
                    let v = amp * profiles.phi(sq * chord);
                    if v != 0.0 {
                        p.support.push((idx as u32, v));
                        partition[idx] += p.weight * v * v;
                    }
                }
            }
        }
        let eps_frame = band.iter().map(|&i| (partition[i] - 1.0).abs()).fold(0.0, f64::max);
        if band.iter().any(|&i| partition[i] <= 0.0) {
            return Err(Error::Config("dictionary leaves lattice frequencies uncovered".into()));
        }
        if params.mode == FrameMode::Renormalized {
            for p in &mut packets {
                for (i, v) in &mut p.support {
                    *v /= partition[*i as usize].sqrt();
                }
            }
            for (i, v) in &mut low.support {
                *v /= partition[*i as usize].sqrt();
            }
        }
        Ok(PacketDictionary { params: params.clone(), grid, profiles, packets, nodes, low, partition, eps_frame })
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn mode(&self) -> FrameMode {
        self.params.mode
    }

    /// Whether a lattice index lies in the resolved band.
    pub fn resolved(&self, idx: usize) -> bool {
        vec3::norm(&self.grid.freq(idx)) <= self.grid.band_edge()
    }

    /// Partition function of the stored (raw or renormalized) packets.
    pub fn stored_partition(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.grid.len()];
        for p in &self.packets {
            for &(i, v) in &p.support {
                q[i as usize] += p.weight * v * v;
            }
        }
        for &(i, v) in &self.low.support {
            q[i as usize] += self.low.weight * v * v;
        }
        q
    }

    /// Packet formula at an arbitrary centre (not band truncated, not renormalized).
    pub fn psi_eval(&self, xi: &Vec3, zeta: &Vec3) -> f64 {
        let rho = vec3::norm(xi);
        if rho == 0.0 {
            return 0.0;
        }
        let c = self
            .nodes
            .iter()
            .find(|nd| (nd.magnitude - rho).abs() <= 1e-12 * rho)
            .map(|nd| nd.c)
            .unwrap_or_else(|| c_norm(&self.profiles, self.n(), rho));
        packet_value(&self.profiles, self.n(), c, xi, zeta)
    }

    pub fn q_eval(&self, zeta: &Vec3) -> f64 {
        self.profiles.q(vec3::norm(zeta), self.n())
    }

    /// Sum of packet weights.
    pub fn total_weight(&self) -> f64 {
        self.packets.iter().map(|p| p.weight).sum()
    }

    /// Volume of the xi-region covered by the radial cells.
    pub fn covered_volume(&self) -> f64 {
        let last = self.nodes.last().expect("dictionary has nodes");
        let top = last.magnitude * 2f64.powf(0.5 / self.params.radial_nodes as f64);
        sphere_area(self.n()) / self.n() as f64 * (top.powi(self.n() as i32) - 1.0)
    }

    /// Spectral centroid of each stored packet (used to demodulate slices).
    pub fn centroids(&self) -> Vec<Vec3> {
        self.packets
            .iter()
            .map(|p| {
                let mut acc = vec3::ZERO;
                let mut mass = 0.0;
                for &(i, v) in &p.support {
                    let w = v * v;
                    acc = vec3::axpy(&acc, w, &self.grid.freq(i as usize));
                    mass += w;
                }
                if mass > 0.0 {
                    vec3::scale(1.0 / mass, &acc)
                } else {
                    p.center
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::OnceLock;

    fn profiles() -> Arc<RadialProfiles> {
        static P: OnceLock<Arc<RadialProfiles>> = OnceLock::new();
        P.get_or_init(|| Arc::new(RadialProfiles::build(1 << 14).unwrap())).clone()
    }

    #[test]
    fn eta_derivative_matches_difference_quotient() {
        for k in 1..40 {
            let t = 0.5 + 0.5 * k as f64 / 40.0;
            let h = 1e-6;
            let fd = (eta_exact(t + h) - eta_exact(t - h)) / (2.0 * h);
            assert!((eta_with_deriv(t).1 - fd).abs() < 1e-6, "t={t}");
            let fd = (theta_exact(t - 0.7 + h) - theta_exact(t - 0.7 - h)) / (2.0 * h);
            assert!((theta_with_deriv(t - 0.7).1 - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn profile_point_values() {
        let p = profiles();
        assert_eq!(p.psi(3.0), 0.0);
        assert_eq!(p.phi(0.0), 1.0);
        assert_eq!(p.phi(1.0), 0.0);
        assert!((p.calderon() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn coarse_tables_fail_calibration() {
        assert!(matches!(RadialProfiles::build(256), Err(Error::Calibration(_))));
        assert!(matches!(RadialProfiles::build(100), Err(Error::Config(_))));
    }

    #[test]
    fn calderon_integral_is_scale_free() {
        // direct integration in sigma for several |zeta|
        let p = profiles();
        for r in [0.3, 1.0, 7.5] {
            let f = |s: f64| {
                let sigma = 2f64.powf(s);
                p.psi(sigma * r).powi(2) * LN_2
            };
            let lo = (0.5 / r).log2();
            let v = integrate(f, lo, lo + 2.0, 4096);
            assert!((v - 1.0).abs() < 1e-10, "r={r} v={v}");
        }
    }

    #[test]
    fn c_norm_small_magnitude_is_sphere_constant() {
        let p = profiles();
        for n in 1..=3 {
            let c = c_norm(&p, n, 1e-3);
            assert!((c - sphere_area(n).powf(-0.5)).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn c_norm_scaling_and_refinement() {
        let p = profiles();
        for n in 2..=3 {
            for s in [256.0, 1024.0] {
                let ratio = c_norm(&p, n, 4.0 * s) / c_norm(&p, n, s);
                let target = 2f64.powf((n as f64 - 1.0) / 2.0);
                assert!((ratio / target - 1.0).abs() < 0.02, "n={n} s={s} ratio={ratio}");
            }
        }
        let a = c_norm_with(&p, 2, 1024.0, 4096);
        let b = c_norm_with(&p, 2, 1024.0, 40960);
        assert!((a - b).abs() < 1e-6 * b);
    }

    #[test]
    fn q_values() {
        let p = profiles();
        assert_eq!(p.q(3.0, 2), 0.0);
        let expect = (3.0 * PI / 4.0f64).powf(-0.5);
        assert!((p.q(0.25, 2) - expect).abs() < 1e-12);
        assert!((expect - 0.6515).abs() < 1e-4);
    }

    #[test]
    fn packet_support_examples() {
        let p = profiles();
        let c = c_norm(&p, 2, 32.0);
        let xi = [32.0, 0.0, 0.0];
        assert_eq!(packet_value(&p, 2, c, &xi, &[70.0, 0.0, 0.0]), 0.0);
        assert_eq!(packet_value(&p, 2, c, &xi, &[0.0, 32.0, 0.0]), 0.0);
        assert_eq!(packet_value(&p, 2, c, &xi, &[0.0, 0.0, 0.0]), 0.0);
        assert!(packet_value(&p, 2, c, &xi, &[32.0, 0.0, 0.0]) > 0.0);
    }

    #[test]
    fn continuous_resolution_of_identity() {
        // int psi_xi(zeta)^2 dxi over |xi| >= 1 plus |ann| q^2 equals 1 (n = 2)
        let p = profiles();
        let zeta = [5.3, 2.1, 0.0];
        let r = vec3::norm(&zeta);
        let mut total = annulus_volume(2) * p.q(r, 2).powi(2);
        let radial = |u: f64| {
            let rho = 2f64.powf(u);
            let c = c_norm(&p, 2, rho);
            let ang = |a: f64| packet_value(&p, 2, c, &[rho * a.cos(), rho * a.sin(), 0.0], &zeta).powi(2);
            let base = zeta[1].atan2(zeta[0]);
            let width = 2.0 * (0.5 / rho.sqrt()).min(1.0).asin();
            integrate(ang, base - width, base + width, 64) * rho * rho * LN_2
        };
        total += integrate(radial, (r / 2.0).log2().max(0.0), (2.0 * r).log2(), 64);
        assert!((total - 1.0).abs() < 1e-8, "total={total}");
    }
}
