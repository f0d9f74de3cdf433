//! Contact quasi-metric on the cosphere bundle, ball volumes and tent-space norms.
//!
//! Cone and tent integrals are evaluated on the full position grid times a set of
//! uniformly spread directions. For every (packet, direction) pair the spatial
//! cross-section `{z : |z|^2 + |omega.z| < r^2}` becomes a stencil of lattice offsets
//! whose weights are the exact cell/section overlap areas (subsampled on boundary
//! cells), so the discrete cone sums are monotone in the radius.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::grid::{Fft, Grid, C64};
use crate::packets::{annulus_volume, directions, sphere_area, PacketDictionary};
use crate::quad::integrate;
use crate::transform::PhaseField;
use crate::vec3::{self, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpherePoint {
    pub x: Vec3,
    pub omega: Vec3,
}

/// `(|x-y|^2 + |omega.(x-y)| + |omega-nu|^2)^{1/2}` with torus-periodic differences;
/// `omega` is taken from the first argument.
pub fn quasi_dist(a: &SpherePoint, b: &SpherePoint, n: usize) -> f64 {
    let d = vec3::torus_diff(&a.x, &b.x, n);
    dist_from_diff(&d, &a.omega, &b.omega)
}

/// Same expression on R^n (no wrapping).
pub fn quasi_dist_flat(a: &SpherePoint, b: &SpherePoint) -> f64 {
    let d = vec3::sub(&a.x, &b.x);
    dist_from_diff(&d, &a.omega, &b.omega)
}

#[inline]
fn dist_from_diff(d: &Vec3, omega: &Vec3, nu: &Vec3) -> f64 {
    let dw = vec3::sub(omega, nu);
    (vec3::dot(d, d) + vec3::dot(omega, d).abs() + vec3::dot(&dw, &dw)).sqrt()
}

/// Measure of `{z in R^n : |z|^2 + |omega.z| < r2}`.
pub fn cone_section_area(n: usize, r2: f64) -> f64 {
    if r2 <= 0.0 {
        return 0.0;
    }
    // a* solves a^2 + a = r2: the extent along omega
    let astar = 0.5 * (-1.0 + (1.0 + 4.0 * r2).sqrt());
    match n {
        1 => 2.0 * astar,
        2 => {
            let big = r2 + 0.25;
            let rr = big.sqrt();
            2.0 * (big * (0.5 / rr).acos() - 0.5 * (big - 0.25).sqrt())
        }
        3 => 2.0 * PI * (r2 * astar - astar * astar / 2.0 - astar.powi(3) / 3.0),
        _ => unreachable!(),
    }
}

/// `|B_tau|` by one-dimensional quadrature of the cross-section areas over the sphere.
pub fn ball_volume_exact(n: usize, tau: f64) -> f64 {
    let t2 = tau * tau;
    match n {
        1 => cone_section_area(1, t2) + cone_section_area(1, t2 - 4.0),
        2 => {
            let amax = if tau >= 2.0 { PI } else { 2.0 * (tau / 2.0).asin() };
            2.0 * integrate(|a| cone_section_area(2, t2 - 4.0 * (a / 2.0).sin().powi(2)), 0.0, amax, 256)
        }
        3 => {
            let smax = tau.min(2.0);
            2.0 * PI * integrate(|s| s * cone_section_area(3, t2 - s * s), 0.0, smax, 256)
        }
        _ => unreachable!(),
    }
}

fn orthonormal_frame(omega: &Vec3, n: usize) -> [Vec3; 3] {
    let e0 = *omega;
    match n {
        1 => [e0, vec3::ZERO, vec3::ZERO],
        2 => [e0, [-e0[1], e0[0], 0.0], vec3::ZERO],
        _ => {
            let pick = if e0[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let t = vec3::unit(&vec3::axpy(&pick, -vec3::dot(&pick, &e0), &e0));
            let u = [e0[1] * t[2] - e0[2] * t[1], e0[2] * t[0] - e0[0] * t[2], e0[0] * t[1] - e0[1] * t[0]];
            [e0, t, u]
        }
    }
}

/// Monte-Carlo estimate of `|B_tau(center)|` in `R^n x S^{n-1}` with its standard error.
pub fn mc_ball_volume<R: Rng>(n: usize, center: &SpherePoint, tau: f64, samples: usize, rng: &mut R) -> (f64, f64) {
    let frame = orthonormal_frame(&center.omega, n);
    let par = tau.min(tau * tau);
    let cap = tau.min(2.0);
    let box_vol = 2.0 * par * (2.0 * tau).powi(n as i32 - 1);
    let cap_measure = match n {
        1 => 2.0,
        2 => 4.0 * (cap / 2.0).asin(),
        _ => PI * cap * cap,
    };
    let mut hits = 0usize;
    for _ in 0..samples {
        let mut z = vec3::scale(rng.random_range(-par..par), &frame[0]);
        for e in frame.iter().take(n).skip(1) {
            z = vec3::axpy(&z, rng.random_range(-tau..tau), e);
        }
        let nu = match n {
            1 => {
                if rng.random_bool(0.5) {
                    frame[0]
                } else {
                    vec3::scale(-1.0, &frame[0])
                }
            }
            2 => {
                let amax = 2.0 * (cap / 2.0).asin();
                let a: f64 = rng.random_range(-amax..amax);
                vec3::axpy(&vec3::scale(a.cos(), &frame[0]), a.sin(), &frame[1])
            }
            _ => {
                let c: f64 = rng.random_range(1.0 - cap * cap / 2.0..1.0);
                let s = (1.0 - c * c).max(0.0).sqrt();
                let ph: f64 = rng.random_range(0.0..2.0 * PI);
                let v = vec3::axpy(&vec3::scale(c, &frame[0]), s * ph.cos(), &frame[1]);
                vec3::axpy(&v, s * ph.sin(), &frame[2])
            }
        };
        let b = SpherePoint { x: vec3::add(&center.x, &z), omega: nu };
        if quasi_dist_flat(center, &b) < tau {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    let scale = box_vol * cap_measure;
    (scale * p, scale * (p * (1.0 - p) / samples as f64).sqrt())
}

/// Monte-Carlo ball volumes on dyadic sub-octave radii.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallVolumeTable {
    pub n: usize,
    pub radii: Vec<f64>,
    pub volumes: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub samples: usize,
    pub warnings: Vec<String>,
}

impl BallVolumeTable {
    /// Radii `2^{lo}, ..., 2^{hi}` with `per_octave` steps per octave.
    pub fn build(n: usize, lo: i32, hi: i32, per_octave: usize, samples: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let center = SpherePoint { x: vec3::ZERO, omega: [1.0, 0.0, 0.0] };
        let steps = (hi - lo) as usize * per_octave;
        let mut radii = Vec::new();
        let mut volumes = Vec::new();
        let mut std_errors = Vec::new();
        let mut warnings = Vec::new();
        for i in 0..=steps {
            let tau = 2f64.powf(lo as f64 + i as f64 / per_octave as f64);
            let (v, se) = mc_ball_volume(n, &center, tau, samples, &mut rng);
            if se > 0.01 * v {
                warnings.push(format!("radius {tau:.4}: standard error {:.2}% exceeds 1%", 100.0 * se / v));
            }
            radii.push(tau);
            volumes.push(v);
            std_errors.push(se);
        }
        BallVolumeTable { n, radii, volumes, std_errors, samples, warnings }
    }

    /// Default table used by the tent norms: 2^-6 .. 2^4, four radii per octave.
    pub fn standard(n: usize) -> Self {
        Self::build(n, -6, 4, 4, 200_000, 0x7e47)
    }

    /// `|B_tau|`: log-log interpolation, power-law extrapolation (2n below, n above).
    pub fn volume(&self, tau: f64) -> f64 {
        let lt = tau.ln();
        let k = self.radii.len();
        let l0 = self.radii[0].ln();
        let lk = self.radii[k - 1].ln();
        if lt <= l0 {
            return self.volumes[0] * (tau / self.radii[0]).powi(2 * self.n as i32);
        }
        if lt >= lk {
            return self.volumes[k - 1] * (tau / self.radii[k - 1]).powi(self.n as i32);
        }
        let pos = (lt - l0) / (lk - l0) * (k - 1) as f64;
        let i = (pos as usize).min(k - 2);
        let f = pos - i as f64;
        ((1.0 - f) * self.volumes[i].ln() + f * self.volumes[i + 1].ln()).exp()
    }

    /// `mu(lambda) = |B_{lambda^{-1/2}}|^{-1}`.
    pub fn mu(&self, lambda: f64) -> f64 {
        1.0 / self.volume(lambda.powf(-0.5))
    }

    /// Least-squares log-log slope over table radii within `[lo, hi]`.
    pub fn slope(&self, lo: f64, hi: f64) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .radii
            .iter()
            .zip(&self.volumes)
            .filter(|(r, _)| **r >= lo * (1.0 - 1e-12) && **r <= hi * (1.0 + 1e-12))
            .map(|(r, v)| (r.ln(), v.ln()))
            .collect();
        fit_slope(&pts)
    }
}

pub(crate) fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Quadrature stencil for one cone cross-section: grid offsets and overlap areas.
#[derive(Clone, Debug, Default)]
struct Stencil {
    offsets: Vec<[i64; 3]>,
    weights: Vec<f64>,
}

const SUBCELL: usize = 8;

fn build_stencil(grid: &Grid, omega: &Vec3, r2: f64) -> Stencil {
    let mut st = Stencil::default();
    if r2 <= 0.0 {
        return st;
    }
    let n = grid.n;
    let h = grid.spacing();
    let r = r2.sqrt();
    let reach = ((r / h).ceil() as i64 + 1).min(grid.size as i64 / 2);
    let half = grid.size as i64 / 2;
    let inside = |z: &Vec3| vec3::dot(z, z) + vec3::dot(omega, z).abs() < r2;
    let cell = h.powi(n as i32);
    let range = |ax: usize| if ax < n { -reach..=reach } else { 0..=0 };
    for i in range(0) {
        for j in range(1) {
            for k in range(2) {
                let c = [i, j, k];
                if (0..n).any(|a| c[a] <= -half || c[a] > half) {
                    continue;
                }
                let center = [i as f64 * h, j as f64 * h, k as f64 * h];
                // cells entirely inside (all corners) get full weight; the section is convex
                let mut all = true;
                let mut any_near = false;
                for corner in 0..(1usize << n) {
                    let mut p = center;
                    for (a, pa) in p.iter_mut().enumerate().take(n) {
                        *pa += if corner >> a & 1 == 1 { 0.5 * h } else { -0.5 * h };
                    }
                    if !inside(&p) {
                        all = false;
                    } else {
                        any_near = true;
                    }
                }
                let dist = vec3::norm(&center);
                if !all && !any_near && dist > r + h {
                    continue;
                }
                let w = if all {
                    1.0
                } else {
                    let m = SUBCELL;
                    let mut hit = 0usize;
                    let total = m.pow(n as u32);
                    for s in 0..total {
                        let mut p = center;
                        let mut rem = s;
                        for pa in p.iter_mut().take(n) {
                            let q = rem % m;
                            rem /= m;
                            *pa += ((q as f64 + 0.5) / m as f64 - 0.5) * h;
                        }
                        if inside(&p) {
                            hit += 1;
                        }
                    }
                    hit as f64 / total as f64
                };
                if w > 0.0 {
                    st.offsets.push(c);
                    st.weights.push(w * cell);
                }
            }
        }
    }
    st
}

/// `acc[m] += w * g[m - shift]` on the periodic grid.
fn add_shifted(acc: &mut [f64], g: &[f64], grid: &Grid, shift: &[i64; 3], w: f64) {
    let nn = grid.size;
    let last = grid.n - 1;
    let s_last = shift[last].rem_euclid(nn as i64) as usize;
    let rows = grid.len() / nn;
    for row in 0..rows {
        // decompose row index into leading coordinates
        let mut src_row = 0usize;
        let mut rem = row;
        let mut mul = 1usize;
        for a in (0..last).rev() {
            let c = rem % nn;
            rem /= nn;
            let sc = (c as i64 - shift[a]).rem_euclid(nn as i64) as usize;
            src_row += sc * mul;
            mul *= nn;
        }
        let dst = &mut acc[row * nn..(row + 1) * nn];
        let src = &g[src_row * nn..(src_row + 1) * nn];
        // dst[j] += w * src[j - s]
        for j in 0..s_last {
            dst[j] += w * src[j + nn - s_last];
        }
        for j in s_last..nn {
            dst[j] += w * src[j - s_last];
        }
    }
}

const DIRECT_LIMIT: usize = 40;

/// Evaluation layout and shared data for tent-space functionals on one dictionary.
pub struct TentEvaluator<'a> {
    pub dict: &'a PacketDictionary,
    pub table: &'a BallVolumeTable,
    fft: Fft,
    /// Evaluation directions on `S^{n-1}`.
    pub dirs: Vec<Vec3>,
    sources: Vec<Source>,
}

#[derive(Clone, Copy, Debug)]
struct Source {
    /// `None` selects the low-band slice.
    packet: Option<usize>,
    center: Vec3,
    weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TentParams {
    /// Direction spacing as a fraction of the smallest cone radius.
    pub dir_factor: f64,
    pub max_directions: usize,
}

impl Default for TentParams {
    fn default() -> Self {
        TentParams { dir_factor: 0.25, max_directions: 4096 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TentNormReport {
    pub p: f64,
    pub s: f64,
    pub alpha: f64,
    pub norm: f64,
    /// Captured fraction of the exact cone cross-section areas.
    pub coverage: f64,
    /// `((n-1)/2)|1/2 - 1/p|`.
    pub s_of_p: f64,
    pub directions: usize,
    pub warnings: Vec<String>,
}

impl TentNormReport {
    pub const CSV_HEADER: &'static str = "p,s,alpha,norm,coverage,warnings";

    pub fn csv_row(&self) -> String {
        let p = if self.p.is_infinite() { "inf".to_string() } else { format!("{}", self.p) };
        format!("{},{},{},{:.12e},{:.6},\"{}\"", p, self.s, self.alpha, self.norm, self.coverage, self.warnings.join("; "))
    }
}

pub fn s_of_p(n: usize, p: f64) -> f64 {
    (n as f64 - 1.0) / 2.0 * (0.5 - 1.0 / p).abs()
}

impl<'a> TentEvaluator<'a> {
    pub fn new(dict: &'a PacketDictionary, table: &'a BallVolumeTable, alpha_min: f64, params: &TentParams) -> Self {
        let n = dict.n();
        let top = dict.packets.iter().map(|p| vec3::norm(&p.center)).fold(1.0, f64::max);
        let spacing = params.dir_factor * alpha_min * top.powf(-0.5);
        let count = match n {
            1 => 2,
            2 => (2.0 * PI / spacing).ceil() as usize,
            _ => (4.0 * PI / (spacing * spacing)).ceil() as usize,
        }
        .min(params.max_directions)
        .max(2);
        let dirs = directions(n, count);
        let mut sources: Vec<Source> = dict
            .packets
            .iter()
            .enumerate()
            .map(|(k, p)| Source { packet: Some(k), center: p.center, weight: p.weight })
            .collect();
        // the low band occupies the xi-annulus [1/2, 1]; spread it over pseudo-packets
        let low_dirs = directions(n, if n == 1 { 2 } else { 8 });
        let mut pseudo = Vec::new();
        for u in [-0.75f64, -0.25] {
            let rho = 2f64.powf(u);
            for d in &low_dirs {
                pseudo.push((vec3::scale(rho, d), rho.powi(n as i32)));
            }
        }
        let total: f64 = pseudo.iter().map(|p| p.1).sum();
        for (c, w) in pseudo {
            sources.push(Source { packet: None, center: c, weight: dict.low.weight * w / total });
        }
        TentEvaluator { dict, table, fft: Fft::new(dict.grid), dirs, sources }
    }

    fn dir_weight(&self) -> f64 {
        sphere_area(self.dict.n()) / self.dirs.len() as f64
    }

    fn squared_slices(&self, field: &PhaseField) -> (Vec<Vec<f64>>, Vec<f64>) {
        let slices = (0..field.packets).map(|k| field.slice(k).iter().map(|v| v.norm_sqr()).collect()).collect();
        let low = field.low.iter().map(|v| v.norm_sqr()).collect();
        (slices, low)
    }

    /// Generic cone sums: for every direction d and grid point m,
    /// `sum_src c_src sum_z wt_z |F_src(x_m - z)|^2` with section radius^2 `r2(src, d)`.
    /// Returns the sums and the coverage fraction.
    fn cone_sums(
        &self,
        field: &PhaseField,
        coef: &dyn Fn(&Source) -> f64,
        r2: &dyn Fn(&Source, &Vec3) -> f64,
    ) -> (Vec<Vec<f64>>, f64) {
        let grid = self.dict.grid;
        let len = grid.len();
        let n = grid.n;
        let (sq, low) = self.squared_slices(field);
        let mut spatial = vec![vec![0.0; len]; self.dirs.len()];
        let mut spectral: Vec<Option<Vec<C64>>> = vec![None; self.dirs.len()];
        let mut exact_area = 0.0;
        let mut got_area = 0.0;
        let mut buf = vec![C64::new(0.0, 0.0); len];
        for src in &self.sources {
            let c = coef(src);
            if c == 0.0 {
                continue;
            }
            let g: &Vec<f64> = match src.packet {
                Some(k) => &sq[k],
                None => &low,
            };
            let mut ghat: Option<Vec<C64>> = None;
            for (d, omega) in self.dirs.iter().enumerate() {
                let rr = r2(src, omega);
                if rr <= 0.0 {
                    continue;
                }
                let st = build_stencil(&grid, omega, rr);
                exact_area += cone_section_area(n, rr);
                got_area += st.weights.iter().sum::<f64>();
                if st.offsets.is_empty() {
                    continue;
                }
                if st.offsets.len() <= DIRECT_LIMIT {
                    for (z, w) in st.offsets.iter().zip(&st.weights) {
                        add_shifted(&mut spatial[d], g, &grid, z, c * w);
                    }
                } else {
                    let gh = ghat.get_or_insert_with(|| {
                        let mut v: Vec<C64> = g.iter().map(|&x| C64::new(x, 0.0)).collect();
                        self.fft.forward(&mut v);
                        v
                    });
                    buf.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
                    for (z, w) in st.offsets.iter().zip(&st.weights) {
                        let idx = grid.index([
                            grid.unsigned(z[0]),
                            if n > 1 { grid.unsigned(z[1]) } else { 0 },
                            if n > 2 { grid.unsigned(z[2]) } else { 0 },
                        ]);
                        buf[idx] += C64::new(*w, 0.0);
                    }
                    self.fft.forward(&mut buf);
                    // circular convolution: (g * I)^ = N^n ghat Ihat with our normalization
                    let scale = len as f64 * c;
                    let acc = spectral[d].get_or_insert_with(|| vec![C64::new(0.0, 0.0); len]);
                    for ((a, x), y) in acc.iter_mut().zip(gh.iter()).zip(&buf) {
                        *a += x * y * scale;
                    }
                }
            }
        }
        for (d, sp) in spectral.into_iter().enumerate() {
            if let Some(mut s) = sp {
                self.fft.inverse(&mut s);
                for (a, v) in spatial[d].iter_mut().zip(&s) {
                    *a += v.re;
                }
            }
        }
        for row in &mut spatial {
            for v in row.iter_mut() {
                *v = v.max(0.0);
            }
        }
        let coverage = if exact_area > 0.0 { got_area / exact_area } else { 1.0 };
        (spatial, coverage)
    }

    /// `A^alpha_s F` squared on (direction, grid point).
    pub fn a_squared(&self, field: &PhaseField, s: f64, alpha: f64) -> (Vec<Vec<f64>>, f64) {
        let table = self.table;
        let coef = |src: &Source| {
            let rho = vec3::norm(&src.center);
            src.weight * table.mu(rho) * rho.powf(2.0 * s)
        };
        let r2 = |src: &Source, omega: &Vec3| {
            let rho = vec3::norm(&src.center);
            let nu = vec3::scale(1.0 / rho, &src.center);
            let dw = vec3::sub(omega, &nu);
            alpha * alpha / rho - vec3::dot(&dw, &dw)
        };
        self.cone_sums(field, &coef, &r2)
    }

    /// `A^alpha_s F(x, omega)` at arbitrary points by direct stencil sums (positions snap
    /// to the nearest grid point).
    pub fn a_functional(&self, field: &PhaseField, s: f64, alpha: f64, points: &[SpherePoint]) -> Vec<f64> {
        let grid = self.dict.grid;
        let n = grid.n;
        let h = grid.spacing();
        let (sq, low) = self.squared_slices(field);
        points
            .iter()
            .map(|pt| {
                let mut c = [0usize; 3];
                for a in 0..n {
                    c[a] = ((pt.x[a] / h).round() as i64).rem_euclid(grid.size as i64) as usize;
                }
                let mut acc = 0.0;
                for src in &self.sources {
                    let rho = vec3::norm(&src.center);
                    let nu = vec3::scale(1.0 / rho, &src.center);
                    let dw = vec3::sub(&pt.omega, &nu);
                    let rr = alpha * alpha / rho - vec3::dot(&dw, &dw);
                    if rr <= 0.0 {
                        continue;
                    }
                    let g = match src.packet {
                        Some(k) => &sq[k],
                        None => &low,
                    };
                    let cf = src.weight * self.table.mu(rho) * rho.powf(2.0 * s);
                    let st = build_stencil(&grid, &pt.omega, rr);
                    for (z, w) in st.offsets.iter().zip(&st.weights) {
                        let mut cc = [0usize; 3];
                        for a in 0..n {
                            cc[a] = (c[a] as i64 - z[a]).rem_euclid(grid.size as i64) as usize;
                        }
                        acc += cf * w * g[grid.index(cc)];
                    }
                }
                acc.sqrt()
            })
            .collect()
    }

    /// Energy on packets whose cone radius `alpha |xi|^{-1/2}` is below the grid spacing,
    /// where the cross-section stencils degenerate to a handful of cells.
    fn unresolved_warning(&self, field: &PhaseField, alpha: f64) -> Option<String> {
        let h = self.dict.grid.spacing();
        let mut total = 0.0;
        let mut outside = 0.0;
        for (k, p) in self.dict.packets.iter().enumerate() {
            let e: f64 = field.slice(k).iter().map(|v| v.norm_sqr()).sum::<f64>() * p.weight;
            total += e;
            if alpha * vec3::norm(&p.center).powf(-0.5) < h {
                outside += e;
            }
        }
        if total > 0.0 && outside > 0.1 * total {
            Some(format!("{:.1}% of the energy sits on packets with cones narrower than a grid cell", 100.0 * outside / total))
        } else {
            None
        }
    }

    /// `||F||_{T^p_s}` with aperture `alpha` (p < inf) or the tent functional (p = inf).
    pub fn tent_norm(&self, field: &PhaseField, p: f64, s: f64, alpha: f64) -> TentNormReport {
        let n = self.dict.n();
        let mut warnings = Vec::new();
        if let Some(w) = self.unresolved_warning(field, alpha) {
            warnings.push(w);
        }
        let dx = self.dict.grid.cell_volume();
        let dw = self.dir_weight();
        let (norm, coverage) = if p.is_infinite() {
            self.c_sup(field, s)
        } else {
            let (a2, cov) = self.a_squared(field, s, alpha);
            let sum: f64 = a2.iter().flatten().map(|v| v.powf(p / 2.0)).sum();
            ((sum * dx * dw).powf(1.0 / p), cov)
        };
        if coverage < 0.9 {
            warnings.push(format!("cone stencils capture only {:.1}% of the section area", 100.0 * coverage));
        }
        TentNormReport { p, s, alpha, norm, coverage, s_of_p: s_of_p(n, p), directions: self.dirs.len(), warnings }
    }

    /// Lower bound for `||C_s F||_inf` over balls centred on the evaluation layout with
    /// dyadic radii 2^-4 .. 4; the tent `T(B_r(c))` is approximated by
    /// `{(y, eta) : d(c, (y, etahat)) < r - |eta|^{-1/2}}`.
    fn c_sup(&self, field: &PhaseField, s: f64) -> (f64, f64) {
        let mut best: f64 = 0.0;
        let mut cov_acc = 0.0;
        let mut cov_n = 0.0;
        for e in -4..=2 {
            let r = 2f64.powi(e);
            let coef = |src: &Source| {
                let rho = vec3::norm(&src.center);
                if r - rho.powf(-0.5) <= 0.0 {
                    0.0
                } else {
                    src.weight * rho.powf(2.0 * s)
                }
            };
            let r2 = |src: &Source, omega: &Vec3| {
                let rho = vec3::norm(&src.center);
                let inner = r - rho.powf(-0.5);
                if inner <= 0.0 {
                    return 0.0;
                }
                let nu = vec3::scale(1.0 / rho, &src.center);
                let dw = vec3::sub(omega, &nu);
                inner * inner - vec3::dot(&dw, &dw)
            };
            let (sums, cov) = self.cone_sums(field, &coef, &r2);
            cov_acc += cov;
            cov_n += 1.0;
            let vol = self.table.volume(r);
            let m = sums.iter().flatten().cloned().fold(0.0, f64::max);
            best = best.max((m / vol).sqrt());
        }
        (best, cov_acc / cov_n)
    }

    /// Norms for apertures 1/2, 1, 2 and the largest pairwise ratio.
    pub fn aperture_check(&self, field: &PhaseField, p: f64, s: f64) -> ApertureReport {
        let norms: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|&a| self.tent_norm(field, p, s, a).norm).collect();
        let mut max_ratio: f64 = 1.0;
        for a in &norms {
            for b in &norms {
                if *b > 0.0 {
                    max_ratio = max_ratio.max(a / b);
                }
            }
        }
        ApertureReport { alphas: vec![0.5, 1.0, 2.0], norms, max_ratio }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApertureReport {
    pub alphas: Vec<f64>,
    pub norms: Vec<f64>,
    pub max_ratio: f64,
}

/// Volume of the xi-annulus carried by the low band, re-exported for reports.
pub fn low_band_volume(n: usize) -> f64 {
    annulus_volume(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section_area_matches_sampling() {
        for n in 1..=3usize {
            for r2 in [0.01, 0.3, 2.0] {
                let exact = cone_section_area(n, r2);
                // midpoint sampling on a fine box
                let r = r2.sqrt();
                let m = if n == 3 { 120 } else { 600 };
                let h = 2.0 * r / m as f64;
                let mut cnt = 0usize;
                let range = |ax: usize| if ax < n { 0..m } else { 0..1 };
                for i in range(0) {
                    for j in range(1) {
                        for k in range(2) {
                            let z = [
                                -r + (i as f64 + 0.5) * h,
                                if n > 1 { -r + (j as f64 + 0.5) * h } else { 0.0 },
                                if n > 2 { -r + (k as f64 + 0.5) * h } else { 0.0 },
                            ];
                            if vec3::dot(&z, &z) + z[0].abs() < r2 {
                                cnt += 1;
                            }
                        }
                    }
                }
                let approx = cnt as f64 * h.powi(n as i32);
                assert!((approx / exact - 1.0).abs() < 0.02, "n={n} r2={r2}: {approx} vs {exact}");
            }
        }
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in 2..=3 {
            for tau in [0.125, 0.7, 3.0] {
                let c = SpherePoint { x: [0.3, -1.0, 2.0], omega: vec3::unit(&[1.0, 2.0, if n == 3 { -0.5 } else { 0.0 }]) };
                let (v, se) = mc_ball_volume(n, &c, tau, 200_000, &mut rng);
                let exact = ball_volume_exact(n, tau);
                assert!((v - exact).abs() < 4.0 * se, "n={n} tau={tau}: {v} +- {se} vs {exact}");
            }
        }
    }

    #[test]
    fn quasi_dist_examples() {
        let a = SpherePoint { x: [0.0; 3], omega: [1.0, 0.0, 0.0] };
        assert_eq!(quasi_dist(&a, &a, 2), 0.0);
        let t = 1e-3;
        let b = SpherePoint { x: [t, 0.0, 0.0], omega: [1.0, 0.0, 0.0] };
        assert!((quasi_dist(&a, &b, 2) / (t * t + t).sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stencil_weights_approach_area() {
        let grid = Grid::new(2, 64).unwrap();
        for r2 in [0.05, 0.4, 1.5] {
            let st = build_stencil(&grid, &vec3::unit(&[1.0, 0.4, 0.0]), r2);
            let s: f64 = st.weights.iter().sum();
            let exact = cone_section_area(2, r2);
            assert!((s / exact - 1.0).abs() < 0.03, "r2={r2}: {s} vs {exact}");
        }
    }

    #[test]
    fn shifted_add_wraps() {
        let grid = Grid::new(2, 4).unwrap();
        let g: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let mut acc = vec![0.0; 16];
        add_shifted(&mut acc, &g, &grid, &[1, -1, 0], 1.0);
        // acc[i,j] = g[i-1, j+1]
        assert_eq!(acc[grid.index([0, 0, 0])], g[grid.index([3, 1, 0])]);
        assert_eq!(acc[grid.index([2, 3, 0])], g[grid.index([1, 0, 0])]);
    }
}
