//! Rough symbols, Littlewood-Paley symbol smoothing, Kohn-Nirenberg quantization and
//! the operators built from a coefficient matrix.
//!
//! Littlewood-Paley family: `psi_0(xi) = eta(|xi|/2)` (1 on |xi| <= 1, 0 on |xi| >= 2) and
//! `psi_k(xi) = psi_0(2^-k xi) - psi_0(2^{1-k} xi)`. Smoothing at shell k low-passes the
//! x-dependence with `psi_0(2^{-k/2} D)`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Fft, Grid, RealField, C64};
use crate::packets::{directions, eta_with_deriv};
use crate::spline::{PeriodicSpline, Taps};
use crate::tent::fit_slope;
use crate::vec3::{self, Vec3};

/// `psi_0(r)` and its derivative.
#[inline]
pub fn lp_low(r: f64) -> (f64, f64) {
    let (v, d) = eta_with_deriv(r / 2.0);
    (v, d / 2.0)
}

/// `psi_k(r)` and its derivative.
#[inline]
pub fn lp_shell(k: u32, r: f64) -> (f64, f64) {
    if k == 0 {
        return lp_low(r);
    }
    let s1 = 2f64.powi(-(k as i32));
    let s0 = 2.0 * s1;
    let (a, da) = lp_low(r * s1);
    let (b, db) = lp_low(r * s0);
    (a - b, da * s1 - db * s0)
}

/// Shells with `psi_k(r) != 0`, as (k, value, derivative).
pub fn active_shells(r: f64) -> impl Iterator<Item = (u32, f64, f64)> {
    let k0 = if r < 1.0 { 0 } else { r.log2().floor() as u32 };
    (k0.saturating_sub(1)..=k0 + 1).filter_map(move |k| {
        let (v, d) = lp_shell(k, r);
        (v != 0.0 || d != 0.0).then_some((k, v, d))
    })
}

/// Cutoff `chi(r) = 1 - eta(r / 2R)`: 0 for r <= R, 1 for r >= 2R.
#[inline]
pub fn chi(r: f64, cutoff: f64) -> (f64, f64) {
    let (v, d) = eta_with_deriv(r / (2.0 * cutoff));
    (1.0 - v, -d / (2.0 * cutoff))
}

/// Frequency cutoff of the x-filter at shell k.
pub fn shell_cutoff(k: u32) -> f64 {
    2f64.powf(k as f64 / 2.0)
}

/// First shell whose x-filter passes every lattice frequency of the grid.
pub fn identity_shell(grid: &Grid) -> u32 {
    let top = grid.size as f64 / 2.0 * (grid.n as f64).sqrt();
    let mut k = 0;
    while shell_cutoff(k) < top {
        k += 1;
    }
    k
}

/// `psi_0(2^{-k/2} D) field`.
pub fn lowpass(fft: &Fft, field: &[f64], k: u32) -> Vec<f64> {
    let grid = fft.grid();
    let cut = shell_cutoff(k);
    let mut s: Vec<C64> = field.iter().map(|&v| C64::new(v, 0.0)).collect();
    fft.forward(&mut s);
    for (i, v) in s.iter_mut().enumerate() {
        *v *= lp_low(vec3::norm(&grid.freq(i)) / cut).0;
    }
    fft.inverse(&mut s);
    s.iter().map(|v| v.re).collect()
}

/// `psi_j(D) field` for a Littlewood-Paley shell j.
pub fn lp_piece(fft: &Fft, field: &[f64], j: u32) -> Vec<f64> {
    let grid = fft.grid();
    let mut s: Vec<C64> = field.iter().map(|&v| C64::new(v, 0.0)).collect();
    fft.forward(&mut s);
    for (i, v) in s.iter_mut().enumerate() {
        *v *= lp_shell(j, vec3::norm(&grid.freq(i))).0;
    }
    fft.inverse(&mut s);
    s.iter().map(|v| v.re).collect()
}

// ---------------------------------------------------------------------------------------
// coefficient matrices

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMeta {
    pub n: usize,
    pub grid_size: usize,
    pub r: Option<f64>,
    pub amplitude: f64,
    pub seed: Option<u64>,
    pub kappa0: f64,
}

/// Symmetric real coefficient fields `a_ij(x)`, stored row-major.
#[derive(Clone, Debug)]
pub struct CoefficientMatrix {
    pub grid: Grid,
    pub entries: Vec<Vec<f64>>,
    pub kappa0: f64,
    pub meta: CoefficientMeta,
}

/// Parameters for the lacunary rough-coefficient generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughParams {
    pub r: f64,
    pub amplitude: f64,
    pub seed: u64,
    /// Amplitudes at or above this are refused.
    pub safe_bound: f64,
}

impl RoughParams {
    pub fn new(r: f64, amplitude: f64, seed: u64) -> Self {
        RoughParams { r, amplitude, seed, safe_bound: 0.3 }
    }
}

impl CoefficientMatrix {
    pub fn flat(grid: Grid) -> Self {
        let n = grid.n;
        let entries = (0..n * n).map(|p| vec![if p / n == p % n { 1.0 } else { 0.0 }; grid.len()]).collect();
        CoefficientMatrix {
            grid,
            entries,
            kappa0: 1.0,
            meta: CoefficientMeta { n, grid_size: grid.size, r: None, amplitude: 0.0, seed: None, kappa0: 1.0 },
        }
    }

    /// Validate symmetry and ellipticity of externally supplied fields.
    pub fn from_entries(grid: Grid, entries: Vec<Vec<f64>>, meta: Option<CoefficientMeta>) -> Result<Self> {
        let n = grid.n;
        if entries.len() != n * n || entries.iter().any(|e| e.len() != grid.len()) {
            return Err(Error::Shape(format!("expected {} fields of {} samples", n * n, grid.len())));
        }
        for i in 0..n {
            for j in 0..i {
                if entries[i * n + j].iter().zip(&entries[j * n + i]).any(|(a, b)| a != b) {
                    return Err(Error::Config(format!("coefficients a_{i}{j} and a_{j}{i} differ")));
                }
            }
        }
        let mut m = CoefficientMatrix {
            grid,
            entries,
            kappa0: 0.0,
            meta: meta.unwrap_or(CoefficientMeta { n, grid_size: grid.size, r: None, amplitude: 0.0, seed: None, kappa0: 0.0 }),
        };
        m.kappa0 = m.sampled_kappa();
        m.meta.kappa0 = m.kappa0;
        if m.kappa0 <= 0.0 {
            return Err(Error::Ellipticity(format!("sampled ellipticity constant {} is not positive", m.kappa0)));
        }
        Ok(m)
    }

    /// `a_ij = delta_ij (1 + amplitude sum_j 2^{-jr} cos(k_j.x + phase_j))`, one independent
    /// lacunary series per diagonal entry, `|k_j|` within 2% of `2^j`, up to the resolved band.
    pub fn generate(grid: Grid, p: &RoughParams) -> Result<Self> {
        let n = grid.n;
        let levels = grid.band_edge().log2().floor() as i32;
        let sum: f64 = (0..=levels).map(|j| 2f64.powf(-(j as f64) * p.r)).sum();
        if p.amplitude < 0.0 || p.amplitude >= p.safe_bound || p.amplitude * sum >= 1.0 {
            return Err(Error::Config(format!(
                "amplitude {} cannot guarantee ellipticity (safe bound {}, series mass {:.3})",
                p.amplitude, p.safe_bound, sum
            )));
        }
        let mut entries = vec![vec![0.0; grid.len()]; n * n];
        for i in 0..n {
            // one stream per entry, so a finer grid only appends harmonics
            let mut rng = ChaCha20Rng::seed_from_u64(p.seed);
            rng.set_stream(i as u64);
            let mut series = vec![0.0; grid.len()];
            for j in 0..=levels {
                let target = 2f64.powi(j);
                let k = loop {
                    let u = random_unit(n, &mut rng);
                    let mut k = [0.0; 3];
                    for a in 0..n {
                        k[a] = (target * u[a]).round();
                    }
                    // keep the harmonic on its dyadic scale: |k| within 2% of 2^j
                    if (vec3::norm(&k) / target - 1.0).abs() <= 0.02 {
                        break k;
                    }
                };
                let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let amp = 2f64.powf(-(j as f64) * p.r);
                for (m, s) in series.iter_mut().enumerate() {
                    *s += amp * (vec3::dot(&k, &grid.position(m)) + phase).cos();
                }
            }
            entries[i * n + i] = series.iter().map(|s| 1.0 + p.amplitude * s).collect();
        }
        let meta = CoefficientMeta { n, grid_size: grid.size, r: Some(p.r), amplitude: p.amplitude, seed: Some(p.seed), kappa0: 0.0 };
        let m = Self::from_entries(grid, entries, Some(meta))?;
        debug_assert!(m.kappa0 >= 1.0 - p.amplitude * sum - 1e-12);
        Ok(m)
    }

    /// Guaranteed lower bound `1 - amplitude sum 2^{-jr}` for generated coefficients.
    pub fn kappa_bound(&self) -> Option<f64> {
        let r = self.meta.r?;
        let levels = self.grid.band_edge().log2().floor() as i32;
        Some(1.0 - self.meta.amplitude * (0..=levels).map(|j| 2f64.powf(-(j as f64) * r)).sum::<f64>())
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        &self.entries[i * self.grid.n + j]
    }

    pub fn is_flat(&self) -> bool {
        let n = self.grid.n;
        (0..n * n).all(|p| {
            let target = if p / n == p % n { 1.0 } else { 0.0 };
            self.entries[p].iter().all(|&v| v == target)
        })
    }

    /// Largest eigenvalue bound (Gershgorin) over the grid.
    pub fn max_eigenvalue(&self) -> f64 {
        let n = self.grid.n;
        (0..self.grid.len())
            .map(|m| (0..n).map(|i| (0..n).map(|j| self.get(i, j)[m].abs()).sum::<f64>()).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    /// `min_x min_eta a_ij(x) eta_i eta_j` over 64 spread unit vectors per point.
    pub fn sampled_kappa(&self) -> f64 {
        let n = self.grid.n;
        let dirs = directions(n, if n == 1 { 2 } else { 64 });
        let mut k = f64::INFINITY;
        for m in 0..self.grid.len() {
            for e in &dirs {
                let mut q = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        q += self.get(i, j)[m] * e[i] * e[j];
                    }
                }
                k = k.min(q);
            }
        }
        k
    }
}

fn random_unit<R: Rng>(n: usize, rng: &mut R) -> Vec3 {
    loop {
        let mut v = [0.0; 3];
        for a in v.iter_mut().take(n) {
            *a = rng.random_range(-1.0..1.0);
        }
        let r = vec3::norm(&v);
        if r > 0.1 && r <= 1.0 {
            return vec3::scale(1.0 / r, &v);
        }
    }
}

/// Least-squares slope of `log2 sup_x |psi_j(D) field|` against j over `j_lo..=j_hi`.
pub fn lp_decay_slope(fft: &Fft, field: &[f64], j_lo: u32, j_hi: u32) -> f64 {
    let pts: Vec<(f64, f64)> = (j_lo..=j_hi)
        .map(|j| {
            let piece = lp_piece(fft, field, j);
            (j as f64, piece.iter().fold(0.0f64, |a, v| a.max(v.abs())).log2())
        })
        .collect();
    fit_slope(&pts)
}

// ---------------------------------------------------------------------------------------
// separable rough symbols

/// The xi-dependent factor of a symbol term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum XiFactor {
    One,
    /// `|xi|^m`
    Power(f64),
    /// `xi_j`
    Coord(usize),
    /// `xi_i xi_j`
    Product(usize, usize),
}

impl XiFactor {
    #[inline]
    pub fn eval(&self, xi: &Vec3) -> f64 {
        match *self {
            XiFactor::One => 1.0,
            XiFactor::Power(m) => {
                let r = vec3::norm(xi);
                if r == 0.0 {
                    if m == 0.0 {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    r.powf(m)
                }
            }
            XiFactor::Coord(j) => xi[j],
            XiFactor::Product(i, j) => xi[i] * xi[j],
        }
    }
}

/// Frequency localization of a symbol term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ShellWeight {
    All,
    Shell(u32),
    /// `sum_{k >= K} psi_k = 1 - psi_0(2^{1-K} xi)`
    Tail(u32),
}

impl ShellWeight {
    #[inline]
    pub fn eval(&self, r: f64) -> f64 {
        match *self {
            ShellWeight::All => 1.0,
            ShellWeight::Shell(k) => lp_shell(k, r).0,
            ShellWeight::Tail(k) => {
                if k == 0 {
                    1.0
                } else {
                    1.0 - lp_low(r * 2f64.powi(1 - k as i32)).0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SymbolTerm {
    pub field: Arc<Vec<f64>>,
    pub factor: XiFactor,
    pub shell: ShellWeight,
}

/// Real symbol `a(x, xi) = sum_t c_t(x) m_t(xi) w_t(xi)` with grid fields `c_t`.
#[derive(Clone, Debug)]
pub struct RoughSymbol {
    pub grid: Grid,
    pub terms: Vec<SymbolTerm>,
    pub order: f64,
    pub regularity: f64,
    pub delta: f64,
    pub real_valued: bool,
    pub homogeneous_degree: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SymbolSplit {
    pub sharp: RoughSymbol,
    pub flat: RoughSymbol,
    pub shells: u32,
    pub warnings: Vec<String>,
}

impl RoughSymbol {
    fn single(grid: Grid, field: Vec<f64>, factor: XiFactor, order: f64, regularity: f64) -> Self {
        RoughSymbol {
            grid,
            terms: vec![SymbolTerm { field: Arc::new(field), factor, shell: ShellWeight::All }],
            order,
            regularity,
            delta: 0.0,
            real_valued: true,
            homogeneous_degree: None,
        }
    }

    /// `c(x) |xi|^power`
    pub fn scalar(grid: Grid, field: Vec<f64>, power: f64, regularity: f64) -> Self {
        let mut s = Self::single(grid, field, XiFactor::Power(power), power, regularity);
        s.homogeneous_degree = Some(power);
        s
    }

    /// `c(x)`, a pure multiplication symbol.
    pub fn multiplier(grid: Grid, field: Vec<f64>, regularity: f64) -> Self {
        Self::single(grid, field, XiFactor::One, 0.0, regularity)
    }

    /// `xi_j`
    pub fn coordinate(grid: Grid, j: usize) -> Self {
        let mut s = Self::single(grid, vec![1.0; grid.len()], XiFactor::Coord(j), 1.0, f64::INFINITY);
        s.homogeneous_degree = Some(1.0);
        s
    }

    /// Principal symbol `sum_ij a_ij(x) xi_i xi_j`.
    pub fn principal(coeffs: &CoefficientMatrix) -> Self {
        let n = coeffs.n();
        let mut terms = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let f = coeffs.get(i, j);
                if f.iter().any(|&v| v != 0.0) {
                    terms.push(SymbolTerm { field: Arc::new(f.to_vec()), factor: XiFactor::Product(i, j), shell: ShellWeight::All });
                }
            }
        }
        RoughSymbol {
            grid: coeffs.grid,
            terms,
            order: 2.0,
            regularity: coeffs.meta.r.unwrap_or(f64::INFINITY),
            delta: 0.0,
            real_valued: true,
            homogeneous_degree: Some(2.0),
        }
    }

    #[inline]
    pub fn eval(&self, m: usize, xi: &Vec3) -> f64 {
        let r = vec3::norm(xi);
        self.terms.iter().map(|t| t.field[m] * t.factor.eval(xi) * t.shell.eval(r)).sum()
    }

    pub fn is_x_independent(&self) -> bool {
        self.terms.iter().all(|t| t.field.iter().all(|&v| v == t.field[0]))
    }

    /// `a(x, D) f` evaluated term by term: Fourier multiplier then pointwise product.
    /// Agrees with the direct Kohn-Nirenberg sum up to rounding.
    pub fn apply(&self, fft: &Fft, f: &RealField) -> RealField {
        let grid = self.grid;
        let spec = f.spectrum(fft);
        let mut out = vec![C64::new(0.0, 0.0); grid.len()];
        let mut buf = vec![C64::new(0.0, 0.0); grid.len()];
        for t in &self.terms {
            for (i, b) in buf.iter_mut().enumerate() {
                let z = grid.freq(i);
                *b = spec[i] * (t.factor.eval(&z) * t.shell.eval(vec3::norm(&z)));
            }
            fft.inverse(&mut buf);
            for ((o, b), c) in out.iter_mut().zip(&buf).zip(t.field.iter()) {
                *o += b * c;
            }
        }
        RealField { grid, data: out, band_limit: grid.size as f64 / 2.0 }
    }

    /// `a = a_sharp + a_flat`: shell k of the sharp part carries `psi_0(2^{-k/2} D_x) c_t`;
    /// shells whose filter passes every grid frequency are collapsed into one tail term.
    pub fn smooth_split(&self, fft: &Fft) -> SymbolSplit {
        let grid = self.grid;
        let kid = identity_shell(&grid);
        let mut warnings = Vec::new();
        let top = grid.size as f64 / 2.0 * (grid.n as f64).sqrt();
        if top > 2f64.powi(kid as i32 - 1) {
            warnings.push(format!("shells from {kid} on pass the x-filter unchanged; their unfiltered tail is kept in the sharp part"));
        }
        let mut sharp = Vec::new();
        let mut flat = Vec::new();
        for t in &self.terms {
            assert_eq!(t.shell, ShellWeight::All, "smoothing expects unlocalized terms");
            for k in 0..kid {
                let low = lowpass(fft, &t.field, k);
                let rest: Vec<f64> = t.field.iter().zip(&low).map(|(a, b)| a - b).collect();
                sharp.push(SymbolTerm { field: Arc::new(low), factor: t.factor, shell: ShellWeight::Shell(k) });
                if rest.iter().any(|v| v.abs() > 0.0) {
                    flat.push(SymbolTerm { field: Arc::new(rest), factor: t.factor, shell: ShellWeight::Shell(k) });
                }
            }
            sharp.push(SymbolTerm { field: t.field.clone(), factor: t.factor, shell: ShellWeight::Tail(kid) });
        }
        let mk = |terms, order| RoughSymbol {
            grid,
            terms,
            order,
            regularity: self.regularity,
            delta: 0.5,
            real_valued: self.real_valued,
            homogeneous_degree: None,
        };
        SymbolSplit {
            sharp: mk(sharp, self.order),
            flat: mk(flat, self.order - self.regularity / 2.0),
            shells: kid,
            warnings,
        }
    }
}

/// Fitted slope of `sup_x |a_flat(x, xi)|` against `|xi|` on a log2 grid of magnitudes
/// `2^{lo}, 2^{lo + 1/4}, ...` up to `hi`.
pub fn flat_decay_slope(split: &SymbolSplit, xi_lo: f64, xi_hi: f64) -> (f64, Vec<(f64, f64)>) {
    let grid = split.flat.grid;
    let n = grid.n;
    let dirs = directions(n, if n == 1 { 2 } else { 8 });
    let mut samples = Vec::new();
    let mut u = xi_lo.log2();
    while u <= xi_hi.log2() + 1e-12 {
        let r = 2f64.powf(u);
        let mut sup: f64 = 0.0;
        for d in &dirs {
            let xi = vec3::scale(r, d);
            for m in 0..grid.len() {
                sup = sup.max(split.flat.eval(m, &xi).abs());
            }
        }
        samples.push((r, sup));
        u += 0.25;
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|(r, s)| (r.ln(), s.ln())).collect();
    (fit_slope(&pts), samples)
}

// ---------------------------------------------------------------------------------------
// direct Kohn-Nirenberg operators

/// Precomputed `a(x, D)` for a general symbol: for every input frequency, the exact DFT of
/// `x -> a(x, zeta)` (entries below `tol * max` dropped).
#[derive(Clone, Debug)]
pub struct KnOperator {
    pub grid: Grid,
    pub band: f64,
    cols: Vec<(u32, Vec<u32>, Vec<C64>)>,
}

impl KnOperator {
    /// `fill(zeta, out)` writes `a(x_m, zeta)` for every grid point.
    pub fn build(fft: &Fft, band: f64, tol: f64, fill: &mut dyn FnMut(&Vec3, &mut [C64])) -> Self {
        let grid = fft.grid();
        let len = grid.len();
        let nn = grid.size as i64;
        let mut buf = vec![C64::new(0.0, 0.0); len];
        let mut cols = Vec::new();
        for zi in 0..len {
            let z = grid.freq(zi);
            if vec3::norm(&z) > band {
                continue;
            }
            fill(&z, &mut buf);
            fft.forward(&mut buf);
            let mx = buf.iter().fold(0.0f64, |a, v| a.max(v.norm()));
            if mx == 0.0 {
                continue;
            }
            let zc = grid.coords(zi);
            let mut rows = Vec::new();
            let mut vals = Vec::new();
            for (mi, v) in buf.iter().enumerate() {
                if v.norm() > tol * mx {
                    let mc = grid.coords(mi);
                    let mut ec = [0usize; 3];
                    for a in 0..grid.n {
                        ec[a] = ((zc[a] + mc[a]) as i64).rem_euclid(nn) as usize;
                    }
                    rows.push(grid.index(ec) as u32);
                    vals.push(*v);
                }
            }
            cols.push((zi as u32, rows, vals));
        }
        KnOperator { grid, band, cols }
    }

    pub fn entries(&self) -> usize {
        self.cols.iter().map(|c| c.1.len()).sum()
    }

    /// Apply to `f`; input frequencies beyond the build band are ignored.
    pub fn apply(&self, fft: &Fft, f: &RealField) -> RealField {
        let spec = f.spectrum(fft);
        let mut out = vec![C64::new(0.0, 0.0); self.grid.len()];
        for (zi, rows, vals) in &self.cols {
            let fz = spec[*zi as usize];
            if fz.norm_sqr() == 0.0 {
                continue;
            }
            for (r, v) in rows.iter().zip(vals) {
                out[*r as usize] += v * fz;
            }
        }
        fft.inverse(&mut out);
        RealField { grid: self.grid, data: out, band_limit: self.grid.size as f64 / 2.0 }
    }
}

/// Largest problem the direct sum accepts, in `N^{2n}` operations.
pub const KN_COST_LIMIT: f64 = 1e10;

/// Direct Kohn-Nirenberg quantization `(2pi)^{-n} int e^{ix.xi} a(x, xi) fhat(xi) dxi` on the
/// lattice, exact for the discrete model.
pub fn quantize(fft: &Fft, a: &dyn Fn(usize, &Vec3) -> f64, f: &RealField) -> Result<RealField> {
    let grid = fft.grid();
    let cost = (grid.len() as f64).powi(2);
    if cost > KN_COST_LIMIT {
        return Err(Error::Size(format!("direct quantization needs {cost:.2e} operations")));
    }
    let op = KnOperator::build(fft, f64::INFINITY, 0.0, &mut |z, out| {
        for (m, o) in out.iter_mut().enumerate() {
            *o = C64::new(a(m, z), 0.0);
        }
    });
    Ok(op.apply(fft, f))
}

// ---------------------------------------------------------------------------------------
// the second-order operator and its half-wave symbol

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorForm {
    /// `L f = sum D_i (a_ij D_j f)`
    Divergence,
    /// `L f = sum a_ij D_i D_j f`
    Standard,
}

/// `L` applied through spectral derivatives and pointwise products.
#[derive(Clone)]
pub struct EllipticOperator {
    pub coeffs: Arc<CoefficientMatrix>,
    pub form: OperatorForm,
    fft: Fft,
}

pub fn build_operator(coeffs: Arc<CoefficientMatrix>, form: OperatorForm) -> EllipticOperator {
    let fft = Fft::new(coeffs.grid);
    EllipticOperator { coeffs, form, fft }
}

impl EllipticOperator {
    fn derivative(&self, spec: &[C64], axes: &[usize]) -> Vec<C64> {
        let grid = self.coeffs.grid;
        let mut out: Vec<C64> = spec
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let z = grid.freq(i);
                v * axes.iter().map(|&a| z[a]).product::<f64>()
            })
            .collect();
        self.fft.inverse(&mut out);
        out
    }

    pub fn apply(&self, f: &RealField) -> RealField {
        let grid = self.coeffs.grid;
        let n = grid.n;
        let spec = f.spectrum(&self.fft);
        let mut out = vec![C64::new(0.0, 0.0); grid.len()];
        match self.form {
            OperatorForm::Divergence => {
                let d: Vec<Vec<C64>> = (0..n).map(|j| self.derivative(&spec, &[j])).collect();
                for i in 0..n {
                    let mut h = vec![C64::new(0.0, 0.0); grid.len()];
                    for (j, dj) in d.iter().enumerate() {
                        let a = self.coeffs.get(i, j);
                        if a.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        for ((hm, am), dm) in h.iter_mut().zip(a).zip(dj) {
                            *hm += am * dm;
                        }
                    }
                    self.fft.forward(&mut h);
                    let g = self.derivative(&h, &[i]);
                    for (o, v) in out.iter_mut().zip(&g) {
                        *o += v;
                    }
                }
            }
            OperatorForm::Standard => {
                for i in 0..n {
                    for j in 0..n {
                        let a = self.coeffs.get(i, j);
                        if a.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        let g = self.derivative(&spec, &[i, j]);
                        for ((o, am), v) in out.iter_mut().zip(a).zip(&g) {
                            *o += am * v;
                        }
                    }
                }
            }
        }
        RealField { grid, data: out, band_limit: grid.size as f64 / 2.0 }
    }

    pub fn fft(&self) -> &Fft {
        &self.fft
    }
}

/// Default cutoff radius R of `chi`: zero on |xi| <= 8, one on |xi| >= 16.
pub const CHI_CUTOFF: f64 = 8.0;

/// `b(x, xi) = chi(xi) sqrt(A_sharp(x, xi))` for `A = sum a_ij xi_i xi_j`, with spline
/// evaluation off the grid and analytic gradients for the Hamilton field.
#[derive(Clone)]
pub struct HalfWaveSymbol {
    pub grid: Grid,
    pub cutoff: f64,
    /// Index pairs (i, j), i <= j, with nonzero coefficients; off-diagonal pairs count twice.
    pairs: Vec<(usize, usize)>,
    /// Smoothed fields per shell below the identity shell.
    shells: Vec<Vec<Vec<f64>>>,
    raw: Vec<Vec<f64>>,
    shell_splines: Vec<Vec<PeriodicSpline>>,
    raw_splines: Vec<PeriodicSpline>,
    pub kappa0: f64,
    pub sharp: RoughSymbol,
    x_independent: bool,
}

/// Value and gradients of a phase-space function.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymbolJet {
    pub value: f64,
    pub dx: Vec3,
    pub dxi: Vec3,
}

impl HalfWaveSymbol {
    pub fn new(coeffs: &CoefficientMatrix, fft: &Fft, cutoff: f64) -> Result<Self> {
        let grid = coeffs.grid;
        let n = grid.n;
        let mut pairs = Vec::new();
        for i in 0..n {
            for j in i..n {
                if coeffs.get(i, j).iter().any(|&v| v != 0.0) {
                    pairs.push((i, j));
                }
            }
        }
        let kid = identity_shell(&grid);
        let raw: Vec<Vec<f64>> = pairs.iter().map(|&(i, j)| coeffs.get(i, j).to_vec()).collect();
        let shells: Vec<Vec<Vec<f64>>> = (0..kid).map(|k| raw.iter().map(|f| lowpass(fft, f, k)).collect()).collect();
        let shell_splines = shells.iter().map(|fs| fs.iter().map(|f| PeriodicSpline::new(fft, f)).collect()).collect();
        let raw_splines = raw.iter().map(|f| PeriodicSpline::new(fft, f)).collect();
        let sharp = RoughSymbol::principal(coeffs).smooth_split(fft).sharp;
        let x_independent = raw.iter().all(|f| f.iter().all(|&v| v == f[0]));
        let s = HalfWaveSymbol {
            grid,
            cutoff,
            pairs,
            shells,
            raw,
            shell_splines,
            raw_splines,
            kappa0: coeffs.kappa0,
            sharp,
            x_independent,
        };
        s.check_ellipticity()?;
        Ok(s)
    }

    /// Constant coefficients: characteristics are straight lines.
    pub fn is_x_independent(&self) -> bool {
        self.x_independent
    }

    fn fields(&self, k: u32) -> &[Vec<f64>] {
        self.shells.get(k as usize).unwrap_or(&self.raw)
    }

    fn splines(&self, k: u32) -> &[PeriodicSpline] {
        self.shell_splines.get(k as usize).unwrap_or(&self.raw_splines)
    }

    #[inline]
    fn pair_weight(&self, p: usize, xi: &Vec3) -> f64 {
        let (i, j) = self.pairs[p];
        if i == j {
            xi[i] * xi[i]
        } else {
            2.0 * xi[i] * xi[j]
        }
    }

    #[inline]
    fn pair_weight_grad(&self, p: usize, xi: &Vec3) -> Vec3 {
        let (i, j) = self.pairs[p];
        let mut g = vec3::ZERO;
        if i == j {
            g[i] = 2.0 * xi[i];
        } else {
            g[i] = 2.0 * xi[j];
            g[j] = 2.0 * xi[i];
        }
        g
    }

    /// `A_sharp(x_m, xi)` on a grid point.
    pub fn a_sharp_grid(&self, m: usize, xi: &Vec3) -> f64 {
        let r = vec3::norm(xi);
        let mut a = 0.0;
        for (k, w, _) in active_shells(r) {
            let fs = self.fields(k);
            for (p, f) in fs.iter().enumerate() {
                a += w * f[m] * self.pair_weight(p, xi);
            }
        }
        a
    }

    /// `b(x_m, xi)` on a grid point.
    pub fn b_grid(&self, m: usize, xi: &Vec3) -> f64 {
        let r = vec3::norm(xi);
        let c = chi(r, self.cutoff).0;
        if c == 0.0 {
            return 0.0;
        }
        c * self.a_sharp_grid(m, xi).max(0.0).sqrt()
    }

    /// Writes `b(x_m, zeta) + shift` (or its reciprocal) for every grid point.
    pub fn fill(&self, zeta: &Vec3, shift: C64, invert: bool, out: &mut [C64]) {
        let r = vec3::norm(zeta);
        let c = chi(r, self.cutoff).0;
        if c == 0.0 {
            let v = if invert { 1.0 / shift } else { shift };
            out.iter_mut().for_each(|o| *o = v);
            return;
        }
        // shell weights and pair weights are shared by all grid points
        let mut terms: Vec<(&[f64], f64)> = Vec::new();
        for (k, w, _) in active_shells(r) {
            for (p, f) in self.fields(k).iter().enumerate() {
                terms.push((f, w * self.pair_weight(p, zeta)));
            }
        }
        for (m, o) in out.iter_mut().enumerate() {
            let a: f64 = terms.iter().map(|(f, w)| f[m] * w).sum();
            let v = C64::new(c * a.max(0.0).sqrt(), 0.0) + shift;
            *o = if invert { 1.0 / v } else { v };
        }
    }

    /// `A_sharp` and its gradients at an arbitrary phase-space point.
    pub fn a_sharp_jet(&self, taps: &Taps, xi: &Vec3) -> SymbolJet {
        let r = vec3::norm(xi);
        let xh = vec3::unit(xi);
        let mut jet = SymbolJet::default();
        for (k, w, dw) in active_shells(r) {
            let mut q = 0.0;
            let mut qx = vec3::ZERO;
            let mut qxi = vec3::ZERO;
            for (p, sp) in self.splines(k).iter().enumerate() {
                let (v, g) = sp.eval_grad(taps);
                let pw = self.pair_weight(p, xi);
                q += v * pw;
                qx = vec3::axpy(&qx, pw, &g);
                qxi = vec3::axpy(&qxi, v, &self.pair_weight_grad(p, xi));
            }
            jet.value += w * q;
            jet.dx = vec3::axpy(&jet.dx, w, &qx);
            jet.dxi = vec3::axpy(&vec3::axpy(&jet.dxi, w, &qxi), dw * q, &xh);
        }
        jet
    }

    /// `b = chi sqrt(A_sharp)` with gradients at an arbitrary phase-space point.
    pub fn b_jet(&self, x: &Vec3, xi: &Vec3) -> SymbolJet {
        let r = vec3::norm(xi);
        let (c, dc) = chi(r, self.cutoff);
        if c == 0.0 && dc == 0.0 {
            return SymbolJet::default();
        }
        let taps = Taps::at(&self.grid, x);
        let a = self.a_sharp_jet(&taps, xi);
        let s = a.value.max(0.0).sqrt();
        if s == 0.0 {
            return SymbolJet::default();
        }
        let xh = vec3::unit(xi);
        SymbolJet {
            value: c * s,
            dx: vec3::scale(c / (2.0 * s), &a.dx),
            dxi: vec3::axpy(&vec3::scale(c / (2.0 * s), &a.dxi), dc * s, &xh),
        }
    }

    /// Fully homogeneous limit `sqrt(sum a_ij(x) xi_i xi_j)` with gradients.
    pub fn b_hom_jet(&self, x: &Vec3, xi: &Vec3) -> SymbolJet {
        let taps = Taps::at(&self.grid, x);
        let mut q = 0.0;
        let mut qx = vec3::ZERO;
        let mut qxi = vec3::ZERO;
        for (p, sp) in self.raw_splines.iter().enumerate() {
            let (v, g) = sp.eval_grad(&taps);
            let pw = self.pair_weight(p, xi);
            q += v * pw;
            qx = vec3::axpy(&qx, pw, &g);
            qxi = vec3::axpy(&qxi, v, &self.pair_weight_grad(p, xi));
        }
        let s = q.max(0.0).sqrt();
        if s == 0.0 {
            return SymbolJet::default();
        }
        SymbolJet { value: s, dx: vec3::scale(0.5 / s, &qx), dxi: vec3::scale(0.5 / s, &qxi) }
    }

    /// Sampled check `A_sharp(x, xi) > 0` for |xi| > R.
    fn check_ellipticity(&self) -> Result<()> {
        let n = self.grid.n;
        let dirs = directions(n, if n == 1 { 2 } else { 32 });
        let top = self.grid.band_edge().max(4.0 * self.cutoff);
        let mut r = self.cutoff * 1.0001;
        while r <= top {
            for d in &dirs {
                let xi = vec3::scale(r, d);
                for m in (0..self.grid.len()).step_by(7) {
                    let a = self.a_sharp_grid(m, &xi);
                    if a <= 0.0 {
                        return Err(Error::Ellipticity(format!("A_sharp = {a:.3e} at |xi| = {r:.2}")));
                    }
                }
            }
            r *= 1.25;
        }
        Ok(())
    }

    /// `min b(x, xi) / |xi|` over grid points and spread directions at magnitude `r`.
    pub fn min_ratio(&self, r: f64) -> f64 {
        let n = self.grid.n;
        let dirs = directions(n, if n == 1 { 2 } else { 64 });
        let mut best = f64::INFINITY;
        for d in &dirs {
            let xi = vec3::scale(r, d);
            for m in 0..self.grid.len() {
                best = best.min(self.b_grid(m, &xi) / r);
            }
        }
        best
    }

    /// `b(x, D) + shift` or its quantized inverse symbol, restricted to the band.
    pub fn operator(&self, fft: &Fft, band: f64, shift: C64, invert: bool, tol: f64) -> KnOperator {
        KnOperator::build(fft, band, tol, &mut |z, out| self.fill(z, shift, invert, out))
    }
}

/// Relative drop tolerance for the symbol spectra of `b`-type operators.
pub const KN_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------------------
// invertibility shift

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftReport {
    pub c: f64,
    /// `(c, residual)` along the search path.
    pub trace: Vec<(f64, f64)>,
}

/// `max_f |f - (b + ic)(x, D) (b + ic)^{-1}(x, D) f| / |f|` over `fields` random band fields.
pub fn shift_residual(b: &HalfWaveSymbol, fft: &Fft, c: f64, fields: usize, seed: u64) -> f64 {
    let band = fft.grid().band_edge();
    let shift = C64::new(0.0, c);
    let fwd = b.operator(fft, band, shift, false, KN_TOL);
    let inv = b.operator(fft, band, shift, true, KN_TOL);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..fields {
        let f = RealField::random_resolved(fft, &mut rng);
        let g = fwd.apply(fft, &band_project(fft, &inv.apply(fft, &f)));
        worst = worst.max(g.rel_err(&f));
    }
    worst
}

/// Smallest dyadic `c >= 2^-4` with residual at most 1/2.
pub fn shift_for_invertibility(b: &HalfWaveSymbol, fft: &Fft, fields: usize, seed: u64) -> Result<ShiftReport> {
    let mut trace = Vec::new();
    let mut c = 2f64.powi(-4);
    while c <= 2f64.powi(20) {
        let res = shift_residual(b, fft, c, fields, seed);
        trace.push((c, res));
        if res <= 0.5 {
            return Ok(ShiftReport { c, trace });
        }
        c *= 2.0;
    }
    Err(Error::Divergence("no invertibility shift up to 2^20".into()))
}

/// Zero every Fourier coefficient beyond the resolved band.
pub fn band_project(fft: &Fft, f: &RealField) -> RealField {
    let grid = fft.grid();
    let edge = grid.band_edge();
    let mut r = f.multiplier(fft, |z| if vec3::norm(z) <= edge { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) });
    r.band_limit = edge;
    r
}

// ---------------------------------------------------------------------------------------
// asymptotic homogeneity

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HomogeneityReport {
    /// `(|xi|, sup |(xi.d_xi - m) b|)` per sampled magnitude.
    pub euler: Vec<(f64, f64)>,
    /// Fitted order of `(xi.d_xi - m) b`.
    pub euler_order: f64,
    /// `|b(x, t xi)/t^m - b(x, t' xi)/t'^m|` for successive ray scalings.
    pub ray_diffs: Vec<f64>,
    pub ray_ratio: f64,
    /// `sup |b - b_limit| <xi>^{1-m}` over the sampled points.
    pub limit_proxy: f64,
    pub noisy: bool,
}

/// Probe `(xi.d_xi - m) b` by centered differences (step one lattice cell along the ray),
/// and the ray limit `b(x, t xi) / t^m` for `t in {4, 16, 64}`.
pub fn check_asymp_homog(grid: &Grid, b: &dyn Fn(usize, &Vec3) -> f64, m: f64, base: f64) -> HomogeneityReport {
    let n = grid.n;
    let dirs = directions(n, if n == 1 { 2 } else { 12 });
    let pts: Vec<usize> = (0..grid.len()).step_by((grid.len() / 97).max(1)).collect();
    let euler_at = |xi: &Vec3, mi: usize, step: f64| {
        let r = vec3::norm(xi);
        let e = step / r;
        let up = b(mi, &vec3::scale(1.0 + e, xi));
        let dn = b(mi, &vec3::scale(1.0 - e, xi));
        (up - dn) / (2.0 * e) - m * b(mi, xi)
    };
    let mut euler = Vec::new();
    let mut noisy = false;
    let mut u = 1.0;
    while 2f64.powf(u) <= 4.0 * base {
        let r = 2f64.powf(u);
        let mut sup: f64 = 0.0;
        for d in &dirs {
            let xi = vec3::scale(r, d);
            for &mi in &pts {
                let e1 = euler_at(&xi, mi, 1.0);
                let e2 = euler_at(&xi, mi, 0.5);
                if (e1 - e2).abs() > 0.1 * (e1.abs() + 1e-9 * r.powf(m)) && (e1 - e2).abs() > 1e-6 * r.powf(m) {
                    noisy = true;
                }
                sup = sup.max(e1.abs());
            }
        }
        euler.push((r, sup));
        u += 0.5;
    }
    let fit: Vec<(f64, f64)> = euler.iter().filter(|(r, s)| *r >= base && *s > 0.0).map(|(r, s)| (r.ln(), s.ln())).collect();
    let euler_order = if fit.len() >= 2 && euler.iter().filter(|(r, _)| *r >= base).all(|(_, s)| *s > 1e-300) {
        fit_slope(&fit)
    } else {
        f64::NEG_INFINITY
    };
    let mut ray_diffs = vec![0.0; 2];
    let mut limit_proxy: f64 = 0.0;
    for d in &dirs {
        let xi = vec3::scale(base, d);
        for &mi in &pts {
            let v: Vec<f64> = [4.0f64, 16.0, 64.0].iter().map(|t| b(mi, &vec3::scale(*t, &xi)) / t.powf(m)).collect();
            ray_diffs[0] = f64::max(ray_diffs[0], (v[1] - v[0]).abs());
            ray_diffs[1] = f64::max(ray_diffs[1], (v[2] - v[1]).abs());
            let bl = v[2] * base.powf(m);
            limit_proxy = limit_proxy.max((b(mi, &xi) - bl).abs() * (1.0 + base * base).powf((1.0 - m) / 2.0));
        }
    }
    let ray_ratio = if ray_diffs[1] == 0.0 { f64::INFINITY } else { ray_diffs[0] / ray_diffs[1] };
    HomogeneityReport { euler, euler_order, ray_diffs, ray_ratio, limit_proxy, noisy }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(n: usize, size: usize) -> (Grid, Fft) {
        let g = Grid::new(n, size).unwrap();
        (g, Fft::new(g))
    }

    #[test]
    fn littlewood_paley_partition() {
        for r in [0.0, 0.3, 1.0, 1.7, 3.0, 12.5, 100.0] {
            let s: f64 = (0..12).map(|k| lp_shell(k, r).0).sum();
            assert!((s - 1.0).abs() < 1e-14, "r={r}");
            let a: f64 = active_shells(r).map(|(_, v, _)| v).sum();
            assert!((a - 1.0).abs() < 1e-14, "r={r}");
        }
        let (v, d) = lp_shell(3, 9.1);
        let e = 1e-6;
        let fd = (lp_shell(3, 9.1 + e).0 - lp_shell(3, 9.1 - e).0) / (2.0 * e);
        assert!(v > 0.0 && (fd - d).abs() < 1e-7);
    }

    #[test]
    fn split_is_exact_and_trivial_for_constants() {
        let (g, fft) = setup(2, 32);
        let c = CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.2, 5)).unwrap();
        let a = RoughSymbol::principal(&c);
        let s = a.smooth_split(&fft);
        for m in [0, 17, 500] {
            for xi in [[0.5, 0.0, 0.0], [3.0, -4.0, 0.0], [20.0, 1.0, 0.0], [300.0, 7.0, 0.0]] {
                let d = a.eval(m, &xi) - s.sharp.eval(m, &xi) - s.flat.eval(m, &xi);
                assert!(d.abs() < 1e-12 * (1.0 + a.eval(m, &xi).abs()), "m={m} xi={xi:?}: {d}");
            }
        }
        let flat = RoughSymbol::principal(&CoefficientMatrix::flat(g)).smooth_split(&fft);
        assert!(flat.flat.terms.is_empty());
    }

    #[test]
    fn quantization_examples() {
        let (g, fft) = setup(2, 16);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let f = RealField::random_resolved(&fft, &mut rng);
        let id = quantize(&fft, &|_, _| 1.0, &f).unwrap();
        assert!(id.rel_err(&f) < 1e-12);
        let dx = quantize(&fft, &|_, z| z[1], &f).unwrap();
        let oracle = f.multiplier(&fft, |z| C64::new(z[1], 0.0));
        assert!(dx.rel_err(&oracle) < 1e-10);
        let cfield: Vec<f64> = (0..g.len()).map(|m| 1.0 + 0.3 * g.position(m)[0].sin()).collect();
        let prod = quantize(&fft, &|m, _| cfield[m], &f).unwrap();
        let mut direct = f.clone();
        for (v, c) in direct.data.iter_mut().zip(&cfield) {
            *v *= c;
        }
        assert!(prod.rel_err(&direct) < 1e-12);
        // the term-wise path agrees with the direct sum
        let c = CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.2, 9)).unwrap();
        let a = RoughSymbol::principal(&c).smooth_split(&fft).sharp;
        let fast = a.apply(&fft, &f);
        let slow = quantize(&fft, &|m, z| a.eval(m, z), &f).unwrap();
        assert!(fast.rel_err(&slow) < 1e-12);
    }

    #[test]
    fn operator_examples() {
        let (g, fft) = setup(2, 32);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let f = RealField::random_resolved(&fft, &mut rng);
        let h = RealField::random_resolved(&fft, &mut rng);
        let flat = Arc::new(CoefficientMatrix::flat(g));
        let ld = build_operator(flat.clone(), OperatorForm::Divergence).apply(&f);
        let ls = build_operator(flat, OperatorForm::Standard).apply(&f);
        let oracle = f.multiplier(&fft, |z| C64::new(vec3::dot(z, z), 0.0));
        assert!(ld.rel_err(&oracle) < 1e-10 && ls.rel_err(&oracle) < 1e-10);
        let c = Arc::new(CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.25, 3)).unwrap());
        let l = build_operator(c, OperatorForm::Divergence);
        let a = l.apply(&f).inner(&h);
        let b = f.inner(&l.apply(&h));
        assert!((a - b).norm() < 1e-9 * a.norm());
    }

    #[test]
    fn generator_contract() {
        let (g, fft) = setup(2, 128);
        let flat = CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.0, 1)).unwrap();
        assert!(flat.is_flat());
        let c = CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.2, 11)).unwrap();
        assert!(c.kappa0 >= c.kappa_bound().unwrap() - 1e-12);
        let again = CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.2, 11)).unwrap();
        assert_eq!(c.entries, again.entries);
        let slope = lp_decay_slope(&fft, c.get(0, 0), 1, 5);
        assert!((slope + 2.0).abs() <= 0.2, "slope {slope}");
        assert!(CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.35, 1)).is_err());
        let mut p = RoughParams::new(0.1, 0.29, 1);
        p.safe_bound = 5.0;
        assert!(CoefficientMatrix::generate(g, &p).is_err());
    }

    #[test]
    fn half_wave_symbol_flat_and_perturbed() {
        let (g, fft) = setup(2, 64);
        let flat = HalfWaveSymbol::new(&CoefficientMatrix::flat(g), &fft, CHI_CUTOFF).unwrap();
        for xi in [[20.0, 3.0, 0.0], [-7.0, 30.0, 0.0]] {
            let r = vec3::norm(&xi);
            assert!((flat.b_grid(5, &xi) - r).abs() < 1e-12);
            let j = flat.b_jet(&[0.3, 1.0, 0.0], &xi);
            assert!((j.value - r).abs() < 1e-12 && vec3::norm(&j.dx) < 1e-12);
            assert!(vec3::norm(&vec3::sub(&j.dxi, &vec3::unit(&xi))) < 1e-12);
        }
        assert_eq!(flat.b_jet(&[0.0; 3], &[4.0, 0.0, 0.0]), SymbolJet::default());
        let c = CoefficientMatrix::generate(g, &RoughParams::new(2.0, 0.2, 4)).unwrap();
        let b = HalfWaveSymbol::new(&c, &fft, CHI_CUTOFF).unwrap();
        assert!(b.min_ratio(64.0) >= c.kappa0.sqrt() * 0.9);
        // b^2 = A_sharp where chi = 1
        for m in [0, 100, 4000] {
            let xi = [17.0, -9.0, 0.0];
            assert!((b.b_grid(m, &xi).powi(2) - b.a_sharp_grid(m, &xi)).abs() < 1e-12 * b.a_sharp_grid(m, &xi));
            assert!((b.a_sharp_grid(m, &xi) - b.sharp.eval(m, &xi)).abs() < 1e-10);
        }
        // analytic gradients against differences of the spline symbol
        let x = [1.1, 2.3, 0.0];
        let xi = [13.0, 5.0, 0.0];
        let j = b.b_jet(&x, &xi);
        let e = 1e-5;
        for a in 0..2 {
            let mut xp = x;
            xp[a] += e;
            let mut xm = x;
            xm[a] -= e;
            let fd = (b.b_jet(&xp, &xi).value - b.b_jet(&xm, &xi).value) / (2.0 * e);
            assert!((fd - j.dx[a]).abs() < 1e-6 * (1.0 + fd.abs()), "dx {a}: {fd} vs {}", j.dx[a]);
            let mut zp = xi;
            zp[a] += e;
            let mut zm = xi;
            zm[a] -= e;
            let fd = (b.b_jet(&x, &zp).value - b.b_jet(&x, &zm).value) / (2.0 * e);
            assert!((fd - j.dxi[a]).abs() < 1e-6, "dxi {a}: {fd} vs {}", j.dxi[a]);
        }
    }

    #[test]
    fn homogeneity_probe() {
        let (g, _) = setup(2, 16);
        let r = check_asymp_homog(&g, &|_, z| vec3::norm(z), 1.0, 4.0);
        assert!(r.euler.iter().all(|(_, s)| *s < 1e-9), "{:?}", r.euler);
        let wrong = check_asymp_homog(&g, &|_, z| vec3::norm(z), 2.0, 4.0);
        assert!((wrong.euler_order - 1.0).abs() < 0.05, "{}", wrong.euler_order);
    }

    #[test]
    fn flat_shift_is_smallest_trial() {
        let (g, fft) = setup(2, 32);
        let b = HalfWaveSymbol::new(&CoefficientMatrix::flat(g), &fft, CHI_CUTOFF).unwrap();
        let rep = shift_for_invertibility(&b, &fft, 3, 1).unwrap();
        assert_eq!(rep.c, 2f64.powi(-4));
        assert!(rep.trace[0].1 < 1e-12);
    }
}
