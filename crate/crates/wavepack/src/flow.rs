//! Bicharacteristic flow of the half-wave symbol and its diagnostics.
//!
//! Positions are kept unwrapped along trajectories so that displacements stay
//! continuous; wrap with [`vec3::torus_diff`] when comparing points.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::packets::{directions, PacketDictionary};
use crate::symbols::{HalfWaveSymbol, SymbolJet};
use crate::vec3::{self, Vec3};

/// Point of the cotangent bundle, `xi` in lattice units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec3,
    pub xi: Vec3,
}

impl PhasePoint {
    pub fn new(x: Vec3, xi: Vec3) -> Self {
        PhasePoint { x, xi }
    }

    pub fn sigma(&self) -> f64 {
        1.0 / vec3::norm(&self.xi)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.xi).all(|v| v.is_finite())
    }
}

/// A symbol that can drive the flow.
pub trait Hamiltonian {
    fn dim(&self) -> usize;
    fn jet(&self, p: &PhasePoint) -> SymbolJet;
    /// No dependence on `x`: `xi` is conserved and trajectories are straight lines.
    fn x_independent(&self) -> bool {
        false
    }
}

impl Hamiltonian for HalfWaveSymbol {
    fn dim(&self) -> usize {
        self.grid.n
    }

    fn jet(&self, p: &PhasePoint) -> SymbolJet {
        self.b_jet(&p.x, &p.xi)
    }

    fn x_independent(&self) -> bool {
        self.is_x_independent()
    }
}

/// The ray limit `sqrt(a(x) xi.xi)` of a half-wave symbol, used as comparison flow.
pub struct RayLimit<'a>(pub &'a HalfWaveSymbol);

impl Hamiltonian for RayLimit<'_> {
    fn dim(&self) -> usize {
        self.0.grid.n
    }

    fn jet(&self, p: &PhasePoint) -> SymbolJet {
        self.0.b_hom_jet(&p.x, &p.xi)
    }

    fn x_independent(&self) -> bool {
        self.0.is_x_independent()
    }
}

/// `(dx/dt, dxi/dt) = (d_xi b, -d_x b)`.
pub fn hamilton_field<H: Hamiltonian + ?Sized>(h: &H, p: &PhasePoint) -> (Vec3, Vec3) {
    let j = h.jet(p);
    (j.dxi, vec3::scale(-1.0, &j.dx))
}

/// `|d/dt log|xi||` at a point, the rate bounding how fast `sigma` can change.
fn log_rate(j: &SymbolJet, xi: &Vec3) -> f64 {
    let r = vec3::norm(xi);
    if r == 0.0 {
        return 0.0;
    }
    (vec3::dot(&j.dx, xi) / (r * r)).abs()
}

fn rk4_step<H: Hamiltonian + ?Sized>(h: &H, p: &PhasePoint, dt: f64, rate: &mut f64) -> PhasePoint {
    let field = |q: &PhasePoint, rate: &mut f64| {
        let j = h.jet(q);
        *rate = rate.max(log_rate(&j, &q.xi));
        (j.dxi, vec3::scale(-1.0, &j.dx))
    };
    let at = |k: &(Vec3, Vec3), s: f64| PhasePoint { x: vec3::axpy(&p.x, s, &k.0), xi: vec3::axpy(&p.xi, s, &k.1) };
    let k1 = field(p, rate);
    let k2 = field(&at(&k1, 0.5 * dt), rate);
    let k3 = field(&at(&k2, 0.5 * dt), rate);
    let k4 = field(&at(&k3, dt), rate);
    let comb = |a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3| {
        let mut s = vec3::ZERO;
        for i in 0..3 {
            s[i] = (a[i] + 2.0 * b[i] + 2.0 * c[i] + d[i]) * dt / 6.0;
        }
        s
    };
    PhasePoint {
        x: vec3::add(&p.x, &comb(&k1.0, &k2.0, &k3.0, &k4.0)),
        xi: vec3::add(&p.xi, &comb(&k1.1, &k2.1, &k3.1, &k4.1)),
    }
}

/// Minimum number of RK4 steps per unit time.
pub const STEPS_PER_UNIT: f64 = 64.0;
/// Step-halving agreement required of every checked trajectory.
pub const HALVING_TOL: f64 = 1e-6;
/// Maximum refinement factor tried before a trajectory is rejected.
pub const MAX_REFINE: usize = 4;

pub fn default_steps(t: f64) -> usize {
    steps_for(t, STEPS_PER_UNIT)
}

pub fn steps_for(t: f64, per_unit: f64) -> usize {
    ((t.abs() * per_unit.max(STEPS_PER_UNIT)).ceil() as usize).max(1)
}

/// Integrate one trajectory for time `t` with `steps` RK4 steps. Also returns
/// the largest `|d log|xi|/dt|` seen at any stage.
pub fn integrate_point<H: Hamiltonian + ?Sized>(h: &H, p: &PhasePoint, t: f64, steps: usize) -> (PhasePoint, f64) {
    if h.x_independent() {
        let v = h.jet(p).dxi;
        return (PhasePoint { x: vec3::axpy(&p.x, t, &v), xi: p.xi }, 0.0);
    }
    let dt = t / steps as f64;
    let mut q = *p;
    let mut rate = 0.0;
    for _ in 0..steps {
        q = rk4_step(h, &q, dt, &mut rate);
    }
    (q, rate)
}

/// Discrepancy between two images, frequencies measured relative to `|xi|`.
fn image_gap(a: &PhasePoint, b: &PhasePoint) -> f64 {
    let scale = vec3::norm(&a.xi).max(1.0);
    vec3::norm(&vec3::sub(&a.x, &b.x)) + vec3::norm(&vec3::sub(&a.xi, &b.xi)) / scale
}

/// Step-halving check: compare `s` against `2s` steps, refining up to [`MAX_REFINE`]
/// times the requested count. Returns the accepted (finer) image and its step count.
pub fn checked_point<H: Hamiltonian + ?Sized>(
    h: &H,
    p: &PhasePoint,
    t: f64,
    steps: usize,
) -> Result<(PhasePoint, f64, usize)> {
    let mut s = steps;
    let (mut coarse, _) = integrate_point(h, p, t, s);
    loop {
        let (fine, rate) = integrate_point(h, p, t, 2 * s);
        let gap = image_gap(&coarse, &fine);
        if gap <= HALVING_TOL {
            return Ok((fine, rate, 2 * s));
        }
        if 2 * s >= MAX_REFINE * steps {
            return Err(Error::Tolerance(format!(
                "flow from x={:?} xi={:?} over t={t}: step halving disagrees by {gap:.2e} at {} steps",
                p.x,
                p.xi,
                2 * s
            )));
        }
        coarse = fine;
        s *= 2;
    }
}

/// `det DPhi_t - 1` at a source, by centered differences over a perturbed cluster.
pub fn jacobian_defect<H: Hamiltonian + ?Sized>(h: &H, p: &PhasePoint, t: f64, steps: usize) -> f64 {
    let n = h.dim();
    let d = 2 * n;
    let ex = 1e-4;
    let exi = 1e-4 * vec3::norm(&p.xi).max(1.0);
    let mut jac = vec![0.0; d * d];
    for b in 0..d {
        let eps = if b < n { ex } else { exi };
        let mut plus = *p;
        let mut minus = *p;
        if b < n {
            plus.x[b] += eps;
            minus.x[b] -= eps;
        } else {
            plus.xi[b - n] += eps;
            minus.xi[b - n] -= eps;
        }
        let (ip, _) = integrate_point(h, &plus, t, steps);
        let (im, _) = integrate_point(h, &minus, t, steps);
        for a in 0..d {
            let (vp, vm) = if a < n { (ip.x[a], im.x[a]) } else { (ip.xi[a - n], im.xi[a - n]) };
            jac[a * d + b] = (vp - vm) / (2.0 * eps);
        }
    }
    (determinant(&mut jac, d) - 1.0).abs()
}

/// Determinant by LU with partial pivoting; destroys `m`.
fn determinant(m: &mut [f64], d: usize) -> f64 {
    let mut det = 1.0;
    for c in 0..d {
        let piv = (c..d).max_by(|&a, &b| m[a * d + c].abs().total_cmp(&m[b * d + c].abs())).unwrap();
        if m[piv * d + c] == 0.0 {
            return 0.0;
        }
        if piv != c {
            for j in 0..d {
                m.swap(piv * d + j, c * d + j);
            }
            det = -det;
        }
        let p = m[c * d + c];
        det *= p;
        for r in c + 1..d {
            let f = m[r * d + c] / p;
            for j in c..d {
                m[r * d + j] -= f * m[c * d + j];
            }
        }
    }
    det
}

/// Which sources get the expensive per-point checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    All,
    Every(usize),
    None,
}

impl Sampling {
    fn hit(&self, i: usize) -> bool {
        match *self {
            Sampling::All => true,
            Sampling::Every(k) => i % k.max(1) == 0,
            Sampling::None => false,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FlowOptions {
    /// RK4 steps per unit time, at least [`STEPS_PER_UNIT`].
    pub steps_per_unit: f64,
    pub halving_check: Sampling,
    pub jacobian: Sampling,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions { steps_per_unit: STEPS_PER_UNIT, halving_check: Sampling::All, jacobian: Sampling::All }
    }
}

/// Sources laid out as a coarse spatial lattice times the dictionary packets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacketLattice {
    pub coarse: Grid,
    pub packets: usize,
}

/// Images of sampled phase-space points under the flow at time `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMap {
    pub t: f64,
    pub steps: usize,
    pub sources: Vec<PhasePoint>,
    pub images: Vec<PhasePoint>,
    /// `|b(Phi_t) - b| / |b|` (0 on the trivial region).
    pub ham_drift: Vec<f64>,
    /// `sigma(t) / sigma_0`.
    pub sigma_ratio: Vec<f64>,
    /// `|det DPhi_t - 1|`, NaN where not sampled.
    pub jac_defect: Vec<f64>,
    /// Largest `|d log|xi|/dt|` met along the trajectories.
    pub rate: f64,
    pub lattice: Option<PacketLattice>,
}

impl FlowMap {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn max_ham_drift(&self) -> f64 {
        self.ham_drift.iter().fold(0.0, |m, &v| m.max(v))
    }

    pub fn max_jac_defect(&self) -> f64 {
        self.jac_defect.iter().filter(|v| !v.is_nan()).fold(0.0, |m, &v| m.max(v))
    }

    /// Largest `|log(sigma ratio)| / |t|`.
    pub fn sigma_exponent(&self) -> f64 {
        if self.t == 0.0 {
            return 0.0;
        }
        self.sigma_ratio.iter().fold(0.0, |m: f64, r| m.max(r.ln().abs())) / self.t.abs()
    }

    /// Images of packet `k` on its coarse lattice.
    pub fn packet_images(&self, k: usize) -> Option<&[PhasePoint]> {
        let l = self.lattice.as_ref()?;
        let len = l.coarse.len();
        Some(&self.images[k * len..(k + 1) * len])
    }
}

/// Integrate every source for time `t`.
pub fn integrate_flow<H: Hamiltonian + ?Sized>(
    h: &H,
    sources: &[PhasePoint],
    t: f64,
    opts: &FlowOptions,
) -> Result<FlowMap> {
    if !(opts.steps_per_unit >= STEPS_PER_UNIT) {
        return Err(Error::Config(format!(
            "{} flow steps per unit time; at least {STEPS_PER_UNIT} required",
            opts.steps_per_unit
        )));
    }
    let steps = steps_for(t, opts.steps_per_unit);
    let mut out = FlowMap {
        t,
        steps,
        sources: sources.to_vec(),
        images: Vec::with_capacity(sources.len()),
        ham_drift: Vec::with_capacity(sources.len()),
        sigma_ratio: Vec::with_capacity(sources.len()),
        jac_defect: Vec::with_capacity(sources.len()),
        rate: 0.0,
        lattice: None,
    };
    for (i, p) in sources.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Divergence(format!("non-finite flow source {p:?}")));
        }
        let b0 = h.jet(p).value;
        let (img, rate) = if t == 0.0 {
            (*p, 0.0)
        } else if opts.halving_check.hit(i) {
            let (img, rate, _) = checked_point(h, p, t, steps)?;
            (img, rate)
        } else {
            integrate_point(h, p, t, steps)
        };
        if !img.is_finite() {
            return Err(Error::Divergence(format!("flow from {p:?} left the finite range")));
        }
        let b1 = h.jet(&img).value;
        out.ham_drift.push(if b0 == 0.0 { (b1 - b0).abs() } else { ((b1 - b0) / b0).abs() });
        let r0 = vec3::norm(&p.xi);
        let r1 = vec3::norm(&img.xi);
        out.sigma_ratio.push(if r0 == 0.0 || r1 == 0.0 { 1.0 } else { r0 / r1 });
        out.jac_defect.push(if b0 == 0.0 && rate == 0.0 {
            0.0
        } else if opts.jacobian.hit(i) && t != 0.0 {
            jacobian_defect(h, p, t, steps)
        } else {
            f64::NAN
        });
        out.rate = out.rate.max(rate);
        out.images.push(img);
    }
    Ok(out)
}

/// Continue a flow map for a further time `dt`: `Phi_{t+dt} = Phi_dt o Phi_t`.
/// Diagnostics are recomputed against the original sources; Jacobians are not carried.
pub fn advance<H: Hamiltonian + ?Sized>(h: &H, flow: &FlowMap, dt: f64, per_unit: f64) -> FlowMap {
    let steps = steps_for(dt, per_unit);
    let mut out = flow.clone();
    out.t = flow.t + dt;
    out.steps = flow.steps + steps;
    for (i, img) in out.images.iter_mut().enumerate() {
        if dt == 0.0 {
            continue;
        }
        let (next, rate) = integrate_point(h, img, dt, steps);
        out.rate = out.rate.max(rate);
        *img = next;
        let p = &flow.sources[i];
        let b0 = h.jet(p).value;
        let b1 = h.jet(img).value;
        out.ham_drift[i] = if b0 == 0.0 { (b1 - b0).abs() } else { ((b1 - b0) / b0).abs() };
        let r1 = vec3::norm(&img.xi);
        out.sigma_ratio[i] = if r1 == 0.0 { 1.0 } else { vec3::norm(&p.xi) / r1 };
        out.jac_defect[i] = f64::NAN;
    }
    out
}

/// Flow of every dictionary packet centre from a coarse spatial lattice with
/// `coarse` points per axis. Packets whose centre lies where `b` vanishes map to
/// themselves without integration.
pub fn packet_flow(
    b: &HalfWaveSymbol,
    dict: &PacketDictionary,
    coarse: usize,
    t: f64,
    opts: &FlowOptions,
) -> Result<FlowMap> {
    let n = dict.n();
    let cg = Grid::new(n, coarse)?;
    let mut sources = Vec::with_capacity(cg.len() * dict.len());
    for p in &dict.packets {
        for c in 0..cg.len() {
            sources.push(PhasePoint::new(cg.position(c), p.center));
        }
    }
    let mut flow = integrate_flow(b, &sources, t, opts)?;
    flow.lattice = Some(PacketLattice { coarse: cg, packets: dict.len() });
    Ok(flow)
}

/// Sampled sup of `|xi . d_x b| / |xi|^2` over the grid, `dirs` directions and radii:
/// the field bound for `|d log sigma / dt|`.
pub fn rate_bound<H: Hamiltonian + ?Sized>(h: &H, grid: &Grid, radii: &[f64], dirs: usize) -> f64 {
    let ds = directions(grid.n, dirs);
    let stride = (grid.len() / 4096).max(1);
    let mut m = 0.0f64;
    for i in (0..grid.len()).step_by(stride) {
        let x = grid.position(i);
        for &r in radii {
            for d in &ds {
                let xi = vec3::scale(r, d);
                m = m.max(log_rate(&h.jet(&PhasePoint::new(x, xi)), &xi));
            }
        }
    }
    m
}

/// `count` sources per radius, positions uniform on the torus, directions uniform.
pub fn random_sources<R: Rng>(n: usize, radii: &[f64], count: usize, rng: &mut R) -> Vec<PhasePoint> {
    let mut out = Vec::with_capacity(radii.len() * count);
    for &r in radii {
        for _ in 0..count {
            let mut x = vec3::ZERO;
            let mut d = vec3::ZERO;
            for a in 0..n {
                x[a] = rng.random::<f64>() * TAU;
            }
            loop {
                for v in d.iter_mut().take(n) {
                    *v = rng.sample(StandardNormal);
                }
                if vec3::norm(&d) > 1e-6 {
                    break;
                }
            }
            out.push(PhasePoint::new(x, vec3::scale(r, &vec3::unit(&d))));
        }
    }
    out
}

/// Flow maps at several times from one set of sources, integrating forward and
/// backward in time once and recording at each requested time.
pub fn flow_series<H: Hamiltonian + ?Sized>(
    h: &H,
    sources: &[PhasePoint],
    times: &[f64],
    opts: &FlowOptions,
) -> Result<Vec<FlowMap>> {
    let mut out: Vec<Option<FlowMap>> = vec![None; times.len()];
    for sign in [1.0, -1.0] {
        let mut order: Vec<usize> = (0..times.len()).filter(|&i| times[i] * sign > 0.0).collect();
        order.sort_by(|&a, &b| (times[a] * sign).total_cmp(&(times[b] * sign)));
        let mut prev: Option<FlowMap> = None;
        for i in order {
            let t = times[i];
            let next = match &prev {
                None => integrate_flow(h, sources, t, opts)?,
                Some(f) => {
                    let mut g = advance(h, f, t - f.t, opts.steps_per_unit);
                    // Jacobians are per-time quantities; recompute on the sampled subset
                    for (j, p) in sources.iter().enumerate() {
                        if opts.jacobian.hit(j) {
                            g.jac_defect[j] = if g.ham_drift[j] == 0.0 && g.images[j] == *p {
                                0.0
                            } else {
                                jacobian_defect(h, p, t, g.steps)
                            };
                        }
                    }
                    g
                }
            };
            prev = Some(next.clone());
            out[i] = Some(next);
        }
    }
    Ok(out
        .into_iter()
        .zip(times)
        .map(|(f, &t)| {
            f.unwrap_or_else(|| FlowMap {
                t,
                steps: 0,
                sources: sources.to_vec(),
                images: sources.to_vec(),
                ham_drift: vec![0.0; sources.len()],
                sigma_ratio: vec![1.0; sources.len()],
                jac_defect: vec![0.0; sources.len()],
                rate: 0.0,
                lattice: None,
            })
        })
        .collect())
}

/// `D = |x-y|^2 + |omega-nu|^2 + (1 - sigma/tau)^2 + |nu.(y-x)|` between the
/// image `(x, omega, sigma)` and the comparison image `(y, nu, tau)`.
pub fn gronwall_quantity(a: &PhasePoint, b: &PhasePoint, n: usize) -> f64 {
    gronwall_terms(a, b, n).iter().sum()
}

/// The four terms of [`gronwall_quantity`] separately.
pub fn gronwall_terms(a: &PhasePoint, b: &PhasePoint, n: usize) -> [f64; 4] {
    let d = vec3::torus_diff(&b.x, &a.x, n);
    let om = vec3::unit(&a.xi);
    let nu = vec3::unit(&b.xi);
    let sig = 1.0 / vec3::norm(&a.xi);
    let tau = 1.0 / vec3::norm(&b.xi);
    [vec3::dot(&d, &d), vec3::norm(&vec3::sub(&om, &nu)).powi(2), (1.0 - sig / tau).powi(2), vec3::dot(&nu, &d).abs()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub times: Vec<f64>,
    pub sigma0: Vec<f64>,
    /// Per source, the max over times of `D(t) / sigma_0`.
    pub ratio: Vec<f64>,
    /// Per source, the max over times of the Jacobian defect and Hamiltonian drift.
    pub jac_defect: Vec<f64>,
    pub ham_drift: Vec<f64>,
    pub max: f64,
}

impl GronwallReport {
    pub const CSV_HEADER: &'static str = "source,sigma0,d_over_sigma0,jac_defect,ham_drift";

    pub fn csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for i in 0..self.sigma0.len() {
            s.push_str(&format!(
                "{i},{:.6e},{:.6e},{:.6e},{:.6e}\n",
                self.sigma0[i], self.ratio[i], self.jac_defect[i], self.ham_drift[i]
            ));
        }
        s
    }

    /// Max of `D / sigma_0` over the sources with the given `sigma_0`.
    pub fn max_for_sigma(&self, sigma0: f64) -> f64 {
        self.sigma0
            .iter()
            .zip(&self.ratio)
            .filter(|(s, _)| ((**s / sigma0) - 1.0).abs() < 1e-9)
            .fold(0.0, |m, (_, &r)| m.max(r))
    }
}

/// Compare flows of `b` against its ray limit, time by time, from identical sources.
pub fn gronwall_diag(flows: &[FlowMap], homogeneous: &[FlowMap], n: usize) -> Result<GronwallReport> {
    if flows.len() != homogeneous.len() || flows.is_empty() {
        return Err(Error::Shape("gronwall_diag needs matching, non-empty flow lists".into()));
    }
    let m = flows[0].len();
    for (f, g) in flows.iter().zip(homogeneous) {
        if f.sources != g.sources || f.t != g.t || f.sources != flows[0].sources {
            return Err(Error::Shape("flows were not integrated from identical sources and times".into()));
        }
    }
    let sigma0: Vec<f64> = flows[0].sources.iter().map(PhasePoint::sigma).collect();
    let mut ratio = vec![0.0f64; m];
    let mut jac = vec![0.0f64; m];
    let mut ham = vec![0.0f64; m];
    for (f, g) in flows.iter().zip(homogeneous) {
        for i in 0..m {
            ratio[i] = ratio[i].max(gronwall_quantity(&f.images[i], &g.images[i], n) / sigma0[i]);
            if !f.jac_defect[i].is_nan() {
                jac[i] = jac[i].max(f.jac_defect[i]);
            }
            ham[i] = ham[i].max(f.ham_drift[i]);
        }
    }
    let max = ratio.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(GronwallReport { times: flows.iter().map(|f| f.t).collect(), sigma0, ratio, jac_defect: jac, ham_drift: ham, max })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Fft;
    use crate::symbols::{CoefficientMatrix, RoughParams, CHI_CUTOFF};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn flat(n: usize, size: usize) -> HalfWaveSymbol {
        let grid = Grid::new(n, size).unwrap();
        let fft = Fft::new(grid);
        HalfWaveSymbol::new(&CoefficientMatrix::flat(grid), &fft, CHI_CUTOFF).unwrap()
    }

    #[test]
    fn flat_field_and_straight_lines() {
        let b = flat(2, 32);
        let p = PhasePoint::new([1.0, 2.0, 0.0], [12.0, 16.0, 0.0]);
        let (v, f) = hamilton_field(&b, &p);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        assert!(vec3::norm(&f) < 1e-12);
        let low = PhasePoint::new([1.0, 2.0, 0.0], [4.0, 0.0, 0.0]);
        let (v, f) = hamilton_field(&b, &low);
        assert_eq!((v, f), (vec3::ZERO, vec3::ZERO));

        let srcs = vec![p, low];
        let flow = integrate_flow(&b, &srcs, -0.75, &FlowOptions::default()).unwrap();
        let want = vec3::axpy(&p.x, -0.75, &vec3::unit(&p.xi));
        assert!(vec3::norm(&vec3::sub(&flow.images[0].x, &want)) < 1e-10);
        assert!(vec3::norm(&vec3::sub(&flow.images[0].xi, &p.xi)) < 1e-10);
        assert_eq!(flow.images[1], low);
        assert!(flow.max_jac_defect() < 1e-8);
    }

    /// Hides x-independence so the flat flow goes through RK4.
    struct Integrated<'a>(&'a HalfWaveSymbol);

    impl Hamiltonian for Integrated<'_> {
        fn dim(&self) -> usize {
            self.0.dim()
        }
        fn jet(&self, p: &PhasePoint) -> SymbolJet {
            self.0.jet(p)
        }
    }

    #[test]
    fn integrated_flat_flow_is_straight() {
        let b = flat(2, 64);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let srcs = random_sources(2, &[16.0, 64.0], 20, &mut rng);
        for t in [1.0, -0.5] {
            let fast = integrate_flow(&b, &srcs, t, &FlowOptions::default()).unwrap();
            let rk = integrate_flow(&Integrated(&b), &srcs, t, &FlowOptions::default()).unwrap();
            assert!(rk.steps > 0);
            for (a, c) in rk.images.iter().zip(&fast.images) {
                assert!(image_gap(a, c) < 1e-10, "{a:?} vs {c:?}");
            }
            assert!(rk.max_ham_drift() < 1e-12 && rk.max_jac_defect() < 1e-8);
        }
    }

    #[test]
    fn determinant_of_known_matrices() {
        let mut m = vec![2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 1.0, 0.0];
        assert!((determinant(&mut m, 3) + 6.0).abs() < 1e-14);
        let mut s = vec![1.0, 2.0, 3.0, 4.0];
        assert!((determinant(&mut s, 2) + 2.0).abs() < 1e-14);
    }

    #[test]
    fn perturbed_flow_conserves_and_composes() {
        let grid = Grid::new(2, 64).unwrap();
        let fft = Fft::new(grid);
        let coeffs = CoefficientMatrix::generate(grid, &RoughParams::new(2.0, 0.2, 42)).unwrap();
        let b = HalfWaveSymbol::new(&coeffs, &fft, CHI_CUTOFF).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let srcs = random_sources(2, &[16.0, 40.0], 10, &mut rng);
        let f1 = integrate_flow(&b, &srcs, 0.5, &FlowOptions::default()).unwrap();
        assert!(f1.max_ham_drift() < 1e-8, "drift {}", f1.max_ham_drift());
        assert!(f1.max_jac_defect() < 1e-4, "jac {}", f1.max_jac_defect());
        // group property
        let f2 = advance(&b, &f1, 0.25, STEPS_PER_UNIT);
        let direct = integrate_flow(&b, &srcs, 0.75, &FlowOptions::default()).unwrap();
        for (a, c) in f2.images.iter().zip(&direct.images) {
            assert!(image_gap(a, c) < 10.0 * HALVING_TOL);
        }
        // sigma comparability with the sampled field bound
        let m = rate_bound(&b, &grid, &[9.0, 16.0, 32.0, 64.0], 32).max(f1.rate);
        for r in &f1.sigma_ratio {
            assert!(r.ln().abs() <= m * 0.5 + 1e-12);
        }
        // time reversal
        let back = integrate_flow(&b, &f1.images, -0.5, &FlowOptions::default()).unwrap();
        for (a, c) in back.images.iter().zip(&srcs) {
            assert!(image_gap(a, c) < 1e-8);
        }
    }

    #[test]
    fn gronwall_zero_for_flat_metric() {
        let b = flat(2, 32);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let srcs = random_sources(2, &[16.0, 128.0], 5, &mut rng);
        let times = [0.0, 0.5, -1.0];
        let f = flow_series(&b, &srcs, &times, &FlowOptions::default()).unwrap();
        let g = flow_series(&RayLimit(&b), &srcs, &times, &FlowOptions::default()).unwrap();
        let rep = gronwall_diag(&f, &g, 2).unwrap();
        assert!(rep.max <= 1e-8, "{}", rep.max);
        assert!(rep.csv().starts_with(GronwallReport::CSV_HEADER));
    }
}
