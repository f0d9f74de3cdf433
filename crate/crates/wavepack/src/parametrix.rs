//! Flow parametrix `U_t = W* F_t W`, its error operator, and the first- and
//! second-order solvers built on it.
//!
//! The pullback `F_t G (x, xi_k) = G(Phi_t(x, xi_k))` is evaluated per packet as
//! an exact Fourier shift by the packet's mean displacement, followed by cubic
//! spline interpolation of the demodulated packet envelope at the residual
//! displacement and a first-order correction for the frequency displacement.
//! When the flow moves a packet rigidly (flat metric) the whole packet reduces
//! to the multiplier `psi_k^2 e^{i zeta.v_k}`.

use std::cell::{OnceCell, RefCell};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{advance, packet_flow, FlowMap, FlowOptions, Sampling, STEPS_PER_UNIT};
use crate::grid::{Fft, Grid, RealField, C64};
use crate::packets::{c_norm, packet_value, PacketDictionary};
use crate::spline::{PeriodicSpline, Taps};
use crate::symbols::{band_project, EllipticOperator, HalfWaveSymbol, KnOperator, KN_TOL};
use crate::vec3::{self, Vec3};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Default step of the centered time difference in [`HalfWaveOperator::error_term`].
pub const DEFAULT_H: f64 = 1e-3;
/// Largest tolerated fraction of packet energy whose image leaves the guard band.
pub const CLIP_LIMIT: f64 = 0.05;

/// Per-packet data for the pullback, fixed by the dictionary.
struct PullbackTables {
    /// Integer demodulation frequency (rounded spectral centroid).
    demod: Vec<[i64; 3]>,
    /// `d/dxi psi_xi(zeta)` at the packet centre, renormalization included, on the packet support.
    dpsi: Vec<Vec<(u32, Vec3)>>,
    guard: f64,
}

impl PullbackTables {
    fn build(dict: &PacketDictionary) -> Self {
        let n = dict.n();
        let grid = dict.grid;
        let demod = dict
            .centroids()
            .iter()
            .map(|c| {
                let mut m = [0i64; 3];
                for a in 0..n {
                    m[a] = c[a].round() as i64;
                }
                m
            })
            .collect();
        let dpsi = dict
            .packets
            .iter()
            .map(|p| {
                let rho = vec3::norm(&p.center);
                let h = 1e-4 * rho;
                let c0 = c_norm(&dict.profiles, n, rho);
                // centres displaced along each axis, with their normalizations
                let moved: Vec<(Vec3, f64, Vec3, f64)> = (0..n)
                    .map(|a| {
                        let mut xp = p.center;
                        let mut xm = p.center;
                        xp[a] += h;
                        xm[a] -= h;
                        (xp, c_norm(&dict.profiles, n, vec3::norm(&xp)), xm, c_norm(&dict.profiles, n, vec3::norm(&xm)))
                    })
                    .collect();
                let max = p.support.iter().fold(0.0f64, |m, s| m.max(s.1.abs()));
                p.support
                    .iter()
                    .map(|&(i, v)| {
                        let z = grid.freq(i as usize);
                        let raw = packet_value(&dict.profiles, n, c0, &p.center, &z);
                        let scale = if raw.abs() > 1e-12 * max { v / raw } else { 0.0 };
                        let mut d = vec3::ZERO;
                        for (a, (xp, cp, xm, cm)) in moved.iter().enumerate() {
                            let fp = packet_value(&dict.profiles, n, *cp, xp, &z);
                            let fm = packet_value(&dict.profiles, n, *cm, xm, &z);
                            d[a] = (fp - fm) / (2.0 * h) * scale;
                        }
                        (i, d)
                    })
                    .collect()
            })
            .collect();
        let top = dict.nodes.iter().fold(0.0f64, |m, nd| m.max(nd.magnitude));
        let guard = top * 2f64.powf(1.0 / dict.params.radial_nodes as f64);
        PullbackTables { demod, dpsi, guard }
    }
}

/// Diagnostics of one pullback.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PullbackStats {
    /// Energy fraction of packet samples whose image left the guard band.
    pub clipped_fraction: f64,
    /// Packets moved rigidly (pure multiplier) and packets needing interpolation.
    pub rigid: usize,
    pub warped: usize,
}

/// Evaluate `sum_k w_k psi_k(D) [F_t W f]_k` for several inputs at once.
fn pullback_synthesize(
    dict: &PacketDictionary,
    fft: &Fft,
    coarse_fft: Option<&Fft>,
    tables: &PullbackTables,
    flow: &FlowMap,
    specs: &[Vec<C64>],
) -> Result<(Vec<Vec<C64>>, PullbackStats)> {
    let grid = dict.grid;
    let n = grid.n;
    let len = grid.len();
    let h = grid.spacing();
    let lattice = flow.lattice.as_ref().ok_or_else(|| Error::Shape("flow map has no packet lattice".into()))?;
    if lattice.packets != dict.len() {
        return Err(Error::Shape(format!("flow covers {} packets, dictionary has {}", lattice.packets, dict.len())));
    }
    let cg = lattice.coarse;
    let clen = cg.len();
    let positions = grid.positions();
    // fine-grid stencils into the coarse lattice are the same for every packet
    let coarse_taps: Vec<Taps> =
        if cg.size == grid.size { Vec::new() } else { positions.iter().map(|x| Taps::at(&cg, x)).collect() };
    let mut accs = vec![vec![ZERO; len]; specs.len()];
    let mut stats = PullbackStats::default();
    let mut total_energy = 0.0;
    let mut clipped_energy = 0.0;

    for &(i, v) in &dict.low.support {
        for (acc, s) in accs.iter_mut().zip(specs) {
            acc[i as usize] += s[i as usize] * (dict.low.weight * v * v);
        }
    }

    let mut disp_x = vec![vec3::ZERO; len];
    let mut disp_xi = vec![vec3::ZERO; len];
    let mut clipped = vec![false; len];
    let mut buf = vec![ZERO; len];
    let mut coefs: Vec<Vec<C64>> = vec![vec![ZERO; len]; 1 + n];

    for (k, p) in dict.packets.iter().enumerate() {
        let images = &flow.images[k * clen..(k + 1) * clen];
        let sources = &flow.sources[k * clen..(k + 1) * clen];
        let energy: Vec<f64> =
            specs.iter().map(|s| p.support.iter().map(|&(i, v)| (s[i as usize] * v).norm_sqr()).sum::<f64>()).collect();
        let e_sum: f64 = energy.iter().sum::<f64>() * p.weight;
        total_energy += e_sum;

        let mut mean = vec3::ZERO;
        for (img, src) in images.iter().zip(sources) {
            mean = vec3::add(&mean, &vec3::sub(&img.x, &src.x));
        }
        mean = vec3::scale(1.0 / clen as f64, &mean);
        let scale = vec3::norm(&p.center).max(1.0);
        let mut spread = 0.0f64;
        let mut n_clip = 0usize;
        for (img, src) in images.iter().zip(sources) {
            let r = vec3::sub(&vec3::sub(&img.x, &src.x), &mean);
            spread = spread.max(vec3::norm(&r)).max(vec3::norm(&vec3::sub(&img.xi, &src.xi)) / scale);
            if vec3::norm(&img.xi) > tables.guard {
                n_clip += 1;
            }
        }
        clipped_energy += e_sum * n_clip as f64 / clen as f64;

        if spread < 1e-13 && n_clip == 0 {
            // rigid motion: psi_k^2 e^{i zeta.v}
            stats.rigid += 1;
            for &(i, v) in &p.support {
                let z = grid.freq(i as usize);
                let ph = C64::from_polar(p.weight * v * v, vec3::dot(&z, &mean));
                for (acc, s) in accs.iter_mut().zip(specs) {
                    acc[i as usize] += s[i as usize] * ph;
                }
            }
            continue;
        }
        stats.warped += 1;

        // residual displacements on the fine grid
        let dx: Vec<[f64; 6]> = images
            .iter()
            .zip(sources)
            .map(|(img, src)| {
                let r = vec3::sub(&vec3::sub(&img.x, &src.x), &mean);
                let d = vec3::sub(&img.xi, &src.xi);
                [r[0], r[1], r[2], d[0], d[1], d[2]]
            })
            .collect();
        if cg.size == grid.size {
            for m in 0..len {
                disp_x[m] = [dx[m][0], dx[m][1], dx[m][2]];
                disp_xi[m] = [dx[m][3], dx[m][4], dx[m][5]];
                clipped[m] = vec3::norm(&images[m].xi) > tables.guard;
            }
        } else {
            let cfft = coarse_fft.ok_or_else(|| Error::Shape("coarse flow lattice needs its FFT".into()))?;
            let comps: Vec<Option<PeriodicSpline>> = (0..6)
                .map(|c| {
                    if c % 3 >= n {
                        return None;
                    }
                    let vals: Vec<f64> = dx.iter().map(|d| d[c]).collect();
                    Some(PeriodicSpline::new(cfft, &vals))
                })
                .collect();
            for m in 0..len {
                let mut out = [0.0; 6];
                for (c, sp) in comps.iter().enumerate() {
                    if let Some(sp) = sp {
                        out[c] = sp.eval(&coarse_taps[m]);
                    }
                }
                disp_x[m] = [out[0], out[1], out[2]];
                disp_xi[m] = [out[3], out[4], out[5]];
                clipped[m] = vec3::norm(&vec3::add(&p.center, &disp_xi[m])) > tables.guard;
            }
        }

        let md = tables.demod[k];
        let mdv = [md[0] as f64, md[1] as f64, md[2] as f64];
        let nn = grid.size as i64;
        // rolled index and spline prefilter for every support point
        let roll: Vec<(usize, f64)> = p
            .support
            .iter()
            .map(|&(i, _)| {
                let c = grid.coords(i as usize);
                let mut e = [0usize; 3];
                for a in 0..n {
                    e[a] = (c[a] as i64 - md[a]).rem_euclid(nn) as usize;
                }
                let j = grid.index(e);
                let kap = grid.freq(j);
                let mut d = 1.0;
                for ka in kap.iter().take(n) {
                    d *= (2.0 + (ka * h).cos()) / 3.0;
                }
                (j, d)
            })
            .collect();
        let phase_shift: Vec<C64> =
            p.support.iter().map(|&(i, _)| C64::from_polar(1.0, vec3::dot(&grid.freq(i as usize), &mean))).collect();
        let taps: Vec<Taps> = (0..len).map(|m| Taps::at(&grid, &vec3::add(&positions[m], &disp_x[m]))).collect();
        let phases: Vec<C64> =
            (0..len).map(|m| C64::from_polar(1.0, vec3::dot(&mdv, &vec3::add(&positions[m], &disp_x[m])))).collect();

        for (acc, s) in accs.iter_mut().zip(specs) {
            for (comp, cf) in coefs.iter_mut().enumerate() {
                cf.iter_mut().for_each(|v| *v = ZERO);
                if comp == 0 {
                    for ((&(i, v), &(j, d)), ph) in p.support.iter().zip(&roll).zip(&phase_shift) {
                        cf[j] = s[i as usize] * v * ph / d;
                    }
                } else {
                    for ((&(i, dv), &(j, d)), ph) in tables.dpsi[k].iter().zip(&roll).zip(&phase_shift) {
                        cf[j] = s[i as usize] * dv[comp - 1] * ph / d;
                    }
                }
                fft.inverse(cf);
            }
            for m in 0..len {
                if clipped[m] {
                    buf[m] = ZERO;
                    continue;
                }
                let t = &taps[m];
                let mut val = t.sum(&coefs[0]);
                for a in 0..n {
                    let d = disp_xi[m][a];
                    if d != 0.0 {
                        val += t.sum(&coefs[1 + a]) * d;
                    }
                }
                buf[m] = val * phases[m];
            }
            fft.forward(&mut buf);
            for &(i, v) in &p.support {
                acc[i as usize] += buf[i as usize] * (p.weight * v);
            }
        }
    }
    stats.clipped_fraction = if total_energy > 0.0 { clipped_energy / total_energy } else { 0.0 };
    if stats.clipped_fraction > CLIP_LIMIT {
        return Err(Error::Tolerance(format!(
            "{:.1}% of the packet energy left the guard band at t={}",
            100.0 * stats.clipped_fraction,
            flow.t
        )));
    }
    Ok((accs, stats))
}

/// Construction options for [`HalfWaveOperator`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParametrixOptions {
    /// Spatial sources per axis for the packet flows.
    pub coarse: usize,
    pub steps_per_unit: f64,
    /// Number of flow maps kept in the cache.
    pub cache: usize,
}

impl Default for ParametrixOptions {
    fn default() -> Self {
        ParametrixOptions { coarse: 32, steps_per_unit: STEPS_PER_UNIT, cache: 16 }
    }
}

/// `U_t = W* F_t W` with a cache of packet flows.
pub struct HalfWaveOperator {
    pub dict: Arc<PacketDictionary>,
    pub fft: Fft,
    pub symbol: Arc<HalfWaveSymbol>,
    /// Invertibility shift `c`.
    pub shift: f64,
    pub options: ParametrixOptions,
    tables: PullbackTables,
    coarse_fft: Option<Fft>,
    cache: RefCell<Vec<Arc<FlowMap>>>,
    b_op: OnceCell<KnOperator>,
    inv_op: OnceCell<KnOperator>,
    last_stats: RefCell<PullbackStats>,
}

impl HalfWaveOperator {
    pub fn new(
        dict: Arc<PacketDictionary>,
        symbol: Arc<HalfWaveSymbol>,
        shift: f64,
        options: ParametrixOptions,
    ) -> Result<Self> {
        if symbol.grid != dict.grid {
            return Err(Error::Shape("symbol and dictionary live on different grids".into()));
        }
        if !(shift > 0.0) {
            return Err(Error::Config(format!("invertibility shift must be positive, got {shift}")));
        }
        let coarse = options.coarse.min(dict.grid.size);
        if coarse < 4 {
            return Err(Error::Config(format!("flow lattice of {coarse} points per axis is too coarse")));
        }
        let options = ParametrixOptions { coarse, ..options };
        let fft = Fft::new(dict.grid);
        let coarse_fft = (coarse != dict.grid.size).then(|| Fft::new(Grid::new(dict.n(), coarse).expect("valid coarse grid")));
        let tables = PullbackTables::build(&dict);
        Ok(HalfWaveOperator {
            dict,
            fft,
            symbol,
            shift,
            options,
            tables,
            coarse_fft,
            cache: RefCell::new(Vec::new()),
            b_op: OnceCell::new(),
            inv_op: OnceCell::new(),
            last_stats: RefCell::new(PullbackStats::default()),
        })
    }

    pub fn grid(&self) -> Grid {
        self.dict.grid
    }

    pub fn last_stats(&self) -> PullbackStats {
        *self.last_stats.borrow()
    }

    /// Packet flow at time `t`, continued from the nearest cached time when that is cheaper.
    pub fn flow(&self, t: f64) -> Result<Arc<FlowMap>> {
        let mut cache = self.cache.borrow_mut();
        if let Some(f) = cache.iter().find(|f| (f.t - t).abs() <= 1e-14) {
            return Ok(f.clone());
        }
        let nearest = cache
            .iter()
            .filter(|f| f.t != 0.0 && (f.t - t).abs() < t.abs())
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .cloned();
        let flow = match nearest {
            Some(f) => advance(self.symbol.as_ref(), &f, t - f.t, self.options.steps_per_unit),
            None => packet_flow(
                &self.symbol,
                &self.dict,
                self.options.coarse,
                t,
                &FlowOptions {
                    steps_per_unit: self.options.steps_per_unit,
                    halving_check: Sampling::Every(97),
                    jacobian: Sampling::None,
                },
            )?,
        };
        let flow = Arc::new(flow);
        if cache.len() >= self.options.cache.max(1) {
            cache.remove(0);
        }
        cache.push(flow.clone());
        Ok(flow)
    }

    /// `U_t f` for several inputs sharing one flow.
    pub fn apply_many(&self, t: f64, fs: &[&RealField]) -> Result<Vec<RealField>> {
        let grid = self.grid();
        for f in fs {
            if f.grid != grid {
                return Err(Error::Shape(format!("field grid {:?} vs operator grid {grid:?}", f.grid)));
            }
        }
        let specs: Vec<Vec<C64>> = fs.iter().map(|f| f.spectrum(&self.fft)).collect();
        let flow = self.flow(t)?;
        let (accs, stats) =
            pullback_synthesize(&self.dict, &self.fft, self.coarse_fft.as_ref(), &self.tables, &flow, &specs)?;
        *self.last_stats.borrow_mut() = stats;
        Ok(accs
            .into_iter()
            .map(|mut a| {
                self.fft.inverse(&mut a);
                RealField { grid, data: a, band_limit: grid.band_edge() }
            })
            .collect())
    }

    pub fn apply(&self, f: &RealField, t: f64) -> Result<RealField> {
        Ok(self.apply_many(t, &[f])?.pop().expect("one output"))
    }

    fn b_operator(&self) -> &KnOperator {
        self.b_op.get_or_init(|| {
            self.symbol.operator(&self.fft, self.grid().band_edge(), ZERO, false, KN_TOL)
        })
    }

    /// `b(x, D) f`, projected to the resolved band.
    pub fn apply_b(&self, f: &RealField) -> RealField {
        band_project(&self.fft, &self.b_operator().apply(&self.fft, f))
    }

    /// `(b(x, D) + ic) f` on the band.
    pub fn apply_shifted(&self, f: &RealField) -> RealField {
        let mut g = self.apply_b(f);
        g.axpy(C64::new(0.0, self.shift), &band_project(&self.fft, f));
        g
    }

    /// Approximate `(b(x, D) + ic)^{-1}`: quantized inverse symbol plus one Neumann step.
    /// Returns the result and the relative residual `|f - (b + ic) P f| / |f|`.
    pub fn apply_inverse(&self, f: &RealField) -> Result<(RealField, f64)> {
        let q = self.inv_op.get_or_init(|| {
            self.symbol.operator(&self.fft, self.grid().band_edge(), C64::new(0.0, self.shift), true, KN_TOL)
        });
        let fb = band_project(&self.fft, f);
        let q0 = band_project(&self.fft, &q.apply(&self.fft, &fb));
        let r0 = fb.sub(&self.apply_shifted(&q0));
        let mut p = q0;
        p.axpy(C64::new(1.0, 0.0), &band_project(&self.fft, &q.apply(&self.fft, &r0)));
        let norm = fb.norm();
        let res = if norm == 0.0 { 0.0 } else { fb.sub(&self.apply_shifted(&p)).norm() / norm };
        if res > 0.5 {
            return Err(Error::Divergence(format!("inverse of b + ic leaves residual {res:.3} after one Neumann step")));
        }
        Ok((p, res))
    }

    /// `E_t f = -i (U_{t+h} f - U_{t-h} f) / (2h) - b(x, D) U_t f`.
    pub fn error_term(&self, f: &RealField, t: f64, h: f64) -> Result<RealField> {
        Ok(self.error_terms(&[f], t, h)?.pop().expect("one output"))
    }

    pub fn error_terms(&self, fs: &[&RealField], t: f64, h: f64) -> Result<Vec<RealField>> {
        self.check_step(h)?;
        let up = self.apply_many(t + h, fs)?;
        let um = self.apply_many(t - h, fs)?;
        let u0 = if t == 0.0 { fs.iter().map(|f| band_project(&self.fft, f)).collect() } else { self.apply_many(t, fs)? };
        Ok(up
            .iter()
            .zip(&um)
            .zip(&u0)
            .map(|((a, b), c)| {
                let mut e = a.sub(b);
                e.scale_c(C64::new(0.0, -0.5 / h));
                e.sub(&self.apply_b(c))
            })
            .collect())
    }

    fn check_step(&self, h: f64) -> Result<()> {
        // the flow integrator resolves time to about its step-halving tolerance
        if !(h >= 1e-6) {
            return Err(Error::Config(format!("time-difference step {h} is below the flow integrator tolerance")));
        }
        Ok(())
    }

    /// One step of the half-wave propagator `e_s`: `U_s g + (s/2)[U_s V(0) + V(s)]` with
    /// `V(tau) = -i E_tau g`, the first Picard term under trapezoid quadrature.
    pub fn half_wave_step(&self, s: f64, gs: &[&RealField], h: f64) -> Result<Vec<RealField>> {
        let jobs: Vec<(f64, &RealField)> = gs.iter().map(|&g| (s, g)).collect();
        self.half_wave_steps(&jobs, h)
    }

    /// [`Self::half_wave_step`] for inputs with individual step lengths; `E_0` is shared.
    pub fn half_wave_steps(&self, jobs: &[(f64, &RealField)], h: f64) -> Result<Vec<RealField>> {
        let gs: Vec<&RealField> = jobs.iter().map(|j| j.1).collect();
        let v0: Vec<RealField> = self
            .error_terms(&gs, 0.0, h)?
            .into_iter()
            .map(|mut e| {
                e.scale_c(-I);
                e
            })
            .collect();
        let mut out: Vec<Option<RealField>> = vec![None; jobs.len()];
        let mut steps: Vec<f64> = Vec::new();
        for &(s, _) in jobs {
            if !steps.contains(&s) {
                steps.push(s);
            }
        }
        for s in steps {
            let idx: Vec<usize> = (0..jobs.len()).filter(|&j| jobs[j].0 == s).collect();
            let k = idx.len();
            let mut inputs: Vec<&RealField> = idx.iter().map(|&j| gs[j]).collect();
            inputs.extend(idx.iter().map(|&j| &v0[j]));
            let us = self.apply_many(s, &inputs)?;
            let up = self.apply_many(s + h, &inputs[..k])?;
            let um = self.apply_many(s - h, &inputs[..k])?;
            for (q, &j) in idx.iter().enumerate() {
                let mut es = up[q].sub(&um[q]);
                es.scale_c(C64::new(0.0, -0.5 / h));
                let es = es.sub(&self.apply_b(&us[q]));
                // V(s) = -i E_s g
                let mut r = us[q].clone();
                r.axpy(C64::new(0.5 * s, 0.0), &us[k + q]);
                r.axpy(C64::new(0.0, -0.5 * s), &es);
                out[j] = Some(r);
            }
        }
        Ok(out.into_iter().map(|r| r.expect("every job stepped")).collect())
    }
}

/// Uniform time grid `0, dt, 2dt, ..., T` (dt may be negative).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if dt == 0.0 || !dt.is_finite() || !t_end.is_finite() || t_end * dt < 0.0 {
            return Err(Error::Config(format!("time grid to {t_end} with step {dt}")));
        }
        let steps = (t_end / dt).round() as usize;
        if ((steps as f64) * dt - t_end).abs() > 1e-9 * t_end.abs().max(1.0) {
            return Err(Error::Config(format!("end time {t_end} is not a multiple of dt = {dt}")));
        }
        Ok(TimeGrid { dt, steps })
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| i as f64 * self.dt).collect()
    }

    pub fn end(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

/// Iterates `V_0 .. V_K` of the first-order Duhamel series on a time grid.
#[derive(Clone, Debug)]
pub struct PicardSeries {
    pub grid: TimeGrid,
    /// `iterates[k][i] = V_k(t_i)`.
    pub iterates: Vec<Vec<RealField>>,
    /// `norms[k] = max_i |V_k(t_i)|`.
    pub norms: Vec<f64>,
    pub k: usize,
}

impl PicardSeries {
    /// `|V_{k+1}| / |V_k|`.
    pub fn ratios(&self) -> Vec<f64> {
        self.norms.windows(2).map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] }).collect()
    }

    /// Largest `|V_{k+1}(t_i)|` on the grid: the residual of the truncated solution.
    pub fn residuals(&self) -> Vec<f64> {
        self.iterates.last().map(|v| v.iter().map(RealField::norm).collect()).unwrap_or_default()
    }
}

/// Solver output sampled on a time grid.
#[derive(Clone, Debug)]
pub struct WaveSolution {
    pub times: Vec<f64>,
    pub u: Vec<RealField>,
    /// `d_t u` (second-order solves only).
    pub ut: Vec<RealField>,
    pub meta: SolverMeta,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub solver: String,
    pub k: usize,
    pub dt: f64,
    /// Residual norms, one per reported time (see `residual_times`).
    pub residuals: Vec<f64>,
    pub residual_times: Vec<f64>,
    pub picard_norms: Vec<f64>,
    pub shift: f64,
    pub inverse_residual: f64,
}

impl WaveSolution {
    pub fn at(&self, t: f64) -> Option<&RealField> {
        self.times.iter().position(|&s| (s - t).abs() < 1e-12).map(|i| &self.u[i])
    }
}

/// Automatic truncation: stop once `|V_{k+1}| / |V_k|` drops below this.
pub const PICARD_EARLY_STOP: f64 = 1e-6;

/// `e_t f = U_t f + int_0^t U_{t-tau} V(tau) dtau` with `V = sum_{k<=K} V_k`,
/// `V_0 = -i E_t f`, `V_{k+1}(t) = -i int_0^t E_{t-tau} V_k(tau) dtau`, trapezoid in time.
pub fn first_order_solve(op: &HalfWaveOperator, f: &RealField, grid: &TimeGrid, k: usize, h: f64) -> Result<(WaveSolution, PicardSeries)> {
    if k < 1 {
        return Err(Error::Config("Picard truncation K must be at least 1".into()));
    }
    let times = grid.times();
    let m = times.len();
    let dt = grid.dt;
    let w = |i: usize, l: usize| if l == 0 || l == i { 0.5 * dt } else { dt };

    let mut iterates: Vec<Vec<RealField>> = Vec::new();
    let mut v0 = Vec::with_capacity(m);
    for &t in &times {
        let mut e = op.error_term(f, t, h)?;
        e.scale_c(-I);
        v0.push(e);
    }
    iterates.push(v0);
    let mut norms = vec![iterates[0].iter().map(RealField::norm).fold(0.0, f64::max)];
    // one level beyond K gives the residual of the truncated sum
    for level in 0..k {
        let prev = &iterates[level];
        let mut next: Vec<RealField> = (0..m).map(|_| RealField::zeros(f.grid)).collect();
        // group by lag s = t_i - t_l so each E_s is applied to a batch
        for lag in 0..m {
            let ls: Vec<usize> = (0..m - lag).collect();
            if m == 1 {
                break;
            }
            let inputs: Vec<&RealField> = ls.iter().map(|&l| &prev[l]).collect();
            let es = op.error_terms(&inputs, lag as f64 * dt, h)?;
            for (&l, e) in ls.iter().zip(&es) {
                let i = l + lag;
                if i == 0 {
                    continue;
                }
                next[i].axpy(C64::new(0.0, -w(i, l)), e);
            }
        }
        let nn = next.iter().map(RealField::norm).fold(0.0, f64::max);
        if !nn.is_finite() {
            return Err(Error::Divergence(format!("Picard iterate {} is not finite", level + 1)));
        }
        norms.push(nn);
        iterates.push(next);
        if nn <= PICARD_EARLY_STOP * norms[level] {
            break;
        }
    }
    let used = iterates.len() - 1;
    let ratios: Vec<f64> = norms.windows(2).map(|x| x[1] / x[0].max(f64::MIN_POSITIVE)).collect();
    if used >= 2 && ratios.iter().skip(1).all(|&r| r >= 1.0) {
        return Err(Error::Divergence(format!("Picard norms do not decay: {norms:?}")));
    }
    // V = sum_{k < used} V_k, solution on the grid
    let mut vsum: Vec<RealField> = (0..m).map(|_| RealField::zeros(f.grid)).collect();
    for it in iterates.iter().take(used) {
        for (s, v) in vsum.iter_mut().zip(it) {
            s.axpy(C64::new(1.0, 0.0), v);
        }
    }
    let mut u: Vec<RealField> = Vec::with_capacity(m);
    for &t in &times {
        u.push(if t == 0.0 { band_project(&op.fft, f) } else { op.apply(f, t)? });
    }
    // e(t_i) += sum_l w U_{t_i - t_l} V(t_l), batched by lag
    for lag in 0..m {
        let ls: Vec<usize> = (0..m - lag).filter(|&l| l + lag > 0).collect();
        if ls.is_empty() {
            continue;
        }
        let inputs: Vec<&RealField> = ls.iter().map(|&l| &vsum[l]).collect();
        let gs = if lag == 0 { inputs.iter().map(|&v| v.clone()).collect() } else { op.apply_many(lag as f64 * dt, &inputs)? };
        for (&l, g) in ls.iter().zip(&gs) {
            let i = l + lag;
            u[i].axpy(C64::new(w(i, l), 0.0), g);
        }
    }
    let series = PicardSeries { grid: grid.clone(), iterates, norms: norms.clone(), k: used };
    let residuals = series.residuals();
    let meta = SolverMeta {
        solver: "parametrix-first-order".into(),
        k: used,
        dt,
        residuals,
        residual_times: times.clone(),
        picard_norms: norms,
        shift: op.shift,
        inverse_residual: 0.0,
    };
    Ok((WaveSolution { times, u, ut: Vec::new(), meta }, series))
}

/// Change of the final-time solution if `series` were extended by its first dropped iterate
/// `V_K`: `sum_l w_l U_{T - t_l} V_K(t_l)`, the difference between the K + 1 and K solves.
pub fn picard_increment(op: &HalfWaveOperator, series: &PicardSeries) -> Result<RealField> {
    let times = series.grid.times();
    let m = times.len();
    let dt = series.grid.dt;
    let last = series.iterates.last().ok_or_else(|| Error::Shape("empty Picard series".into()))?;
    let mut acc = RealField::zeros(op.grid());
    if m < 2 {
        return Ok(acc);
    }
    let end = times[m - 1];
    for (l, v) in last.iter().enumerate() {
        let w = if l == 0 || l == m - 1 { 0.5 * dt } else { dt };
        let g = if l == m - 1 { v.clone() } else { op.apply(v, end - times[l])? };
        acc.axpy(C64::new(w, 0.0), &g);
    }
    Ok(acc)
}

/// Second-order solver options.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecondOrderOptions {
    pub dt: f64,
    /// Time-difference step of the error operator.
    pub h: f64,
    /// Report the PDE residual every `residual_stride` grid times (0 disables).
    pub residual_stride: usize,
}

impl Default for SecondOrderOptions {
    fn default() -> Self {
        SecondOrderOptions { dt: 1.0 / 64.0, h: DEFAULT_H, residual_stride: 0 }
    }
}

/// Forcing term `F(t)`; `None` means `F = 0`.
pub type Forcing<'a> = Option<&'a dyn Fn(f64) -> RealField>;

/// Shifted propagators `e~_s = e^{-cs} e_s`, one step length per input.
fn shifted_steps(op: &HalfWaveOperator, jobs: &[(f64, &RealField)], h: f64) -> Result<Vec<RealField>> {
    Ok(op
        .half_wave_steps(jobs, h)?
        .into_iter()
        .zip(jobs)
        .map(|(mut r, &(s, _))| {
            r.scale((-op.shift * s).exp());
            r
        })
        .collect())
}

/// `e~(x, D) u = (b(x, D) + ic)^2 u - L u`, projected to the band.
pub fn e_tilde(op: &HalfWaveOperator, l: &EllipticOperator, u: &RealField) -> RealField {
    let a2 = op.apply_shifted(&op.apply_shifted(u));
    band_project(&op.fft, &a2.sub(&l.apply(u)))
}

/// `cs_t f` and `sn_t g` by composing shifted half-wave steps of size at most `dt`.
pub fn cs_sn(op: &HalfWaveOperator, f: &RealField, g: &RealField, t: f64, dt: f64, h: f64) -> Result<(RealField, RealField)> {
    let steps = ((t.abs() / dt.abs()).ceil() as usize).max(1);
    let s = t / steps as f64;
    let (pg, _) = op.apply_inverse(g)?;
    let mut plus = [band_project(&op.fft, f), pg.clone()];
    let mut minus = [plus[0].clone(), pg];
    for _ in 0..steps {
        let r = shifted_steps(op, &[(s, &plus[0]), (s, &plus[1]), (-s, &minus[0]), (-s, &minus[1])], h)?;
        let [p0, p1, m0, m1]: [RealField; 4] = r.try_into().expect("four outputs");
        plus = [p0, p1];
        minus = [m0, m1];
    }
    let mut cs = plus[0].add(&minus[0]);
    cs.scale(0.5);
    let mut sn = plus[1].sub(&minus[1]);
    sn.scale_c(C64::new(0.0, -0.5));
    Ok((cs, sn))
}

/// Solve `(D_t^2 - L) u = F`, `u(0) = u0`, `d_t u(0) = u1` with the cs/sn
/// representation and Duhamel forcing `v = e~(x, D) u - F`.
///
/// The two half-wave streams `Z_+-` of `u = Z_+ + Z_-` are stepped with the
/// shifted propagators `e~_{+-dt}` and trapezoid quadrature of the Duhamel integral;
/// the implicit end-point terms cancel in `u`, so each step is explicit. This sums
/// the Picard series for `v` to all orders on the time grid.
pub fn second_order_solve(
    op: &HalfWaveOperator,
    l: &EllipticOperator,
    u0: &RealField,
    u1: &RealField,
    forcing: Forcing<'_>,
    t_end: f64,
    opts: &SecondOrderOptions,
) -> Result<WaveSolution> {
    let grid = TimeGrid::new(t_end, if t_end < 0.0 { -opts.dt.abs() } else { opts.dt.abs() })?;
    if l.coeffs.grid != op.grid() {
        return Err(Error::Shape("elliptic operator and parametrix grids differ".into()));
    }
    let fft = &op.fft;
    let dt = grid.dt;
    let force = |t: f64| forcing.map(|f| band_project(fft, &f(t)));
    let v_at = |u: &RealField, t: f64| {
        let mut v = e_tilde(op, l, u);
        if let Some(fv) = force(t) {
            v = v.sub(&fv);
        }
        v
    };
    let c4 = C64::new(0.0, -dt / 4.0); // dt / (4i)

    let u0 = band_project(fft, u0);
    let (pu1, mut inv_res) = op.apply_inverse(u1)?;
    let mut zp = u0.clone();
    zp.scale(0.5);
    let mut zm = zp.clone();
    zp.axpy(C64::new(0.0, -0.5), &pu1); // + P u1 / (2i)
    zm.axpy(C64::new(0.0, 0.5), &pu1);

    let mut times = vec![0.0];
    let mut us = vec![u0.clone()];
    let mut uts = vec![time_derivative(op, &zp, &zm)];
    let mut v = v_at(&u0, 0.0);
    let (mut pv, r) = op.apply_inverse(&v)?;
    inv_res = inv_res.max(r);
    let mut residual_times = Vec::new();
    let mut residuals = Vec::new();

    for step in 0..grid.steps {
        let t = step as f64 * dt;
        let mut gp = zp.clone();
        gp.axpy(c4, &pv);
        let mut gm = zm.clone();
        gm.axpy(-c4, &pv);
        let [np, nm]: [RealField; 2] = shifted_steps(op, &[(dt, &gp), (-dt, &gm)], opts.h)?.try_into().expect("two outputs");
        let u = np.add(&nm);
        if !u.is_finite() {
            return Err(Error::Divergence(format!("solution left the finite range at t={}", t + dt)));
        }
        v = v_at(&u, t + dt);
        let (pv1, r) = op.apply_inverse(&v)?;
        inv_res = inv_res.max(r);
        pv = pv1;
        zp = np;
        zp.axpy(c4, &pv);
        zm = nm;
        zm.axpy(-c4, &pv);
        times.push(t + dt);
        uts.push(time_derivative(op, &zp, &zm));
        us.push(u);
        if opts.residual_stride > 0 && (step + 1) % opts.residual_stride == 0 && step + 1 < grid.steps {
            residual_times.push(t + dt);
            residuals.push(pde_residual(op, l, &zp, &zm, t + dt, forcing, opts.h)?);
        }
    }
    let meta = SolverMeta {
        solver: "parametrix-second-order".into(),
        k: 0,
        dt,
        residuals,
        residual_times,
        picard_norms: Vec::new(),
        shift: op.shift,
        inverse_residual: inv_res,
    };
    Ok(WaveSolution { times, u: us, ut: uts, meta })
}

/// `d_t u = i (b(x, D) + ic)(Z_+ - Z_-)`.
fn time_derivative(op: &HalfWaveOperator, zp: &RealField, zm: &RealField) -> RealField {
    let mut d = op.apply_shifted(&zp.sub(zm));
    d.scale_c(I);
    d
}

/// `|(D_t^2 - L) u - F| / |u|` at time `t` from a centered second difference with
/// step `delta`, propagating the streams by `+-delta` (no forcing inside the sub-step).
fn pde_residual(
    op: &HalfWaveOperator,
    l: &EllipticOperator,
    zp: &RealField,
    zm: &RealField,
    t: f64,
    forcing: Forcing<'_>,
    h: f64,
) -> Result<f64> {
    let delta = 4.0 * h;
    let [fwd, bwd, fwd_m, bwd_m]: [RealField; 4] =
        shifted_steps(op, &[(delta, zp), (-delta, zp), (-delta, zm), (delta, zm)], h)?.try_into().expect("four outputs");
    let u = zp.add(zm);
    let up = fwd.add(&fwd_m);
    let um = bwd.add(&bwd_m);
    // D_t^2 = -d_t^2
    let mut res = up.add(&um).sub(&{
        let mut x = u.clone();
        x.scale(2.0);
        x
    });
    res.scale(-1.0 / (delta * delta));
    let mut res = res.sub(&band_project(&op.fft, &l.apply(&u)));
    if let Some(f) = forcing {
        res = res.sub(&band_project(&op.fft, &f(t)));
    }
    let nu = u.norm();
    Ok(if nu == 0.0 { 0.0 } else { res.norm() / nu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packets::DictionaryParams;
    use crate::reference::{exact_cos, exact_halfwave};
    use crate::symbols::{build_operator, chi, CoefficientMatrix, OperatorForm, RoughParams, CHI_CUTOFF};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn operator(size: usize, amp: f64) -> (HalfWaveOperator, EllipticOperator) {
        let grid = Grid::new(2, size).unwrap();
        let fft = Fft::new(grid);
        let coeffs = Arc::new(if amp == 0.0 {
            CoefficientMatrix::flat(grid)
        } else {
            CoefficientMatrix::generate(grid, &RoughParams::new(2.0, amp, 42)).unwrap()
        });
        let dict = Arc::new(PacketDictionary::build(&DictionaryParams::new(2, size)).unwrap());
        let b = Arc::new(HalfWaveSymbol::new(&coeffs, &fft, CHI_CUTOFF).unwrap());
        let op = HalfWaveOperator::new(dict, b, 0.0625, ParametrixOptions::default()).unwrap();
        (op, build_operator(coeffs, OperatorForm::Divergence))
    }

    fn field(op: &HalfWaveOperator, lo: f64, seed: u64) -> RealField {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        RealField::random_band(&op.fft, lo, op.grid().band_edge(), &mut rng)
    }

    #[test]
    fn picard_increment_is_the_next_truncation() {
        let (op, _) = operator(32, 0.2);
        let f = field(&op, 0.0, 4);
        // short horizon: |E| is large on a 32^2 band, so the series only contracts for small t
        let tg = TimeGrid::new(0.125, 0.0625).unwrap();
        let (s2, series) = first_order_solve(&op, &f, &tg, 2, DEFAULT_H).unwrap();
        let (s3, _) = first_order_solve(&op, &f, &tg, 3, DEFAULT_H).unwrap();
        let diff = s3.u[2].sub(&s2.u[2]);
        let inc = picard_increment(&op, &series).unwrap();
        assert!(inc.rel_err(&diff) < 1e-10, "{}", inc.rel_err(&diff));
    }

    #[test]
    fn identity_at_zero_and_linearity() {
        let (op, _) = operator(64, 0.2);
        let f = field(&op, 0.0, 1);
        let g = field(&op, 0.0, 2);
        assert!(op.apply(&f, 0.0).unwrap().rel_err(&f) < 1e-10);
        let alpha = C64::new(0.3, -1.2);
        let mut h = g.clone();
        h.axpy(alpha, &f);
        let out = op.apply_many(0.25, &[&h, &f, &g]).unwrap();
        let mut want = out[2].clone();
        want.axpy(alpha, &out[1]);
        assert!(out[0].rel_err(&want) < 1e-10);
        assert!(op.last_stats().warped > 0);
        assert_eq!(op.error_term(&RealField::zeros(op.grid()), 0.25, DEFAULT_H).unwrap().norm(), 0.0);
        assert!(matches!(op.error_term(&f, 0.25, 1e-8), Err(Error::Config(_))));
    }

    #[test]
    fn flat_parametrix_and_solvers_match_multipliers() {
        let (op, l) = operator(128, 0.0);
        let fft = &op.fft;
        let f = field(&op, 32.0, 3);
        let t = 0.5;
        let u = op.apply(&f, t).unwrap();
        assert!(u.rel_err(&exact_halfwave(fft, &f, t)) <= 5e-2);
        assert_eq!(op.last_stats().warped, 0);

        // first-order series against e^{it b(D)}, b = chi(|zeta|)|zeta|
        let grid = TimeGrid::new(t, 1.0 / 16.0).unwrap();
        let (sol, series) = first_order_solve(&op, &f, &grid, 2, DEFAULT_H).unwrap();
        let want = f.multiplier(fft, |z| {
            let r = vec3::norm(z);
            C64::from_polar(1.0, t * r * chi(r, CHI_CUTOFF).0)
        });
        assert!(sol.u[0].rel_err(&f) < 1e-12);
        assert!(sol.at(t).unwrap().rel_err(&want) <= 5e-2);
        assert_eq!(series.iterates.len(), series.k + 1);

        // cs/sn at zero and their time derivatives
        let g = field(&op, 32.0, 4);
        let (c0, s0) = cs_sn(&op, &f, &g, 0.0, 1.0 / 64.0, DEFAULT_H).unwrap();
        assert!(c0.rel_err(&f) < 1e-12);
        assert!(s0.norm() < 1e-12);
        let d = 1e-3;
        let (cp, sp) = cs_sn(&op, &f, &g, d, d, DEFAULT_H).unwrap();
        let (cm, sm) = cs_sn(&op, &f, &g, -d, d, DEFAULT_H).unwrap();
        assert!(cp.sub(&cm).norm() / (2.0 * d) <= 1e-3 * f.norm());
        let mut ds = sp.sub(&sm);
        ds.scale(0.5 / d);
        assert!(ds.rel_err(&g) <= 1e-2, "{}", ds.rel_err(&g));
        let (ct, _) = cs_sn(&op, &f, &g, t, 1.0 / 16.0, DEFAULT_H).unwrap();
        assert!(ct.rel_err(&exact_cos(fft, &f, t)) <= 5e-2);

        // second order: initial data, cosine solution
        let zero = RealField::zeros(op.grid());
        let sol = second_order_solve(&op, &l, &f, &g, None, t, &SecondOrderOptions::default()).unwrap();
        assert!(sol.u[0].rel_err(&f) < 1e-2);
        assert!(sol.ut[0].rel_err(&g) < 1e-2);
        let cos = second_order_solve(&op, &l, &f, &zero, None, t, &SecondOrderOptions::default()).unwrap();
        assert!(cos.at(t).unwrap().rel_err(&exact_cos(fft, &f, t)) <= 5e-2);
    }

    #[test]
    fn second_order_superposition_and_time_reversal() {
        let (op, l) = operator(64, 0.0);
        let f = field(&op, 16.0, 5);
        let g = field(&op, 16.0, 6);
        let opts = SecondOrderOptions { dt: 1.0 / 32.0, ..SecondOrderOptions::default() };
        let t = 0.25;
        let a = second_order_solve(&op, &l, &f, &g, None, t, &opts).unwrap();
        let zero = RealField::zeros(op.grid());
        let b = second_order_solve(&op, &l, &f, &zero, None, t, &opts).unwrap();
        let c = second_order_solve(&op, &l, &zero, &g, None, t, &opts).unwrap();
        let sum = b.at(t).unwrap().add(c.at(t).unwrap());
        assert!(a.at(t).unwrap().rel_err(&sum) < 1e-9);

        let mut neg = g.clone();
        neg.scale(-1.0);
        let back = second_order_solve(&op, &l, &f, &neg, None, -t, &opts).unwrap();
        assert!(back.at(-t).unwrap().rel_err(a.at(t).unwrap()) < 1e-2);
    }
}
