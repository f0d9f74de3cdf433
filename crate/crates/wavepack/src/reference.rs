//! Brute-force oracles: exact multipliers for the flat Laplacian and a
//! pseudospectral time stepper for `d_t^2 u = -L u - F`.
//!
//! With `D = -i d` the operator `L` is positive, so `(D_t^2 - L) u = F` reads
//! `d_t^2 u = -L u - F` in real time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Fft, RealField, C64};
use crate::parametrix::{Forcing, SolverMeta, WaveSolution};
use crate::symbols::{band_project, EllipticOperator};
use crate::vec3;

/// `e^{it|D|} f`.
pub fn exact_halfwave(fft: &Fft, f: &RealField, t: f64) -> RealField {
    if t == 0.0 {
        return f.clone();
    }
    f.multiplier(fft, |z| C64::from_polar(1.0, t * vec3::norm(z)))
}

/// `cos(t|D|) f`.
pub fn exact_cos(fft: &Fft, f: &RealField, t: f64) -> RealField {
    if t == 0.0 {
        return f.clone();
    }
    f.multiplier(fft, |z| C64::new((t * vec3::norm(z)).cos(), 0.0))
}

/// `sin(t|D|)/|D| g`, equal to `t g` on the zero mode.
pub fn exact_sin(fft: &Fft, g: &RealField, t: f64) -> RealField {
    g.multiplier(fft, |z| {
        let r = vec3::norm(z);
        C64::new(if r == 0.0 { t } else { (t * r).sin() / r }, 0.0)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Leapfrog,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub dt: f64,
    pub scheme: Scheme,
    /// Project `L u` (and the forcing) onto the resolved band after every application.
    pub dealias: bool,
    /// Keep every `record_every`-th step; 0 keeps the end points only.
    #[serde(default)]
    pub record_every: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { dt: 1e-3, scheme: Scheme::Leapfrog, dealias: true, record_every: 0 }
    }
}

/// Largest relative energy drift tolerated before the run is declared unstable.
pub const ENERGY_DRIFT_LIMIT: f64 = 1e-2;

/// `0.5 / (band_limit sqrt(max eigenvalue of a))`.
pub fn cfl_bound(l: &EllipticOperator, band_limit: f64) -> f64 {
    0.5 / (band_limit * l.coeffs.max_eigenvalue().sqrt())
}

/// Reference solution with its energy trace.
#[derive(Clone, Debug)]
pub struct ReferenceRun {
    pub solution: WaveSolution,
    /// `(t, E(t))` at every recorded time.
    pub energy: Vec<(f64, f64)>,
    pub max_energy_drift: f64,
}

struct Stepper<'a> {
    l: &'a EllipticOperator,
    fft: &'a Fft,
    dealias: bool,
    forcing: Forcing<'a>,
}

impl Stepper<'_> {
    fn project(&self, f: RealField) -> RealField {
        if self.dealias {
            band_project(self.fft, &f)
        } else {
            f
        }
    }

    fn l(&self, u: &RealField) -> RealField {
        self.project(self.l.apply(u))
    }

    /// `-L u - F(t)`.
    fn accel(&self, u: &RealField, t: f64) -> RealField {
        let mut a = self.l(u);
        if let Some(f) = self.forcing {
            a = a.add(&self.project(f(t)));
        }
        a.scale(-1.0);
        a
    }

    fn energy(&self, u: &RealField, ut: &RealField) -> f64 {
        ut.norm().powi(2) + self.l(u).inner(u).re
    }
}

/// Time-step `d_t^2 u = -L u - F` from `(u0, u1)` to `t_end` (which may be negative).
pub fn timestep_solve(
    l: &EllipticOperator,
    u0: &RealField,
    u1: &RealField,
    forcing: Forcing<'_>,
    t_end: f64,
    cfg: &ReferenceConfig,
) -> Result<ReferenceRun> {
    let grid = l.coeffs.grid;
    if u0.grid != grid || u1.grid != grid {
        return Err(Error::Shape("initial data and coefficients live on different grids".into()));
    }
    let fft = l.fft();
    let band = if cfg.dealias { grid.band_edge() } else { grid.size as f64 / 2.0 * (grid.n as f64).sqrt() };
    let cfl = cfl_bound(l, band);
    if !(cfg.dt > 0.0) || cfg.dt > cfl {
        return Err(Error::Config(format!("time step {} violates the CFL bound {cfl:.3e}", cfg.dt)));
    }
    let steps = (t_end.abs() / cfg.dt).ceil() as usize;
    let dt = if steps == 0 { 0.0 } else { t_end / steps as f64 };
    let st = Stepper { l, fft, dealias: cfg.dealias, forcing };
    let mut u = st.project(u0.clone());
    let mut ut = st.project(u1.clone());
    let e0 = st.energy(&u, &ut);
    let scale = e0.abs().max(f64::MIN_POSITIVE);

    let mut sol = WaveSolution { times: vec![0.0], u: vec![u.clone()], ut: vec![ut.clone()], meta: SolverMeta::default() };
    let mut energy = vec![(0.0, e0)];
    let mut drift = 0.0f64;
    let keep = |i: usize| i == steps || (cfg.record_every > 0 && i % cfg.record_every == 0);

    match cfg.scheme {
        Scheme::Leapfrog => {
            // Taylor start, then u^{k+1} = 2u^k - u^{k-1} + dt^2 a(u^k); velocity by centered differences
            let mut prev = u.clone();
            let mut a = st.accel(&u, 0.0);
            let mut cur = u.clone();
            cur.axpy(C64::new(dt, 0.0), &ut);
            cur.axpy(C64::new(0.5 * dt * dt, 0.0), &a);
            // staggered energy |(u^{k+1} - u^k)/dt|^2 + <L u^{k+1}, u^k> is conserved exactly
            let stag = |p: &RealField, c: &RealField| {
                let mut v = c.sub(p);
                v.scale(1.0 / dt);
                v.norm().powi(2) + st.l(c).inner(p).re
            };
            let es0 = if steps > 0 { stag(&prev, &cur) } else { e0 };
            for i in 1..=steps {
                let t = i as f64 * dt;
                a = st.accel(&cur, t);
                let mut next = cur.clone();
                next.scale(2.0);
                next = next.sub(&prev);
                next.axpy(C64::new(dt * dt, 0.0), &a);
                if !next.is_finite() {
                    return Err(Error::Instability(format!("reference solution blew up at t={t}")));
                }
                if forcing.is_none() {
                    drift = drift.max((stag(&cur, &next) - es0).abs() / es0.abs().max(f64::MIN_POSITIVE));
                }
                if keep(i) {
                    let mut v = next.sub(&prev);
                    v.scale(0.5 / dt);
                    energy.push((t, st.energy(&cur, &v)));
                    sol.times.push(t);
                    sol.u.push(cur.clone());
                    sol.ut.push(v);
                }
                prev = cur;
                cur = next;
            }
        }
        Scheme::Rk4 => {
            for i in 1..=steps {
                let t = (i - 1) as f64 * dt;
                let k1 = (ut.clone(), st.accel(&u, t));
                let stage = |k: &(RealField, RealField), s: f64| {
                    let mut a = u.clone();
                    a.axpy(C64::new(s * dt, 0.0), &k.0);
                    let mut b = ut.clone();
                    b.axpy(C64::new(s * dt, 0.0), &k.1);
                    (a, b)
                };
                let (a2, b2) = stage(&k1, 0.5);
                let k2 = (b2, st.accel(&a2, t + 0.5 * dt));
                let (a3, b3) = stage(&k2, 0.5);
                let k3 = (b3, st.accel(&a3, t + 0.5 * dt));
                let (a4, b4) = stage(&k3, 1.0);
                let k4 = (b4, st.accel(&a4, t + dt));
                for (w, k) in [(1.0, &k1), (2.0, &k2), (2.0, &k3), (1.0, &k4)] {
                    u.axpy(C64::new(w * dt / 6.0, 0.0), &k.0);
                    ut.axpy(C64::new(w * dt / 6.0, 0.0), &k.1);
                }
                if !u.is_finite() {
                    return Err(Error::Instability(format!("reference solution blew up at t={}", t + dt)));
                }
                if forcing.is_none() {
                    drift = drift.max((st.energy(&u, &ut) - e0).abs() / scale);
                }
                if keep(i) {
                    energy.push((t + dt, st.energy(&u, &ut)));
                    sol.times.push(t + dt);
                    sol.u.push(u.clone());
                    sol.ut.push(ut.clone());
                }
            }
        }
    }
    if drift > ENERGY_DRIFT_LIMIT {
        return Err(Error::Instability(format!("energy drifted by {:.2}%", 100.0 * drift)));
    }
    sol.meta = SolverMeta {
        solver: match cfg.scheme {
            Scheme::Leapfrog => "reference-leapfrog".into(),
            Scheme::Rk4 => "reference-rk4".into(),
        },
        dt,
        ..SolverMeta::default()
    };
    Ok(ReferenceRun { solution: sol, energy, max_energy_drift: drift })
}

/// Relative L2 error of `a` against `b` at every time both solutions share.
pub fn compare(a: &WaveSolution, b: &WaveSolution) -> Vec<(f64, f64)> {
    a.times
        .iter()
        .zip(&a.u)
        .filter_map(|(&t, u)| b.at(t).map(|v| (t, u.rel_err(v))))
        .collect()
}
