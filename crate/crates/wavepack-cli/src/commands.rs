//! The five subcommands. Each one writes into `--out` and returns a library error on failure.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use wavepack::error::{Error, Result};
use wavepack::flow::{flow_series, gronwall_diag, random_sources, FlowMap, FlowOptions, RayLimit, Sampling};
use wavepack::grid::{Fft, Grid, RealField};
use wavepack::io::{read_coefficients, read_field, read_phase_field, read_solution, write_field, write_phase_field, write_solution};
use wavepack::packets::{FrameMode, PacketDictionary};
use wavepack::parametrix::{
    first_order_solve, second_order_solve, HalfWaveOperator, ParametrixOptions, SecondOrderOptions, TimeGrid, WaveSolution,
};
use wavepack::reference::{compare, exact_cos, exact_halfwave, exact_sin, timestep_solve, ReferenceConfig};
use wavepack::symbols::{
    build_operator, flat_decay_slope, shift_for_invertibility, CoefficientMatrix, HalfWaveSymbol, RoughParams, RoughSymbol,
    CHI_CUTOFF,
};
use wavepack::tent::{BallVolumeTable, TentEvaluator, TentParams};
use wavepack::transform::{analyze, sample_probe_pairs, synthesize, ww_star_kernel_probe};

use crate::config::{CoefficientSpec, Diagnostic, ExperimentConfig, FieldSpec, NormSpec, Order, SolverConfig};

/// Round-trip and isometry tolerance for renormalized dictionaries.
pub const FRAME_TOL: f64 = 1e-10;

/// RNG streams, so that each generated object is independent of the others.
const STREAM_U0: u64 = 1;
const STREAM_U1: u64 = 2;
const STREAM_FLOW: u64 = 3;
const STREAM_KERNEL: u64 = 4;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub out: PathBuf,
    pub grid: Grid,
    pub fft: Fft,
}

impl Context {
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        let grid = Grid::new(cfg.n, cfg.grid_size)?;
        fs::create_dir_all(&out)?;
        Ok(Context { hash: cfg.hash(), cfg, out, grid, fft: Fft::new(grid) })
    }

    fn rng(&self, stream: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(stream);
        rng
    }

    fn dictionary(&self) -> Result<PacketDictionary> {
        PacketDictionary::build(&self.cfg.dictionary_params())
    }

    fn coefficients(&self) -> Result<CoefficientMatrix> {
        let c = match &self.cfg.coefficients {
            CoefficientSpec::Flat => CoefficientMatrix::flat(self.grid),
            CoefficientSpec::Generated { r, amplitude, seed } => {
                CoefficientMatrix::generate(self.grid, &RoughParams::new(*r, *amplitude, seed.unwrap_or(self.cfg.seed)))?
            }
            CoefficientSpec::File { path } => read_coefficients(path)?,
        };
        self.same_grid(c.grid, "coefficient file")?;
        Ok(c)
    }

    fn field(&self, spec: &FieldSpec, stream: u64) -> Result<RealField> {
        let f = match spec {
            FieldSpec::Zero => RealField::zeros(self.grid),
            FieldSpec::Band { lo, hi, scale } => {
                let hi = hi.unwrap_or(self.grid.band_edge());
                let mut f = RealField::random_band(&self.fft, *lo, hi, &mut self.rng(stream));
                f.scale(scale.unwrap_or(1.0));
                f
            }
            FieldSpec::File { path } => read_field(path)?,
        };
        self.same_grid(f.grid, "field file")?;
        Ok(f)
    }

    fn same_grid(&self, g: Grid, what: &str) -> Result<()> {
        if g != self.grid {
            return Err(Error::Config(format!(
                "{what} is on a {}-dimensional grid of size {}, config asks for {} / {}",
                g.n, g.size, self.grid.n, self.grid.size
            )));
        }
        Ok(())
    }

    fn write_csv(&self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        write_csv(&self.out.join(name), &self.hash, header, rows)
    }

    fn write_run(&self, command: &str, extra: serde_json::Value) -> Result<()> {
        let mut v = json!({
            "command": command,
            "config_hash": self.hash,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "config": self.cfg,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (v.as_object_mut(), extra) {
            m.extend(e);
        }
        write_pretty(&self.out.join("run.json"), &v)
    }
}

/// First line of every CSV: tool version and config hash.
pub fn provenance(hash: &str) -> String {
    format!("# wavepack {} config {}", env!("CARGO_PKG_VERSION"), hash)
}

fn write_csv(path: &Path, hash: &str, header: &str, rows: &[String]) -> Result<()> {
    let mut s = provenance(hash);
    s.push('\n');
    s.push_str(header);
    s.push('\n');
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn write_pretty(path: &Path, v: &serde_json::Value) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, s + "\n")?;
    Ok(())
}

fn fmt_p(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

// ---------------------------------------------------------------------------------------

/// `W f` to `out/phase`, plus `isometry.csv`. Fails with a tolerance error when a
/// renormalized dictionary misses [`FRAME_TOL`] (the files are still written).
pub fn transform(ctx: &Context, input: Option<&Path>, roundtrip: bool) -> Result<()> {
    let dict = ctx.dictionary()?;
    let f = match input {
        Some(p) => {
            let f = read_field(p)?;
            ctx.same_grid(f.grid, "input field")?;
            f
        }
        None => ctx.field(&ctx.cfg.data.u0, STREAM_U0)?,
    };
    let phase = analyze(&f, &dict, &ctx.fft)?;
    write_phase_field(&ctx.out.join("phase"), &phase)?;
    let fn2 = f.norm().powi(2);
    let pn2 = phase.weighted_norm(&dict).powi(2);
    let defect = if fn2 > 0.0 { (pn2 / fn2 - 1.0).abs() } else { 0.0 };
    let rt = if roundtrip {
        let back = synthesize(&phase, &dict, &ctx.fft)?;
        write_field(&ctx.out.join("roundtrip"), &back)?;
        Some(if fn2 > 0.0 { back.rel_err(&f) } else { back.norm() })
    } else {
        None
    };
    let row = format!(
        "{:.12e},{:.12e},{:.6e},{},{:.6e}",
        fn2.sqrt(),
        pn2.sqrt(),
        defect,
        rt.map(|e| format!("{e:.6e}")).unwrap_or_default(),
        dict.eps_frame
    );
    ctx.write_csv("isometry.csv", "field_norm,phase_norm,isometry_defect,roundtrip_error,eps_frame", &[row])?;
    ctx.write_run("transform", json!({ "packets": dict.packets.len(), "eps_frame": dict.eps_frame }))?;
    if dict.params.mode == FrameMode::Renormalized {
        let worst = defect.max(rt.unwrap_or(0.0));
        if worst > FRAME_TOL {
            return Err(Error::Tolerance(format!("frame defect {worst:.3e} above {FRAME_TOL:.0e}")));
        }
    }
    Ok(())
}

/// Distinct `(p, s, alpha)` triples in order of first appearance.
pub fn dedup_norms(specs: &[NormSpec]) -> Vec<NormSpec> {
    let mut seen = HashSet::new();
    specs
        .iter()
        .filter(|n| seen.insert((n.p.to_bits(), n.s.to_bits(), n.alpha.to_bits())))
        .copied()
        .collect()
}

/// Tent norms of a stored phase field, one CSV row per requested `(p, s, alpha)`.
pub fn norm(ctx: &Context, input: &Path) -> Result<()> {
    let dict = ctx.dictionary()?;
    let field = read_phase_field(input)?;
    field.check(&dict)?;
    let specs = dedup_norms(&ctx.cfg.norms);
    let rows = if specs.is_empty() {
        Vec::new()
    } else {
        let table = BallVolumeTable::standard(ctx.cfg.n);
        let alpha_min = specs.iter().map(|n| n.alpha).fold(f64::INFINITY, f64::min);
        let ev = TentEvaluator::new(&dict, &table, alpha_min, &TentParams::default());
        specs.iter().map(|n| ev.tent_norm(&field, n.p, n.s, n.alpha).csv_row()).collect()
    };
    ctx.write_csv("norms.csv", wavepack::tent::TentNormReport::CSV_HEADER, &rows)?;
    ctx.write_run("norm", json!({ "rows": rows.len() }))
}

// ---------------------------------------------------------------------------------------

/// Times reported by `solve`: zero followed by the configured times.
fn output_times(cfg: &ExperimentConfig) -> Vec<f64> {
    let mut t = vec![0.0];
    t.extend(cfg.times.iter().copied().filter(|&s| s != 0.0));
    t
}

/// Index of each time on a uniform grid with step `dt`.
fn grid_steps(times: &[f64], dt: f64) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&t| {
            let k = (t / dt).round();
            if k < 0.0 || (k * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
                Err(Error::Config(format!("time {t} is not a multiple of the solver step {dt}")))
            } else {
                Ok(k as usize)
            }
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn select(sol: &WaveSolution, times: &[f64]) -> Result<WaveSolution> {
    let mut out = WaveSolution { times: Vec::new(), u: Vec::new(), ut: Vec::new(), meta: sol.meta.clone() };
    for &t in times {
        let i = sol
            .times
            .iter()
            .position(|&s| (s - t).abs() < 1e-9)
            .ok_or_else(|| Error::Config(format!("time {t} is not on the solver's time grid")))?;
        out.times.push(t);
        out.u.push(sol.u[i].clone());
        if !sol.ut.is_empty() {
            out.ut.push(sol.ut[i].clone());
        }
    }
    Ok(out)
}

/// Run the configured solver; writes `solution/`, `residuals.csv`, solver-specific
/// reports and, for flat coefficients, `exact.csv`.
pub fn solve(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let coeffs = Arc::new(ctx.coefficients()?);
    let l = build_operator(coeffs.clone(), cfg.form);
    let u0 = ctx.field(&cfg.data.u0, STREAM_U0)?;
    let u1 = ctx.field(&cfg.data.u1, STREAM_U1)?;
    let times = output_times(cfg);
    let t_end = *times.last().expect("non-empty");
    let sign = if t_end < 0.0 { -1.0 } else { 1.0 };
    let mut extra = json!({});
    let (sol, first_order) = match &cfg.solver {
        SolverConfig::Parametrix { order, k, dt, h, shift, residual_stride } => {
            let symbol = Arc::new(HalfWaveSymbol::new(&coeffs, &ctx.fft, CHI_CUTOFF)?);
            let c = match shift {
                Some(c) => *c,
                None => shift_for_invertibility(&symbol, &ctx.fft, 3, cfg.seed)?.c,
            };
            let dict = Arc::new(ctx.dictionary()?);
            let cache = (t_end.abs() / dt.abs()).ceil() as usize + 2;
            let opts = ParametrixOptions { cache: cache.max(ParametrixOptions::default().cache), ..Default::default() };
            let op = HalfWaveOperator::new(dict, symbol, c, opts)?;
            extra = json!({ "shift": c });
            match order {
                Order::Second => {
                    let so = SecondOrderOptions { dt: dt.abs(), h: *h, residual_stride: *residual_stride };
                    (second_order_solve(&op, &l, &u0, &u1, None, t_end, &so)?, false)
                }
                Order::First => {
                    if cfg.data.u1 != FieldSpec::Zero {
                        return Err(Error::Config("the first-order solver takes u0 only; set u1 to zero".into()));
                    }
                    let grid = TimeGrid::new(t_end, sign * dt.abs())?;
                    let (sol, series) = first_order_solve(&op, &u0, &grid, *k, *h)?;
                    let ratios = series.ratios();
                    let rows: Vec<String> = series
                        .norms
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let r = if i == 0 { String::new() } else { format!("{:.6e}", ratios[i - 1]) };
                            format!("{i},{v:.6e},{r}")
                        })
                        .collect();
                    ctx.write_csv("picard.csv", "k,max_norm,ratio", &rows)?;
                    (sol, true)
                }
            }
        }
        SolverConfig::Reference { scheme, dt, dealias } => {
            let steps = grid_steps(&times.iter().map(|t| t.abs()).collect::<Vec<_>>(), dt.abs())?;
            let every = steps.iter().fold(0, |g, &s| gcd(g, s)).max(1);
            let rc = ReferenceConfig { dt: sign * dt.abs(), scheme: *scheme, dealias: *dealias, record_every: every };
            let run = timestep_solve(&l, &u0, &u1, None, t_end, &rc)?;
            let rows: Vec<String> = run.energy.iter().map(|(t, e)| format!("{t},{e:.12e}")).collect();
            ctx.write_csv("energy.csv", "t,energy", &rows)?;
            extra = json!({ "max_energy_drift": run.max_energy_drift });
            (run.solution, false)
        }
    };
    let out = select(&sol, &times)?;
    write_solution(&ctx.out.join("solution"), &out, &ctx.hash)?;
    let rows: Vec<String> =
        sol.meta.residual_times.iter().zip(&sol.meta.residuals).map(|(t, r)| format!("{t},{r:.6e}")).collect();
    ctx.write_csv("residuals.csv", "t,residual", &rows)?;
    if coeffs.is_flat() {
        let rows: Vec<String> = out
            .times
            .iter()
            .zip(&out.u)
            .map(|(&t, u)| {
                let exact = if first_order {
                    exact_halfwave(&ctx.fft, &u0, t)
                } else {
                    exact_cos(&ctx.fft, &u0, t).add(&exact_sin(&ctx.fft, &u1, t))
                };
                format!("{t},{:.6e}", u.rel_err(&exact))
            })
            .collect();
        ctx.write_csv("exact.csv", "t,rel_err", &rows)?;
    }
    if let serde_json::Value::Object(m) = &mut extra {
        m.insert("solver".into(), json!(sol.meta.solver));
        m.insert("times".into(), json!(out.times));
    }
    ctx.write_run("solve", extra)
}

/// Relative L2 difference of two stored solutions at their shared times.
pub fn compare_dirs(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let (sa, ma) = read_solution(a)?;
    let (sb, mb) = read_solution(b)?;
    if let (Some(x), Some(y)) = (sa.u.first(), sb.u.first()) {
        if x.grid != y.grid {
            return Err(Error::Shape("solutions live on different grids".into()));
        }
    }
    let rows: Vec<String> = compare(&sa, &sb).into_iter().map(|(t, e)| format!("{t},{e:.6e}")).collect();
    if rows.is_empty() {
        return Err(Error::Config("the two solutions share no output time".into()));
    }
    fs::create_dir_all(out)?;
    write_csv(&out.join("compare.csv"), &format!("{}:{}", ma.config_hash, mb.config_hash), "t,rel_err", &rows)
}

// ---------------------------------------------------------------------------------------

/// Flow, kernel, volume, aperture and symbol diagnostics; an empty list does nothing.
pub fn diagnose(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let dc = &cfg.diagnose;
    if dc.list.is_empty() {
        return Ok(());
    }
    let mut summary = serde_json::Map::new();
    let mut flows: Option<(Vec<FlowMap>, Vec<FlowMap>)> = None;
    let mut flow_pair = |ctx: &Context| -> Result<(Vec<FlowMap>, Vec<FlowMap>)> {
        if let Some(f) = &flows {
            return Ok(f.clone());
        }
        let coeffs = ctx.coefficients()?;
        let symbol = HalfWaveSymbol::new(&coeffs, &ctx.fft, CHI_CUTOFF)?;
        let sources = random_sources(cfg.n, &dc.radii, dc.sources, &mut ctx.rng(STREAM_FLOW));
        let opts = FlowOptions {
            steps_per_unit: dc.steps_per_unit,
            halving_check: Sampling::Every(10),
            jacobian: Sampling::Every(10),
        };
        let f = flow_series(&symbol, &sources, &dc.times, &opts)?;
        let h = flow_series(&RayLimit(&symbol), &sources, &dc.times, &opts)?;
        flows = Some((f.clone(), h.clone()));
        Ok((f, h))
    };
    for d in &dc.list {
        match d {
            Diagnostic::Gronwall => {
                let (f, h) = flow_pair(ctx)?;
                let rep = gronwall_diag(&f, &h, cfg.n)?;
                let rows: Vec<String> = rep.csv().lines().skip(1).map(str::to_string).collect();
                ctx.write_csv("gronwall.csv", wavepack::flow::GronwallReport::CSV_HEADER, &rows)?;
                let per_sigma: Vec<_> =
                    dc.radii.iter().map(|r| json!({ "sigma0": 1.0 / r, "max": rep.max_for_sigma(1.0 / r) })).collect();
                summary.insert("gronwall".into(), json!({ "max": rep.max, "per_sigma0": per_sigma }));
            }
            Diagnostic::Flow => {
                let (f, _) = flow_pair(ctx)?;
                let rows: Vec<String> = f
                    .iter()
                    .map(|m| {
                        format!(
                            "{},{},{:.6e},{:.6e},{:.6e},{:.6e}",
                            m.t,
                            m.steps,
                            m.max_ham_drift(),
                            m.max_jac_defect(),
                            m.sigma_exponent(),
                            m.rate
                        )
                    })
                    .collect();
                ctx.write_csv("flow.csv", "t,steps,max_ham_drift,max_jac_defect,sigma_exponent,rate", &rows)?;
            }
            Diagnostic::Kernel => {
                let dict = ctx.dictionary()?;
                let hi = (ctx.grid.band_edge() / 1.5).min(16.0);
                let pairs = sample_probe_pairs(cfg.n, dc.pairs, 4.0, hi, &mut ctx.rng(STREAM_KERNEL));
                let rep = ww_star_kernel_probe(&dict, &pairs, 2.0);
                let rows: Vec<String> = pairs
                    .iter()
                    .enumerate()
                    .map(|(i, (a, b))| {
                        format!(
                            "{i},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
                            wavepack::vec3::norm(&a.xi),
                            wavepack::vec3::norm(&b.xi),
                            rep.kernels[i],
                            rep.envelopes[i],
                            rep.ratios[i]
                        )
                    })
                    .collect();
                ctx.write_csv("kernel.csv", "pair,xi_norm,eta_norm,kernel,envelope,ratio", &rows)?;
                summary.insert("kernel_max_ratio".into(), json!(rep.max_ratio));
            }
            Diagnostic::Volume => {
                let t = BallVolumeTable::build(cfg.n, -6, 8, 4, dc.samples, cfg.seed);
                let rows: Vec<String> = (0..t.radii.len())
                    .map(|i| format!("{:.6e},{:.6e},{:.6e}", t.radii[i], t.volumes[i], t.std_errors[i]))
                    .collect();
                ctx.write_csv("volume.csv", "tau,volume,std_error", &rows)?;
                let n = cfg.n as f64;
                let windows = [(2f64.powi(-6), 0.5, 2.0 * n), (8.0, 256.0, n)];
                let rows: Vec<String> =
                    windows.iter().map(|&(lo, hi, e)| format!("{lo},{hi},{:.4},{e}", t.slope(lo, hi))).collect();
                ctx.write_csv("volume_slopes.csv", "tau_lo,tau_hi,slope,expected", &rows)?;
            }
            Diagnostic::Aperture => {
                let dict = ctx.dictionary()?;
                let f = ctx.field(&cfg.data.u0, STREAM_U0)?;
                let phase = analyze(&f, &dict, &ctx.fft)?;
                let table = BallVolumeTable::standard(cfg.n);
                let ev = TentEvaluator::new(&dict, &table, 0.5, &TentParams::default());
                let mut specs: Vec<NormSpec> = dedup_norms(&cfg.norms).into_iter().filter(|n| n.p.is_finite()).collect();
                if specs.is_empty() {
                    specs.push(NormSpec { p: 2.0, s: 0.0, alpha: 1.0 });
                }
                let mut seen = HashSet::new();
                let mut rows = Vec::new();
                for n in specs.iter().filter(|n| seen.insert((n.p.to_bits(), n.s.to_bits()))) {
                    let r = ev.aperture_check(&phase, n.p, n.s);
                    let mut row = format!("{},{}", fmt_p(n.p), n.s);
                    for v in &r.norms {
                        let _ = write!(row, ",{v:.9e}");
                    }
                    let _ = write!(row, ",{:.6}", r.max_ratio);
                    rows.push(row);
                }
                ctx.write_csv("aperture.csv", "p,s,norm_alpha_0.5,norm_alpha_1,norm_alpha_2,max_ratio", &rows)?;
            }
            Diagnostic::Symbol => {
                // a_11 as an order-0 multiplier, and the order-2 principal symbol
                let coeffs = ctx.coefficients()?;
                let r = coeffs.meta.r.unwrap_or(2.0);
                let hi = 42f64.min(ctx.grid.band_edge());
                let entry = RoughSymbol::multiplier(ctx.grid, coeffs.get(0, 0).to_vec(), r).smooth_split(&ctx.fft);
                let (slope, samples) = flat_decay_slope(&entry, 8.0, hi);
                let (pslope, psamples) = flat_decay_slope(&RoughSymbol::principal(&coeffs).smooth_split(&ctx.fft), 8.0, hi);
                let rows: Vec<String> =
                    samples.iter().zip(&psamples).map(|((x, s), (_, p))| format!("{x:.6e},{s:.6e},{p:.6e}")).collect();
                ctx.write_csv("symbol.csv", "xi_norm,sup_a11_flat,sup_principal_flat", &rows)?;
                summary.insert("symbol_flat_slope".into(), json!({ "a11": slope, "principal": pslope }));
            }
        }
    }
    write_pretty(&ctx.out.join("diagnose.json"), &serde_json::Value::Object(summary))?;
    ctx.write_run("diagnose", json!({ "diagnostics": dc.list }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_keeps_first_occurrence_order() {
        let n = |p, s| NormSpec { p, s, alpha: 1.0 };
        let got = dedup_norms(&[n(2.0, 0.0), n(f64::INFINITY, 0.5), n(2.0, 0.0), n(4.0, 0.25), n(f64::INFINITY, 0.5)]);
        assert_eq!(got, vec![n(2.0, 0.0), n(f64::INFINITY, 0.5), n(4.0, 0.25)]);
    }

    #[test]
    fn steps_and_gcd() {
        assert_eq!(grid_steps(&[0.0, 0.25, 0.5], 1.0 / 64.0).unwrap(), vec![0, 16, 32]);
        assert!(grid_steps(&[0.3], 0.25).is_err());
        assert_eq!([16, 32, 8].iter().fold(0, |g, &s| gcd(g, s)), 8);
    }
}
