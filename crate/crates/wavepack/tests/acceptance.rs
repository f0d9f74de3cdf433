//! End-to-end acceptance run: thirteen numbered criteria, one result line each.
//!
//! Runs as a plain binary (`harness = false`). A criterion that misses its bound prints
//! `FAIL` with the measured numbers; the process still exits 0 so the rest of the test
//! suite is reported. Only a panic inside the harness itself aborts. Expect the whole run
//! to take well over half an hour on one core; criteria 11 and 12 dominate.
//!
//! `ACCEPTANCE=3,11` runs a subset.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use wavepack::flow::{
    flow_series, gronwall_diag, integrate_flow, random_sources, rate_bound, FlowMap, FlowOptions, Hamiltonian, PhasePoint,
    RayLimit, Sampling,
};
use wavepack::grid::{Fft, Grid, RealField, C64};
use wavepack::packets::{DictionaryParams, FrameMode, PacketDictionary};
use wavepack::parametrix::{
    first_order_solve, picard_increment, second_order_solve, HalfWaveOperator, ParametrixOptions, SecondOrderOptions, TimeGrid, DEFAULT_H,
};
use wavepack::reference::{exact_halfwave, timestep_solve, ReferenceConfig};
use wavepack::symbols::{
    build_operator, flat_decay_slope, shift_for_invertibility, CoefficientMatrix, HalfWaveSymbol, OperatorForm,
    RoughParams, RoughSymbol, SymbolJet, CHI_CUTOFF,
};
use wavepack::tent::{BallVolumeTable, TentEvaluator, TentParams};
use wavepack::transform::{analyze, sample_probe_pairs, synthesize, ww_star_kernel_probe};
use wavepack::vec3;

const COEFF_SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn grid(size: usize) -> (Grid, Fft) {
    let g = Grid::new(2, size).unwrap();
    (g, Fft::new(g))
}

fn dictionary(size: usize, mode: FrameMode) -> PacketDictionary {
    let mut p = DictionaryParams::new(2, size);
    p.mode = mode;
    PacketDictionary::build(&p).unwrap()
}

fn rough(g: Grid, amp: f64) -> CoefficientMatrix {
    CoefficientMatrix::generate(g, &RoughParams::new(2.0, amp, COEFF_SEED)).unwrap()
}

fn half_wave(size: usize, amp: f64, cache: usize) -> (Fft, Arc<CoefficientMatrix>, HalfWaveOperator) {
    let (g, fft) = grid(size);
    let coeffs = Arc::new(if amp == 0.0 { CoefficientMatrix::flat(g) } else { rough(g, amp) });
    let b = Arc::new(HalfWaveSymbol::new(&coeffs, &fft, CHI_CUTOFF).unwrap());
    let c = shift_for_invertibility(&b, &fft, 3, 1).unwrap().c;
    let dict = Arc::new(dictionary(size, FrameMode::Renormalized));
    let op = HalfWaveOperator::new(dict, b, c, ParametrixOptions { cache, ..Default::default() }).unwrap();
    (fft, coeffs, op)
}

/// Solver data lives above the chi transition band, where the parametrix error is small.
fn solver_data(fft: &Fft, seed: u64) -> RealField {
    RealField::random_band(fft, 32.0, fft.grid().band_edge(), &mut rng(seed))
}

// ---------------------------------------------------------------------------------------

fn c1_frame_exactness() -> Outcome {
    let d = dictionary(128, FrameMode::Renormalized);
    let q = d.stored_partition();
    let dev = (0..d.grid.len()).filter(|&i| d.resolved(i)).map(|i| (q[i] - 1.0).abs()).fold(0.0, f64::max);
    let fft = Fft::new(d.grid);
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let f = RealField::random_resolved(&fft, &mut r);
        let back = synthesize(&analyze(&f, &d, &fft).unwrap(), &d, &fft).unwrap();
        worst = worst.max(back.rel_err(&f));
    }
    outcome(dev <= 1e-12 && worst <= 1e-10, format!("partition deviation {dev:.2e} (<= 1e-12), round trip {worst:.2e} (<= 1e-10)"))
}

fn c2_isometry() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [FrameMode::Renormalized, FrameMode::Raw] {
        let d = dictionary(128, mode);
        let fft = Fft::new(d.grid);
        let mut r = rng(2);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let f = RealField::random_resolved(&fft, &mut r);
            let w = analyze(&f, &d, &fft).unwrap().weighted_norm(&d);
            worst = worst.max((w * w / f.norm().powi(2) - 1.0).abs());
        }
        let bound = if mode == FrameMode::Raw { 2.0 * d.eps_frame } else { 1e-10 };
        pass &= worst <= bound;
        parts.push(format!("{mode:?} defect {worst:.2e} (<= {bound:.2e})"));
    }
    outcome(pass, parts.join(", "))
}

fn c3_tent_identity() -> Outcome {
    let d = dictionary(64, FrameMode::Renormalized);
    let fft = Fft::new(d.grid);
    let table = BallVolumeTable::standard(2);
    let ev = TentEvaluator::new(&d, &table, 1.0, &TentParams::default());
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let f = RealField::random_resolved(&fft, &mut r);
        let phase = analyze(&f, &d, &fft).unwrap();
        let t = ev.tent_norm(&phase, 2.0, 0.0, 1.0).norm;
        worst = worst.max((t / phase.weighted_norm(&d) - 1.0).abs());
    }
    outcome(worst <= 0.05, format!("max |T^2_0 / l2 - 1| = {:.2}% over 10 fields (<= 5%)", 100.0 * worst))
}

fn c4_ball_volume() -> Outcome {
    let t = BallVolumeTable::build(2, -6, 8, 4, 1_000_000, 4);
    let small = t.slope(2f64.powi(-6), 0.5);
    let large = t.slope(8.0, 256.0);
    let mid = t.slope(1.0, 16.0);
    outcome(
        (small - 4.0).abs() <= 0.15 && (large - 2.0).abs() <= 0.15,
        format!("slope {small:.3} on [2^-6, 2^-1] (4 +- 0.15), {large:.3} on [2^3, 2^8] (2 +- 0.15); crossover [1, 16]: {mid:.3}"),
    )
}

/// The target slope -r/2 is the order drop of a_flat relative to a; the coefficient itself,
/// as an order-0 multiplier symbol, shows it directly. The order-2 principal symbol is
/// reported alongside (its slope should sit near 2 - r/2).
fn c5_symbol_decay() -> Outcome {
    let (g, fft) = grid(128);
    let c = rough(g, 0.2);
    let entry = RoughSymbol::multiplier(g, c.get(0, 0).to_vec(), 2.0).smooth_split(&fft);
    let (slope, _) = flat_decay_slope(&entry, 8.0, 42.0);
    let (principal, _) = flat_decay_slope(&RoughSymbol::principal(&c).smooth_split(&fft), 8.0, 42.0);
    outcome(
        slope <= -0.85,
        format!("sup_x |a_flat| slope {slope:.3} over |xi| in [8, 42] (<= -0.85); principal symbol {principal:.3} (order 2)"),
    )
}

/// Flows for criteria 6 and 7: 250 sources at each of |xi| = 16, 32, 64, 128.
struct FlowRun {
    times: Vec<f64>,
    flows: Vec<FlowMap>,
    hom: Vec<FlowMap>,
    rate: f64,
    elapsed: Duration,
}

fn flow_run() -> FlowRun {
    let start = Instant::now();
    let (g, fft) = grid(512);
    let b = HalfWaveSymbol::new(&rough(g, 0.2), &fft, CHI_CUTOFF).unwrap();
    let radii = [16.0, 32.0, 64.0, 128.0];
    let sources = random_sources(2, &radii, 250, &mut rng(6));
    let times = vec![-1.0, -0.75, -0.5, -0.25, 0.25, 0.5, 0.75, 1.0];
    let opts = FlowOptions { steps_per_unit: 256.0, halving_check: Sampling::Every(4), jacobian: Sampling::Every(4) };
    let flows = flow_series(&b, &sources, &times, &opts).unwrap();
    let hom = flow_series(&RayLimit(&b), &sources, &times, &opts).unwrap();
    let rate = rate_bound(&b, &g, &radii, 32);
    FlowRun { times, flows, hom, rate, elapsed: start.elapsed() }
}

/// Hides x-independence so that a flat flow is integrated by RK4 rather than written down.
struct Integrated<'a>(&'a HalfWaveSymbol);

impl Hamiltonian for Integrated<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn jet(&self, p: &PhasePoint) -> SymbolJet {
        self.0.jet(p)
    }
}

fn c6_flow(run: &FlowRun) -> Outcome {
    let drift = run.flows.iter().map(FlowMap::max_ham_drift).fold(0.0, f64::max);
    let jac = run.flows.iter().map(FlowMap::max_jac_defect).fold(0.0, f64::max);
    let m = run.flows.iter().map(|f| f.rate).fold(run.rate, f64::max);
    let sigma_ok = run
        .flows
        .iter()
        .all(|f| f.sigma_ratio.iter().all(|r| r.ln().abs() <= m * f.t.abs() * (1.0 + 1e-9)));
    let worst_sigma = run.flows.iter().map(FlowMap::sigma_exponent).fold(0.0, f64::max);

    let (g, fft) = grid(64);
    let flat = HalfWaveSymbol::new(&CoefficientMatrix::flat(g), &fft, CHI_CUTOFF).unwrap();
    let sources = random_sources(2, &[16.0, 128.0], 50, &mut rng(7));
    let mut straight: f64 = 0.0;
    for t in [-1.0, -0.5, 0.5, 1.0] {
        let f = integrate_flow(&Integrated(&flat), &sources, t, &FlowOptions::default()).unwrap();
        for (p, q) in sources.iter().zip(&f.images) {
            let want = vec3::axpy(&p.x, t, &vec3::unit(&p.xi));
            straight = straight.max(vec3::norm(&vec3::sub(&q.x, &want)) + vec3::norm(&vec3::sub(&q.xi, &p.xi)));
        }
    }
    outcome(
        drift <= 1e-8 && jac <= 1e-4 && sigma_ok && straight <= 1e-10,
        format!(
            "1000 sources, |t| <= 1: drift {drift:.1e} (<= 1e-8), Jacobian defect {jac:.1e} (<= 1e-4), \
             max |log sigma ratio|/|t| {worst_sigma:.3} vs M = {m:.3}, flat RK4 error {straight:.1e} (<= 1e-10); flows {:.0}s",
            run.elapsed.as_secs_f64()
        ),
    )
}

fn c7_gronwall(run: &FlowRun) -> Outcome {
    let rep = gronwall_diag(&run.flows, &run.hom, 2).unwrap();
    let per: Vec<f64> = [16.0, 32.0, 64.0, 128.0].iter().map(|r| rep.max_for_sigma(1.0 / r)).collect();
    let hi = per.iter().cloned().fold(0.0, f64::max);
    let lo = per.iter().cloned().fold(f64::INFINITY, f64::min);
    let variation = hi / lo - 1.0;
    outcome(
        rep.max.is_finite() && variation <= 0.30,
        format!(
            "max D/sigma0 for sigma0 = 2^-4..2^-7: [{}] over t in {:?}; variation {:.0}% (<= 30%)",
            per.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", "),
            run.times,
            100.0 * variation
        ),
    )
}

fn c8_parametrix_flat() -> Outcome {
    let start = Instant::now();
    let (fft, _, op) = half_wave(128, 0.0, 16);
    let mut r = rng(8);
    let f = RealField::random_resolved(&fft, &mut r);
    let id = op.apply(&f, 0.0).unwrap().rel_err(&f);
    let g = solver_data(&fft, 9);
    let err = op.apply(&g, 0.5).unwrap().rel_err(&exact_halfwave(&fft, &g, 0.5));
    outcome(
        id <= 1e-10 && err <= 5e-2 && start.elapsed().as_secs() < 300,
        format!(
            "|U_0 f - f| {id:.1e} (<= 1e-10), flat U_0.5 vs exp(it|D|) {err:.2e} (<= 5e-2, data on [32, N/3]), {:.0}s (< 300s)",
            start.elapsed().as_secs_f64()
        ),
    )
}

/// The same band-limited function sampled on a finer grid.
fn resample(f: &RealField, fft_from: &Fft, fft_to: &Fft) -> RealField {
    let g = fft_from.grid();
    let spec = f.spectrum(fft_from);
    let coef: HashMap<(i64, i64), C64> =
        (0..g.len()).map(|i| (g.freq(i), spec[i])).map(|(z, c)| ((z[0] as i64, z[1] as i64), c)).collect();
    let edge = g.band_edge();
    RealField::from_spectrum(fft_to, |z| {
        if vec3::norm(z) > edge {
            C64::new(0.0, 0.0)
        } else {
            coef.get(&(z[0] as i64, z[1] as i64)).copied().unwrap_or_default()
        }
    })
}

fn c9_error_bounded() -> Outcome {
    let (_, fft64) = grid(64);
    let f64_ = RealField::random_resolved(&fft64, &mut rng(10));
    let mut sups = Vec::new();
    for size in [64, 128] {
        let (fft, _, op) = half_wave(size, 0.2, 16);
        let f = resample(&f64_, &fft64, &fft);
        let mut sup: f64 = 0.0;
        for t in [-1.0, -0.5, -0.25, 0.25, 0.5, 1.0] {
            sup = sup.max(op.error_term(&f, t, DEFAULT_H).unwrap().norm() / f.norm());
        }
        sups.push(sup);
    }
    let ratio = sups[1] / sups[0];
    outcome(
        ratio <= 2.0 && ratio >= 0.5,
        format!("sup_t |E_t f|/|f|: {:.3} (64^2), {:.3} (128^2); ratio {ratio:.3} (within 2x)", sups[0], sups[1]),
    )
}

fn c10_picard() -> Outcome {
    let (fft, _, op) = half_wave(128, 0.2, 32);
    let f = solver_data(&fft, 11);
    let tg = TimeGrid::new(0.5, 1.0 / 16.0).unwrap();
    let (s8, series) = match first_order_solve(&op, &f, &tg, 8, DEFAULT_H) {
        Ok(x) => x,
        Err(e) => return outcome(false, format!("K = 8 solve failed: {e}")),
    };
    let ratios = series.ratios();
    let monotone = ratios.windows(2).skip(1).all(|w| w[1] <= w[0]);
    // the K = 9 solution differs from K = 8 by exactly this term
    let change = picard_increment(&op, &series).unwrap().norm() / s8.u.last().unwrap().norm();
    outcome(
        monotone && change <= 1e-6,
        format!(
            "ratios |v_k+1|/|v_k| = [{}] (decreasing from k = 2), K = 8 -> 9 change {change:.2e} (<= 1e-6)",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn end_to_end(form: OperatorForm) -> Outcome {
    let start = Instant::now();
    let (fft, coeffs, op) = half_wave(128, 0.2, 16);
    let l = build_operator(coeffs, form);
    let u0 = solver_data(&fft, 3);
    let zero = RealField::zeros(fft.grid());
    let opts = SecondOrderOptions { dt: 1.0 / 64.0, h: DEFAULT_H, residual_stride: 0 };
    let sol = second_order_solve(&op, &l, &u0, &zero, None, 0.5, &opts).unwrap();
    let elapsed = start.elapsed();
    let cfg = ReferenceConfig { dt: 5e-4, ..Default::default() };
    let reference = timestep_solve(&l, &u0, &zero, None, 0.5, &cfg).unwrap();
    let err = sol.u.last().unwrap().rel_err(reference.solution.u.last().unwrap());
    let init_u = sol.u[0].rel_err(&u0);
    let init_ut = sol.ut[0].norm() / u0.norm();
    outcome(
        err <= 5e-2 && init_u <= 1e-2 && init_ut <= 1e-2 && elapsed.as_secs() <= 900,
        format!(
            "{form:?} form: |u - u_ref|/|u_ref| at t = 0.5 {err:.2e} (<= 5e-2), u(0) {init_u:.1e}, |u_t(0)|/|u0| {init_ut:.1e} \
             (<= 1e-2), solve {:.0}s (<= 900s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn c13_kernel() -> Outcome {
    let pairs = sample_probe_pairs(2, 200, 4.0, 14.0, &mut rng(13));
    let maxes: Vec<f64> =
        [64, 128].iter().map(|&s| ww_star_kernel_probe(&dictionary(s, FrameMode::Renormalized), &pairs, 2.0).max_ratio).collect();
    let change = (maxes[1] / maxes[0] - 1.0).abs();
    outcome(
        maxes.iter().all(|m| m.is_finite()) && change <= 0.2,
        format!("max kernel/envelope (N = 2) over 200 pairs: {:.3} (64^2), {:.3} (128^2); change {:.1}% (<= 20%)", maxes[0], maxes[1], 100.0 * change),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |k: usize| only.as_ref().map_or(true, |v| v.contains(&k));
    let mut flows: Option<FlowRun> = None;
    let mut failed = 0;
    let names = [
        "frame exactness",
        "isometry",
        "tent identity",
        "ball-volume scaling",
        "symbol smoothing decay",
        "flow diagnostics",
        "Gronwall bound",
        "parametrix identity and flat accuracy",
        "error-operator boundedness",
        "Picard decay",
        "end-to-end oracle (divergence form)",
        "standard-form parity",
        "kernel decay probe",
    ];
    for (i, name) in names.iter().enumerate() {
        let k = i + 1;
        if !want(k) {
            continue;
        }
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(|| match k {
            1 => c1_frame_exactness(),
            2 => c2_isometry(),
            3 => c3_tent_identity(),
            4 => c4_ball_volume(),
            5 => c5_symbol_decay(),
            6 | 7 => {
                let run = flows.get_or_insert_with(flow_run);
                if k == 6 {
                    c6_flow(run)
                } else {
                    c7_gronwall(run)
                }
            }
            8 => c8_parametrix_flat(),
            9 => c9_error_bounded(),
            10 => c10_picard(),
            11 => end_to_end(OperatorForm::Divergence),
            12 => end_to_end(OperatorForm::Standard),
            _ => c13_kernel(),
        }));
        let o = res.unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {k:>2} {} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
}
