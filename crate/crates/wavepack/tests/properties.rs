use std::f64::consts::TAU;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use wavepack::flow::{integrate_flow, FlowOptions, PhasePoint};
use wavepack::grid::{Fft, Grid, RealField, C64};
use wavepack::io::{read_field, write_field};
use wavepack::packets::{DictionaryParams, PacketDictionary};
use wavepack::reference::exact_halfwave;
use wavepack::spline::{PeriodicSpline, Taps};
use wavepack::symbols::{chi, CoefficientMatrix, HalfWaveSymbol, RoughParams, CHI_CUTOFF};
use wavepack::tent::{quasi_dist, BallVolumeTable, SpherePoint, TentEvaluator, TentParams};
use wavepack::transform::{analyze, synthesize};
use wavepack::vec3;

struct Setup {
    fft: Fft,
    dict: PacketDictionary,
    table: BallVolumeTable,
}

fn setup() -> &'static Setup {
    static S: OnceLock<Setup> = OnceLock::new();
    S.get_or_init(|| {
        let grid = Grid::new(2, 32).unwrap();
        Setup {
            fft: Fft::new(grid),
            dict: PacketDictionary::build(&DictionaryParams::new(2, 32)).unwrap(),
            table: BallVolumeTable::build(2, -6, 4, 2, 20_000, 1),
        }
    })
}

fn field(seed: u64) -> RealField {
    RealField::random_resolved(&setup().fft, &mut ChaCha20Rng::seed_from_u64(seed))
}

fn unit(theta: f64) -> vec3::Vec3 {
    [theta.cos(), theta.sin(), 0.0]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn transform_is_linear_isometric_and_invertible(a in any::<u64>(), b in any::<u64>(), re in -2.0..2.0f64, im in -2.0..2.0f64) {
        let s = setup();
        let (f, g) = (field(a), field(b));
        let c = C64::new(re, im);
        let mut h = g.clone();
        h.axpy(c, &f);
        let (wf, wg, wh) = (analyze(&f, &s.dict, &s.fft).unwrap(), analyze(&g, &s.dict, &s.fft).unwrap(), analyze(&h, &s.dict, &s.fft).unwrap());
        let mut lin = wg.clone();
        for (x, y) in lin.data.iter_mut().zip(&wf.data) {
            *x += c * y;
        }
        for (x, y) in lin.low.iter_mut().zip(&wf.low) {
            *x += c * y;
        }
        let diff: f64 = lin.data.iter().zip(&wh.data).chain(lin.low.iter().zip(&wh.low)).map(|(x, y)| (x - y).norm_sqr()).sum();
        prop_assert!(diff.sqrt() <= 1e-10 * (1.0 + wh.weighted_norm(&s.dict)));
        prop_assert!((wf.weighted_norm(&s.dict) / f.norm() - 1.0).abs() < 1e-10);
        prop_assert!(synthesize(&wh, &s.dict, &s.fft).unwrap().rel_err(&h) < 1e-10);
    }

    #[test]
    fn tent_norm_is_absolutely_homogeneous(seed in any::<u64>(), lambda in 0.01..100.0f64, p in prop::sample::select(vec![1.0, 2.0, 4.0, f64::INFINITY])) {
        let s = setup();
        let ev = TentEvaluator::new(&s.dict, &s.table, 1.0, &TentParams::default());
        let w = analyze(&field(seed), &s.dict, &s.fft).unwrap();
        let mut scaled = w.clone();
        scaled.scale(C64::new(0.0, -lambda));
        let a = ev.tent_norm(&w, p, 0.25, 1.0).norm;
        let b = ev.tent_norm(&scaled, p, 0.25, 1.0).norm;
        prop_assert!(a > 0.0);
        prop_assert!((b / (lambda * a) - 1.0).abs() < 1e-10, "p {} a {} b {}", p, a, b);
    }

    #[test]
    fn quasi_distance_is_quasi_symmetric(x in prop::array::uniform3(0.0..TAU), y in prop::array::uniform3(0.0..TAU), t1 in 0.0..TAU, t2 in 0.0..TAU) {
        let a = SpherePoint { x: [x[0], x[1], 0.0], omega: unit(t1) };
        let b = SpherePoint { x: [y[0], y[1], 0.0], omega: unit(t2) };
        prop_assert_eq!(quasi_dist(&a, &a, 2), 0.0);
        let (ab, ba) = (quasi_dist(&a, &b, 2), quasi_dist(&b, &a, 2));
        prop_assert!(ab >= 0.0 && ab <= 1.5f64.sqrt() * ba + 1e-12);
    }

    #[test]
    fn spline_interpolates_grid_values(seed in any::<u64>(), node in 0usize..1024) {
        let s = setup();
        let grid = s.fft.grid();
        let f = field(seed);
        let values: Vec<f64> = f.data.iter().map(|c| c.re).collect();
        let sp = PeriodicSpline::new(&s.fft, &values);
        let taps = Taps::at(&grid, &grid.position(node));
        prop_assert!((sp.eval(&taps) - values[node]).abs() < 1e-10);
    }

    #[test]
    fn cutoff_is_a_monotone_switch(r in 0.0..64.0f64) {
        let (v, d) = chi(r, CHI_CUTOFF);
        prop_assert!((0.0..=1.0).contains(&v) && d >= 0.0);
        if r <= CHI_CUTOFF { prop_assert_eq!(v, 0.0); }
        if r >= 2.0 * CHI_CUTOFF { prop_assert_eq!(v, 1.0); }
    }

    #[test]
    fn exact_propagator_is_a_group(seed in any::<u64>(), t in -2.0..2.0f64, u in -2.0..2.0f64) {
        let s = setup();
        let f = field(seed);
        let two = exact_halfwave(&s.fft, &exact_halfwave(&s.fft, &f, t), u);
        prop_assert!(two.rel_err(&exact_halfwave(&s.fft, &f, t + u)) < 1e-12);
        prop_assert!((exact_halfwave(&s.fft, &f, t).norm() / f.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn field_files_round_trip(seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let f = field(seed);
        write_field(&dir.path().join("f"), &f).unwrap();
        let g = read_field(&dir.path().join("f")).unwrap();
        prop_assert_eq!(f.data, g.data);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generated_coefficients_are_symmetric_and_elliptic(seed in any::<u64>(), amp in 0.0..0.3f64, r in 1.0..3.0f64) {
        let grid = Grid::new(2, 32).unwrap();
        let c = CoefficientMatrix::generate(grid, &RoughParams::new(r, amp, seed)).unwrap();
        prop_assert_eq!(c.get(0, 1), c.get(1, 0));
        let bound = c.kappa_bound().unwrap();
        prop_assert!(bound > 0.0);
        prop_assert!(c.sampled_kappa() >= bound - 1e-12);
    }

    #[test]
    fn flows_reverse(seed in any::<u64>(), t in 0.05..0.75f64) {
        let grid = Grid::new(2, 32).unwrap();
        let fft = Fft::new(grid);
        let c = CoefficientMatrix::generate(grid, &RoughParams::new(2.0, 0.2, seed)).unwrap();
        let b = HalfWaveSymbol::new(&c, &fft, CHI_CUTOFF).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 1);
        let src: Vec<PhasePoint> = wavepack::flow::random_sources(2, &[12.0, 40.0], 3, &mut rng);
        let fwd = integrate_flow(&b, &src, t, &FlowOptions::default()).unwrap();
        let back = integrate_flow(&b, &fwd.images, -t, &FlowOptions::default()).unwrap();
        for (p, q) in src.iter().zip(&back.images) {
            let gap = vec3::norm(&vec3::sub(&p.x, &q.x)) + vec3::norm(&vec3::sub(&p.xi, &q.xi)) / vec3::norm(&p.xi);
            prop_assert!(gap < 1e-8, "gap {}", gap);
        }
    }
}
