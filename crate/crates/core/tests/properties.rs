mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elspin::analysis::{ple_point, PleWindows};
use elspin::model::{
    g_factors_from_peaks, integrate, purcell_enhancement, zeeman_transitions, BandEdge, CavityParams, FilterChain,
    FilterStage, LineShape, Profile, TransitionLabel, ZeemanConfig, DEFAULT_NU0,
};
use elspin::spam::{fit_background_model, spam_fidelity};
use elspin::tagstore::{read_tags, write_tags, TagRecord, TagStream};
use elspin::timeline::{Envelope, PulseSpec, Timeline};

fn zeeman(b: f64, ge: f64, gh: f64) -> ZeemanConfig {
    ZeemanConfig {
        b_field: b,
        g_electron: ge,
        g_hole: gh,
        nu0: DEFAULT_NU0,
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

proptest! {
    #[test]
    fn g_factors_roundtrip(b in 0.001f64..=1.0, ge in 0.1f64..4.0, gh in 0.1f64..4.0) {
        prop_assume!((ge - gh).abs() > 1e-3);
        let set = zeeman_transitions(&zeeman(b, ge, gh));
        let est = g_factors_from_peaks(&set.sorted_detunings(), b).unwrap();
        let (x, y) = est.g_pair;
        let (lo, hi) = (ge.min(gh), ge.max(gh));
        prop_assert!(rel(x.min(y), lo) < 1e-9 && rel(x.max(y), hi) < 1e-9, "{x} {y} vs {ge} {gh}");
    }

    #[test]
    fn transition_ordering(b in 0.01f64..=1.0, ge in 0.1f64..4.0, gh in 0.1f64..4.0) {
        prop_assume!((ge - gh).abs() > 1e-3);
        let cfg = zeeman(b, ge, gh);
        let set = zeeman_transitions(&cfg);
        use TransitionLabel::*;
        let expect = if cfg.electron_splitting() > cfg.hole_splitting() {
            [A, C, B, D]
        } else {
            [A, B, C, D]
        };
        prop_assert_eq!(set.labels_by_frequency(), expect);
        let hole_of = |l: TransitionLabel| l.spins().1;
        prop_assert_eq!(hole_of(A), hole_of(B));
        prop_assert_eq!(hole_of(C), hole_of(D));
        prop_assert_ne!(hole_of(A), hole_of(C));
    }

    #[test]
    fn purcell_decreases_with_detuning(
        q in 100.0f64..1e5,
        v in 0.1f64..5.0,
        kappa in 1.0f64..200.0,
        d1 in 0.0f64..100.0,
        step in 0.01f64..50.0,
        sign in prop::bool::ANY,
    ) {
        let cav = CavityParams {
            q_factor: q,
            mode_volume: v,
            kappa: kappa * 1e9,
            cavity_center: DEFAULT_NU0,
            debye_waller: 0.23,
            quantum_efficiency: 0.234,
        };
        let s = if sign { 1.0 } else { -1.0 };
        let near = purcell_enhancement(&cav, DEFAULT_NU0 + s * d1 * 1e9);
        let far = purcell_enhancement(&cav, DEFAULT_NU0 + s * (d1 + step) * 1e9);
        prop_assert!(far < near);
        prop_assert!(far >= 1.0);
        let mirrored = purcell_enhancement(&cav, DEFAULT_NU0 - s * d1 * 1e9);
        prop_assert!(rel(mirrored, near) < 1e-12);
    }

    #[test]
    fn rect_area_is_exact(amp in 0.01f64..10.0, dur in 1e-9f64..1e-6, start in 0.0f64..1e-6) {
        let p = PulseSpec::electrical(start, dur).with_amplitude(amp);
        prop_assert_eq!(p.area(), amp * dur);
    }

    #[test]
    fn rc_envelope_integrates_to_area(tau in 1e-9f64..500e-9, dur in 10e-9f64..500e-9) {
        let p = PulseSpec::electrical(0.0, dur).with_envelope(Envelope::RcStretched { tau_rise: tau });
        let numeric = integrate(|t| p.envelope_value(t), 0.0, dur + 60.0 * tau, 1e-10);
        prop_assert!(p.area().is_finite());
        prop_assert!(rel(numeric, p.area()) < 1e-6, "{numeric} vs {}", p.area());
    }

    #[test]
    fn label_swap_maps_f_to_one_minus_f(cr in prop::collection::vec(0u64..10_000, 1..12), cnr_seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(cnr_seed);
        let cnr: Vec<u64> = cr.iter().map(|_| rng.gen_range(0..10_000)).collect();
        let f = spam_fidelity(&cr, &cnr).unwrap();
        let g = spam_fidelity(&cnr, &cr).unwrap();
        for (p, q) in f.points.iter().zip(&g.points) {
            match (p.f_raw, q.f_raw) {
                (Some(a), Some(b)) => {
                    prop_assert!((a + b - 1.0).abs() <= 2.0 * f64::EPSILON);
                    prop_assert!((p.raw_interval.0 + q.raw_interval.1 - 1.0).abs() < 1e-12);
                }
                (None, None) => prop_assert_eq!(p.c_r + p.c_nr, 0.0),
                _ => prop_assert!(false, "validity differs"),
            }
        }
    }

    #[test]
    fn ttg1_roundtrip(
        res in 1u64..10_000,
        times in prop::collection::vec((0u64..u64::MAX / 2, 0u8..4, any::<u8>()), 0..200),
    ) {
        let records: Vec<TagRecord> = times
            .iter()
            .map(|&(t, c, f)| TagRecord { time: t, channel: c, flags: f })
            .collect();
        let s = TagStream::from_unsorted(res, 4, u64::MAX / 2, records).unwrap();
        let mut buf = Vec::new();
        write_tags(&s, &mut buf).unwrap();
        let back = read_tags(&buf[..]).unwrap();
        prop_assert_eq!(&back, &s);
        let mut again = Vec::new();
        write_tags(&back, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }
}

#[test]
fn filter_transmission_bounded() {
    let nu0 = DEFAULT_NU0;
    let chains = [
        FilterChain::bandpass_ffpi(nu0, 100e9, 20e9, 1e9, nu0),
        FilterChain::new(vec![
            FilterStage::Bandpass {
                center: nu0,
                fwhm: 5e9,
                edge: BandEdge::Gaussian,
            },
            FilterStage::Shape(LineShape::new(nu0, 3.0, Profile::Lorentzian { fwhm: 1e9 })),
        ]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for chain in &chains {
        for _ in 0..500_000 {
            let nu = nu0 + rng.gen_range(-500e9..500e9);
            let t = chain.transmission(nu);
            assert!((0.0..=1.0).contains(&t), "T({nu}) = {t}");
        }
    }
}

#[test]
fn timeline_expansion_is_pure() {
    let pulses = vec![
        PulseSpec::optical(2e-6, 100e-9, DEFAULT_NU0),
        PulseSpec::electrical(0.0, 150e-9),
    ];
    let a = Timeline::new(4e-6, 1.0, pulses.clone()).unwrap();
    let b = Timeline::new(4e-6, 1.0, pulses).unwrap();
    assert_eq!(a.pulses(), b.pulses());
    assert!(a.pulses()[0].is_electrical());
    assert_eq!(a.cycle_count(), 250_000);
}

#[test]
fn ple_point_scales_linearly() {
    let tl = Timeline::new(4e-6, 0.4, vec![PulseSpec::optical(0.0, 100e-9, DEFAULT_NU0)]).unwrap();
    let s = common::random_stream(4, 20_000, 400_000_000, 1, 1000);
    let w = PleWindows::standard(0);
    let one = ple_point(&s, &tl, &w).unwrap();
    for k in [2usize, 3, 5] {
        let copies: Vec<&TagStream> = std::iter::repeat(&s).take(k).collect();
        let merged = TagStream::merge(&copies).unwrap();
        let p = ple_point(&merged, &tl, &w).unwrap();
        assert_eq!(p.signal, k as f64 * one.signal);
        assert_eq!(p.background, k as f64 * one.background);
        assert!(rel(p.corrected, k as f64 * one.corrected) < 1e-12);
    }
}

#[test]
fn background_model_is_self_consistent() {
    let (cal, b_el, b_opt) = common::synthetic_calibration((0.004, -880.0), [(0.01, -2200.0), (-0.002, 500.0)]);
    let m = fit_background_model(&cal, 6.25e-6, 100.0).unwrap();
    assert!(!m.clamped);
    for k in 0..2 {
        assert!(rel(m.b_el[k], b_el[k]) < 1e-9, "{} vs {}", m.b_el[k], b_el[k]);
        for l in 0..2 {
            assert!(rel(m.b_opt[k][l], b_opt[k][l]) < 1e-9);
            let c = b_el[k] * b_opt[k][l] * 6.25e-6 * 100.0;
            assert!(rel(m.coincidences[k][l], c) < 1e-9);
        }
    }
    let scale = cal.el.iter().flatten().map(|c| c.rate * c.rate).sum::<f64>();
    for r in &m.residuals {
        assert!(*r <= 1e-20 * scale, "residual {r}");
    }
}
