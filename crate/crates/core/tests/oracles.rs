mod common;

use common::*;
use proptest::prelude::*;

use elspin::spam::{spam_coincidences, SpamWindows};
use elspin::tagstore::{cross_correlate, cross_correlate_par, fold, window_select, TagStream};
use elspin::timeline::{PulseSpec, Timeline};

fn check_cross(a: &TagStream, b: &TagStream, period: u64, bin: u64, n_max: u32) {
    let h = cross_correlate(a, b, period as f64 * 1e-12, bin as f64 * 1e-12, n_max).unwrap();
    let (counts, periods) = brute_cross(&a.times(), &b.times(), period, bin, n_max);
    assert_eq!(h.counts, counts);
    assert_eq!(h.period_counts, periods);
    let par = cross_correlate_par(a, b, period as f64 * 1e-12, bin as f64 * 1e-12, n_max).unwrap();
    assert_eq!(par.counts, h.counts);
    assert_eq!(par.period_counts, h.period_counts);
}

#[test]
fn cross_correlate_matches_pairs_on_lattice() {
    for (seed, period, bin, step) in [(1, 100, 10, 5), (2, 120, 40, 20), (3, 99, 7, 1), (4, 100, 100, 50)] {
        let a = lattice_stream(seed, 1500, 20_000, step, 1);
        let b = lattice_stream(seed + 100, 1500, 20_000, step, 1);
        check_cross(&a, &b, period, bin, 5);
        check_cross(&a, &a, period, bin, 3);
    }
}

#[test]
fn cross_correlate_matches_pairs_large() {
    let a = random_stream(5, 20_000, 40_000_000, 1, 1);
    let b = random_stream(6, 20_000, 40_000_000, 1, 1);
    check_cross(&a, &b, 4000, 40, 20);
}

#[test]
fn fold_matches_brute_force() {
    let s = random_stream(7, 5000, 1_000_000, 3, 1);
    for (period, bin) in [(1000, 10), (997, 13), (1000, 1000), (1000, 3)] {
        for ch in [None, Some(0), Some(2)] {
            let h = fold(&s, period as f64 * 1e-12, bin as f64 * 1e-12, ch).unwrap();
            assert_eq!(h.counts, brute_fold(&s, period, bin, ch), "period {period} bin {bin} ch {ch:?}");
        }
    }
}

fn window_timeline() -> Timeline {
    // 1 ns ticks, 4 us period.
    Timeline::new(
        4e-6,
        4e-3,
        vec![PulseSpec::electrical(0.0, 150e-9), PulseSpec::optical(2e-6, 100e-9, 226.15e12)],
    )
    .unwrap()
}

#[test]
fn window_select_matches_brute_force() {
    let tl = window_timeline();
    let s = random_stream(8, 8000, 4_000_000, 2, 1000);
    for (pulse, offset, width) in [(0, 0.0, 500e-9), (0, 418e-9, 500e-9), (1, 65e-9, 411e-9), (1, 1.9e-6, 0.0), (1, 2.5e-6, 1e-9)] {
        let got = window_select(&s, &tl, pulse, offset, width).unwrap();
        let want = brute_window(&s, 4000, window_ticks(&tl, pulse, offset, width, 1000));
        assert_eq!(got.records(), &want[..], "pulse {pulse} offset {offset}");
    }
}

#[test]
fn spam_coincidences_match_nested_loops() {
    let tl = window_timeline();
    let herald = random_stream(9, 6000, 4_000_000, 1, 1000);
    let readout = random_stream(10, 6000, 4_000_000, 2, 1000);
    for w in [
        SpamWindows::DOWN,
        SpamWindows {
            t_e: 0.0,
            t_ce: 1.5e-6,
            t_o: 0.0,
            t_co: 1.9e-6,
        },
    ] {
        let got = spam_coincidences(&herald, &readout, &tl, &w, 10).unwrap();
        let hw = window_ticks(&tl, 0, w.t_e, w.t_ce, 1000);
        let rw = window_ticks(&tl, 1, w.t_o, w.t_co, 1000);
        assert_eq!(got, brute_spam(&herald, &readout, 4000, hw, rw, 10));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_correlate_exact_for_random_grids(
        seed in 0u64..1000,
        period in 2u64..200,
        bin_frac in 1u64..100,
        n_max in 0u32..6,
        step in 1u64..8,
    ) {
        let bin = (period * bin_frac / 100).max(1);
        let a = lattice_stream(seed, 300, 20_000, step, 1);
        let b = lattice_stream(seed ^ 0xabc, 300, 20_000, step, 1);
        check_cross(&a, &b, period, bin, n_max);
    }

    #[test]
    fn swapping_streams_mirrors_histogram(seed in 0u64..1000, n_max in 0u32..5) {
        let a = lattice_stream(seed, 400, 50_000, 3, 1);
        let b = lattice_stream(seed + 1, 400, 50_000, 3, 1);
        let ab = cross_correlate(&a, &b, 300e-12, 30e-12, n_max).unwrap();
        let ba = cross_correlate(&b, &a, 300e-12, 30e-12, n_max).unwrap();
        let mut rev = ba.counts.clone();
        rev.reverse();
        prop_assert_eq!(&ab.counts, &rev);
        let mut prev = ba.period_counts.clone();
        prev.reverse();
        prop_assert_eq!(&ab.period_counts, &prev);
    }

    #[test]
    fn histogram_total_is_pair_count(seed in 0u64..1000) {
        let a = random_stream(seed, 500, 100_000, 1, 1);
        let b = random_stream(seed + 7, 500, 100_000, 1, 1);
        let h = cross_correlate(&a, &b, 1000e-12, 50e-12, 4).unwrap();
        let limit = 9 * 1000 / 2;
        let pairs = a.times().iter()
            .flat_map(|&x| b.times().into_iter().map(move |y| (x, y)))
            .filter(|&(x, y)| x.abs_diff(y) <= limit)
            .count() as u64;
        prop_assert_eq!(h.total(), pairs);
        prop_assert_eq!(h.period_counts.iter().sum::<u64>(), pairs);
    }

    #[test]
    fn fold_is_pure_and_complete(seed in 0u64..1000, period in 10u64..5000, bin in 1u64..10) {
        let s = random_stream(seed, 400, 200_000, 2, 1);
        let h1 = fold(&s, period as f64 * 1e-12, bin as f64 * 1e-12, None).unwrap();
        let h2 = fold(&s, period as f64 * 1e-12, bin as f64 * 1e-12, None).unwrap();
        prop_assert_eq!(&h1.counts, &h2.counts);
        prop_assert_eq!(h1.total(), s.len() as u64);
        prop_assert_eq!(&h1.counts, &brute_fold(&s, period, bin, None));
    }
}
