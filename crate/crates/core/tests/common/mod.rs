//! Brute-force reference implementations and fixture generators shared by
//! the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elspin::model::{zeeman_transitions, LineShape, Profile, TransitionLabel, ZeemanConfig};
use elspin::spam::{default_positions, overlap_terms, CalCell, CalPosition, SpamCalibrationSet};
use elspin::tagstore::{seconds_to_ticks, TagRecord, TagStream};
use elspin::timeline::Timeline;

/// `n` uniformly placed tags over `[0, span)` ticks on `channels` channels.
pub fn random_stream(seed: u64, n: usize, span: u64, channels: u8, resolution_ps: u64) -> TagStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|_| TagRecord::new(rng.gen_range(0..span), rng.gen_range(0..channels)))
        .collect();
    TagStream::from_unsorted(resolution_ps, u32::from(channels), span, records).unwrap()
}

/// Tags on a coarse lattice so that many pair delays land exactly on bin
/// and period boundaries.
pub fn lattice_stream(seed: u64, n: usize, span: u64, step: u64, channels: u8) -> TagStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slots = span / step;
    let records = (0..n)
        .map(|_| TagRecord::new(rng.gen_range(0..slots) * step, rng.gen_range(0..channels)))
        .collect();
    TagStream::from_unsorted(1, u32::from(channels), span, records).unwrap()
}

/// Every pair `(a_i, b_j)` is visited. A delay `D = b - a` is kept when
/// `|D| <= (n_max + 1/2) P` and lands in bin `round_half_away(D / d)`, and
/// in period `round_half_toward_zero(D / P)`; all decided with rationals.
pub fn brute_cross(a: &[u64], b: &[u64], period: u64, bin: u64, n_max: u32) -> (Vec<u64>, Vec<u64>) {
    let p = period as i128;
    let d = bin as i128;
    let n = n_max as i128;
    let half_bins = ((2 * n + 1) * p + d) / (2 * d);
    let mut counts = vec![0u64; (2 * half_bins + 1) as usize];
    let mut periods = vec![0u64; (2 * n + 1) as usize];
    for &x in a {
        for &y in b {
            let delta = y as i128 - x as i128;
            let mag = delta.abs();
            if 2 * mag > (2 * n + 1) * p {
                continue;
            }
            // Round half away from zero via the remainder.
            let (mut k, rem) = (mag / d, mag % d);
            if 2 * rem >= d {
                k += 1;
            }
            // Round half toward zero: ties stay in the inner period.
            let (mut m, rem) = (mag / p, mag % p);
            if 2 * rem > p {
                m += 1;
            }
            let s = delta.signum();
            counts[(half_bins + s * k) as usize] += 1;
            periods[(n + s * m) as usize] += 1;
        }
    }
    (counts, periods)
}

pub fn brute_fold(stream: &TagStream, period: u64, bin: u64, channel: Option<u8>) -> Vec<u64> {
    let nbins = (period + bin - 1) / bin;
    let mut out = vec![0u64; nbins as usize];
    for r in stream.records() {
        if channel.map_or(true, |c| c == r.channel) {
            let mut phase = r.time;
            while phase >= period {
                phase -= period;
            }
            let mut i = 0;
            while (i + 1) * bin <= phase {
                i += 1;
            }
            out[i as usize] += 1;
        }
    }
    out
}

/// Window `[start, end)` ticks after pulse `pulse_index`, or `None` when it
/// starts at or beyond the period.
pub fn window_ticks(tl: &Timeline, pulse_index: usize, offset: f64, width: f64, res: u64) -> Option<(u64, u64)> {
    let start = seconds_to_ticks(tl.pulses()[pulse_index].end() + offset, res);
    let period = seconds_to_ticks(tl.period(), res);
    (start < period).then(|| (start, start + seconds_to_ticks(width, res)))
}

/// Tags `t` for which some cycle `k` has `k P + start <= t < k P + end`.
pub fn brute_window(stream: &TagStream, period: u64, window: Option<(u64, u64)>) -> Vec<TagRecord> {
    let Some((s, e)) = window else {
        return Vec::new();
    };
    stream
        .records()
        .iter()
        .filter(|r| (0..=r.time / period).any(|k| k * period + s <= r.time && r.time < k * period + e))
        .copied()
        .collect()
}

/// Nested loop over herald tags in `hw` and readout tags in `rw`, keyed by
/// the cycle difference.
pub fn brute_spam(
    herald: &TagStream,
    readout: &TagStream,
    period: u64,
    hw: Option<(u64, u64)>,
    rw: Option<(u64, u64)>,
    n_max: u32,
) -> Vec<u64> {
    let mut out = vec![0u64; n_max as usize + 1];
    let h = brute_window(herald, period, hw);
    let r = brute_window(readout, period, rw);
    for x in &h {
        for y in &r {
            let (kx, ky) = (x.time / period, y.time / period);
            if ky >= kx && ky - kx <= n_max as u64 {
                out[(ky - kx) as usize] += 1;
            }
        }
    }
    out
}

/// Calibration rates generated from the background model's own equations.
pub fn synthetic_calibration(el_line: (f64, f64), opt_lines: [(f64, f64); 2]) -> (SpamCalibrationSet, [f64; 2], [[f64; 2]; 2]) {
    let set = zeeman_transitions(&ZeemanConfig {
        b_field: 0.35,
        ..ZeemanConfig::default()
    });
    let positions = default_positions(&set);
    let lor = |c: f64, w: f64| LineShape::new(c, 1.0, Profile::Lorentzian { fwhm: w });
    let filter_shapes = positions.map(|p| lor(p, 0.985e9));
    let ple_lines = TransitionLabel::ALL.map(|l| lor(set.frequency(l), 1.5e9));
    let mut cal = SpamCalibrationSet {
        filter_positions: positions,
        laser_positions: positions,
        el: [[CalCell::default(); 5]; 5],
        opt: [[CalCell::default(); 5]; 5],
        filter_shapes,
        ple_lines,
        eta: 0.693,
    };
    let terms = overlap_terms(&cal).unwrap();
    let ghz = |f: f64| f / 1e9;
    for i in 0..5 {
        let b = el_line.0 * ghz(positions[i]) + el_line.1;
        for j in 0..5 {
            cal.el[i][j] = CalCell {
                rate: b / terms.el_fraction[i],
                acquisition_time: 1.0 + j as f64,
            };
        }
    }
    let mut b_opt = [[0.0; 2]; 2];
    for (fi, f) in CalPosition::TARGETS.iter().enumerate() {
        let i = f.index();
        let (s, c) = opt_lines[fi];
        for j in 0..5 {
            cal.opt[i][j] = CalCell {
                rate: (s * ghz(positions[j]) + c) / terms.opt_fraction[i][j],
                acquisition_time: 2.0,
            };
        }
        for (lj, l) in CalPosition::TARGETS.iter().enumerate() {
            b_opt[fi][lj] = s * ghz(positions[l.index()]) + c;
        }
    }
    let b_el = CalPosition::TARGETS.map(|p| el_line.0 * ghz(positions[p.index()]) + el_line.1);
    (cal, b_el, b_opt)
}
