//! Heralded spin-initialization analysis: herald/readout coincidences,
//! SPAM fidelity, the calibration-based background model and window sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::fit_linear;
use crate::model::{integrate, LineShape, TransitionLabel, TransitionSet};
use crate::tagstore::{PeriodWindow, TagStream};
use crate::timeline::Timeline;

/// Herald window `[t_e, t_e + t_ce)` after the electrical pulse and readout
/// window `[t_o, t_o + t_co)` after the optical pulse, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpamWindows {
    pub t_e: f64,
    pub t_ce: f64,
    pub t_o: f64,
    pub t_co: f64,
}

impl SpamWindows {
    /// Windows used for heralding the spin-down state.
    pub const DOWN: SpamWindows = SpamWindows {
        t_e: 418e-9,
        t_ce: 500e-9,
        t_o: 65e-9,
        t_co: 411e-9,
    };

    pub fn validate(&self) -> Result<()> {
        if [self.t_e, self.t_ce, self.t_o, self.t_co].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("window offsets and widths must be >= 0"));
        }
        Ok(())
    }

    fn resolve(&self, timeline: &Timeline, resolution_ps: u64) -> Result<(Option<PeriodWindow>, Option<PeriodWindow>)> {
        self.validate()?;
        let (el, opt) = spam_pulses(timeline)?;
        let herald = PeriodWindow::after_pulse(timeline, el, self.t_e, self.t_ce, resolution_ps)?;
        let readout = PeriodWindow::after_pulse(timeline, opt, self.t_o, self.t_co, resolution_ps)?;
        if let (Some(h), Some(r)) = (&herald, &readout) {
            if h.width() > 0 && r.width() > 0 && h.overlaps(r) {
                return Err(Error::invalid("herald and readout windows overlap"));
            }
        }
        Ok((herald, readout))
    }
}

/// Indices of the first electrical and first optical pulse.
fn spam_pulses(timeline: &Timeline) -> Result<(usize, usize)> {
    let el = timeline
        .nth_of_kind(true, 0)
        .ok_or_else(|| Error::invalid("timeline has no electrical pulse"))?;
    let opt = timeline
        .nth_of_kind(false, 0)
        .ok_or_else(|| Error::invalid("timeline has no optical pulse"))?;
    Ok((el, opt))
}

/// Sorted cycle indices of tags inside `window`, one entry per tag.
fn cycles_in(tags: &TagStream, window: &PeriodWindow) -> Vec<u64> {
    tags.records()
        .iter()
        .filter(|r| window.contains(r.time))
        .map(|r| r.time / window.period)
        .collect()
}

/// `c(n)` for `n = 0..=n_max`: pairs of a herald tag in cycle `k` and a
/// readout tag in cycle `k + n`.
pub fn spam_coincidences(
    herald: &TagStream,
    readout: &TagStream,
    timeline: &Timeline,
    windows: &SpamWindows,
    n_max: u32,
) -> Result<Vec<u64>> {
    if herald.resolution_ps() != readout.resolution_ps() {
        return Err(Error::invalid("herald and readout streams differ in resolution"));
    }
    let (hw, rw) = windows.resolve(timeline, herald.resolution_ps())?;
    let mut counts = vec![0u64; n_max as usize + 1];
    let (Some(hw), Some(rw)) = (hw, rw) else {
        return Ok(counts);
    };
    let h = cycles_in(herald, &hw);
    let r = cycles_in(readout, &rw);
    let mut lo = 0usize;
    for &k in &h {
        while lo < r.len() && r[lo] < k {
            lo += 1;
        }
        for &c in &r[lo..] {
            let n = c - k;
            if n > n_max as u64 {
                break;
            }
            counts[n as usize] += 1;
        }
    }
    Ok(counts)
}

/// Wilson score interval at one standard deviation.
pub fn wilson_interval(successes: f64, trials: f64) -> (f64, f64) {
    if !(trials > 0.0) {
        return (0.0, 1.0);
    }
    let p = (successes / trials).clamp(0.0, 1.0);
    let z2 = 1.0;
    let denom = 1.0 + z2 / trials;
    let center = (p + z2 / (2.0 * trials)) / denom;
    let half = (p * (1.0 - p) / trials + z2 / (4.0 * trials * trials)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FidelityPoint {
    pub n: u32,
    pub c_r: f64,
    pub c_nr: f64,
    /// `c_r / (c_r + c_nr)`; `None` when both counts are zero.
    pub f_raw: Option<f64>,
    pub raw_interval: (f64, f64),
    pub f_corrected: Option<f64>,
    pub corrected_error: Option<f64>,
    /// A background-subtracted count went negative and was set to zero.
    pub clamped: bool,
    /// The background-subtracted denominator was not positive.
    pub invalid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityReport {
    pub points: Vec<FidelityPoint>,
    pub windows: Option<SpamWindows>,
}

impl FidelityReport {
    pub fn point(&self, n: u32) -> Option<&FidelityPoint> {
        self.points.iter().find(|p| p.n == n)
    }

    /// Raw fidelity pooled over `n` in `range`.
    pub fn pooled_raw(&self, range: std::ops::RangeInclusive<u32>) -> Option<(f64, (f64, f64))> {
        let (r, nr) = self
            .points
            .iter()
            .filter(|p| range.contains(&p.n))
            .fold((0.0, 0.0), |(a, b), p| (a + p.c_r, b + p.c_nr));
        (r + nr > 0.0).then(|| (r / (r + nr), wilson_interval(r, r + nr)))
    }

    pub fn flagged(&self) -> bool {
        self.points
            .iter()
            .any(|p| p.f_raw.is_none() || p.clamped || p.invalid)
    }
}

/// `F(n) = c_r / (c_r + c_nr)` with Wilson intervals.
pub fn spam_fidelity(c_r: &[u64], c_nr: &[u64]) -> Result<FidelityReport> {
    if c_r.len() != c_nr.len() {
        return Err(Error::invalid("c_r and c_nr must have equal length"));
    }
    let points = c_r
        .iter()
        .zip(c_nr)
        .enumerate()
        .map(|(n, (&r, &nr))| {
            let (r, nr) = (r as f64, nr as f64);
            let total = r + nr;
            FidelityPoint {
                n: n as u32,
                c_r: r,
                c_nr: nr,
                f_raw: (total > 0.0).then(|| r / total),
                raw_interval: wilson_interval(r, total),
                f_corrected: None,
                corrected_error: None,
                clamped: false,
                invalid: false,
            }
        })
        .collect();
    Ok(FidelityReport {
        points,
        windows: None,
    })
}

/// Filter and laser positions of the calibration grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CalPosition {
    L,
    M,
    H,
    B,
    C,
}

impl CalPosition {
    pub const ALL: [CalPosition; 5] = [Self::L, Self::M, Self::H, Self::B, Self::C];
    pub const DETUNED: [CalPosition; 3] = [Self::L, Self::M, Self::H];
    pub const TARGETS: [CalPosition; 2] = [Self::B, Self::C];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Frequencies of the five calibration positions: `L`, `M`, `H` halfway
/// between A and C, C and B, B and D; `B` and `C` on those transitions.
pub fn default_positions(transitions: &TransitionSet) -> [f64; 5] {
    let f = |l| transitions.frequency(l);
    use TransitionLabel::*;
    [
        0.5 * (f(A) + f(C)),
        0.5 * (f(C) + f(B)),
        0.5 * (f(B) + f(D)),
        f(B),
        f(C),
    ]
}

/// Mean count rate of one laser/filter combination.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CalCell {
    /// Counts per second in the collection window.
    pub rate: f64,
    /// Acquisition time, seconds.
    pub acquisition_time: f64,
}

/// The 25 laser/filter combinations with the spectral models needed to
/// remove the emitter's own contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpamCalibrationSet {
    /// Filter centre for each [`CalPosition`], hertz.
    pub filter_positions: [f64; 5],
    /// Laser frequency for each [`CalPosition`], hertz.
    pub laser_positions: [f64; 5],
    /// Herald-window rates indexed `[filter][laser]`.
    pub el: [[CalCell; 5]; 5],
    /// Readout-window rates indexed `[filter][laser]`.
    pub opt: [[CalCell; 5]; 5],
    /// Peak-normalized filter transmission at each filter position.
    pub filter_shapes: [LineShape; 5],
    /// Fitted PLE lines for A, B, C, D; their sum is the PLE model.
    pub ple_lines: [LineShape; 4],
    /// Fraction of readout counts from the unfiltered path.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpamBackgroundModel {
    /// Herald-window background rate with the filter at B and at C.
    pub b_el: [f64; 2],
    /// Readout-window background rate indexed `[filter][laser]` over B, C.
    pub b_opt: [[f64; 2]; 2],
    /// Expected background coincidences indexed `[filter][laser]`.
    pub coincidences: [[f64; 2]; 2],
    /// Some fitted background was negative and clamped to zero.
    pub clamped: bool,
    /// Residual sum of squares of the linear fits (herald, then readout).
    pub residuals: Vec<f64>,
}

impl SpamBackgroundModel {
    pub fn zero() -> Self {
        Self {
            b_el: [0.0; 2],
            b_opt: [[0.0; 2]; 2],
            coincidences: [[0.0; 2]; 2],
            clamped: false,
            residuals: Vec::new(),
        }
    }
}

const GHZ: f64 = 1e9;

fn span_of(lines: &[&LineShape]) -> (f64, f64) {
    let lo = lines.iter().map(|l| l.center).fold(f64::INFINITY, f64::min);
    let hi = lines.iter().map(|l| l.center).fold(f64::NEG_INFINITY, f64::max);
    let w = lines.iter().map(|l| l.profile.scale()).fold(0.0, f64::max);
    (lo - 200.0 * w, hi + 200.0 * w)
}

/// `integral f(nu) dnu` with `nu` in gigahertz.
fn integrate_ghz<F: Fn(f64) -> f64>(f: F, range: (f64, f64)) -> f64 {
    integrate(|x| f(x * GHZ), range.0 / GHZ, range.1 / GHZ, 1e-10)
}

/// Emitter overlap terms shared by the background fit and by generators of
/// synthetic calibration data.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTerms {
    /// `1 - integral(gamma_F,i T) / integral(T)` per filter position.
    pub el_fraction: [f64; 5],
    /// `1 - sum_n p_n(nu_j) integral(eta gamma_n + (1 - eta) gamma_n gamma_F,i) / integral(T)`
    /// indexed `[filter][laser]`.
    pub opt_fraction: [[f64; 5]; 5],
}

pub fn overlap_terms(cal: &SpamCalibrationSet) -> Result<OverlapTerms> {
    for l in cal.ple_lines.iter().chain(cal.filter_shapes.iter()) {
        l.validate()?;
    }
    if !(0.0..=1.0).contains(&cal.eta) {
        return Err(Error::invalid("eta must be in [0, 1]"));
    }
    let all: Vec<&LineShape> = cal.ple_lines.iter().chain(cal.filter_shapes.iter()).collect();
    let range = span_of(&all);
    let total = |nu: f64| cal.ple_lines.iter().map(|l| l.eval(nu)).sum::<f64>();
    let area_t = integrate_ghz(total, range);
    if !(area_t > 0.0) {
        return Err(Error::invalid("PLE model has zero area"));
    }
    let mut el_fraction = [0.0; 5];
    for (i, f) in cal.filter_shapes.iter().enumerate() {
        let overlap = integrate_ghz(|nu| f.eval(nu) * total(nu), range);
        el_fraction[i] = 1.0 - overlap / area_t;
    }
    let mut opt_fraction = [[0.0; 5]; 5];
    for (i, f) in cal.filter_shapes.iter().enumerate() {
        let collected: Vec<f64> = cal
            .ple_lines
            .iter()
            .map(|g| {
                integrate_ghz(
                    |nu| cal.eta * g.eval(nu) + (1.0 - cal.eta) * g.eval(nu) * f.eval(nu),
                    range,
                )
            })
            .collect();
        for (j, &laser) in cal.laser_positions.iter().enumerate() {
            let emitted: f64 = cal
                .ple_lines
                .iter()
                .zip(&collected)
                .map(|(g, c)| g.eval(laser) / area_t * c / area_t)
                .sum();
            opt_fraction[i][j] = 1.0 - emitted;
        }
    }
    Ok(OverlapTerms {
        el_fraction,
        opt_fraction,
    })
}

/// Herald- and readout-window background rates at the B and C positions,
/// and the expected background coincidences `b_i^E b_ij^O theta T`.
pub fn fit_background_model(
    cal: &SpamCalibrationSet,
    period: f64,
    total_time: f64,
) -> Result<SpamBackgroundModel> {
    let terms = overlap_terms(cal)?;
    let mut clamped = false;
    let mut residuals = Vec::new();

    // Herald window: the rate does not depend on the laser, so pool all
    // laser positions weighted by acquisition time.
    let el_rate = |i: usize| -> f64 {
        let (counts, time) = cal.el[i]
            .iter()
            .fold((0.0, 0.0), |(c, t), cell| (c + cell.rate * cell.acquisition_time, t + cell.acquisition_time));
        if time > 0.0 {
            counts / time
        } else {
            cal.el[i].iter().map(|c| c.rate).sum::<f64>() / 5.0
        }
    };
    let xs: Vec<f64> = CalPosition::DETUNED
        .iter()
        .map(|p| cal.filter_positions[p.index()] / GHZ)
        .collect();
    let ys: Vec<f64> = CalPosition::DETUNED
        .iter()
        .map(|p| terms.el_fraction[p.index()] * el_rate(p.index()))
        .collect();
    let fit = fit_linear(&xs, &ys, None)?;
    residuals.push(fit.rss);
    let mut b_el = [0.0; 2];
    for (k, p) in CalPosition::TARGETS.iter().enumerate() {
        let x = cal.filter_positions[p.index()] / GHZ;
        let b = fit.value("slope") * x + fit.value("intercept");
        if b < 0.0 {
            clamped = true;
        }
        b_el[k] = b.max(0.0);
    }

    let mut b_opt = [[0.0; 2]; 2];
    for (fi, filter) in CalPosition::TARGETS.iter().enumerate() {
        let i = filter.index();
        let xs: Vec<f64> = CalPosition::DETUNED
            .iter()
            .map(|p| cal.laser_positions[p.index()] / GHZ)
            .collect();
        let ys: Vec<f64> = CalPosition::DETUNED
            .iter()
            .map(|p| terms.opt_fraction[i][p.index()] * cal.opt[i][p.index()].rate)
            .collect();
        let fit = fit_linear(&xs, &ys, None)?;
        residuals.push(fit.rss);
        for (lj, laser) in CalPosition::TARGETS.iter().enumerate() {
            let x = cal.laser_positions[laser.index()] / GHZ;
            let b = fit.value("slope") * x + fit.value("intercept");
            if b < 0.0 {
                clamped = true;
            }
            b_opt[fi][lj] = b.max(0.0);
        }
    }
    if clamped {
        log::warn!("negative fitted background clamped to zero");
    }
    let mut coincidences = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            coincidences[i][j] = b_el[i] * b_opt[i][j] * period * total_time;
        }
    }
    Ok(SpamBackgroundModel {
        b_el,
        b_opt,
        coincidences,
        clamped,
        residuals,
    })
}

/// Subtracts background coincidences for a herald filter at `filter`
/// (B or C): the same-transition term from `c_r` and the cross term from
/// `c_nr`. Negative differences are clamped to zero and flagged.
pub fn corrected_fidelity(
    report: &FidelityReport,
    model: &SpamBackgroundModel,
    filter: TransitionLabel,
) -> Result<FidelityReport> {
    let (same, cross) = match filter {
        TransitionLabel::B => (model.coincidences[0][0], model.coincidences[0][1]),
        TransitionLabel::C => (model.coincidences[1][1], model.coincidences[1][0]),
        other => {
            return Err(Error::invalid(format!(
                "herald filter must sit on B or C, not {other:?}"
            )))
        }
    };
    let mut out = report.clone();
    for p in &mut out.points {
        let a = p.c_r - same;
        let b = p.c_nr - cross;
        p.clamped = a < 0.0 || b < 0.0;
        let (a, b) = (a.max(0.0), b.max(0.0));
        if a + b > 0.0 {
            let f = a / (a + b);
            let var = (b * b * p.c_r + a * a * p.c_nr) / (a + b).powi(4);
            p.f_corrected = Some(f);
            p.corrected_error = Some(var.sqrt());
            p.invalid = false;
        } else {
            p.f_corrected = None;
            p.corrected_error = None;
            p.invalid = true;
        }
    }
    Ok(out)
}

/// Herald and readout streams from one acquisition.
#[derive(Debug, Clone, Copy)]
pub struct SpamRun<'a> {
    pub herald: &'a TagStream,
    pub readout: &'a TagStream,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowSweepPoint {
    pub windows: SpamWindows,
    pub c_r: u64,
    pub c_nr: u64,
    pub fidelity: Option<f64>,
    pub interval: (f64, f64),
    /// Window outside the period, overlapping, or without coincidences.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSweep {
    pub points: Vec<WindowSweepPoint>,
    /// Index of the highest raw fidelity among unflagged points.
    pub best: Option<usize>,
}

/// Raw `F(0)` over the grid `t_e x t_ce x t_co` at fixed `t_o`. `same` is
/// the acquisition with laser and filter on the same transition, `cross`
/// the one with them on different transitions.
pub fn window_sweep(
    same: SpamRun<'_>,
    cross: SpamRun<'_>,
    timeline: &Timeline,
    t_e: &[f64],
    t_ce: &[f64],
    t_co: &[f64],
    t_o: f64,
) -> Result<WindowSweep> {
    if t_e.is_empty() || t_ce.is_empty() || t_co.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    let mut grid = Vec::with_capacity(t_e.len() * t_ce.len() * t_co.len());
    for &e in t_e {
        for &ce in t_ce {
            for &co in t_co {
                grid.push(SpamWindows {
                    t_e: e,
                    t_ce: ce,
                    t_o,
                    t_co: co,
                });
            }
        }
    }
    let points: Vec<WindowSweepPoint> = grid
        .par_iter()
        .map(|w| {
            let counts = spam_coincidences(same.herald, same.readout, timeline, w, 0).and_then(|r| {
                spam_coincidences(cross.herald, cross.readout, timeline, w, 0).map(|nr| (r[0], nr[0]))
            });
            match counts {
                Ok((r, nr)) => {
                    let total = (r + nr) as f64;
                    WindowSweepPoint {
                        windows: *w,
                        c_r: r,
                        c_nr: nr,
                        fidelity: (total > 0.0).then(|| r as f64 / total),
                        interval: wilson_interval(r as f64, total),
                        flagged: total == 0.0,
                    }
                }
                Err(_) => WindowSweepPoint {
                    windows: *w,
                    c_r: 0,
                    c_nr: 0,
                    fidelity: None,
                    interval: (0.0, 1.0),
                    flagged: true,
                },
            }
        })
        .collect();
    let best = points
        .iter()
        .enumerate()
        .filter(|(_, p)| !p.flagged)
        .max_by(|a, b| a.1.fidelity.unwrap().total_cmp(&b.1.fidelity.unwrap()))
        .map(|(i, _)| i);
    Ok(WindowSweep { points, best })
}
