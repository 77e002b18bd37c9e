//! Measurement pipelines: pulsed g2, lifetime, PLE with window background
//! subtraction, and the temporal-filter sweep.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fit::{fit_exponential, fit_g2_train, fit_linear, FitResult, G2TrainFit};
use crate::tagstore::{cross_correlate, fold, window_select, CoincidenceHistogram, PeriodWindow, TagStream};
use crate::timeline::Timeline;

/// Default number of side periods used by the peak-train fit.
pub const DEFAULT_TRAIN_PEAKS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct G2Point {
    pub n: i64,
    pub raw: f64,
    pub raw_error: f64,
    pub corrected: Option<f64>,
    pub corrected_error: Option<f64>,
    /// Corrected value was negative and has been clamped to zero.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2Report {
    pub points: Vec<G2Point>,
    /// Expected uncorrelated pairs per period, `N1 N2 theta T`.
    pub normalization: f64,
    pub tau_c: Option<f64>,
    pub fit: Option<G2TrainFit>,
}

impl G2Report {
    pub fn point(&self, n: i64) -> Option<&G2Point> {
        self.points.iter().find(|p| p.n == n)
    }

    pub fn raw(&self, n: i64) -> f64 {
        self.point(n).map_or(f64::NAN, |p| p.raw)
    }

    pub fn corrected(&self, n: i64) -> Option<f64> {
        self.point(n).and_then(|p| p.corrected)
    }

    pub fn any_clamped(&self) -> bool {
        self.points.iter().any(|p| p.clamped)
    }
}

/// `g2_raw(n)`: coincidences integrated over pulse offset `n`, divided by
/// `N1 N2 theta T`, with Poisson errors.
pub fn g2_raw(hist: &CoincidenceHistogram) -> Result<G2Report> {
    let norm = hist.meta.normalization();
    if !(norm > 0.0) {
        return Err(Error::analysis("normalization N1 N2 theta T is zero"));
    }
    let n_max = hist.n_max as i64;
    let points = (-n_max..=n_max)
        .map(|n| {
            let c = hist.period_count(n).unwrap_or(0) as f64;
            G2Point {
                n,
                raw: c / norm,
                raw_error: c.sqrt() / norm,
                corrected: None,
                corrected_error: None,
                clamped: false,
            }
        })
        .collect();
    Ok(G2Report {
        points,
        normalization: norm,
        tau_c: None,
        fit: None,
    })
}

/// Background-corrected `g2(n) = (2 A_n tau_c / d) / (N - I0 theta / d)`
/// from the fixed-lifetime peak-train fit over `n_peaks` side periods.
pub fn g2_corrected(hist: &CoincidenceHistogram, tau_c: f64, n_peaks: u32) -> Result<G2Report> {
    let mut report = g2_raw(hist)?;
    let fit = fit_g2_train(hist, tau_c, n_peaks)?;
    let d = fit.bin_width;
    let a = 2.0 * tau_c / d;
    let b = fit.period / d;
    let denom = report.normalization - fit.i0 * b;
    if !(denom > 0.0) {
        return Err(Error::analysis(
            "background exceeds the normalization (N - I0 theta / d <= 0)",
        ));
    }
    let np = fit.n as i64;
    for p in report.points.iter_mut().filter(|p| p.n.abs() <= np) {
        let k = (p.n + np) as usize + 1;
        let amp = fit.amplitudes[k - 1];
        let g = a * amp / denom;
        let da = a / denom;
        let di = a * amp * b / (denom * denom);
        let var = da * da * fit.covariance[(k, k)]
            + di * di * fit.covariance[(0, 0)]
            + 2.0 * da * di * fit.covariance[(k, 0)];
        p.clamped = g < 0.0;
        p.corrected = Some(g.max(0.0));
        p.corrected_error = Some(var.max(0.0).sqrt());
    }
    report.tau_c = Some(tau_c);
    report.fit = Some(fit);
    Ok(report)
}

/// Folds all channels at bin width `bin` and fits a single exponential over
/// `[end + fit_offset, end + fit_offset + fit_span]` after pulse `pulse_index`.
pub fn lifetime_report(
    tags: &TagStream,
    timeline: &Timeline,
    pulse_index: usize,
    bin: f64,
    fit_offset: f64,
    fit_span: f64,
) -> Result<FitResult> {
    let pulse = timeline.pulse(pulse_index)?;
    let hist = fold(tags, timeline.period(), bin, None)?;
    let t0 = pulse.end() + fit_offset;
    let t1 = (t0 + fit_span).min(timeline.period());
    fit_exponential(&hist, (t0, t1), None)
}

/// Signal and background window counts with the duration-scaled difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlePoint {
    pub signal: f64,
    pub background: f64,
    /// Ratio of signal to background window widths.
    pub scale: f64,
    pub corrected: f64,
    pub sigma: f64,
}

impl PlePoint {
    /// `S - scale * Bg` with `sigma = sqrt(S + scale^2 Bg)`.
    pub fn from_counts(signal: f64, background: f64, scale: f64) -> Self {
        Self {
            signal,
            background,
            scale,
            corrected: signal - scale * background,
            sigma: (signal + scale * scale * background).sqrt(),
        }
    }
}

/// Window `(offset, width)` after the end of a pulse, seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseWindow {
    pub offset: f64,
    pub width: f64,
}

impl PulseWindow {
    pub fn new(offset: f64, width: f64) -> Self {
        Self { offset, width }
    }
}

/// PLE signal/background window pair measured after one pulse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PleWindows {
    pub pulse_index: usize,
    pub signal: PulseWindow,
    pub background: PulseWindow,
}

impl PleWindows {
    /// 900 ns of signal directly after the pulse, then 450 ns of background.
    pub fn standard(pulse_index: usize) -> Self {
        Self {
            pulse_index,
            signal: PulseWindow::new(0.0, 900e-9),
            background: PulseWindow::new(900e-9, 450e-9),
        }
    }
}

/// Background-corrected PLE intensity of one acquisition.
pub fn ple_point(tags: &TagStream, timeline: &Timeline, windows: &PleWindows) -> Result<PlePoint> {
    let res = tags.resolution_ps();
    let window = |w: &PulseWindow| {
        PeriodWindow::after_pulse(timeline, windows.pulse_index, w.offset, w.width, res)
    };
    let sig = window(&windows.signal)?;
    let bkg = window(&windows.background)?;
    if let (Some(s), Some(b)) = (&sig, &bkg) {
        if s.overlaps(b) {
            return Err(Error::invalid("signal and background windows overlap"));
        }
    }
    let count = |w: &Option<PeriodWindow>| -> u64 {
        w.map_or(0, |w| tags.records().iter().filter(|r| w.contains(r.time)).count() as u64)
    };
    let (s, b) = (count(&sig), count(&bkg));
    let ws = sig.map_or(0, |w| w.width());
    let wb = bkg.map_or(0, |w| w.width());
    if wb == 0 {
        return Err(Error::invalid("background window is empty"));
    }
    Ok(PlePoint::from_counts(s as f64, b as f64, ws as f64 / wb as f64))
}

#[derive(Debug, Clone)]
pub struct PleSegment {
    pub laser_frequency: f64,
    pub timeline: Timeline,
    pub stream: TagStream,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PleRow {
    pub frequency: f64,
    pub point: PlePoint,
    /// Acquisition time of the segment, seconds.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PleSpectrum {
    pub rows: Vec<PleRow>,
}

impl PleSpectrum {
    pub fn frequencies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.frequency).collect()
    }

    pub fn corrected(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.point.corrected).collect()
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.point.sigma).collect()
    }

    /// Sum of corrected counts over the scan.
    pub fn integrated(&self) -> f64 {
        self.rows.iter().map(|r| r.point.corrected).sum()
    }
}

/// Applies [`ple_point`] to each segment in order.
pub fn ple_scan(segments: &[PleSegment], windows: &PleWindows) -> Result<PleSpectrum> {
    let Some(first) = segments.first() else {
        return Err(Error::invalid("scan has no segments"));
    };
    for s in segments {
        if !s.timeline.same_schedule(&first.timeline) {
            return Err(Error::invalid("scan segments use different pulse schedules"));
        }
        if s.stream.resolution_ps() != first.stream.resolution_ps() {
            return Err(Error::invalid("scan segments use different tag resolutions"));
        }
    }
    let rows = segments
        .par_iter()
        .map(|s| {
            Ok(PleRow {
                frequency: s.laser_frequency,
                point: ple_point(&s.stream, &s.timeline, windows)?,
                duration: s.stream.total_time(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PleSpectrum { rows })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub t_e: f64,
    pub t_ce: f64,
    pub g2: f64,
    pub error: f64,
    /// False when a window held no tags or fell outside the period.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterceptFit {
    pub t_e: f64,
    pub intercept: f64,
    pub intercept_error: f64,
    pub slope: f64,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSweep {
    pub points: Vec<SweepPoint>,
    /// Linear fit of `g2_raw(0)` against `t_ce` for each `t_e`.
    pub intercepts: Vec<Option<InterceptFit>>,
    /// `t_e` minimizing `g2_raw(0)` for each `t_ce`, if any point is valid.
    pub best_offset: Vec<(f64, Option<f64>)>,
}

/// Window-restricted `g2_raw(0)` over a grid of herald offsets `t_e` and
/// widths `t_ce`, both measured from the end of pulse `pulse_index`.
pub fn temporal_filter_sweep(
    a: &TagStream,
    b: &TagStream,
    timeline: &Timeline,
    pulse_index: usize,
    t_e: &[f64],
    t_ce: &[f64],
) -> Result<TemporalSweep> {
    if t_e.is_empty() || t_ce.is_empty() {
        return Err(Error::invalid("sweep grids must be non-empty"));
    }
    timeline.pulse(pulse_index)?;
    let grid: Vec<(f64, f64)> = t_e
        .iter()
        .flat_map(|&e| t_ce.iter().map(move |&c| (e, c)))
        .collect();
    let period = timeline.period();
    let points: Vec<SweepPoint> = grid
        .par_iter()
        .map(|&(e, c)| {
            let invalid = SweepPoint {
                t_e: e,
                t_ce: c,
                g2: f64::NAN,
                error: f64::NAN,
                valid: false,
            };
            let (Ok(wa), Ok(wb)) = (
                window_select(a, timeline, pulse_index, e, c),
                window_select(b, timeline, pulse_index, e, c),
            ) else {
                return invalid;
            };
            if wa.is_empty() || wb.is_empty() {
                return invalid;
            }
            match cross_correlate(&wa, &wb, period, period, 0).and_then(|h| g2_raw(&h)) {
                Ok(r) => SweepPoint {
                    g2: r.raw(0),
                    error: r.points[0].raw_error,
                    valid: true,
                    ..invalid
                },
                Err(_) => invalid,
            }
        })
        .collect();

    let mut intercepts = Vec::with_capacity(t_e.len());
    for &e in t_e {
        let row: Vec<&SweepPoint> = points.iter().filter(|p| p.t_e == e && p.valid).collect();
        let xs: Vec<f64> = row.iter().map(|p| p.t_ce).collect();
        let ys: Vec<f64> = row.iter().map(|p| p.g2).collect();
        let fit = if row.iter().all(|p| p.error > 0.0) {
            let sig: Vec<f64> = row.iter().map(|p| p.error).collect();
            fit_linear(&xs, &ys, Some(&sig))
        } else {
            fit_linear(&xs, &ys, None)
        };
        intercepts.push(fit.ok().map(|f| InterceptFit {
            t_e: e,
            intercept: f.value("intercept"),
            intercept_error: f.error("intercept"),
            slope: f.value("slope"),
            points_used: row.len(),
        }));
    }
    let best_offset = t_ce
        .iter()
        .map(|&c| {
            let best = points
                .iter()
                .filter(|p| p.t_ce == c && p.valid)
                .min_by(|x, y| x.g2.total_cmp(&y.g2))
                .map(|p| p.t_e);
            (c, best)
        })
        .collect();
    Ok(TemporalSweep {
        points,
        intercepts,
        best_offset,
    })
}
