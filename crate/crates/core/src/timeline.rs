//! Periodic pulse schedules.
//!
//! A [`Timeline`] repeats the same list of electrical and optical pulses
//! every period. Times inside a pulse spec are measured from the start of
//! the period, in seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseKind {
    Electrical,
    /// Resonant laser pulse at `laser_frequency` (hertz).
    Optical { laser_frequency: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Envelope {
    #[default]
    Rect,
    /// Single-pole charge during the commanded pulse, discharge afterwards.
    RcStretched { tau_rise: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseSpec {
    pub kind: PulseKind,
    /// Start within the period, seconds.
    pub start: f64,
    /// Commanded duration, seconds.
    pub duration: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub envelope: Envelope,
}

impl PulseSpec {
    pub fn electrical(start: f64, duration: f64) -> Self {
        Self {
            kind: PulseKind::Electrical,
            start,
            duration,
            amplitude: 1.0,
            envelope: Envelope::Rect,
        }
    }

    pub fn optical(start: f64, duration: f64, laser_frequency: f64) -> Self {
        Self {
            kind: PulseKind::Optical { laser_frequency },
            start,
            duration,
            amplitude: 1.0,
            envelope: Envelope::Rect,
        }
    }

    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn is_electrical(&self) -> bool {
        matches!(self.kind, PulseKind::Electrical)
    }

    pub fn laser_frequency(&self) -> Option<f64> {
        match self.kind {
            PulseKind::Optical { laser_frequency } => Some(laser_frequency),
            PulseKind::Electrical => None,
        }
    }

    /// End of the commanded pulse (period-relative seconds).
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    /// Drive level at period-relative time `t`.
    pub fn envelope_value(&self, t: f64) -> f64 {
        let u = t - self.start;
        if u < 0.0 {
            return 0.0;
        }
        match self.envelope {
            Envelope::Rect => {
                if u < self.duration {
                    self.amplitude
                } else {
                    0.0
                }
            }
            Envelope::RcStretched { tau_rise } => {
                if u < self.duration {
                    self.amplitude * -(-u / tau_rise).exp_m1()
                } else {
                    self.peak() * (-(u - self.duration) / tau_rise).exp()
                }
            }
        }
    }

    /// Highest drive level actually reached.
    pub fn peak(&self) -> f64 {
        match self.envelope {
            Envelope::Rect => self.amplitude,
            Envelope::RcStretched { tau_rise } => {
                self.amplitude * -(-self.duration / tau_rise).exp_m1()
            }
        }
    }

    /// `integral of envelope from start to t`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let u = t - self.start;
        if u <= 0.0 {
            return 0.0;
        }
        match self.envelope {
            Envelope::Rect => self.amplitude * u.min(self.duration),
            Envelope::RcStretched { tau_rise } => {
                let on = u.min(self.duration);
                let charge = self.amplitude * (on + tau_rise * (-on / tau_rise).exp_m1());
                if u <= self.duration {
                    charge
                } else {
                    let off = u - self.duration;
                    charge + self.peak() * tau_rise * -(-off / tau_rise).exp_m1()
                }
            }
        }
    }

    /// Total pulse area. Equals `amplitude * duration` for both envelopes.
    pub fn area(&self) -> f64 {
        match self.envelope {
            Envelope::Rect => self.amplitude * self.duration,
            Envelope::RcStretched { .. } => self.amplitude * self.duration,
        }
    }

    /// Smallest `t >= from` with `cumulative(t) >= target`, searched up to
    /// `limit`. `None` when the target is not reached before `limit`.
    pub fn invert_cumulative(&self, target: f64, from: f64, limit: f64) -> Option<f64> {
        if self.cumulative(limit) < target {
            return None;
        }
        match self.envelope {
            Envelope::Rect if self.amplitude > 0.0 => {
                let t = self.start + target / self.amplitude;
                Some(t.max(from))
            }
            _ => {
                let (mut lo, mut hi) = (from.max(self.start), limit);
                for _ in 0..100 {
                    let mid = 0.5 * (lo + hi);
                    if self.cumulative(mid) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                Some(hi)
            }
        }
    }

    /// Width of the interval where the envelope is at least `fraction` of
    /// its realized peak.
    pub fn effective_width(&self, fraction: f64) -> f64 {
        match self.envelope {
            Envelope::Rect => self.duration,
            Envelope::RcStretched { tau_rise } => {
                rc_effective_width(self.duration, tau_rise, fraction)
            }
        }
    }

    /// Period-relative time after which the envelope stays below `fraction`
    /// of its peak.
    pub fn effective_end(&self, fraction: f64) -> f64 {
        match self.envelope {
            Envelope::Rect => self.end(),
            Envelope::RcStretched { tau_rise } => self.end() + tau_rise * (1.0 / fraction).ln(),
        }
    }
}

fn rc_effective_width(duration: f64, tau: f64, fraction: f64) -> f64 {
    let peak_frac = -(-duration / tau).exp_m1();
    let rise = -tau * (1.0 - fraction * peak_frac).ln();
    let fall = tau * (1.0 / fraction).ln();
    duration - rise + fall
}

/// Finds the RC time constant for which a pulse of `commanded` seconds has
/// an effective width (above `fraction` of peak) of `target` seconds.
pub fn calibrate_tau_rise(commanded: f64, target: f64, fraction: f64) -> Result<f64> {
    if !(target > commanded && commanded > 0.0 && fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(
            "stretch calibration needs 0 < commanded < target and 0 < fraction < 1",
        ));
    }
    let (mut lo, mut hi) = (commanded * 1e-6, commanded);
    while rc_effective_width(commanded, hi, fraction) < target {
        hi *= 2.0;
        if hi > 1e6 * target {
            return Err(Error::invalid("stretch target unreachable"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if rc_effective_width(commanded, mid, fraction) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Serializable description from which a [`Timeline`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSpec {
    pub period: f64,
    pub total_time: f64,
    #[serde(default)]
    pub pulses: Vec<PulseSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    period: f64,
    total_time: f64,
    pulses: Vec<PulseSpec>,
    cycle_count: u64,
}

pub fn build_timeline(spec: &TimelineSpec) -> Result<Timeline> {
    if !(spec.period > 0.0) {
        return Err(Error::invalid("period must be > 0"));
    }
    if !(spec.total_time >= spec.period) {
        return Err(Error::invalid("total time must be at least one period"));
    }
    for (i, p) in spec.pulses.iter().enumerate() {
        if !(p.start >= 0.0 && p.duration > 0.0) {
            return Err(Error::invalid(format!("pulse {i}: start >= 0 and duration > 0 required")));
        }
        if !(p.amplitude >= 0.0) {
            return Err(Error::invalid(format!("pulse {i}: amplitude must be >= 0")));
        }
        if p.end() > spec.period {
            return Err(Error::invalid(format!("pulse {i}: ends after the period")));
        }
        if let Envelope::RcStretched { tau_rise } = p.envelope {
            if !(tau_rise > 0.0) {
                return Err(Error::invalid(format!("pulse {i}: tau_rise must be > 0")));
            }
        }
        if let PulseKind::Optical { laser_frequency } = p.kind {
            if !(laser_frequency > 0.0) {
                return Err(Error::invalid(format!("pulse {i}: laser frequency must be > 0")));
            }
        }
    }
    let mut pulses = spec.pulses.clone();
    pulses.sort_by(|a, b| a.start.total_cmp(&b.start));
    let ratio = spec.total_time / spec.period;
    let nearest = ratio.round();
    let cycle_count = if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        ratio.floor()
    } as u64;
    let timeline = Timeline {
        period: spec.period,
        total_time: spec.total_time,
        pulses,
        cycle_count,
    };
    for w in timeline.overlap_warnings() {
        log::warn!("{w}");
    }
    Ok(timeline)
}

impl Timeline {
    pub fn new(period: f64, total_time: f64, pulses: Vec<PulseSpec>) -> Result<Self> {
        build_timeline(&TimelineSpec {
            period,
            total_time,
            pulses,
        })
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn cycle_count(&self) -> u64 {
        self.cycle_count
    }

    /// Pulses sorted by start time.
    pub fn pulses(&self) -> &[PulseSpec] {
        &self.pulses
    }

    pub fn pulse(&self, index: usize) -> Result<&PulseSpec> {
        self.pulses
            .get(index)
            .ok_or_else(|| Error::invalid(format!("no pulse with index {index}")))
    }

    /// Index of the `nth` electrical (or optical) pulse in start order.
    pub fn nth_of_kind(&self, electrical: bool, nth: usize) -> Option<usize> {
        self.pulses
            .iter()
            .enumerate()
            .filter(|(_, p)| p.is_electrical() == electrical)
            .nth(nth)
            .map(|(i, _)| i)
    }

    pub fn spec(&self) -> TimelineSpec {
        TimelineSpec {
            period: self.period,
            total_time: self.total_time,
            pulses: self.pulses.clone(),
        }
    }

    /// Same pulses with a different acquisition time.
    pub fn with_total_time(&self, total_time: f64) -> Result<Timeline> {
        build_timeline(&TimelineSpec {
            total_time,
            ..self.spec()
        })
    }

    /// Same schedule with every optical pulse tuned to `laser_frequency`.
    pub fn with_laser(&self, laser_frequency: f64) -> Timeline {
        let mut t = self.clone();
        for p in &mut t.pulses {
            if let PulseKind::Optical { .. } = p.kind {
                p.kind = PulseKind::Optical { laser_frequency };
            }
        }
        t
    }

    /// True when both timelines share period and pulse timing (laser
    /// frequency and acquisition time may differ).
    pub fn same_schedule(&self, other: &Timeline) -> bool {
        self.period == other.period
            && self.pulses.len() == other.pulses.len()
            && self.pulses.iter().zip(&other.pulses).all(|(a, b)| {
                a.start == b.start
                    && a.duration == b.duration
                    && a.is_electrical() == b.is_electrical()
                    && a.envelope == b.envelope
            })
    }

    /// Pairs of pulses whose above-10% envelopes overlap, including wrap
    /// into the following period.
    pub fn overlap_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.pulses.len();
        for i in 0..n {
            let a = &self.pulses[i];
            let a_end = a.effective_end(0.1);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let b = &self.pulses[j];
                let b_start = if b.start >= a.start { b.start } else { b.start + self.period };
                if j > i || b.start < a.start {
                    if b_start < a_end {
                        out.push(format!(
                            "pulse {i} envelope (ends {:.3e} s) overlaps pulse {j} (starts {:.3e} s)",
                            a_end, b_start
                        ));
                    }
                }
            }
        }
        out
    }
}
