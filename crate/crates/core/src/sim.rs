//! Seeded Monte Carlo generation of detection time tags.
//!
//! A single emitter alternates between a ground electron spin and an
//! optional exciton (hole spin plus a scheduled decay time). Electrical
//! drive produces captures as an inhomogeneous Poisson process over the
//! pulse envelope; optical pulses excite from the matching ground spin.
//! Each decay emits one photon at a transition frequency, which then passes
//! collection, splitter, filter and detector efficiency. Background
//! emitters, dark counts and dead time are layered on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    zeeman_transitions, CavityParams, ElectronSpin, FilterChain, HoleSpin, LineShape, Profile,
    TransitionLabel, TransitionSet, ZeemanConfig,
};
use crate::tagstore::{flags, seconds_to_ticks, TagRecord, TagSource, TagStream};
use crate::timeline::{PulseKind, Timeline};

/// Single-emitter parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitterModel {
    pub zeeman: ZeemanConfig,
    /// Cavity weighting of decay channels; `None` weights them equally.
    pub cavity: Option<CavityParams>,
    /// Lifetime after electrical capture, seconds.
    pub tau_el: f64,
    /// Lifetime after optical excitation, seconds.
    pub tau_opt: f64,
    /// Captures per second at unit electrical drive.
    pub capture_rate: f64,
    /// Excitation probability per optical pulse at exact resonance.
    pub optical_peak_excitation: f64,
    /// Excitation profile; only the width matters, the centre is taken
    /// from each transition.
    pub excitation_lineshape: LineShape,
    /// Probability weight of spin-conserving decay before cavity weighting.
    pub intrinsic_branching: f64,
    /// Ground-spin relaxation time, seconds (infinite by default).
    pub spin_t1: f64,
    /// Probability that an electrical capture creates a spin-up hole.
    pub hole_populate_up_prob: f64,
}

impl Default for EmitterModel {
    fn default() -> Self {
        Self {
            zeeman: ZeemanConfig::default(),
            cavity: None,
            tau_el: 570e-9,
            tau_opt: 431e-9,
            capture_rate: 0.0,
            optical_peak_excitation: 0.0,
            excitation_lineshape: LineShape::new(0.0, 1.0, Profile::Lorentzian { fwhm: 2.08e9 }),
            intrinsic_branching: 0.5,
            spin_t1: f64::INFINITY,
            hole_populate_up_prob: 0.5,
        }
    }
}

impl EmitterModel {
    pub fn validate(&self) -> Result<()> {
        self.zeeman.validate()?;
        if let Some(c) = &self.cavity {
            c.validate()?;
        }
        if !(self.tau_el > 0.0 && self.tau_opt > 0.0) {
            return Err(Error::invalid("lifetimes must be > 0"));
        }
        if !(self.capture_rate >= 0.0 && self.capture_rate.is_finite()) {
            return Err(Error::invalid("capture_rate must be finite and >= 0"));
        }
        for (name, p) in [
            ("optical_peak_excitation", self.optical_peak_excitation),
            ("intrinsic_branching", self.intrinsic_branching),
            ("hole_populate_up_prob", self.hole_populate_up_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} must be in [0, 1]")));
            }
        }
        if !(self.spin_t1 > 0.0) {
            return Err(Error::invalid("spin_t1 must be > 0"));
        }
        self.excitation_lineshape.validate()
    }

    pub fn transitions(&self) -> TransitionSet {
        zeeman_transitions(&self.zeeman)
    }

    /// Probability of decaying into each transition from `hole`, as
    /// `(label, probability)` for the two candidates.
    pub fn decay_branches(&self, hole: HoleSpin) -> [(TransitionLabel, f64); 2] {
        let set = self.transitions();
        let mut out = [(TransitionLabel::A, 0.0); 2];
        for (slot, t) in out.iter_mut().zip(set.from_hole(hole)) {
            let intrinsic = if t.label.is_spin_conserving() {
                self.intrinsic_branching
            } else {
                1.0 - self.intrinsic_branching
            };
            let cavity = self.cavity.as_ref().map_or(1.0, |c| c.purcell_weight(t.frequency));
            *slot = (t.label, intrinsic * cavity);
        }
        let total = out[0].1 + out[1].1;
        if total > 0.0 {
            out[0].1 /= total;
            out[1].1 /= total;
        } else {
            out[0].1 = 0.5;
            out[1].1 = 0.5;
        }
        out
    }

    /// Excitation probability per transition from `ground` for a laser at
    /// `laser`; the total is capped at one.
    pub fn optical_excitation(&self, ground: ElectronSpin, laser: f64) -> [(TransitionLabel, f64); 2] {
        let set = self.transitions();
        let shape = self.excitation_lineshape.normalized();
        let mut out = [(TransitionLabel::A, 0.0); 2];
        for (slot, t) in out.iter_mut().zip(set.from_ground(ground)) {
            *slot = (
                t.label,
                self.optical_peak_excitation * shape.profile.unit(laser - t.frequency),
            );
        }
        let total = out[0].1 + out[1].1;
        if total > 1.0 {
            out[0].1 /= total;
            out[1].1 /= total;
        }
        out
    }

    /// Probability that the ground spin ends up down after one capture and
    /// decay, independent of the spin before capture.
    pub fn post_capture_down_probability(&self) -> f64 {
        let mut p = 0.0;
        for (hole, w) in [
            (HoleSpin::Up, self.hole_populate_up_prob),
            (HoleSpin::Down, 1.0 - self.hole_populate_up_prob),
        ] {
            for (label, b) in self.decay_branches(hole) {
                if label.spins().0 == ElectronSpin::Down {
                    p += w * b;
                }
            }
        }
        p
    }
}

/// Spectrum of background photons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundSpectrum {
    /// Inside every filter passband: transmitted with probability one.
    #[default]
    InBand,
    /// Uniform over `[lo, hi]` hertz.
    Uniform { lo: f64, hi: f64 },
    /// Drawn from a line profile.
    Line(LineShape),
}

impl BackgroundSpectrum {
    fn sample<R: Rng>(&self, rng: &mut R) -> Option<f64> {
        match *self {
            BackgroundSpectrum::InBand => None,
            BackgroundSpectrum::Uniform { lo, hi } => Some(rng.gen_range(lo..=hi)),
            BackgroundSpectrum::Line(line) => Some(line.center + sample_profile(&line.profile, rng)),
        }
    }
}

fn sample_profile<R: Rng>(profile: &Profile, rng: &mut R) -> f64 {
    match *profile {
        Profile::Lorentzian { fwhm } => Cauchy::new(0.0, fwhm / 2.0).unwrap().sample(rng),
        Profile::Gaussian { sigma } => Normal::new(0.0, sigma).unwrap().sample(rng),
        Profile::GlProduct { sigma, fwhm_l } => {
            // The Lorentzian factor is at most one: rejection from the Gaussian.
            let normal = Normal::new(0.0, sigma).unwrap();
            loop {
                let x: f64 = normal.sample(rng);
                let u = 2.0 * x / fwhm_l;
                if rng.gen::<f64>() * (1.0 + u * u) < 1.0 {
                    return x;
                }
            }
        }
    }
}

/// A memoryless background population excited by every pulse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPopulation {
    /// Mean photons per electrical pulse entering the collection optics.
    pub el_rate: f64,
    /// Mean photons per optical pulse entering the collection optics.
    pub opt_rate: f64,
    /// Emission delay after the commanded pulse end, seconds.
    pub lifetime: f64,
    #[serde(default)]
    pub spectrum: BackgroundSpectrum,
}

/// Short-lived emission following each electrical pulse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FastDecay {
    /// Mean photons per electrical pulse.
    pub amplitude: f64,
    pub lifetime: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BackgroundModel {
    pub populations: Vec<BackgroundPopulation>,
    pub fast_decay: Option<FastDecay>,
}

impl BackgroundModel {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.populations {
            if !(p.el_rate >= 0.0 && p.opt_rate >= 0.0) {
                return Err(Error::invalid("background rates must be >= 0"));
            }
            if !(p.lifetime > 0.0) {
                return Err(Error::invalid("background lifetime must be > 0"));
            }
            if let BackgroundSpectrum::Line(l) = &p.spectrum {
                l.validate()?;
            }
        }
        if let Some(f) = &self.fast_decay {
            if !(f.amplitude >= 0.0 && f.lifetime > 0.0) {
                return Err(Error::invalid("fast decay needs amplitude >= 0 and lifetime > 0"));
            }
        }
        Ok(())
    }
}

/// One detector behind the splitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorChannel {
    /// Probability that a collected photon is routed to this detector.
    pub probability: f64,
    pub filter: Option<FilterChain>,
    pub efficiency: f64,
    /// Dark counts per second.
    pub dark_rate: f64,
    /// Non-paralyzable dead time, seconds.
    pub dead_time: f64,
}

impl DetectorChannel {
    pub fn new(probability: f64, efficiency: f64) -> Self {
        Self {
            probability,
            filter: None,
            efficiency,
            dark_rate: 0.0,
            dead_time: 0.0,
        }
    }

    pub fn with_filter(mut self, filter: FilterChain) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn with_dark_rate(mut self, rate: f64) -> Self {
        self.dark_rate = rate;
        self
    }

    pub fn with_dead_time(mut self, dead_time: f64) -> Self {
        self.dead_time = dead_time;
        self
    }

    /// Transmission of the channel filter (one without filter or for
    /// in-band photons).
    pub fn transmission(&self, frequency: Option<f64>) -> f64 {
        match (&self.filter, frequency) {
            (Some(f), Some(nu)) => f.transmission(nu),
            _ => 1.0,
        }
    }
}

/// Collection optics, splitter and detectors. Channel `i` of the output
/// stream is `channels[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorChain {
    pub collection_efficiency: f64,
    pub channels: Vec<DetectorChannel>,
    /// Tag resolution, picoseconds per tick.
    pub resolution_ps: u64,
}

impl DetectorChain {
    /// Two-detector Hanbury-Brown-Twiss arrangement behind a 50:50 splitter.
    pub fn hbt(collection_efficiency: f64, channel: DetectorChannel) -> Self {
        let half = DetectorChannel {
            probability: 0.5,
            ..channel
        };
        Self {
            collection_efficiency,
            channels: vec![half.clone(), half],
            resolution_ps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution_ps == 0 {
            return Err(Error::invalid("zero tag resolution"));
        }
        if !(0.0..=1.0).contains(&self.collection_efficiency) {
            return Err(Error::invalid("collection_efficiency must be in [0, 1]"));
        }
        if self.channels.is_empty() || self.channels.len() > 256 {
            return Err(Error::invalid("need between 1 and 256 detector channels"));
        }
        let mut total = 0.0;
        for c in &self.channels {
            if !(0.0..=1.0).contains(&c.probability) || !(0.0..=1.0).contains(&c.efficiency) {
                return Err(Error::invalid("splitter probability and efficiency must be in [0, 1]"));
            }
            if !(c.dark_rate >= 0.0 && c.dead_time >= 0.0) {
                return Err(Error::invalid("dark_rate and dead_time must be >= 0"));
            }
            if let Some(f) = &c.filter {
                f.validate()?;
            }
            total += c.probability;
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::invalid("splitter probabilities sum above one"));
        }
        Ok(())
    }
}

/// Spin bookkeeping around one electrical pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpinLogEntry {
    pub cycle: u64,
    pub pulse: usize,
    /// Ground spin at the pulse start; `None` if still excited.
    pub before: Option<ElectronSpin>,
    /// Emitter decays between this electrical pulse and the next one.
    pub emissions: u32,
    /// Ground spin at the next electrical pulse start; `None` if excited.
    pub after: Option<ElectronSpin>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    pub log_spins: bool,
}

/// Photon totals before detection, by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EmissionTally {
    pub emitter: u64,
    pub background: u64,
    pub fast_decay: u64,
    pub dark: u64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub stream: TagStream,
    pub warnings: Vec<String>,
    pub tally: EmissionTally,
    pub spin_log: Vec<SpinLogEntry>,
}

/// Runs the Monte Carlo and returns the detected tag stream.
pub fn simulate(
    model: &EmitterModel,
    bg: &BackgroundModel,
    timeline: &Timeline,
    det: &DetectorChain,
    seed: u64,
) -> Result<TagStream> {
    Ok(simulate_with(model, bg, timeline, det, seed, SimOptions::default())?.stream)
}

#[derive(Debug, Clone, Copy)]
enum Event {
    /// Electrical capture attempt at absolute time.
    Capture(f64),
    /// Optical excitation attempt at absolute time with laser frequency.
    Optical(f64, f64),
    /// Start of electrical pulse `usize` (spin logging only).
    PulseStart(f64, usize),
}

impl Event {
    fn time(&self) -> f64 {
        match *self {
            Event::Capture(t) | Event::Optical(t, _) | Event::PulseStart(t, _) => t,
        }
    }
}

struct Photon {
    time: f64,
    frequency: Option<f64>,
    flags: u8,
}

struct Emitter<'a> {
    model: &'a EmitterModel,
    transitions: TransitionSet,
    branches: [[(TransitionLabel, f64); 2]; 2],
    ground: ElectronSpin,
    excited: Option<(HoleSpin, f64)>,
    last_relax: f64,
    decays: u64,
}

impl<'a> Emitter<'a> {
    fn new<R: Rng>(model: &'a EmitterModel, rng: &mut R) -> Self {
        Self {
            model,
            transitions: model.transitions(),
            branches: [
                model.decay_branches(HoleSpin::Down),
                model.decay_branches(HoleSpin::Up),
            ],
            ground: if rng.gen::<bool>() {
                ElectronSpin::Up
            } else {
                ElectronSpin::Down
            },
            excited: None,
            last_relax: 0.0,
            decays: 0,
        }
    }

    /// Completes a pending decay scheduled at or before `until`.
    fn settle<R: Rng>(&mut self, until: f64, rng: &mut R, out: &mut Vec<Photon>) {
        if let Some((hole, at)) = self.excited {
            if at <= until {
                let b = &self.branches[hole as usize];
                let label = if rng.gen::<f64>() < b[0].1 { b[0].0 } else { b[1].0 };
                self.ground = label.spins().0;
                self.excited = None;
                self.last_relax = at;
                self.decays += 1;
                out.push(Photon {
                    time: at,
                    frequency: Some(self.transitions.frequency(label)),
                    flags: flags::encode(TagSource::Emitter, Some(label)),
                });
            }
        }
    }

    fn relax<R: Rng>(&mut self, t: f64, rng: &mut R) {
        if self.excited.is_some() || !self.model.spin_t1.is_finite() {
            return;
        }
        let dt = t - self.last_relax;
        if dt > 0.0 {
            let p = 0.5 * -(-2.0 * dt / self.model.spin_t1).exp_m1();
            if rng.gen::<f64>() < p {
                self.ground = self.ground.flipped();
            }
            self.last_relax = t;
        }
    }

    fn excite(&mut self, hole: HoleSpin, t: f64, lifetime: f64, rng: &mut ChaCha8Rng) {
        let wait: f64 = Exp1.sample(rng);
        self.excited = Some((hole, t + wait * lifetime));
    }

    fn spin(&self) -> Option<ElectronSpin> {
        self.excited.is_none().then_some(self.ground)
    }
}

/// Runs the Monte Carlo with diagnostics.
pub fn simulate_with(
    model: &EmitterModel,
    bg: &BackgroundModel,
    timeline: &Timeline,
    det: &DetectorChain,
    seed: u64,
    options: SimOptions,
) -> Result<SimOutput> {
    model.validate()?;
    bg.validate()?;
    det.validate()?;
    let res = det.resolution_ps;
    let total_ticks = seconds_to_ticks(timeline.total_time(), res);
    let period = timeline.period();
    let cycles = timeline.cycle_count();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut emitter = Emitter::new(model, &mut rng);
    let mut photons: Vec<Photon> = Vec::new();
    let mut events: Vec<Event> = Vec::new();
    let mut tally = EmissionTally::default();
    let mut spin_log = Vec::new();
    let mut open_log: Option<SpinLogEntry> = None;
    let mut decays_at_open = 0u64;

    let bg_el: Vec<(&BackgroundPopulation, Option<Poisson<f64>>)> = bg
        .populations
        .iter()
        .map(|p| (p, (p.el_rate > 0.0).then(|| Poisson::new(p.el_rate).unwrap())))
        .collect();
    let bg_opt: Vec<(&BackgroundPopulation, Option<Poisson<f64>>)> = bg
        .populations
        .iter()
        .map(|p| (p, (p.opt_rate > 0.0).then(|| Poisson::new(p.opt_rate).unwrap())))
        .collect();
    let fast = bg
        .fast_decay
        .filter(|f| f.amplitude > 0.0)
        .map(|f| (f, Poisson::new(f.amplitude).unwrap()));

    for cycle in 0..cycles {
        let base = cycle as f64 * period;
        events.clear();
        for (index, pulse) in timeline.pulses().iter().enumerate() {
            match pulse.kind {
                PulseKind::Electrical => {
                    if options.log_spins {
                        events.push(Event::PulseStart(base + pulse.start, index));
                    }
                    if model.capture_rate > 0.0 && pulse.amplitude > 0.0 {
                        let mut target = 0.0;
                        loop {
                            let e: f64 = Exp1.sample(&mut rng);
                            target += e / model.capture_rate;
                            match pulse.invert_cumulative(target, pulse.start, period) {
                                Some(t) => events.push(Event::Capture(base + t)),
                                None => break,
                            }
                        }
                    }
                    let end = base + pulse.end();
                    for (pop, dist) in &bg_el {
                        if let Some(d) = dist {
                            let n = d.sample(&mut rng) as u64;
                            for _ in 0..n {
                                let e: f64 = Exp1.sample(&mut rng);
                                photons.push(Photon {
                                    time: end + e * pop.lifetime,
                                    frequency: pop.spectrum.sample(&mut rng),
                                    flags: flags::encode(TagSource::Background, None),
                                });
                                tally.background += 1;
                            }
                        }
                    }
                    if let Some((f, d)) = &fast {
                        let n = d.sample(&mut rng) as u64;
                        for _ in 0..n {
                            let e: f64 = Exp1.sample(&mut rng);
                            photons.push(Photon {
                                time: end + e * f.lifetime,
                                frequency: None,
                                flags: flags::encode(TagSource::FastDecay, None),
                            });
                            tally.fast_decay += 1;
                        }
                    }
                }
                PulseKind::Optical { laser_frequency } => {
                    if model.optical_peak_excitation > 0.0 {
                        let t = base + pulse.start + rng.gen::<f64>() * pulse.duration;
                        events.push(Event::Optical(t, laser_frequency));
                    }
                    let end = base + pulse.end();
                    for (pop, dist) in &bg_opt {
                        if let Some(d) = dist {
                            let n = d.sample(&mut rng) as u64;
                            for _ in 0..n {
                                let e: f64 = Exp1.sample(&mut rng);
                                photons.push(Photon {
                                    time: end + e * pop.lifetime,
                                    frequency: pop.spectrum.sample(&mut rng),
                                    flags: flags::encode(TagSource::Background, None),
                                });
                                tally.background += 1;
                            }
                        }
                    }
                }
            }
        }
        events.sort_by(|a, b| a.time().total_cmp(&b.time()));

        for ev in &events {
            let t = ev.time();
            emitter.settle(t, &mut rng, &mut photons);
            emitter.relax(t, &mut rng);
            match *ev {
                Event::PulseStart(_, index) => {
                    if let Some(mut entry) = open_log.take() {
                        entry.after = emitter.spin();
                        entry.emissions = (emitter.decays - decays_at_open) as u32;
                        spin_log.push(entry);
                    }
                    open_log = Some(SpinLogEntry {
                        cycle,
                        pulse: index,
                        before: emitter.spin(),
                        emissions: 0,
                        after: None,
                    });
                    decays_at_open = emitter.decays;
                }
                Event::Capture(_) => {
                    if emitter.excited.is_none() {
                        let hole = if rng.gen::<f64>() < model.hole_populate_up_prob {
                            HoleSpin::Up
                        } else {
                            HoleSpin::Down
                        };
                        emitter.excite(hole, t, model.tau_el, &mut rng);
                    }
                }
                Event::Optical(_, laser) => {
                    if emitter.excited.is_none() {
                        let probs = model.optical_excitation(emitter.ground, laser);
                        let u: f64 = rng.gen();
                        let choice = if u < probs[0].1 {
                            Some(probs[0].0)
                        } else if u < probs[0].1 + probs[1].1 {
                            Some(probs[1].0)
                        } else {
                            None
                        };
                        if let Some(label) = choice {
                            emitter.excite(label.spins().1, t, model.tau_opt, &mut rng);
                        }
                    }
                }
            }
        }
    }
    emitter.settle(timeline.total_time(), &mut rng, &mut photons);
    tally.emitter = emitter.decays;

    let mut records = detect(&photons, det, &mut rng, res, total_ticks);
    drop(photons);
    for (ch, channel) in det.channels.iter().enumerate() {
        if channel.dark_rate > 0.0 {
            let mut dark_rng = ChaCha8Rng::seed_from_u64(seed);
            dark_rng.set_stream(ch as u64 + 1);
            let mut t = 0.0;
            loop {
                let e: f64 = Exp1.sample(&mut dark_rng);
                t += e / channel.dark_rate;
                let tick = seconds_to_ticks(t, res);
                if tick >= total_ticks {
                    break;
                }
                records.push(TagRecord {
                    time: tick,
                    channel: ch as u8,
                    flags: flags::encode(TagSource::Dark, None),
                });
                tally.dark += 1;
            }
        }
    }
    records.sort_unstable();
    let records = apply_dead_time(records, det);
    let stream = TagStream::new(res, det.channels.len() as u32, total_ticks, records)?;

    let mut warnings = Vec::new();
    let counts = stream.counts_per_channel();
    for (ch, channel) in det.channels.iter().enumerate() {
        if counts[ch] > 0 && channel.dead_time > stream.total_time() / counts[ch] as f64 {
            let msg = format!(
                "channel {ch}: dead time {:e} s exceeds the mean interval between counts",
                channel.dead_time
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(SimOutput {
        stream,
        warnings,
        tally,
        spin_log,
    })
}

fn detect(
    photons: &[Photon],
    det: &DetectorChain,
    rng: &mut ChaCha8Rng,
    res: u64,
    total_ticks: u64,
) -> Vec<TagRecord> {
    let mut records = Vec::with_capacity(photons.len() / 4);
    for ph in photons {
        if rng.gen::<f64>() >= det.collection_efficiency {
            continue;
        }
        let mut u: f64 = rng.gen();
        let Some(ch) = det.channels.iter().position(|c| {
            if u < c.probability {
                true
            } else {
                u -= c.probability;
                false
            }
        }) else {
            continue;
        };
        let channel = &det.channels[ch];
        let pass = channel.transmission(ph.frequency) * channel.efficiency;
        if rng.gen::<f64>() >= pass {
            continue;
        }
        let tick = seconds_to_ticks(ph.time, res);
        if tick < total_ticks {
            records.push(TagRecord {
                time: tick,
                channel: ch as u8,
                flags: ph.flags,
            });
        }
    }
    records
}

/// Drops tags arriving within the dead time of the last kept tag on the
/// same channel.
fn apply_dead_time(records: Vec<TagRecord>, det: &DetectorChain) -> Vec<TagRecord> {
    let dead: Vec<u64> = det
        .channels
        .iter()
        .map(|c| seconds_to_ticks(c.dead_time, det.resolution_ps))
        .collect();
    if dead.iter().all(|&d| d == 0) {
        return records;
    }
    let mut last: Vec<Option<u64>> = vec![None; dead.len()];
    records
        .into_iter()
        .filter(|r| {
            let ch = r.channel as usize;
            match last[ch] {
                Some(prev) if r.time - prev < dead[ch] => false,
                _ => {
                    last[ch] = Some(r.time);
                    true
                }
            }
        })
        .collect()
}

/// Expected emission probability of every pulse over `cycles` periods,
/// from the two-state ground-spin Markov chain starting unpolarized.
/// Re-excitation within an electrical pulse is neglected and each exciton
/// is assumed to decay before the next pulse.
pub fn steady_state_spin_scan(
    model: &EmitterModel,
    timeline: &Timeline,
    laser: f64,
    cycles: usize,
) -> Result<Vec<f64>> {
    model.validate()?;
    let timeline = timeline.with_laser(laser);
    let down_after_capture = model.post_capture_down_probability();
    let flip_given = |hole: HoleSpin| -> [f64; 2] {
        // Probability of ending in (Down, Up) after decaying from `hole`.
        let mut p = [0.0; 2];
        for (label, w) in model.decay_branches(hole) {
            p[label.spins().0.index()] += w;
        }
        p
    };
    let from_down_hole = flip_given(HoleSpin::Down);
    let from_up_hole = flip_given(HoleSpin::Up);
    let mut pi = [0.5, 0.5];
    let mut last_time = 0.0;
    let mut out = Vec::with_capacity(cycles * timeline.pulses().len());
    for cycle in 0..cycles {
        for pulse in timeline.pulses() {
            let t = cycle as f64 * timeline.period() + pulse.start;
            if model.spin_t1.is_finite() {
                let p = 0.5 * -(-2.0 * (t - last_time) / model.spin_t1).exp_m1();
                pi = [pi[0] * (1.0 - p) + pi[1] * p, pi[1] * (1.0 - p) + pi[0] * p];
            }
            last_time = t;
            match pulse.kind {
                PulseKind::Electrical => {
                    let pc = -(-model.capture_rate * pulse.area()).exp_m1();
                    out.push(pc);
                    pi = [
                        pi[0] * (1.0 - pc) + pc * down_after_capture,
                        pi[1] * (1.0 - pc) + pc * (1.0 - down_after_capture),
                    ];
                }
                PulseKind::Optical { laser_frequency } => {
                    let mut next = [0.0; 2];
                    let mut emit = 0.0;
                    for spin in [ElectronSpin::Down, ElectronSpin::Up] {
                        let mass = pi[spin.index()];
                        let mut stay = 1.0;
                        for (label, p) in model.optical_excitation(spin, laser_frequency) {
                            stay -= p;
                            emit += mass * p;
                            let dest = match label.spins().1 {
                                HoleSpin::Down => from_down_hole,
                                HoleSpin::Up => from_up_hole,
                            };
                            next[0] += mass * p * dest[0];
                            next[1] += mass * p * dest[1];
                        }
                        next[spin.index()] += mass * stay;
                    }
                    out.push(emit);
                    pi = next;
                }
            }
        }
    }
    Ok(out)
}

/// Finds the capture rate for which the mean detected count rate (all
/// channels) matches `target_rate`, by bisection in log space on short
/// simulations with a fixed seed.
pub fn calibrate_capture_rate(
    model: &EmitterModel,
    bg: &BackgroundModel,
    timeline: &Timeline,
    det: &DetectorChain,
    target_rate: f64,
    seed: u64,
) -> Result<f64> {
    let rate_at = |capture: f64| -> Result<f64> {
        let m = EmitterModel {
            capture_rate: capture,
            ..model.clone()
        };
        let s = simulate(&m, bg, timeline, det, seed)?;
        Ok(s.len() as f64 / s.total_time())
    };
    let floor = rate_at(0.0)?;
    if target_rate <= floor {
        return Err(Error::invalid(format!(
            "target rate {target_rate} is below the background-only rate {floor}"
        )));
    }
    let (mut lo, mut hi) = (1e2f64, 1e10f64);
    if rate_at(hi)? < target_rate {
        return Err(Error::invalid("target rate unreachable at any capture rate"));
    }
    for _ in 0..40 {
        let mid = (lo * hi).sqrt();
        if rate_at(mid)? < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.001 {
            break;
        }
    }
    Ok((lo * hi).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DEFAULT_NU0;
    use crate::timeline::PulseSpec;

    fn el_timeline(total: f64) -> Timeline {
        Timeline::new(4e-6, total, vec![PulseSpec::electrical(0.0, 150e-9)]).unwrap()
    }

    fn single_channel() -> DetectorChain {
        DetectorChain {
            collection_efficiency: 1.0,
            channels: vec![DetectorChannel::new(1.0, 1.0)],
            resolution_ps: 1,
        }
    }

    #[test]
    fn dark_counts_only() {
        let det = DetectorChain::hbt(1.0, DetectorChannel::new(0.5, 1.0).with_dark_rate(100.0));
        let s = simulate(
            &EmitterModel::default(),
            &BackgroundModel::none(),
            &el_timeline(100.0),
            &det,
            1,
        )
        .unwrap();
        for c in s.counts_per_channel() {
            assert!((c as f64 - 1e4).abs() < 5.0 * 100.0, "{c}");
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let model = EmitterModel {
            capture_rate: 2e7,
            ..Default::default()
        };
        let det = DetectorChain::hbt(0.5, DetectorChannel::new(0.5, 1.0).with_dark_rate(1e3));
        let tl = el_timeline(0.05);
        let a = simulate(&model, &BackgroundModel::none(), &tl, &det, 7).unwrap();
        let b = simulate(&model, &BackgroundModel::none(), &tl, &det, 7).unwrap();
        let c = simulate(&model, &BackgroundModel::none(), &tl, &det, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dead_time_respected() {
        let model = EmitterModel {
            capture_rate: 1e8,
            tau_el: 20e-9,
            ..Default::default()
        };
        let det = DetectorChain {
            collection_efficiency: 1.0,
            channels: vec![DetectorChannel::new(1.0, 1.0).with_dead_time(100e-9).with_dark_rate(1e5)],
            resolution_ps: 1,
        };
        let s = simulate(&model, &BackgroundModel::none(), &el_timeline(0.01), &det, 3).unwrap();
        assert!(s.records().windows(2).all(|w| w[1].time - w[0].time >= 100_000));
    }

    #[test]
    fn emitter_frequencies_are_transitions() {
        let model = EmitterModel {
            capture_rate: 1e7,
            zeeman: ZeemanConfig {
                b_field: 0.35,
                g_hole: 1.18,
                ..Default::default()
            },
            ..Default::default()
        };
        let s = simulate(
            &model,
            &BackgroundModel::none(),
            &el_timeline(0.01),
            &single_channel(),
            5,
        )
        .unwrap();
        assert!(!s.is_empty());
        assert!(s
            .records()
            .iter()
            .all(|r| flags::source(r.flags) == TagSource::Emitter && flags::transition(r.flags).is_some()));
    }

    #[test]
    fn conserving_branching_gives_constant_emission() {
        let model = EmitterModel {
            intrinsic_branching: 1.0,
            optical_peak_excitation: 1.0,
            excitation_lineshape: LineShape::new(0.0, 1.0, Profile::Gaussian { sigma: 1e6 }),
            zeeman: ZeemanConfig {
                b_field: 0.35,
                g_hole: 1.18,
                ..Default::default()
            },
            ..Default::default()
        };
        let f = model.transitions().frequency(TransitionLabel::B);
        let tl = Timeline::new(2e-6, 1e-3, vec![PulseSpec::optical(0.0, 100e-9, f)]).unwrap();
        let seq = steady_state_spin_scan(&model, &tl, f, 20).unwrap();
        assert!(seq.iter().all(|p| (p - seq[0]).abs() < 1e-12));
    }

    #[test]
    fn half_branching_halves_each_pulse() {
        let model = EmitterModel {
            intrinsic_branching: 0.5,
            optical_peak_excitation: 1.0,
            excitation_lineshape: LineShape::new(0.0, 1.0, Profile::Gaussian { sigma: 1e6 }),
            zeeman: ZeemanConfig {
                b_field: 0.35,
                g_hole: 1.18,
                ..Default::default()
            },
            ..Default::default()
        };
        let f = model.transitions().frequency(TransitionLabel::B);
        let tl = Timeline::new(2e-6, 1e-3, vec![PulseSpec::optical(0.0, 100e-9, f)]).unwrap();
        let seq = steady_state_spin_scan(&model, &tl, f, 10).unwrap();
        for (k, p) in seq.iter().enumerate() {
            assert!((p - 0.5f64.powi(k as i32 + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn electrical_pulse_restores_emission() {
        let model = EmitterModel {
            intrinsic_branching: 0.5,
            optical_peak_excitation: 1.0,
            capture_rate: 3e7,
            zeeman: ZeemanConfig {
                b_field: 0.35,
                g_hole: 1.18,
                ..Default::default()
            },
            ..Default::default()
        };
        for label in TransitionLabel::ALL {
            let f = model.transitions().frequency(label);
            let tl = Timeline::new(
                6e-6,
                1e-3,
                vec![
                    PulseSpec::electrical(0.0, 150e-9),
                    PulseSpec::optical(3e-6, 100e-9, f),
                ],
            )
            .unwrap();
            let seq = steady_state_spin_scan(&model, &tl, f, 200).unwrap();
            let optical_last = seq[seq.len() - 1];
            assert!(optical_last > 0.3, "{label:?}: {optical_last}");
        }
    }

    #[test]
    fn mc_matches_markov_chain_without_cavity() {
        let model = EmitterModel {
            intrinsic_branching: 0.7,
            optical_peak_excitation: 0.8,
            tau_opt: 50e-9,
            zeeman: ZeemanConfig {
                b_field: 0.35,
                g_hole: 1.18,
                nu0: DEFAULT_NU0,
                ..Default::default()
            },
            ..Default::default()
        };
        let f = model.transitions().frequency(TransitionLabel::C);
        let tl = Timeline::new(2e-6, 1e-3, vec![PulseSpec::optical(0.0, 100e-9, f)]).unwrap();
        let expect = steady_state_spin_scan(&model, &tl, f, 3).unwrap();
        let mut counts = [0u32; 3];
        let runs = 4000;
        for seed in 0..runs {
            let tl = Timeline::new(2e-6, 6e-6, tl.pulses().to_vec()).unwrap();
            let s = simulate(&model, &BackgroundModel::none(), &tl, &single_channel(), seed).unwrap();
            for r in s.records() {
                counts[(r.time / 2_000_000) as usize] += 1;
            }
        }
        for k in 0..3 {
            let p = counts[k] as f64 / runs as f64;
            let sigma = (expect[k] * (1.0 - expect[k]) / runs as f64).sqrt();
            assert!((p - expect[k]).abs() < 5.0 * sigma, "pulse {k}: {p} vs {}", expect[k]);
        }
    }
}
