//! Closed-form emitter physics: Zeeman transition structure, cavity
//! (Purcell) lifetime enhancement, spectral lineshapes and filter chains.
//!
//! Frequencies are absolute hertz unless a name says otherwise.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Bohr magneton over Planck constant, in Hz/T.
pub const MU_B_OVER_H: f64 = 13.996245e9;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Zero-field ZPL frequency of the studied centre (226.148 THz).
pub const DEFAULT_NU0: f64 = 226.148e12;

/// Electron g-factor used when none is supplied. Literature-typical value;
/// the hole g-factor is the one extracted from spectra.
pub const DEFAULT_G_ELECTRON: f64 = 2.005;

/// Converts a vacuum wavelength (metres) to frequency (hertz).
pub fn wavelength_to_frequency(lambda: f64) -> f64 {
    SPEED_OF_LIGHT / lambda
}

/// Converts a wavelength interval around `center` (both metres) into a
/// frequency interval (hertz), first order in `width / center`.
pub fn wavelength_width_to_frequency(center: f64, width: f64) -> f64 {
    SPEED_OF_LIGHT * width / (center * center)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeemanConfig {
    /// Magnetic flux density, tesla.
    pub b_field: f64,
    pub g_electron: f64,
    pub g_hole: f64,
    /// Zero-field transition frequency, hertz.
    pub nu0: f64,
}

impl Default for ZeemanConfig {
    fn default() -> Self {
        Self {
            b_field: 0.0,
            g_electron: DEFAULT_G_ELECTRON,
            g_hole: 1.18,
            nu0: DEFAULT_NU0,
        }
    }
}

impl ZeemanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_field >= 0.0) {
            return Err(Error::invalid("b_field must be >= 0"));
        }
        if !(self.g_electron > 0.0 && self.g_hole > 0.0) {
            return Err(Error::invalid("g factors must be > 0"));
        }
        if !(self.nu0 > 0.0) {
            return Err(Error::invalid("nu0 must be > 0"));
        }
        Ok(())
    }

    /// Ground-state (electron) splitting, hertz.
    pub fn electron_splitting(&self) -> f64 {
        self.g_electron * MU_B_OVER_H * self.b_field
    }

    /// Excited-state (hole) splitting, hertz.
    pub fn hole_splitting(&self) -> f64 {
        self.g_hole * MU_B_OVER_H * self.b_field
    }
}

/// Ground-state electron spin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ElectronSpin {
    Down,
    Up,
}

impl ElectronSpin {
    pub fn flipped(self) -> Self {
        match self {
            Self::Down => Self::Up,
            Self::Up => Self::Down,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Self::Down => 0,
            Self::Up => 1,
        }
    }
}

/// Excited-state hole spin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HoleSpin {
    Down,
    Up,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransitionLabel {
    A,
    B,
    C,
    D,
}

impl TransitionLabel {
    pub const ALL: [TransitionLabel; 4] = [Self::A, Self::B, Self::C, Self::D];

    pub fn index(self) -> usize {
        self as usize
    }

    /// (ground, excited) spin pair connected by this transition.
    pub fn spins(self) -> (ElectronSpin, HoleSpin) {
        match self {
            Self::A => (ElectronSpin::Up, HoleSpin::Down),
            Self::B => (ElectronSpin::Down, HoleSpin::Down),
            Self::C => (ElectronSpin::Up, HoleSpin::Up),
            Self::D => (ElectronSpin::Down, HoleSpin::Up),
        }
    }

    /// B and C connect parallel electron and hole spins.
    pub fn is_spin_conserving(self) -> bool {
        matches!(self, Self::B | Self::C)
    }

    pub fn from_spins(ground: ElectronSpin, hole: HoleSpin) -> Self {
        match (ground, hole) {
            (ElectronSpin::Up, HoleSpin::Down) => Self::A,
            (ElectronSpin::Down, HoleSpin::Down) => Self::B,
            (ElectronSpin::Up, HoleSpin::Up) => Self::C,
            (ElectronSpin::Down, HoleSpin::Up) => Self::D,
        }
    }

    pub fn as_char(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub label: TransitionLabel,
    pub frequency: f64,
    /// `frequency - nu0`, computed without the absolute offset.
    pub detuning: f64,
    pub ground_spin: ElectronSpin,
    pub hole_spin: HoleSpin,
}

/// The four optical transitions, stored in label order A, B, C, D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub transitions: [Transition; 4],
}

impl TransitionSet {
    pub fn get(&self, label: TransitionLabel) -> &Transition {
        &self.transitions[label.index()]
    }

    pub fn frequency(&self, label: TransitionLabel) -> f64 {
        self.get(label).frequency
    }

    pub fn frequencies(&self) -> [f64; 4] {
        self.transitions.map(|t| t.frequency)
    }

    /// Detunings from `nu0` sorted ascending. These keep full relative
    /// precision at small fields, where absolute frequencies do not.
    pub fn sorted_detunings(&self) -> [f64; 4] {
        let mut f = self.transitions.map(|t| t.detuning);
        f.sort_by(f64::total_cmp);
        f
    }

    /// Frequencies sorted ascending.
    pub fn sorted_frequencies(&self) -> [f64; 4] {
        let mut f = self.frequencies();
        f.sort_by(f64::total_cmp);
        f
    }

    /// Labels sorted by frequency (stable for degenerate lines).
    pub fn labels_by_frequency(&self) -> [TransitionLabel; 4] {
        let mut labels = TransitionLabel::ALL;
        labels.sort_by(|a, b| self.frequency(*a).total_cmp(&self.frequency(*b)));
        labels
    }

    /// Transitions that start from the given ground spin.
    pub fn from_ground(&self, spin: ElectronSpin) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.ground_spin == spin)
    }

    /// Transitions that start from the given excited hole spin.
    pub fn from_hole(&self, spin: HoleSpin) -> impl Iterator<Item = &Transition> {
        self.transitions.iter().filter(move |t| t.hole_spin == spin)
    }
}

/// Builds the four Zeeman-split transitions.
///
/// With electron splitting `dE` and hole splitting `dH`:
/// `A = nu0 - (dE + dH)/2`, `C = nu0 - (dE - dH)/2`,
/// `B = nu0 + (dE - dH)/2`, `D = nu0 + (dE + dH)/2`.
pub fn zeeman_transitions(cfg: &ZeemanConfig) -> TransitionSet {
    let de = cfg.electron_splitting();
    let dh = cfg.hole_splitting();
    let offset = |label| match label {
        TransitionLabel::A => -(de + dh) / 2.0,
        TransitionLabel::B => (de - dh) / 2.0,
        TransitionLabel::C => -(de - dh) / 2.0,
        TransitionLabel::D => (de + dh) / 2.0,
    };
    let transitions = TransitionLabel::ALL.map(|label| {
        let (ground_spin, hole_spin) = label.spins();
        Transition {
            label,
            frequency: cfg.nu0 + offset(label),
            detuning: offset(label),
            ground_spin,
            hole_spin,
        }
    });
    TransitionSet { transitions }
}

/// Splittings and g-factor pair extracted from four fitted peak positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GFactorEstimate {
    /// Outer splitting `p4 - p1 = dE + dH`, hertz.
    pub split_sum: f64,
    /// Inner splitting `p3 - p2 = |dE - dH|`, hertz.
    pub split_diff: f64,
    /// `(larger, smaller)` g-factors; which one belongs to the hole is up
    /// to the caller.
    pub g_pair: (f64, f64),
    /// `|(p2 - p1) - (p4 - p3)|`, zero for an ideal four-line pattern.
    pub consistency_residual: f64,
}

/// Peak positions may be absolute or relative to any common reference.
pub fn g_factors_from_peaks(peaks: &[f64; 4], b_field: f64) -> Result<GFactorEstimate> {
    if !(b_field > 0.0) {
        return Err(Error::invalid("b_field must be > 0 to extract g-factors"));
    }
    if peaks.windows(2).any(|w| !(w[1] >= w[0])) {
        return Err(Error::invalid("peak positions must be sorted ascending"));
    }
    let split_sum = peaks[3] - peaks[0];
    let split_diff = peaks[2] - peaks[1];
    let unit = MU_B_OVER_H * b_field;
    Ok(GFactorEstimate {
        split_sum,
        split_diff,
        g_pair: (
            (split_sum + split_diff) / 2.0 / unit,
            (split_sum - split_diff) / 2.0 / unit,
        ),
        consistency_residual: ((peaks[1] - peaks[0]) - (peaks[3] - peaks[2])).abs(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityParams {
    pub q_factor: f64,
    /// Mode volume in units of (lambda/n)^3.
    pub mode_volume: f64,
    /// Cavity FWHM linewidth, hertz.
    pub kappa: f64,
    /// Cavity resonance, hertz.
    pub cavity_center: f64,
    pub debye_waller: f64,
    pub quantum_efficiency: f64,
}

impl CavityParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.q_factor,
            self.mode_volume,
            self.kappa,
            self.cavity_center,
            self.debye_waller,
            self.quantum_efficiency,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("cavity parameters must be positive"));
        }
        if self.debye_waller > 1.0 || self.quantum_efficiency > 1.0 {
            return Err(Error::invalid(
                "debye_waller and quantum_efficiency must be in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Effective Purcell factor `(3 / 4 pi^2) (Q / V) eta_DW eta_QE`.
    pub fn effective_purcell(&self) -> f64 {
        3.0 / (4.0 * PI * PI) * (self.q_factor / self.mode_volume)
            * self.debye_waller
            * self.quantum_efficiency
    }

    /// Cavity-enhanced radiative weight at `frequency`, `P_t / [1 + (2 D / kappa)^2]`.
    pub fn purcell_weight(&self, frequency: f64) -> f64 {
        let x = 2.0 * (frequency - self.cavity_center) / self.kappa;
        self.effective_purcell() / (1.0 + x * x)
    }
}

/// Lifetime ratio `tau_0 / tau_cav` for an emitter at `emitter_frequency`.
pub fn purcell_enhancement(cav: &CavityParams, emitter_frequency: f64) -> f64 {
    cav.purcell_weight(emitter_frequency) + 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// `fwhm` of the Lorentzian, hertz.
    Lorentzian { fwhm: f64 },
    /// Standard deviation, hertz.
    Gaussian { sigma: f64 },
    /// Gaussian (std `sigma`) times Lorentzian (FWHM `fwhm_l`), sharing a
    /// centre; peak height equals the amplitude.
    GlProduct { sigma: f64, fwhm_l: f64 },
}

impl Profile {
    /// Unit-height profile evaluated at offset `x` from the centre.
    pub fn unit(&self, x: f64) -> f64 {
        match *self {
            Profile::Lorentzian { fwhm } => lorentzian(x, fwhm),
            Profile::Gaussian { sigma } => gaussian(x, sigma),
            Profile::GlProduct { sigma, fwhm_l } => gaussian(x, sigma) * lorentzian(x, fwhm_l),
        }
    }

    fn widths(&self) -> [f64; 2] {
        match *self {
            Profile::Lorentzian { fwhm } => [fwhm, fwhm],
            Profile::Gaussian { sigma } => [sigma, sigma],
            Profile::GlProduct { sigma, fwhm_l } => [sigma, fwhm_l],
        }
    }

    /// Scale of the profile used to bound root finding and quadrature.
    pub fn scale(&self) -> f64 {
        match *self {
            Profile::Lorentzian { fwhm } => fwhm,
            Profile::Gaussian { sigma } => 2.354_820_045 * sigma,
            Profile::GlProduct { sigma, fwhm_l } => (2.354_820_045 * sigma).min(fwhm_l),
        }
    }
}

#[inline]
fn lorentzian(x: f64, fwhm: f64) -> f64 {
    let u = 2.0 * x / fwhm;
    1.0 / (1.0 + u * u)
}

#[inline]
fn gaussian(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineShape {
    pub center: f64,
    pub amplitude: f64,
    pub profile: Profile,
}

impl LineShape {
    pub fn new(center: f64, amplitude: f64, profile: Profile) -> Self {
        Self {
            center,
            amplitude,
            profile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.profile.widths().iter().any(|w| !(*w > 0.0)) {
            return Err(Error::invalid("line widths must be > 0"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::invalid("line amplitude must be >= 0"));
        }
        Ok(())
    }

    pub fn eval(&self, nu: f64) -> f64 {
        self.amplitude * self.profile.unit(nu - self.center)
    }

    /// Same profile and centre, unit peak height.
    pub fn normalized(&self) -> LineShape {
        LineShape {
            amplitude: 1.0,
            ..*self
        }
    }

    pub fn with_center(&self, center: f64) -> LineShape {
        LineShape { center, ..*self }
    }

    /// Full width at half maximum, found by bisection on the monotone flank.
    pub fn fwhm(&self) -> f64 {
        2.0 * half_max_offset(&self.profile)
    }

    /// Area under the line (hertz times amplitude). Closed form for the pure
    /// profiles, adaptive Simpson quadrature for the product.
    pub fn area(&self) -> f64 {
        match self.profile {
            Profile::Lorentzian { fwhm } => self.amplitude * PI * fwhm / 2.0,
            Profile::Gaussian { sigma } => self.amplitude * sigma * (2.0 * PI).sqrt(),
            Profile::GlProduct { .. } => {
                let half = 40.0 * self.profile.scale().max(1e-300);
                integrate(|x| self.eval(x), self.center - half, self.center + half, 1e-12)
            }
        }
    }
}

fn half_max_offset(profile: &Profile) -> f64 {
    let mut lo = 0.0;
    let mut hi = profile.scale().max(f64::MIN_POSITIVE);
    while profile.unit(hi) > 0.5 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile.unit(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Adaptive Simpson quadrature of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    // Start from a uniform panel split so narrow features are not missed.
    const PANELS: usize = 64;
    let h = (b - a) / PANELS as f64;
    let mut total = 0.0;
    for k in 0..PANELS {
        let x0 = a + k as f64 * h;
        let x1 = x0 + h;
        let fa = f(x0);
        let fb = f(x1);
        let fm = f(0.5 * (x0 + x1));
        let whole = h / 6.0 * (fa + 4.0 * fm + fb);
        total += simpson_step(&f, x0, x1, fa, fm, fb, whole, rel_tol, 40);
    }
    total
}

#[allow(clippy::too_many_arguments)]
fn simpson_step<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol * (left + right).abs().max(f64::MIN_POSITIVE) {
        left + right + delta / 15.0
    } else {
        simpson_step(f, a, m, fa, flm, fm, left, tol, depth - 1)
            + simpson_step(f, m, b, fm, frm, fb, right, tol, depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandEdge {
    #[default]
    TopHat,
    /// Gaussian with the given FWHM and unit peak.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStage {
    Bandpass {
        center: f64,
        fwhm: f64,
        #[serde(default)]
        edge: BandEdge,
    },
    /// Fibre Fabry-Perot comb: Lorentzian lines of width `fwhm` at
    /// `offset + k * fsr`. Transmission is the maximum over lines.
    Ffpi { fsr: f64, fwhm: f64, offset: f64 },
    /// Arbitrary lineshape used as a transmission curve, clamped to [0, 1].
    Shape(LineShape),
}

impl FilterStage {
    pub fn transmission(&self, nu: f64) -> f64 {
        match *self {
            FilterStage::Bandpass { center, fwhm, edge } => match edge {
                BandEdge::TopHat => {
                    if (nu - center).abs() <= fwhm / 2.0 {
                        1.0
                    } else {
                        0.0
                    }
                }
                BandEdge::Gaussian => gaussian(nu - center, fwhm / 2.354_820_045),
            },
            FilterStage::Ffpi { fsr, fwhm, offset } => {
                let k = ((nu - offset) / fsr).round();
                lorentzian(nu - (offset + k * fsr), fwhm)
            }
            FilterStage::Shape(shape) => shape.eval(nu).clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterChain {
    pub stages: Vec<FilterStage>,
}

impl FilterChain {
    pub fn new(stages: Vec<FilterStage>) -> Self {
        Self { stages }
    }

    /// Bandpass top-hat followed by an FFPI whose comb has a line at `line`.
    pub fn bandpass_ffpi(center: f64, width: f64, fsr: f64, ffpi_fwhm: f64, line: f64) -> Self {
        Self::new(vec![
            FilterStage::Bandpass {
                center,
                fwhm: width,
                edge: BandEdge::TopHat,
            },
            FilterStage::Ffpi {
                fsr,
                fwhm: ffpi_fwhm,
                offset: line,
            },
        ])
    }

    pub fn validate(&self) -> Result<()> {
        for stage in &self.stages {
            match stage {
                FilterStage::Bandpass { fwhm, .. } if !(*fwhm > 0.0) => {
                    return Err(Error::invalid("bandpass width must be > 0"))
                }
                FilterStage::Ffpi { fsr, fwhm, .. } if !(*fsr > 0.0 && *fwhm > 0.0) => {
                    return Err(Error::invalid("FFPI fsr and fwhm must be > 0"))
                }
                FilterStage::Shape(s) => s.validate()?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Product of stage transmissions.
    pub fn transmission(&self, nu: f64) -> f64 {
        self.stages.iter().map(|s| s.transmission(nu)).product()
    }

    /// The outermost bandpass interval, if the chain has one.
    pub fn passband(&self) -> Option<(f64, f64)> {
        self.stages.iter().find_map(|s| match *s {
            FilterStage::Bandpass { center, fwhm, .. } => Some((center - fwhm / 2.0, center + fwhm / 2.0)),
            _ => None,
        })
    }

    /// FFPI comb lines that fall inside the bandpass.
    pub fn passed_comb_lines(&self) -> Vec<f64> {
        let Some((lo, hi)) = self.passband() else {
            return Vec::new();
        };
        let mut lines = Vec::new();
        for stage in &self.stages {
            if let FilterStage::Ffpi { fsr, offset, .. } = *stage {
                let mut k = ((lo - offset) / fsr).ceil();
                while offset + k * fsr <= hi {
                    lines.push(offset + k * fsr);
                    k += 1.0;
                }
            }
        }
        lines
    }

    /// Upper bound on comb lines passed for any comb alignment:
    /// `ceil(bandpass width / fsr)`.
    pub fn max_passed_modes(&self) -> Option<usize> {
        let (lo, hi) = self.passband()?;
        self.stages.iter().find_map(|s| match *s {
            FilterStage::Ffpi { fsr, .. } => Some(((hi - lo) / fsr).ceil() as usize),
            _ => None,
        })
    }
}
