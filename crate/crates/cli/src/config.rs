//! JSON configuration schema. Every physical quantity carries its unit in
//! the key name; frequencies are detunings in GHz from `nu0_thz`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{de::DeserializeOwned, Deserialize};

use elspin::model::{
    BandEdge, CavityParams, FilterChain, FilterStage, LineShape, Profile, ZeemanConfig, DEFAULT_G_ELECTRON,
    DEFAULT_NU0,
};
use elspin::sim::{
    BackgroundModel, BackgroundPopulation, BackgroundSpectrum, DetectorChain, DetectorChannel, EmitterModel,
    FastDecay,
};
use elspin::timeline::{Envelope, PulseSpec, Timeline};

const GHZ: f64 = 1e9;
const NS: f64 = 1e-9;

fn default_nu0_thz() -> f64 {
    DEFAULT_NU0 / 1e12
}

fn default_g_electron() -> f64 {
    DEFAULT_G_ELECTRON
}

fn default_half() -> f64 {
    0.5
}

fn default_one() -> f64 {
    1.0
}

fn default_resolution() -> u64 {
    1
}

/// Reads a JSON file, reporting schema violations with their key path.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_json(&text).with_context(|| format!("in {}", path.display()))
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> anyhow::Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("schema error at `{}`: {}", path, e.into_inner())
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default = "default_nu0_thz")]
    pub nu0_thz: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_resolution")]
    pub resolution_ps: u64,
    pub zeeman: ZeemanSection,
    #[serde(default)]
    pub cavity: Option<CavitySection>,
    pub emitter: EmitterSection,
    #[serde(default)]
    pub background: BackgroundSection,
    pub detectors: DetectorSection,
    pub timeline: TimelineSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeemanSection {
    pub b_field_t: f64,
    #[serde(default = "default_g_electron")]
    pub g_electron: f64,
    pub g_hole: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CavitySection {
    pub q_factor: f64,
    /// In units of (lambda / n)^3.
    pub mode_volume: f64,
    pub kappa_ghz: f64,
    pub center_ghz: f64,
    pub debye_waller: f64,
    pub quantum_efficiency: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum LineSection {
    Lorentzian { fwhm_ghz: f64 },
    Gaussian { sigma_ghz: f64 },
    GlProduct { sigma_ghz: f64, fwhm_l_ghz: f64 },
}

impl LineSection {
    fn profile(&self) -> Profile {
        match *self {
            LineSection::Lorentzian { fwhm_ghz } => Profile::Lorentzian { fwhm: fwhm_ghz * GHZ },
            LineSection::Gaussian { sigma_ghz } => Profile::Gaussian { sigma: sigma_ghz * GHZ },
            LineSection::GlProduct { sigma_ghz, fwhm_l_ghz } => Profile::GlProduct {
                sigma: sigma_ghz * GHZ,
                fwhm_l: fwhm_l_ghz * GHZ,
            },
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmitterSection {
    pub tau_el_ns: f64,
    pub tau_opt_ns: f64,
    pub capture_rate_per_s: f64,
    #[serde(default)]
    pub optical_peak_excitation: f64,
    pub excitation_line: LineSection,
    #[serde(default = "default_half")]
    pub intrinsic_branching: f64,
    /// Absent or null for no relaxation.
    #[serde(default)]
    pub spin_t1_s: Option<f64>,
    #[serde(default = "default_half")]
    pub hole_populate_up_prob: f64,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSection {
    #[serde(default)]
    pub populations: Vec<PopulationSection>,
    #[serde(default)]
    pub fast_decay: Option<FastDecaySection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationSection {
    pub el_photons_per_pulse: f64,
    pub opt_photons_per_pulse: f64,
    pub lifetime_ns: f64,
    #[serde(default)]
    pub spectrum: SpectrumSection,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum SpectrumSection {
    #[default]
    InBand,
    Uniform {
        lo_ghz: f64,
        hi_ghz: f64,
    },
    Line {
        center_ghz: f64,
        line: LineSection,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastDecaySection {
    pub photons_per_pulse: f64,
    pub lifetime_ns: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub collection_efficiency: f64,
    pub channels: Vec<ChannelSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub probability: f64,
    #[serde(default = "default_one")]
    pub efficiency: f64,
    pub dark_rate_cps: f64,
    #[serde(default)]
    pub dead_time_ns: f64,
    #[serde(default)]
    pub filter: Vec<StageSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum StageSection {
    Bandpass {
        center_ghz: f64,
        fwhm_ghz: f64,
        #[serde(default)]
        gaussian_edges: bool,
    },
    Ffpi {
        fsr_ghz: f64,
        fwhm_ghz: f64,
        offset_ghz: f64,
    },
    Line {
        center_ghz: f64,
        line: LineSection,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineSection {
    pub period_ns: f64,
    pub total_time_s: f64,
    pub pulses: Vec<PulseSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "snake_case")]
pub enum PulseSection {
    Electrical {
        start_ns: f64,
        duration_ns: f64,
        #[serde(default = "default_one")]
        amplitude: f64,
        #[serde(default)]
        tau_rise_ns: Option<f64>,
    },
    Optical {
        start_ns: f64,
        duration_ns: f64,
        laser_ghz: f64,
    },
}

impl SimConfig {
    pub fn nu0(&self) -> f64 {
        self.nu0_thz * 1e12
    }

    fn abs(&self, detuning_ghz: f64) -> f64 {
        self.nu0() + detuning_ghz * GHZ
    }

    fn line(&self, center_ghz: f64, line: &LineSection) -> LineShape {
        LineShape::new(self.abs(center_ghz), 1.0, line.profile())
    }

    pub fn emitter(&self) -> EmitterModel {
        let e = &self.emitter;
        EmitterModel {
            zeeman: ZeemanConfig {
                b_field: self.zeeman.b_field_t,
                g_electron: self.zeeman.g_electron,
                g_hole: self.zeeman.g_hole,
                nu0: self.nu0(),
            },
            cavity: self.cavity.as_ref().map(|c| self.cavity_params(c)),
            tau_el: e.tau_el_ns * NS,
            tau_opt: e.tau_opt_ns * NS,
            capture_rate: e.capture_rate_per_s,
            optical_peak_excitation: e.optical_peak_excitation,
            excitation_lineshape: LineShape::new(0.0, 1.0, e.excitation_line.profile()),
            intrinsic_branching: e.intrinsic_branching,
            spin_t1: e.spin_t1_s.unwrap_or(f64::INFINITY),
            hole_populate_up_prob: e.hole_populate_up_prob,
        }
    }

    pub fn cavity_params(&self, c: &CavitySection) -> CavityParams {
        CavityParams {
            q_factor: c.q_factor,
            mode_volume: c.mode_volume,
            kappa: c.kappa_ghz * GHZ,
            cavity_center: self.abs(c.center_ghz),
            debye_waller: c.debye_waller,
            quantum_efficiency: c.quantum_efficiency,
        }
    }

    pub fn background(&self) -> BackgroundModel {
        BackgroundModel {
            populations: self
                .background
                .populations
                .iter()
                .map(|p| BackgroundPopulation {
                    el_rate: p.el_photons_per_pulse,
                    opt_rate: p.opt_photons_per_pulse,
                    lifetime: p.lifetime_ns * NS,
                    spectrum: match &p.spectrum {
                        SpectrumSection::InBand => BackgroundSpectrum::InBand,
                        SpectrumSection::Uniform { lo_ghz, hi_ghz } => BackgroundSpectrum::Uniform {
                            lo: self.abs(*lo_ghz),
                            hi: self.abs(*hi_ghz),
                        },
                        SpectrumSection::Line { center_ghz, line } => {
                            BackgroundSpectrum::Line(self.line(*center_ghz, line))
                        }
                    },
                })
                .collect(),
            fast_decay: self.background.fast_decay.as_ref().map(|f| FastDecay {
                amplitude: f.photons_per_pulse,
                lifetime: f.lifetime_ns * NS,
            }),
        }
    }

    pub fn detectors(&self) -> DetectorChain {
        DetectorChain {
            collection_efficiency: self.detectors.collection_efficiency,
            resolution_ps: self.resolution_ps,
            channels: self
                .detectors
                .channels
                .iter()
                .map(|c| DetectorChannel {
                    probability: c.probability,
                    efficiency: c.efficiency,
                    dark_rate: c.dark_rate_cps,
                    dead_time: c.dead_time_ns * NS,
                    filter: (!c.filter.is_empty()).then(|| {
                        FilterChain::new(c.filter.iter().map(|s| self.stage(s)).collect())
                    }),
                })
                .collect(),
        }
    }

    fn stage(&self, s: &StageSection) -> FilterStage {
        match s {
            StageSection::Bandpass {
                center_ghz,
                fwhm_ghz,
                gaussian_edges,
            } => FilterStage::Bandpass {
                center: self.abs(*center_ghz),
                fwhm: fwhm_ghz * GHZ,
                edge: if *gaussian_edges {
                    BandEdge::Gaussian
                } else {
                    BandEdge::TopHat
                },
            },
            StageSection::Ffpi {
                fsr_ghz,
                fwhm_ghz,
                offset_ghz,
            } => FilterStage::Ffpi {
                fsr: fsr_ghz * GHZ,
                fwhm: fwhm_ghz * GHZ,
                offset: self.abs(*offset_ghz),
            },
            StageSection::Line { center_ghz, line } => FilterStage::Shape(self.line(*center_ghz, line)),
        }
    }

    pub fn timeline(&self) -> anyhow::Result<Timeline> {
        let t = &self.timeline;
        let pulses = t
            .pulses
            .iter()
            .map(|p| match *p {
                PulseSection::Electrical {
                    start_ns,
                    duration_ns,
                    amplitude,
                    tau_rise_ns,
                } => {
                    let mut pulse = PulseSpec::electrical(start_ns * NS, duration_ns * NS).with_amplitude(amplitude);
                    if let Some(tau) = tau_rise_ns {
                        pulse = pulse.with_envelope(Envelope::RcStretched { tau_rise: tau * NS });
                    }
                    pulse
                }
                PulseSection::Optical {
                    start_ns,
                    duration_ns,
                    laser_ghz,
                } => PulseSpec::optical(start_ns * NS, duration_ns * NS, self.abs(laser_ghz)),
            })
            .collect();
        Ok(Timeline::new(t.period_ns * NS, t.total_time_s, pulses)?)
    }
}

/// Ordered PLE acquisitions sharing one timeline.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanManifest {
    #[serde(default = "default_nu0_thz")]
    pub nu0_thz: f64,
    /// Set when segment frequencies are intentionally not monotonic.
    #[serde(default)]
    pub unordered: bool,
    pub segments: Vec<ScanSegment>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSegment {
    pub laser_ghz: f64,
    /// TTG1 file, relative to the manifest directory.
    pub tags: PathBuf,
    pub duration_s: f64,
}

impl ScanManifest {
    pub fn load(path: &Path) -> anyhow::Result<(ScanManifest, PathBuf)> {
        let m: ScanManifest = load_json(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(&dir)?;
        Ok((m, dir))
    }

    pub fn validate(&self, dir: &Path) -> anyhow::Result<()> {
        if self.segments.is_empty() {
            bail!("manifest has no segments");
        }
        if !self.unordered {
            let f: Vec<f64> = self.segments.iter().map(|s| s.laser_ghz).collect();
            let up = f.windows(2).all(|w| w[1] > w[0]);
            let down = f.windows(2).all(|w| w[1] < w[0]);
            if !(up || down) {
                bail!("segment frequencies are not strictly monotonic; set \"unordered\": true");
            }
        }
        for (i, s) in self.segments.iter().enumerate() {
            let p = dir.join(&s.tags);
            if !p.is_file() {
                bail!("segments[{i}].tags: file {} does not exist", p.display());
            }
            if !(s.duration_s > 0.0) {
                bail!("segments[{i}].duration_s must be > 0");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "zeeman": {"b_field_t": 0.0, "g_hole": 1.18},
        "emitter": {"tau_el_ns": 570, "tau_opt_ns": 431, "capture_rate_per_s": 0,
                    "excitation_line": {"kind": "lorentzian", "fwhm_ghz": 2.08}},
        "detectors": {"collection_efficiency": 1,
                      "channels": [{"probability": 1, "dark_rate_cps": 100}]},
        "timeline": {"period_ns": 4000, "total_time_s": 1,
                     "pulses": [{"kind": "electrical", "start_ns": 0, "duration_ns": 150}]}
    }"#;

    #[test]
    fn minimal_config_parses() {
        let c: SimConfig = parse_json(MINIMAL).unwrap();
        assert_eq!(c.nu0(), DEFAULT_NU0);
        assert_eq!(c.timeline().unwrap().cycle_count(), 250_000);
        assert_eq!(c.detectors().channels[0].dark_rate, 100.0);
    }

    #[test]
    fn unknown_key_reports_path() {
        let bad = MINIMAL.replace("\"tau_opt_ns\"", "\"tau_opt\"");
        let err = parse_json::<SimConfig>(&bad).unwrap_err().to_string();
        assert!(err.contains("emitter"), "{err}");
    }

    #[test]
    fn missing_unit_key_rejected() {
        let bad = MINIMAL.replace("\"period_ns\": 4000,", "");
        let err = parse_json::<SimConfig>(&bad).unwrap_err().to_string();
        assert!(err.contains("period_ns"), "{err}");
    }
}
