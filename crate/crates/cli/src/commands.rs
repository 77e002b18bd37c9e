use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use anyhow::{bail, ensure, Context};

use elspin::analysis::{g2_corrected, g2_raw, lifetime_report, ple_scan, temporal_filter_sweep, PleSegment, PleWindows, PulseWindow};
use elspin::model::{purcell_enhancement, CavityParams, TransitionLabel};
use elspin::sim::{calibrate_capture_rate, simulate_with, SimOptions};
use elspin::spam::{
    corrected_fidelity, fit_background_model, spam_coincidences, spam_fidelity, window_sweep, SpamCalibrationSet,
    SpamRun, SpamWindows,
};
use elspin::tagstore::{cross_correlate_par, read_tags, write_tags, TagStream};
use elspin::timeline::Timeline;

use crate::config::{load_json, ScanManifest, SimConfig};
use crate::report::Table;
use crate::{row, Status};
use crate::{
    G2Args, LifetimeArgs, PleArgs, PurcellArgs, SimulateArgs, SpamArgs, SpamCommon, SweepTemporalArgs,
    SweepWindowsArgs, TwoChannel,
};

const NS: f64 = 1e-9;
const GHZ: f64 = 1e9;

fn status(flagged: bool) -> Status {
    if flagged {
        Status::Flagged
    } else {
        Status::Ok
    }
}

fn load_tags(path: &Path) -> anyhow::Result<TagStream> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_tags(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn channel(stream: &TagStream, ch: u8, path: &Path) -> anyhow::Result<TagStream> {
    ensure!(
        u32::from(ch) < stream.channel_count(),
        "{} has {} channel(s); channel {ch} is missing",
        path.display(),
        stream.channel_count()
    );
    Ok(stream.select_channel(ch))
}

fn two_channel(input: &TwoChannel) -> anyhow::Result<(TagStream, TagStream)> {
    let first = load_tags(&input.tags)?;
    let a = channel(&first, input.channel_a, &input.tags)?;
    let b = match &input.tags_b {
        Some(p) => channel(&load_tags(p)?, input.channel_b, p)?,
        None => channel(&first, input.channel_b, &input.tags)?,
    };
    Ok((a, b))
}

fn load_timeline(config: &Path) -> anyhow::Result<(SimConfig, Timeline)> {
    let cfg: SimConfig = load_json(config)?;
    let tl = cfg.timeline()?;
    Ok((cfg, tl))
}

pub fn simulate(a: SimulateArgs) -> anyhow::Result<Status> {
    let (cfg, mut tl) = load_timeline(&a.config)?;
    if let Some(l) = a.laser_ghz {
        tl = tl.with_laser(cfg.nu0() + l * GHZ);
    }
    let mut model = cfg.emitter();
    let bg = cfg.background();
    let det = cfg.detectors();
    let seed = a.seed.unwrap_or(cfg.seed);
    if let Some(target) = a.target_rate_cps {
        model.capture_rate = calibrate_capture_rate(&model, &bg, &tl, &det, target, seed)?;
        eprintln!("calibrated capture_rate_per_s = {}", model.capture_rate);
    }
    let out = simulate_with(&model, &bg, &tl, &det, seed, SimOptions::default())?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let f = File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_tags(&out.stream, BufWriter::new(f))?;

    let mut t = Table::new(&["channel", "counts", "rate_cps"]);
    let counts = out.stream.counts_per_channel();
    for (ch, (&c, r)) in counts.iter().zip(out.stream.rates()).enumerate() {
        t.push(row![ch.to_string(), c, r]);
    }
    let total: u64 = counts.iter().sum();
    t.push(row!["total", total, total as f64 / out.stream.total_time()]);
    t.emit(a.summary.as_deref())?;
    Ok(status(!out.warnings.is_empty()))
}

pub fn g2(a: G2Args) -> anyhow::Result<Status> {
    let (s1, s2) = two_channel(&a.input)?;
    let hist = cross_correlate_par(&s1, &s2, a.period_ns * NS, a.bin_ns * NS, a.peaks)?;
    let report = match a.tau_c_ns {
        Some(tau) => g2_corrected(&hist, tau * NS, a.peaks)?,
        None => g2_raw(&hist)?,
    };
    let mut t = Table::new(&["n", "g2_raw", "g2_raw_error", "g2_corrected", "g2_corrected_error", "clamped"]);
    for p in &report.points {
        t.push(row![p.n, p.raw, p.raw_error, p.corrected, p.corrected_error, p.clamped]);
    }
    t.emit(a.out.as_deref())?;
    if let Some(path) = &a.histogram {
        let mut h = Table::new(&["delay_ns", "counts"]);
        for (i, &c) in hist.counts.iter().enumerate() {
            h.push(row![hist.delay(i) / NS, c]);
        }
        h.emit(Some(path))?;
    }
    let overlapping = report.fit.as_ref().is_some_and(|f| f.overlapping);
    Ok(status(report.any_clamped() || overlapping))
}

pub fn lifetime(a: LifetimeArgs) -> anyhow::Result<Status> {
    let tags = load_tags(&a.tags)?;
    let (_, tl) = load_timeline(&a.config)?;
    let fit = lifetime_report(
        &tags,
        &tl,
        a.pulse_index,
        a.bin_ns * NS,
        a.fit_offset_ns * NS,
        a.fit_span_ns * NS,
    )?;
    let mut t = Table::new(&["parameter", "value", "error"]);
    for (i, name) in fit.names.iter().enumerate() {
        let (v, e) = (fit.values[i], fit.errors[i]);
        if name == "tau" {
            t.push(row!["tau_ns", v / NS, e / NS]);
        } else {
            t.push(row![name.as_str(), v, e]);
        }
    }
    t.push(row!["residual_variance", fit.reduced_chi2(), None::<f64>]);
    t.emit(a.out.as_deref())?;
    Ok(status(!fit.converged))
}

pub fn ple(a: PleArgs) -> anyhow::Result<Status> {
    let (manifest, dir) = ScanManifest::load(&a.manifest)?;
    let (_, tl) = load_timeline(&a.config)?;
    let pulse_index = match a.pulse_index {
        Some(i) => i,
        None => tl
            .nth_of_kind(false, 0)
            .context("timeline has no optical pulse; pass --pulse-index")?,
    };
    let windows = PleWindows {
        pulse_index,
        signal: PulseWindow::new(0.0, a.signal_width_ns * NS),
        background: PulseWindow::new(a.signal_width_ns * NS, a.background_width_ns * NS),
    };
    let nu0 = manifest.nu0_thz * 1e12;
    let mut flagged = false;
    let mut segments = Vec::with_capacity(manifest.segments.len());
    for (i, s) in manifest.segments.iter().enumerate() {
        let path = dir.join(&s.tags);
        let stream = load_tags(&path)?;
        if ((stream.total_time() - s.duration_s) / s.duration_s).abs() > 1e-3 {
            eprintln!(
                "warning: segments[{i}]: file spans {} s but duration_s is {}",
                stream.total_time(),
                s.duration_s
            );
            flagged = true;
        }
        let f = nu0 + s.laser_ghz * GHZ;
        segments.push(PleSegment {
            laser_frequency: f,
            timeline: tl.with_laser(f).with_total_time(s.duration_s)?,
            stream,
        });
    }
    let spectrum = ple_scan(&segments, &windows)?;
    let mut t = Table::new(&["laser_ghz", "signal", "background", "scale", "corrected", "sigma", "duration_s"]);
    for r in &spectrum.rows {
        let p = &r.point;
        t.push(row![(r.frequency - nu0) / GHZ, p.signal, p.background, p.scale, p.corrected, p.sigma, r.duration]);
    }
    t.emit(a.out.as_deref())?;
    Ok(status(flagged))
}

struct SpamInputs {
    timeline: Timeline,
    same: TagStream,
    cross: TagStream,
    herald_same: TagStream,
    herald_cross: TagStream,
}

fn spam_inputs(c: &SpamCommon) -> anyhow::Result<SpamInputs> {
    let (_, timeline) = load_timeline(&c.config)?;
    let same = load_tags(&c.same)?;
    let cross = load_tags(&c.cross)?;
    let herald_same = channel(&same, c.herald_channel, &c.same)?;
    let herald_cross = channel(&cross, c.herald_channel, &c.cross)?;
    Ok(SpamInputs {
        timeline,
        same,
        cross,
        herald_same,
        herald_cross,
    })
}

fn parse_filter(s: &str) -> anyhow::Result<TransitionLabel> {
    match s {
        "B" | "b" => Ok(TransitionLabel::B),
        "C" | "c" => Ok(TransitionLabel::C),
        other => bail!("--filter must be B or C, got {other:?}"),
    }
}

pub fn spam(a: SpamArgs) -> anyhow::Result<Status> {
    let filter = parse_filter(&a.filter)?;
    let inp = spam_inputs(&a.common)?;
    let w = SpamWindows {
        t_e: a.t_e_ns * NS,
        t_ce: a.t_ce_ns * NS,
        t_o: a.t_o_ns * NS,
        t_co: a.t_co_ns * NS,
    };
    let c_r = spam_coincidences(&inp.herald_same, &inp.same, &inp.timeline, &w, a.peaks)?;
    let c_nr = spam_coincidences(&inp.herald_cross, &inp.cross, &inp.timeline, &w, a.peaks)?;
    let mut report = spam_fidelity(&c_r, &c_nr)?;
    report.windows = Some(w);
    let mut model_clamped = false;
    if let Some(path) = &a.calibration {
        let cal: SpamCalibrationSet = load_json(path)?;
        let model = fit_background_model(&cal, inp.timeline.period(), inp.same.total_time())?;
        model_clamped = model.clamped;
        report = corrected_fidelity(&report, &model, filter)?;
    }
    let mut t = Table::new(&[
        "n",
        "c_r",
        "c_nr",
        "f_raw",
        "f_raw_lo",
        "f_raw_hi",
        "f_corrected",
        "f_corrected_error",
        "clamped",
        "invalid",
    ]);
    for p in &report.points {
        t.push(row![
            p.n,
            p.c_r,
            p.c_nr,
            p.f_raw,
            p.raw_interval.0,
            p.raw_interval.1,
            p.f_corrected,
            p.corrected_error,
            p.clamped,
            p.invalid
        ]);
    }
    t.emit(a.out.as_deref())?;
    Ok(status(report.flagged() || model_clamped))
}

pub fn purcell(a: PurcellArgs) -> anyhow::Result<Status> {
    let mut t = Table::new(&[
        "transition",
        "detuning_ghz",
        "effective_purcell",
        "purcell_weight",
        "purcell_enhancement",
    ]);
    let push = |t: &mut Table, label: &str, cav: &CavityParams, f: f64| {
        t.push(row![
            label,
            (f - cav.cavity_center) / GHZ,
            cav.effective_purcell(),
            cav.purcell_weight(f),
            purcell_enhancement(cav, f)
        ]);
    };
    if let Some(path) = &a.config {
        let cfg: SimConfig = load_json(path)?;
        let section = cfg.cavity.as_ref().context("config has no cavity section")?;
        let cav = cfg.cavity_params(section);
        cav.validate()?;
        let model = cfg.emitter();
        let set = model.transitions();
        for l in TransitionLabel::ALL {
            push(&mut t, &l.as_char().to_string(), &cav, set.frequency(l));
        }
    } else {
        let need = |v: Option<f64>, name: &str| v.with_context(|| format!("--{name} is required without --config"));
        let nu0 = elspin::model::DEFAULT_NU0;
        let cav = CavityParams {
            q_factor: need(a.q_factor, "q-factor")?,
            mode_volume: need(a.mode_volume, "mode-volume")?,
            kappa: need(a.kappa_ghz, "kappa-ghz")? * GHZ,
            cavity_center: nu0,
            debye_waller: need(a.debye_waller, "debye-waller")?,
            quantum_efficiency: need(a.quantum_efficiency, "quantum-efficiency")?,
        };
        cav.validate()?;
        let f = nu0 + need(a.detuning_ghz, "detuning-ghz")? * GHZ;
        push(&mut t, "", &cav, f);
    }
    t.emit(a.out.as_deref())?;
    Ok(Status::Ok)
}

pub fn sweep_windows(a: SweepWindowsArgs) -> anyhow::Result<Status> {
    let inp = spam_inputs(&a.common)?;
    let ns = |v: &[f64]| v.iter().map(|x| x * NS).collect::<Vec<_>>();
    let sweep = window_sweep(
        SpamRun {
            herald: &inp.herald_same,
            readout: &inp.same,
        },
        SpamRun {
            herald: &inp.herald_cross,
            readout: &inp.cross,
        },
        &inp.timeline,
        &ns(&a.t_e_ns),
        &ns(&a.t_ce_ns),
        &ns(&a.t_co_ns),
        a.t_o_ns * NS,
    )?;
    let mut t = Table::new(&[
        "t_e_ns", "t_ce_ns", "t_o_ns", "t_co_ns", "c_r", "c_nr", "f_raw", "f_raw_lo", "f_raw_hi", "flagged", "best",
    ]);
    for (i, p) in sweep.points.iter().enumerate() {
        let w = &p.windows;
        t.push(row![
            w.t_e / NS,
            w.t_ce / NS,
            w.t_o / NS,
            w.t_co / NS,
            p.c_r,
            p.c_nr,
            p.fidelity,
            p.interval.0,
            p.interval.1,
            p.flagged,
            sweep.best == Some(i)
        ]);
    }
    t.emit(a.out.as_deref())?;
    Ok(status(sweep.points.iter().any(|p| p.flagged)))
}

pub fn sweep_temporal(a: SweepTemporalArgs) -> anyhow::Result<Status> {
    let (s1, s2) = two_channel(&a.input)?;
    let (_, tl) = load_timeline(&a.config)?;
    let t_e: Vec<f64> = a.t_e_ns.iter().map(|x| x * NS).collect();
    let t_ce: Vec<f64> = a.t_ce_ns.iter().map(|x| x * NS).collect();
    let sweep = temporal_filter_sweep(&s1, &s2, &tl, a.pulse_index, &t_e, &t_ce)?;
    let mut t = Table::new(&["t_e_ns", "t_ce_ns", "g2_raw_0", "error", "valid"]);
    for p in &sweep.points {
        t.push(row![p.t_e / NS, p.t_ce / NS, p.g2, p.error, p.valid]);
    }
    t.emit(a.out.as_deref())?;
    let mut it = Table::new(&["t_e_ns", "intercept", "intercept_error", "slope_per_ns", "points_used"]);
    for (te, fit) in t_e.iter().zip(&sweep.intercepts) {
        match fit {
            Some(f) => it.push(row![te / NS, f.intercept, f.intercept_error, f.slope * NS, f.points_used]),
            None => it.push(row![te / NS, None::<f64>, None::<f64>, None::<f64>, 0usize]),
        }
    }
    it.emit(a.intercepts.as_deref())?;
    let flagged = sweep.points.iter().any(|p| !p.valid) || sweep.intercepts.iter().any(Option::is_none);
    Ok(status(flagged))
}
