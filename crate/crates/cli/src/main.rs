mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Simulation and analysis pipeline for electrically driven spin-photon emitters.
#[derive(Debug, Parser)]
#[command(name = "elspin", version)]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the Monte Carlo simulator and write a TTG1 tag file.
    Simulate(SimulateArgs),
    /// Pulsed second-order correlation between two channels.
    G2(G2Args),
    /// Exponential fit to a folded decay histogram.
    Lifetime(LifetimeArgs),
    /// Background-corrected excitation spectrum from a scan manifest.
    Ple(PleArgs),
    /// Herald/readout fidelity from a same-transition and a cross-transition run.
    Spam(SpamArgs),
    /// Cavity Purcell enhancement.
    Purcell(PurcellArgs),
    /// Raw fidelity over a grid of herald and readout windows.
    SweepWindows(SweepWindowsArgs),
    /// Window-restricted zero-delay correlation and its short-window intercept.
    SweepTemporal(SweepTemporalArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output TTG1 file.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Calibrate the capture rate to this total detected rate before the run.
    #[arg(long)]
    target_rate_cps: Option<f64>,
    /// Laser detuning in GHz applied to every optical pulse.
    #[arg(long, allow_hyphen_values = true)]
    laser_ghz: Option<f64>,
    /// Per-channel summary CSV (default: stdout).
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TwoChannel {
    /// TTG1 file holding both channels.
    #[arg(long)]
    tags: PathBuf,
    /// Optional second file; its channel `channel_b` is used as the second arm.
    #[arg(long)]
    tags_b: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    channel_a: u8,
    #[arg(long, default_value_t = 1)]
    channel_b: u8,
}

#[derive(Debug, Args)]
struct G2Args {
    #[command(flatten)]
    input: TwoChannel,
    #[arg(long)]
    period_ns: f64,
    #[arg(long)]
    bin_ns: f64,
    /// Peaks on each side of zero delay.
    #[arg(long, default_value_t = 20)]
    peaks: u32,
    /// Emitter lifetime for the background-corrected peak-train fit.
    #[arg(long)]
    tau_c_ns: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the delay histogram.
    #[arg(long)]
    histogram: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LifetimeArgs {
    #[arg(long)]
    tags: PathBuf,
    /// Simulation config supplying the pulse timeline.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pulse_index: usize,
    #[arg(long)]
    bin_ns: f64,
    /// Fit window start, measured from the pulse end.
    #[arg(long, default_value_t = 0.0)]
    fit_offset_ns: f64,
    #[arg(long)]
    fit_span_ns: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PleArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Simulation config supplying the shared pulse timeline.
    #[arg(long)]
    config: PathBuf,
    /// Optical pulse whose emission is counted (default: first optical pulse).
    #[arg(long)]
    pulse_index: Option<usize>,
    #[arg(long, default_value_t = 900.0)]
    signal_width_ns: f64,
    #[arg(long, default_value_t = 450.0)]
    background_width_ns: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SpamCommon {
    /// Run with laser and herald filter on the same transition.
    #[arg(long)]
    same: PathBuf,
    /// Run with laser and herald filter on different transitions.
    #[arg(long)]
    cross: PathBuf,
    /// Simulation config supplying the pulse timeline.
    #[arg(long)]
    config: PathBuf,
    /// Channel behind the herald filter.
    #[arg(long, default_value_t = 0)]
    herald_channel: u8,
}

#[derive(Debug, Args)]
struct SpamArgs {
    #[command(flatten)]
    common: SpamCommon,
    /// Largest cycle offset n.
    #[arg(long, default_value_t = 10)]
    peaks: u32,
    #[arg(long, default_value_t = 418.0)]
    t_e_ns: f64,
    #[arg(long, default_value_t = 500.0)]
    t_ce_ns: f64,
    #[arg(long, default_value_t = 65.0)]
    t_o_ns: f64,
    #[arg(long, default_value_t = 411.0)]
    t_co_ns: f64,
    /// Calibration rate set (JSON) for background correction.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Transition under the herald filter, B or C.
    #[arg(long, default_value = "B")]
    filter: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PurcellArgs {
    /// Config with a cavity section; reports every Zeeman transition.
    #[arg(long, conflicts_with_all = ["q_factor", "mode_volume", "kappa_ghz", "detuning_ghz", "debye_waller", "quantum_efficiency"])]
    config: Option<PathBuf>,
    #[arg(long)]
    q_factor: Option<f64>,
    #[arg(long)]
    mode_volume: Option<f64>,
    #[arg(long)]
    kappa_ghz: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    detuning_ghz: Option<f64>,
    #[arg(long)]
    debye_waller: Option<f64>,
    #[arg(long)]
    quantum_efficiency: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepWindowsArgs {
    #[command(flatten)]
    common: SpamCommon,
    #[arg(long, value_delimiter = ',', required = true)]
    t_e_ns: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    t_ce_ns: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    t_co_ns: Vec<f64>,
    #[arg(long, default_value_t = 65.0)]
    t_o_ns: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepTemporalArgs {
    #[command(flatten)]
    input: TwoChannel,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pulse_index: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    t_e_ns: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    t_ce_ns: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Intercept table (default: stdout).
    #[arg(long)]
    intercepts: Option<PathBuf>,
}

/// Outcome of a successful command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    Flagged,
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::G2(a) => commands::g2(a),
        Command::Lifetime(a) => commands::lifetime(a),
        Command::Ple(a) => commands::ple(a),
        Command::Spam(a) => commands::spam(a),
        Command::Purcell(a) => commands::purcell(a),
        Command::SweepWindows(a) => commands::sweep_windows(a),
        Command::SweepTemporal(a) => commands::sweep_temporal(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::new().filter_level(log::LevelFilter::Warn).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Flagged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
