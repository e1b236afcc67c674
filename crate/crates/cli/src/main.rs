use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use metrolink_core::{Mode, RunConfig, Scenario};

mod commands;
mod error;

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "metrolink", version, about = "Simulate a heralded-entanglement link over deployed fiber")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    PostSelected,
    Heralded,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PostSelected => Mode::PostSelected,
            ModeArg::Heralded => Mode::Heralded,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Measured,
    NearTerm,
    Future,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Measured => Scenario::Measured,
            ScenarioArg::NearTerm => Scenario::NearTerm,
            ScenarioArg::Future => Scenario::Future,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Channel {
    Timing,
    Phase,
    Frequency,
    Polarization,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Timing => "timing",
            Channel::Phase => "phase",
            Channel::Frequency => "frequency",
            Channel::Polarization => "polarization",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the event simulation; writes summary.json and events.ndjson.
    Simulate {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Calibration report whose fitted state phase sets the readout frame.
        #[arg(long)]
        calibration: Option<PathBuf>,
    },
    /// Fidelity, rate and SNR against the acceptance window length.
    SweepWindow {
        /// Comma-separated window lengths in ns; defaults to the config list.
        #[arg(long)]
        windows: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Per-imperfection infidelity table.
    ErrorBudget {
        #[arg(long, value_enum, default_value = "measured")]
        scenario: ScenarioArg,
    },
    /// Free-drift and stabilized histograms of one monitored channel.
    Drift {
        #[arg(long, value_enum)]
        channel: Channel,
    },
    /// One pass of the calibration flowchart; writes calibration.json.
    Calibrate,
    /// Prints the configuration after overrides, as TOML.
    ShowConfig,
    /// Prints a canonical configuration; needs no --config.
    Init {
        #[arg(long, value_enum)]
        preset: Preset,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    DelayedChoice,
    Heralded,
    Improvements,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Init { preset } = cli.command {
        let config = match preset {
            Preset::DelayedChoice => RunConfig::delayed_choice(),
            Preset::Heralded => RunConfig::heralded(),
            Preset::Improvements => RunConfig::improvements(),
        };
        print!("{}", commands::to_toml(&config)?);
        return Ok(());
    }
    let path = cli.config.ok_or_else(|| CliError::Config("--config is required".to_string()))?;
    let mut config = commands::load_config(&path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    let written = match cli.command {
        Command::Simulate { mode, calibration } => {
            commands::simulate(&config, mode.map(Mode::from), calibration.as_deref())?
        }
        Command::SweepWindow { windows, mode } => {
            let windows = windows.map(|w| commands::parse_windows(&w)).transpose()?;
            commands::sweep_window(&config, windows, mode.map(Mode::from))?
        }
        Command::ErrorBudget { scenario } => commands::error_budget(&config, scenario.into())?,
        Command::Drift { channel } => commands::drift(&config, channel)?,
        Command::Calibrate => commands::calibrate(&config)?,
        Command::ShowConfig | Command::Init { .. } => {
            print!("{}", commands::to_toml(&config)?);
            Vec::new()
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
