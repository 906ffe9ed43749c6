//! Command-line front end: simulate, locate, calibrate and run campaigns.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use faultloc::harness::{resolve_feeder, run_campaign, Campaign};
use faultloc::locator::{
    calibrate_threshold, LocationVerdict, Locator, LocatorConfig, ThresholdMode,
};
use faultloc::measurement::{measure_true, synthesize, MeasurementSet, NoiseProfile};
use faultloc::powerflow::{run_powerflow, FaultScenario, ScenarioDoc};
use faultloc::FeederModel;

#[derive(Parser)]
#[command(
    name = "faultloc",
    version,
    about = "Faulted line identification on radial feeders with micro-PMUs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario and write its measurement set.
    Simulate {
        /// Feeder JSON file, or bundled:feeder34 / bundled:feeder123.
        #[arg(long)]
        feeder: String,
        /// Fault scenario JSON; omit for the healthy feeder.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Add measurement noise drawn from this seed; omit for exact values.
        #[arg(long)]
        seed: Option<u64>,
        /// Noise profile JSON (defaults to 1% / 0.01 rad / 20% pseudo / 3% DG).
        #[arg(long)]
        noise: Option<PathBuf>,
        /// Also dump the solved phasor state here.
        #[arg(long)]
        state: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identify the faulted line from a measurement CSV.
    Locate {
        #[arg(long)]
        feeder: String,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long, default_value_t = 500.0)]
        threshold: f64,
        /// Locator configuration JSON; --threshold overrides its threshold.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// No-fault Monte Carlo threshold calibration.
    Calibrate {
        #[arg(long)]
        feeder: String,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        noise: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte Carlo campaign and write its accuracy report.
    Campaign {
        #[arg(long)]
        campaign: PathBuf,
        /// Override the campaign seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override trials per cell.
        #[arg(long)]
        trials: Option<usize>,
        /// Override the threshold (switches to a fixed threshold).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type Res<T> = Result<T, Box<dyn std::error::Error>>;

fn output(path: &Option<PathBuf>) -> Res<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| format!("{}: {e}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Res<T> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn feeder(spec: &str) -> Res<FeederModel> {
    Ok(resolve_feeder(spec, Path::new("."))?)
}

fn noise(path: &Option<PathBuf>) -> Res<NoiseProfile> {
    path.as_deref()
        .map(read_json)
        .transpose()
        .map(|n| n.unwrap_or_default())
}

fn write_verdict(v: &LocationVerdict, format: Format, mut out: impl Write) -> Res<()> {
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, v)?;
            writeln!(out)?;
        }
        Format::Csv => {
            let join = |xs: &[f64]| {
                xs.iter()
                    .map(|x| format!("{x:.6}"))
                    .collect::<Vec<_>>()
                    .join(";")
            };
            let mut w = csv::Writer::from_writer(out);
            w.write_record([
                "outcome",
                "branch",
                "direct_branch",
                "subgraph",
                "tie",
                "crossing",
                "threshold",
                "subgraph_wmr",
                "path_wmr",
                "step_one_ms",
                "step_two_ms",
            ])?;
            w.write_record([
                serde_json::to_value(v.outcome)?
                    .as_str()
                    .unwrap_or_default()
                    .to_string(),
                v.branch.clone().unwrap_or_default(),
                v.direct_branch.to_string(),
                v.subgraph.map(|k| k.to_string()).unwrap_or_default(),
                v.tie.to_string(),
                v.crossing.map(|s| s.to_string()).unwrap_or_default(),
                v.threshold.to_string(),
                join(&v.subgraph_wmr),
                join(&v.path_wmr),
                format!("{:.3}", v.step_one_ms),
                format!("{:.3}", v.step_two_ms),
            ])?;
            w.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Res<()> {
    match cli.command {
        Command::Simulate {
            feeder: f,
            scenario,
            seed,
            noise: n,
            state,
            out,
        } => {
            let model = feeder(&f)?;
            let scenario = match scenario {
                Some(p) => Some(FaultScenario::from_doc(
                    &read_json::<ScenarioDoc>(&p)?,
                    &model,
                )?),
                None => None,
            };
            let profile = noise(&n)?;
            let truth = run_powerflow(&model, scenario.as_ref())?;
            if let Some(p) = state {
                truth.write_csv(&model, BufWriter::new(File::create(&p)?))?;
            }
            let exact = measure_true(&model, &truth, &profile);
            let mut set = match seed {
                Some(s) => synthesize(&exact, &profile, s),
                None => exact,
            };
            if let Some(sc) = &scenario {
                set.scenario = format!("{}@{}", model.branches[sc.branch].id, sc.position);
            }
            set.write_csv(&model, output(&out)?)?;
        }
        Command::Locate {
            feeder: f,
            measurements,
            threshold,
            config,
            format,
            out,
        } => {
            let model = feeder(&f)?;
            let mut cfg: LocatorConfig = config
                .as_deref()
                .map(read_json)
                .transpose()?
                .unwrap_or_default();
            cfg.threshold = threshold;
            cfg.threshold_mode = ThresholdMode::Fixed;
            let file = File::open(&measurements)
                .map_err(|e| format!("{}: {e}", measurements.display()))?;
            let set = MeasurementSet::read_csv(&model, file)?;
            let v = Locator::new(&model, cfg)?.locate(&set)?;
            write_verdict(&v, format, output(&out)?)?;
        }
        Command::Calibrate {
            feeder: f,
            trials,
            seed,
            noise: n,
            format,
            out,
        } => {
            let model = feeder(&f)?;
            let cal =
                calibrate_threshold(&model, &noise(&n)?, trials, seed, &LocatorConfig::default())?;
            let mut out = output(&out)?;
            match format {
                Format::Json => {
                    serde_json::to_writer_pretty(&mut out, &cal)?;
                    writeln!(out)?;
                }
                Format::Csv => {
                    writeln!(out, "threshold,quantile_value,trials,excluded")?;
                    writeln!(
                        out,
                        "{},{},{},{}",
                        cal.threshold, cal.quantile_value, cal.trials, cal.excluded
                    )?;
                }
            }
            out.flush()?;
        }
        Command::Campaign {
            campaign,
            seed,
            trials,
            threshold,
            format,
            out,
        } => {
            let mut c = Campaign::load(&campaign)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(t) = trials {
                if t == 0 {
                    return Err("--trials must be at least 1".into());
                }
                c.trials = t;
            }
            if let Some(t) = threshold {
                c.locator.threshold = t;
                c.locator.threshold_mode = ThresholdMode::Fixed;
            }
            let report = run_campaign(&c)?;
            let mut out = output(&out)?;
            match format {
                Format::Csv => report.write_csv(&mut out)?,
                Format::Json => report.write_json(&mut out)?,
            }
            out.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
