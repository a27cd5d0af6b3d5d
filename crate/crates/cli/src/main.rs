use assc_transport::config::{Config, PRESETS};
use assc_transport::simulator::{metrics, metrics_summary, run_scenario, write_csv, FailureEvent};
use assc_transport::synthesis::{verify_interior, SynthesisResult};
use assc_transport::Error;
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Robust SPR synthesis and ASSC simulation for cooperative payload transport.
#[derive(Parser)]
#[command(name = "assc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the vertex LMIs and write the synthesis result.
    Synthesize {
        /// Config file, or `preset:<name>`.
        #[arg(long)]
        config: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one closed-loop scenario and write the trajectory CSV and metrics.
    Simulate {
        #[arg(long)]
        config: String,
        /// Synthesis result; required unless feedback is disabled.
        #[arg(long)]
        synthesis: Option<PathBuf>,
        /// Run with U_f = 0 and the decentralized mixer.
        #[arg(long)]
        disable_feedback: bool,
        /// Override the failure event, e.g. `robot=8,t=2.5`.
        #[arg(long)]
        failure: Option<String>,
        /// Drop the failure event of the config.
        #[arg(long, conflicts_with = "failure")]
        no_failure: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for the measurement noise, when noise is configured.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check a synthesis result on interior samples of the fluctuation set.
    Verify {
        #[arg(long)]
        synthesis: PathBuf,
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print a preset configuration as TOML.
    PrintConfig {
        #[arg(long, default_value = "rectangle")]
        preset: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible { .. } | Error::SynthesisInfeasible { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::Certificate(_) => 4,
        _ => 1,
    }
}

fn load_config(arg: &str) -> Result<Config, Error> {
    match arg.strip_prefix("preset:") {
        Some(name) => Config::preset(name),
        None => Config::load(Path::new(arg)),
    }
}

fn parse_failure(s: &str) -> Result<FailureEvent, Error> {
    let mut robot = None;
    let mut time = None;
    for part in s.split(',') {
        match part.split_once('=') {
            Some(("robot", v)) => robot = v.trim().parse::<usize>().ok(),
            Some(("t", v)) => time = v.trim().parse::<f64>().ok(),
            _ => return Err(Error::Config(format!("bad failure spec '{s}', expected robot=<id>,t=<s>"))),
        }
    }
    match (robot, time) {
        (Some(r), Some(t)) if r >= 1 => Ok(FailureEvent { robot: r - 1, time: t }),
        _ => Err(Error::Config(format!("bad failure spec '{s}', expected robot=<id>,t=<s>"))),
    }
}

fn synthesize_cmd(config: &str, out: &Path) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let result = cfg.synthesize()?;
    result.write(out)?;
    println!("vertices: {}", result.vertex_count);
    println!("iterations: {}", result.iterations);
    println!("margin: {:.6e}", result.margin);
    println!("spr_margin: {:.6e}", result.spr_margin);
    println!("max_abs_gain: {:.6e}", result.f.amax());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_cmd(
    config: &str,
    synthesis: Option<&Path>,
    disable_feedback: bool,
    failure: Option<&str>,
    no_failure: bool,
    out: Option<&Path>,
    seed: Option<u64>,
) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let feedback = cfg.controller.feedback_enabled && !disable_feedback;
    let result = match (feedback, synthesis) {
        (true, None) => return Err(Error::Config("feedback is enabled: pass --synthesis or --disable-feedback".into())),
        (true, Some(p)) => Some(SynthesisResult::read(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        (false, _) => None,
    };
    let mut scenario = cfg.scenario(result.as_ref(), feedback)?;
    if no_failure {
        scenario.failure = None;
    }
    if let Some(f) = failure {
        scenario.failure = Some(parse_failure(f)?);
    }
    if let (Some(seed), Some(noise)) = (seed, scenario.noise.as_mut()) {
        noise.seed = seed;
    }
    scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    std::fs::create_dir_all(&dir)?;
    match run_scenario(&scenario) {
        Ok(log) => {
            let m = metrics(&log)?;
            std::fs::write(dir.join("trajectory.csv"), write_csv(&log))?;
            let summary = format!("status: ok\n{}", metrics_summary(&m, &log));
            std::fs::write(dir.join("metrics.txt"), &summary)?;
            print!("{summary}");
            Ok(())
        }
        Err(e) => {
            let summary = format!("status: aborted\nreason: {e}\n");
            std::fs::write(dir.join("metrics.txt"), &summary)?;
            print!("{summary}");
            Err(e)
        }
    }
}

fn verify_cmd(synthesis: &Path, config: &str, samples: usize, seed: u64) -> Result<(), Error> {
    let cfg = load_config(config)?;
    if samples == 0 {
        return Err(Error::Config("--samples must be positive".into()));
    }
    let result = SynthesisResult::read(synthesis).map_err(|e| Error::Config(format!("{}: {e}", synthesis.display())))?;
    let report = verify_interior(&cfg.design(), &cfg.layout()?, &cfg.fluctuation(), &result, samples, seed)?;
    println!("checked: {}", report.checked);
    println!("worst_spr_margin: {:.6e}", report.worst_margin.spr_margin);
    println!("worst_abscissa: {:.6e}", report.worst_abscissa.abscissa);
    if let Some(v) = report.first_violation {
        return Err(Error::Certificate(format!(
            "sample m = {:.4}, COM = ({:.4}, {:.4}), sigma = {:?}: margin {:.3e}, abscissa {:.3e}",
            v.mass, v.com.0, v.com.1, v.sigma.0, v.spr_margin, v.abscissa
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Synthesize { config, out } => synthesize_cmd(config, out),
        Command::Simulate { config, synthesis, disable_feedback, failure, no_failure, out, seed } => simulate_cmd(
            config,
            synthesis.as_deref(),
            *disable_feedback,
            failure.as_deref(),
            *no_failure,
            out.as_deref(),
            *seed,
        ),
        Command::Verify { synthesis, config, samples, seed } => verify_cmd(synthesis, config, *samples, *seed),
        Command::PrintConfig { preset } => match Config::builtin(preset) {
            Ok(c) => {
                print!("{}", c.to_toml());
                Ok(())
            }
            Err(e) => Err(Error::Config(format!("{e}; presets: {}", PRESETS.join(", ")))),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
