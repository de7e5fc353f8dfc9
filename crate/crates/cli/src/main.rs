use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fklab::envelopes::{eval_envelope, FamilySpec};
use fklab::experiment::{class_grid, report, run, ExperimentConfig, Mode, SingleOp};
use fklab::functionals::MeasureSpec;
use fklab::kato::classify;
use fklab::processes::ProcessSpec;
use fklab::{Error, Result};

#[derive(Parser)]
#[command(name = "fklab", version, about = "Feynman-Kac perturbation laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment and write its report directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// λ of the perturbed form for an experiment config; writes spectral.json.
    Spectral {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Kato-class flags of a measure for a process.
    KatoClassify {
        #[arg(long)]
        measure: PathBuf,
        #[arg(long)]
        process: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16,64,256")]
        ladder: Vec<f64>,
        #[arg(long, default_value_t = 17)]
        grid_points: usize,
    },
    /// Perturbed kernel estimate and envelope fits; writes a report directory.
    FkKernel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gauge estimate; writes a report directory.
    Gauge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Truncated resolvent ladder; writes a report directory.
    Resolvent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Unit-constant envelope values on a (t, r) grid, as CSV on stdout.
    EnvelopeEval {
        #[arg(long)]
        family: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        t: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<f64>,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn single(config: &Path, out: Option<PathBuf>, op: SingleOp) -> Result<i32> {
    let mut cfg = ExperimentConfig::load_unchecked(config)?;
    cfg.mode = Mode::SingleOp;
    cfg.op = Some(op);
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let bundle = run(&cfg)?;
    report(&bundle, &cfg.output_dir)?;
    for e in &bundle.summary.stage_errors {
        eprintln!("{}: {}", e.stage, e.error);
    }
    Ok(0)
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let bundle = run(&cfg)?;
            report(&bundle, &cfg.output_dir)?;
            for e in &bundle.summary.stage_errors {
                eprintln!("{}: {}", e.stage, e.error);
            }
            println!("{}", bundle.summary.message);
            Ok(bundle.summary.verdict.exit_code())
        }
        Command::Spectral { config, out } => {
            let mut cfg = ExperimentConfig::load_unchecked(&config)?;
            cfg.mode = Mode::SingleOp;
            cfg.op = Some(SingleOp::Spectral);
            let bundle = run(&cfg)?;
            match &bundle.spectral {
                Some(s) => {
                    std::fs::write(&out, serde_json::to_string_pretty(s)? + "\n")?;
                    println!("lambda = {}", s.lambda);
                    Ok(0)
                }
                None => {
                    let why = bundle.summary.stage_errors.iter().map(|e| e.error.clone()).collect::<Vec<_>>();
                    Err(Error::InvalidInput(format!("spectral stage failed: {}", why.join("; "))))
                }
            }
        }
        Command::KatoClassify { measure, process, out, ladder, grid_points } => {
            let mu: MeasureSpec = read_json(&measure)?;
            let spec: ProcessSpec = read_json(&process)?;
            let grid = class_grid(&mu, spec.dim, grid_points);
            let rep = classify(&mu, &spec, &ladder, &grid)?;
            std::fs::write(&out, serde_json::to_string_pretty(&rep)? + "\n")?;
            println!("{}", serde_json::to_string(&rep.flags)?);
            Ok(0)
        }
        Command::FkKernel { config, out } => single(&config, out, SingleOp::Kernel),
        Command::Gauge { config, out } => single(&config, out, SingleOp::Gauge),
        Command::Resolvent { config, out } => single(&config, out, SingleOp::Resolvent),
        Command::EnvelopeEval { family, t, r } => {
            let spec: FamilySpec = read_json(&family)?;
            let fam = spec.build()?;
            let x = vec![0.0; spec.dim];
            println!("t,r,value");
            for &tt in &t {
                for &rr in &r {
                    let mut y = x.clone();
                    y[0] = rr;
                    println!("{tt},{rr},{}", eval_envelope(&fam, tt, &x, &y)?);
                }
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    fklab::init_threads();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
