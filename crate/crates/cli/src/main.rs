use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};

use qloss::io;
use qloss::participation::{extrapolate_convergence, ConvergenceSeries};
use qloss::pipeline::{self, AnalysisConfig, DeviceData, ModeData, Overrides, Stage, StageMethod};
use qloss::resonance::fit_s21_resonance;
use qloss::synth::{generate_power_sweep, generate_s21, SyntheticScenario};
use qloss::tls::{fit_tls, qint_at};

#[derive(Parser)]
#[command(name = "qloss", version, about = "Loss analysis for superconducting microwave devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a hanger resonance to an S21 trace (freq_hz,re,im).
    FitResonance {
        input: PathBuf,
        /// Input power at the device; overrides any sidecar file.
        #[arg(long)]
        power_dbm: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the TLS power model to a sweep (nbar,q_int,sigma_q).
    FitTls {
        input: PathBuf,
        /// Photon number at which to report Q_int.
        #[arg(long, default_value_t = 1.0)]
        nbar: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Invert the participation matrix for per-mode quality factors (mode,q_int,sigma_q).
    Solve(SolveArgs),
    /// Loss budget of one mode.
    Budget {
        #[arg(long)]
        participations: PathBuf,
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        frequency_hz: f64,
        /// Directory for budget.json, budget.txt and budget_plot.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extrapolate a mesh-convergence series (n_elements,p).
    Extrapolate {
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        dimension: u32,
        #[arg(long)]
        tail_points: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write synthetic sweeps (and optionally S21 traces) for a scenario.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write one S21 trace per mode and photon number.
        #[arg(long)]
        traces: bool,
    },
    /// Run a full analysis from a configuration file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        nbar: Option<f64>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        power_dbm: Option<f64>,
    },
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    participations: PathBuf,
    /// Per-mode quality factors.
    #[arg(long)]
    q: PathBuf,
    /// Known loss factors to subtract.
    #[arg(long)]
    library: Option<PathBuf>,
    /// Mechanisms to solve for, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    solve_for: Vec<String>,
    /// Attribute the single mode's residual loss to one mechanism.
    #[arg(long)]
    remainder: bool,
    #[arg(long, default_value_t = 1.0)]
    nbar: f64,
    #[arg(long, default_value_t = 0)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn emit(json: String, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, json).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn solve(args: SolveArgs) -> Result<()> {
    let modes = io::read_q_csv(&args.q)?;
    let cfg = AnalysisConfig {
        participation_table: absolute(&args.participations)?,
        loss_factor_library: args.library.as_deref().map(absolute).transpose()?,
        corrections: Default::default(),
        stages: vec![Stage {
            name: "solve".into(),
            method: if args.remainder { StageMethod::Remainder } else { StageMethod::Solve },
            solve_for: args.solve_for,
            devices: vec![DeviceData {
                label: args.q.display().to_string(),
                modes: modes
                    .into_iter()
                    .map(|(mode, q)| ModeData {
                        mode,
                        sweep: None,
                        traces: Vec::new(),
                        q_int: Some(q),
                    })
                    .collect(),
            }],
        }],
        target_mode: None,
        frequency_hz: None,
        nbar: args.nbar,
        power_dbm: None,
        convergence: Vec::new(),
        tail_points: None,
        mc_samples: args.mc_samples,
        seed: args.seed,
    };
    let output = pipeline::analyze(&cfg, Path::new("."))?;
    emit(io::to_json_string(&output.stages[0].devices[0]), args.out.as_deref())
}

fn budget(participations: &Path, library: &Path, mode: String, frequency_hz: f64, out: Option<&Path>) -> Result<()> {
    let cfg = AnalysisConfig {
        participation_table: absolute(participations)?,
        loss_factor_library: Some(absolute(library)?),
        corrections: Default::default(),
        stages: Vec::new(),
        target_mode: Some(mode),
        frequency_hz: Some(frequency_hz),
        nbar: 1.0,
        power_dbm: None,
        convergence: Vec::new(),
        tail_points: None,
        mc_samples: 0,
        seed: 0,
    };
    let output = pipeline::analyze(&cfg, Path::new("."))?;
    let b = output.budget.as_ref().expect("target mode set");
    print!("{}", b.render_text());
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        io::write_json(&dir.join(pipeline::BUDGET_JSON), b)?;
        fs::write(dir.join(pipeline::BUDGET_TEXT), b.render_text())?;
        fs::write(dir.join(pipeline::BUDGET_PLOT), b.plot_csv())?;
    }
    Ok(())
}

fn simulate(config: &Path, out: &Path, seed: Option<u64>, traces: bool) -> Result<()> {
    let mut scenario: SyntheticScenario = io::read_json(config)?;
    if let Some(s) = seed {
        scenario.seed = s;
    }
    scenario.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for m in &scenario.modes {
        let sweep = generate_power_sweep(&scenario, &m.label)?;
        io::write_sweep_csv(&out.join(format!("{}_sweep.csv", m.label)), &sweep)?;
        if traces {
            for (k, &nbar) in scenario.nbar_grid.iter().enumerate() {
                let trace = generate_s21(&scenario, &m.label, nbar)?;
                io::write_s21_csv(&out.join(format!("{}_s21_{k:02}.csv", m.label)), &trace)?;
            }
        }
    }
    io::write_json(&out.join("scenario.json"), &scenario)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitResonance { input, power_dbm, out } => {
            let trace = io::read_s21_csv(&input, power_dbm)?;
            let fit = fit_s21_resonance(&trace).with_context(|| input.display().to_string())?;
            emit(io::to_json_string(&fit), out.as_deref())
        }
        Command::FitTls { input, nbar, out } => {
            if !(nbar > 0.0) {
                bail!("--nbar must be positive");
            }
            let sweep = io::read_sweep_csv(&input)?;
            let fit = fit_tls(&sweep).with_context(|| input.display().to_string())?;
            let report = serde_json::json!({
                "fit": fit,
                "nbar": nbar,
                "q_int": qint_at(&fit, nbar),
                "extrapolated": !fit.interpolates(nbar),
            });
            emit(format!("{}\n", serde_json::to_string_pretty(&report)?), out.as_deref())
        }
        Command::Solve(args) => solve(args),
        Command::Budget {
            participations,
            library,
            mode,
            frequency_hz,
            out,
        } => budget(&participations, &library, mode, frequency_hz, out.as_deref()),
        Command::Extrapolate {
            input,
            dimension,
            tail_points,
            out,
        } => {
            let series = ConvergenceSeries::new(io::read_convergence_csv(&input)?, dimension)?;
            let est = extrapolate_convergence(&series, tail_points)?;
            emit(io::to_json_string(&est), out.as_deref())
        }
        Command::Simulate { config, out, seed, traces } => simulate(&config, &out, seed, traces),
        Command::Pipeline {
            config,
            out,
            seed,
            nbar,
            mc_samples,
            power_dbm,
        } => {
            let overrides = Overrides {
                seed,
                nbar,
                mc_samples,
                power_dbm,
            };
            let output = pipeline::run_pipeline(&config, &overrides, &out)?;
            if let Some(b) = &output.budget {
                print!("{}", b.render_text());
            }
            eprintln!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
