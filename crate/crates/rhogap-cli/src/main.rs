//! Command-line front end for the rhogap pipeline.
//!
//! One command per process; each stage reads the previous stage's
//! artifact from the output directory unless an explicit input path is
//! given. Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numerical error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use rhogap::bounds::BoundConfig;
use rhogap::experiment::{run_experiment, ExperimentConfig};
use rhogap::gp::{estimate_lipschitz, fit_hyperparameters, BoxDomain, GpModel};
use rhogap::io::{
    self, FileMeta, MODEL_FILE, RHO_FIELD_FILE, TRAINING_FILE, TRAJECTORY_FILE,
};
use rhogap::quality::{rho_field, QualityConfig, RhoPoint};
use rhogap::sim::{evaluate_bounds, generate_training_data, simulate_closed_loop, SystemSpec};
use rhogap::{Error, Result};

const USAGE: &str = "\
rhogap - data-quality assessment and certified tracking for learned control-affine models

usage: rhogap <command> [INPUT] [--config PATH] [--seed INT] [--out DIR] [--grid INT]

commands:
  generate    collect training data              -> <out>/training.csv
  fit         fit hyperparameters [training.csv] -> <out>/model.txt
  simulate    closed loop + ultimate bound [model.txt] -> <out>/trajectory.csv
  assess      rho-gap field on a grid [model.txt]      -> <out>/rho_field.csv
  reproduce   full pipeline                      -> all artifacts + summary.txt

flags:
  --config PATH   sectioned key-value config file (defaults: benchmark setting)
  --seed INT      overrides sim.seed
  --out DIR       artifact directory (default: out)
  --grid INT      overrides output.assess_grid

environment:
  RHOGAP_THREADS  caps the worker-thread count

exit codes: 0 success, 2 config error, 3 data error, 4 numerical error
";

struct Cli {
    command: String,
    input: Option<PathBuf>,
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
    grid: Option<usize>,
}

fn parse_args(args: &[String]) -> std::result::Result<Cli, String> {
    let mut command = None;
    let mut input = None;
    let mut config = None;
    let mut seed = None;
    let mut out = PathBuf::from("out");
    let mut grid = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let v = it.next().ok_or("--config needs a path")?;
                config = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = it.next().ok_or("--seed needs an integer")?;
                seed = Some(v.parse::<u64>().map_err(|_| {
                    format!("--seed: expected an unsigned integer, got '{v}'")
                })?);
            }
            "--out" => {
                let v = it.next().ok_or("--out needs a directory")?;
                out = PathBuf::from(v);
            }
            "--grid" => {
                let v = it.next().ok_or("--grid needs an integer")?;
                grid = Some(v.parse::<usize>().map_err(|_| {
                    format!("--grid: expected a positive integer, got '{v}'")
                })?);
            }
            "--help" | "-h" => return Err("HELP".into()),
            other if other.starts_with('-') => {
                return Err(format!("unknown flag '{other}'"));
            }
            other => {
                if command.is_none() {
                    command = Some(other.to_string());
                } else if input.is_none() {
                    input = Some(PathBuf::from(other));
                } else {
                    return Err(format!("unexpected argument '{other}'"));
                }
            }
        }
    }
    Ok(Cli {
        command: command.ok_or("no command given")?,
        input,
        config,
        seed,
        out,
        grid,
    })
}

fn exit_code_for(err: &Error) -> u8 {
    match err.root() {
        Error::InvalidConfig(_) => 2,
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => 2,
        Error::InsufficientData { .. }
        | Error::DataGeneration(_)
        | Error::Io(_)
        | Error::Parse { .. } => 3,
        Error::NumericalConditioning(_)
        | Error::Fitting { .. }
        | Error::SpecInfeasible { .. }
        | Error::NoLowerInputBound
        | Error::SingularDecoupling { .. }
        | Error::SignViolation { .. }
        | Error::Divergence { .. } => 4,
        Error::Stage { .. } => 4,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
            })?;
            ExperimentConfig::from_config_string(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(grid) = cli.grid {
        cfg.assess_grid = grid;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn meta_for(cfg: &ExperimentConfig) -> FileMeta {
    FileMeta {
        fingerprint: cfg.fingerprint(),
        seed: cfg.seed,
        extra: vec![("datagen_gain".into(), format!("{}", cfg.datagen_gain))],
    }
}

fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let spec = cfg.system_spec()?;
    let data = generate_training_data(&spec, &cfg.datagen(), cfg.n_train, cfg.s_on, cfg.seed)?;
    let path = out.join(TRAINING_FILE);
    io::write_training_csv(&path, &data, &meta_for(cfg))?;
    println!("wrote {} ({} samples)", path.display(), data.len());
    Ok(())
}

fn cmd_fit(cfg: &ExperimentConfig, out: &Path, input: Option<&Path>) -> Result<()> {
    let training = input
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(TRAINING_FILE));
    let data = io::read_training_csv(&training)?;
    if data.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: data.len(),
        });
    }
    let mut init = cfg.fit_init_hyperparameters();
    if data.s_on2 > 0.0 {
        init.s_on2 = data.s_on2;
    }
    let fitted = fit_hyperparameters(&data, &init, &cfg.fit_bounds()?, &cfg.fit_options())?;
    let path = out.join(MODEL_FILE);
    io::write_model(&path, &data, &fitted, &cfg.system, &meta_for(cfg))?;
    println!(
        "wrote {} (s_f2 = {:.4}, s_g2 = {:.4}, l_f = {:.4}, l_g = {:.4}, s_on2 = {:.4})",
        path.display(),
        fitted.s_f2,
        fitted.s_g2,
        fitted.l_f,
        fitted.l_g,
        fitted.s_on2
    );
    Ok(())
}

/// Loads a model file and rebuilds the factorized model over the named
/// prior system.
fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<(GpModel, SystemSpec)> {
    let (data, h, prior) = io::read_model(path)?;
    let mut spec_cfg = cfg.clone();
    spec_cfg.system = prior;
    let spec = spec_cfg.system_spec()?;
    let model = GpModel::new(data, h, Arc::clone(&spec.f_hat), Arc::clone(&spec.g_hat))?;
    Ok((model, spec))
}

fn bound_config_for(cfg: &ExperimentConfig, model: &GpModel) -> Result<BoundConfig> {
    let domain = BoxDomain::from_ball(cfg.domain_radius, cfg.d_x)?;
    let lipschitz = estimate_lipschitz(model, &domain, cfg.lipschitz_grid)?;
    BoundConfig::for_ball(cfg.tau, cfg.delta, cfg.domain_radius, cfg.d_x, lipschitz)
}

fn cmd_simulate(cfg: &ExperimentConfig, out: &Path, input: Option<&Path>) -> Result<()> {
    let model_path = input
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(MODEL_FILE));
    let (model, spec) = load_model(cfg, &model_path)?;
    let ctrl = cfg.controller()?;
    let bc = bound_config_for(cfg, &model)?;
    let mut sim = simulate_closed_loop(
        &spec,
        &model,
        &ctrl,
        nalgebra::DVector::zeros(cfg.d_x),
        cfg.t_end,
        cfg.dt,
        cfg.record_every,
        cfg.seed,
    )?;
    evaluate_bounds(&mut sim, &model, &bc, &ctrl);
    let feasible = sim.bounds.iter().filter(|b| b.feasible).count();
    let path = out.join(TRAJECTORY_FILE);
    io::write_trajectory_csv(&path, &sim, &meta_for(cfg))?;
    println!(
        "wrote {} ({} samples, {} feasible)",
        path.display(),
        sim.len(),
        feasible
    );
    if feasible == 0 {
        eprintln!(
            "warning: alpha >= eta at every recorded state; the ultimate bound is infeasible (radius = NaN throughout)"
        );
    }
    Ok(())
}

fn cmd_assess(cfg: &ExperimentConfig, out: &Path, input: Option<&Path>) -> Result<()> {
    let model_path = input
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(MODEL_FILE));
    let (model, _) = load_model(cfg, &model_path)?;
    let ctrl = cfg.controller()?;
    let bc = bound_config_for(cfg, &model)?;
    let quality = if model.is_empty() {
        // no data: quantiles are undefined, every fill distance is +inf
        QualityConfig::new(cfg.m_fill, 0.0, 0.0, 0.0, cfg.chi_f, cfg.chi_g)?
    } else {
        QualityConfig::from_data(
            model.data(),
            cfg.m_fill,
            cfg.chi_f,
            cfg.chi_g,
            cfg.q_low,
            cfg.q_high,
        )?
    };
    if let Some(w) = quality.stability_warning() {
        eprintln!("warning: {w}");
    }

    let domain = BoxDomain::from_ball(cfg.domain_radius, cfg.d_x)?;
    let points = domain.grid_points(cfg.assess_grid);
    let x_ref = ctrl.reference.state(cfg.snapshot_t);
    let rho_points: Vec<RhoPoint> = points
        .into_iter()
        .map(|x| {
            let e = &x - &x_ref;
            let r = rhogap::control::filtered_state(&e, &ctrl);
            let pi =
                rhogap::control::control_law(&x, cfg.snapshot_t, &model, &ctrl).unwrap_or(f64::NAN);
            RhoPoint { x, r, pi }
        })
        .collect();
    let samples = rho_field(
        &rho_points,
        &model,
        &bc,
        &quality,
        cfg.k_c,
        cfg.rho_convention(),
    );
    let path = out.join(RHO_FIELD_FILE);
    io::write_rho_csv(&path, &samples, &meta_for(cfg))?;
    println!("wrote {} ({} grid points)", path.display(), samples.len());
    Ok(())
}

fn cmd_reproduce(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let output = run_experiment(cfg, Some(out))?;
    print!("{}", io::render_summary(&output.summary));
    println!("artifacts in {}", out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let input = cli.input.as_deref();
    match cli.command.as_str() {
        "generate" => cmd_generate(&cfg, &cli.out),
        "fit" => cmd_fit(&cfg, &cli.out, input),
        "simulate" => cmd_simulate(&cfg, &cli.out, input),
        "assess" => cmd_assess(&cfg, &cli.out, input),
        "reproduce" => cmd_reproduce(&cfg, &cli.out),
        other => Err(Error::InvalidConfig(format!(
            "unknown command '{other}' (try --help)"
        ))),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(msg) if msg == "HELP" => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            return ExitCode::from(2);
        }
    };

    if let Ok(threads) = std::env::var("RHOGAP_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: cannot configure {n} worker threads: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: RHOGAP_THREADS: expected a positive integer, got '{threads}'");
                return ExitCode::from(2);
            }
        }
    }

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(exit_code_for(&err))
        }
    }
}
