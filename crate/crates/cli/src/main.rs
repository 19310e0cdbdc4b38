//! `magls`: scene -> forward -> precondition -> invert -> report.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use magls::config::{load_config, RunConfig};
use magls::forward::{add_component_noise, forward_field, modulus};
use magls::geometry::{rasterize_scene, sample_measurement_points, Grid3, MeasurementSet};
use magls::io::{
    read_grid_field, read_measurements_csv, write_atomic, write_grid_field, write_measurements_csv,
};
use magls::lowrank::precondition_from_geometry;
use magls::optimizer::{l2_model_error, run_inversion, write_trace_csv, Problem};
use magls::{Error, KernelOperator};

#[derive(Parser, Debug)]
#[command(
    name = "magls",
    version,
    about = "Level-set inversion of magnetic modulus data"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `[output] dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on a single thread.
    #[arg(long, global = true)]
    serial: bool,
    /// Worker thread count.
    #[arg(long, global = true, conflicts_with = "serial")]
    threads: Option<usize>,
    /// Replace the measurement, noise and SGD seeds with N, N+1 and N+2.
    #[arg(long, global = true, value_name = "N")]
    seed_override: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rasterize the configured scene into the true susceptibility grid.
    Scene,
    /// Synthesize clean and noisy modulus data with the dense kernel.
    Forward {
        /// Susceptibility grid [default: <out>/kappa_true.mgrd].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build and save the depth-partitioned truncated SVD of the kernel.
    Precondition {
        /// Measurement CSV [default: <out>/data_noisy.csv].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the mini-batch SGD inversion.
    Invert {
        /// Measurement CSV [default: <out>/data_noisy.csv].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Kernel operator [default: <out>/operator.mkop].
        #[arg(long)]
        operator: Option<PathBuf>,
        /// True susceptibility grid; enables model-error tracking.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Misfit and model-error metrics plus a per-point discrepancy CSV.
    Report {
        /// Measurement CSV [default: <out>/data_noisy.csv].
        #[arg(long)]
        data: Option<PathBuf>,
        /// Kernel operator [default: <out>/operator.mkop].
        #[arg(long)]
        operator: Option<PathBuf>,
        /// Recovered susceptibility [default: <out>/kappa.mgrd].
        #[arg(long)]
        kappa: Option<PathBuf>,
        /// True susceptibility [default: <out>/kappa_true.mgrd if present].
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Noiseless data, used for the noise-floor RMS.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => EXIT_USAGE,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let Some(config_path) = cli.global.config.clone() else {
        eprintln!("error: --config <PATH> is required");
        return ExitCode::from(EXIT_USAGE);
    };
    if let Err(msg) = init_threads(&cli.global) {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(&cli, &config_path) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(feature = "parallel")]
fn init_threads(g: &Global) -> Result<(), String> {
    let n = if g.serial { Some(1) } else { g.threads };
    match n {
        Some(0) => Err("--threads must be >= 1".into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

#[cfg(not(feature = "parallel"))]
fn init_threads(g: &Global) -> Result<(), String> {
    if g.threads == Some(0) {
        return Err("--threads must be >= 1".into());
    }
    Ok(())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join(default))
    }
}

fn run(cli: &Cli, config_path: &Path) -> magls::Result<()> {
    let mut cfg = load_config(config_path)?;
    if let Some(n) = cli.global.seed_override {
        cfg.measurements.seed = n;
        cfg.noise.seed = n.wrapping_add(1);
        cfg.sgd.seed = n.wrapping_add(2);
    }
    let out = cli
        .global
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let ctx = Ctx { cfg, out };
    match &cli.command {
        Command::Scene => cmd_scene(&ctx),
        Command::Forward { model } => cmd_forward(&ctx, &ctx.path(model, "kappa_true.mgrd")),
        Command::Precondition { data } => cmd_precondition(&ctx, &ctx.path(data, "data_noisy.csv")),
        Command::Invert {
            data,
            operator,
            truth,
        } => cmd_invert(
            &ctx,
            &ctx.path(data, "data_noisy.csv"),
            &ctx.path(operator, "operator.mkop"),
            truth.as_deref(),
        ),
        Command::Report {
            data,
            operator,
            kappa,
            truth,
            clean,
        } => {
            let truth = match truth {
                Some(t) => Some(t.clone()),
                None => Some(ctx.out.join("kappa_true.mgrd")).filter(|p| p.exists()),
            };
            cmd_report(
                &ctx,
                &ctx.path(data, "data_noisy.csv"),
                &ctx.path(operator, "operator.mkop"),
                &ctx.path(kappa, "kappa.mgrd"),
                truth.as_deref(),
                clean.as_deref(),
            )
        }
    }
}

fn read_field_on(grid: &Grid3, path: &Path) -> magls::Result<Vec<f64>> {
    let (g, v) = read_grid_field(path)?;
    if g != *grid {
        return Err(Error::InvalidInput(format!(
            "{}: grid {:?} does not match the configured grid {:?}",
            path.display(),
            g.dims(),
            grid.dims()
        )));
    }
    Ok(v)
}

fn cmd_scene(ctx: &Ctx) -> magls::Result<()> {
    let grid = ctx.cfg.grid;
    let occ = rasterize_scene(&ctx.cfg.scene, &grid)?;
    let kappa: Vec<f64> = occ.iter().map(|o| ctx.cfg.kappa0 * o).collect();
    let path = ctx.out.join("kappa_true.mgrd");
    write_grid_field(&path, &grid, &kappa)?;
    let nodes = occ.iter().filter(|o| **o > 0.0).count();
    println!(
        "scene: {} primitives, {nodes} of {} nodes occupied (volume {:.6} km^3)",
        ctx.cfg.scene.primitives.len(),
        grid.n_nodes(),
        nodes as f64 * grid.cell_volume()
    );
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_forward(ctx: &Ctx, model: &Path) -> magls::Result<()> {
    let cfg = &ctx.cfg;
    let kappa = read_field_on(&cfg.grid, model)?;
    let m = &cfg.measurements;
    let meas =
        sample_measurement_points(m.x_range, m.y_range, m.z, m.count, &cfg.grid.domain, m.seed)?;
    let samples = forward_field(&kappa, &meas, &cfg.grid, &cfg.field)?;
    let clean: Vec<f64> = samples.iter().map(|s| s.modulus).collect();
    let noisy = add_component_noise(&samples, cfg.noise.eta, cfg.noise.seed);
    let clean_path = ctx.out.join("data_clean.csv");
    let noisy_path = ctx.out.join("data_noisy.csv");
    write_measurements_csv(&clean_path, &meas.points, &clean)?;
    write_measurements_csv(&noisy_path, &meas.points, &noisy)?;
    let max = clean.iter().cloned().fold(0.0, f64::max);
    println!(
        "forward: {} points, max |B| = {max:.6e} nT, eta = {}",
        meas.len(),
        cfg.noise.eta
    );
    println!("wrote {}", clean_path.display());
    println!("wrote {}", noisy_path.display());
    Ok(())
}

fn cmd_precondition(ctx: &Ctx, data: &Path) -> magls::Result<()> {
    let cfg = &ctx.cfg;
    let meas = read_measurements_csv(data)?;
    meas.check_above(&cfg.grid.domain)?;
    let op = precondition_from_geometry(&meas, &cfg.grid, &cfg.field.direction, cfg.epsilon_svd)?;
    let path = ctx.out.join("operator.mkop");
    op.save(&path)?;
    println!(
        "precondition: M = {}, epsilon_svd = {:e}",
        meas.len(),
        cfg.epsilon_svd
    );
    println!("layer  z        rank_x  rank_y  rank_z");
    for (h, r) in op.ranks().iter().enumerate() {
        println!(
            "{:<6} {:<8.4} {:<7} {:<7} {}",
            h + 1,
            cfg.grid.layer_z(h),
            r[0],
            r[1],
            r[2]
        );
    }
    println!("compression ratio: {:.6}", op.compression_ratio());
    println!("wrote {}", path.display());
    Ok(())
}

fn load_inputs(
    ctx: &Ctx,
    data: &Path,
    operator: &Path,
) -> magls::Result<(MeasurementSet, KernelOperator)> {
    let meas = read_measurements_csv(data)?;
    let op = KernelOperator::load(operator)?;
    op.check_compatible(&ctx.cfg.grid, meas.len())?;
    Ok((meas, op))
}

fn cmd_invert(ctx: &Ctx, data: &Path, operator: &Path, truth: Option<&Path>) -> magls::Result<()> {
    let cfg = &ctx.cfg;
    let (meas, op) = load_inputs(ctx, data, operator)?;
    let truth = truth.map(|p| read_field_on(&cfg.grid, p)).transpose()?;
    let problem = Problem::new(
        cfg.grid,
        &op,
        meas.observed()?,
        cfg.field.strength,
        cfg.kappa0,
    )?;
    let phi0 = cfg.initial.evaluate(&cfg.grid);
    let s = &cfg.sgd;
    println!(
        "invert: M = {}, b = {}, epochs = {}, alpha = {:e}, C = {}, band = {:.6}, reinit = {}, seed = {}",
        meas.len(),
        s.batch_size,
        s.epochs,
        s.alpha,
        s.cfl,
        s.band_halfwidth,
        s.reinit_iters,
        s.seed
    );
    let result = run_inversion(&problem, s, &phi0, truth.as_deref())?;
    for e in &result.epochs {
        match e.model_err {
            Some(err) => println!(
                "epoch {:>4}  mean f_sk {:.6e}  model_err {:.6e}",
                e.epoch, e.mean_f_sk, err
            ),
            None => println!("epoch {:>4}  mean f_sk {:.6e}", e.epoch, e.mean_f_sk),
        }
    }
    let phi_path = ctx.out.join("phi.mgrd");
    let kappa_path = ctx.out.join("kappa.mgrd");
    let trace_path = ctx.out.join("trace.csv");
    write_grid_field(&phi_path, &cfg.grid, &result.phi.values)?;
    write_grid_field(&kappa_path, &cfg.grid, &result.kappa)?;
    write_trace_csv(&trace_path, &result.trace)?;
    if let (Some(a), Some(b)) = (
        result.initial_model_err,
        result.epochs.last().and_then(|e| e.model_err),
    ) {
        println!("model error: initial {a:.6e}, final {b:.6e}");
    }
    for p in [&phi_path, &kappa_path, &trace_path] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

fn cmd_report(
    ctx: &Ctx,
    data: &Path,
    operator: &Path,
    kappa: &Path,
    truth: Option<&Path>,
    clean: Option<&Path>,
) -> magls::Result<()> {
    let cfg = &ctx.cfg;
    let grid = cfg.grid;
    let (meas, op) = load_inputs(ctx, data, operator)?;
    let observed = meas.observed()?;
    let kappa = read_field_on(&grid, kappa)?;
    let problem = Problem::new(grid, &op, observed, cfg.field.strength, cfg.kappa0)?;
    let rows: Vec<usize> = (0..meas.len()).collect();
    let predicted: Vec<f64> = problem
        .predict(&rows, &kappa)?
        .iter()
        .map(modulus)
        .collect();
    let residual: Vec<f64> = predicted.iter().zip(observed).map(|(d, o)| d - o).collect();
    let f_m = residual.iter().map(|r| 0.5 * r * r).sum::<f64>() / residual.len() as f64;

    let mut csv = String::from("x,y,z,d,d_obs,residual\n");
    for ((p, d), (o, r)) in meas
        .points
        .iter()
        .zip(&predicted)
        .zip(observed.iter().zip(&residual))
    {
        csv.push_str(&format!("{},{},{},{d},{o},{r}\n", p[0], p[1], p[2]));
    }
    let path = ctx.out.join("discrepancy.csv");
    write_atomic(&path, csv.as_bytes())?;

    let volume = kappa.iter().map(|k| k / cfg.kappa0).sum::<f64>() * grid.cell_volume();
    println!("f_M             {f_m:.6e}");
    println!("rms(d - d*)     {:.6e}", rms(residual.iter().copied()));
    if let Some(c) = clean {
        let c = read_measurements_csv(c)?;
        let clean = c.observed()?;
        if clean.len() != observed.len() {
            return Err(Error::DimensionMismatch {
                what: "clean data",
                expected: observed.len(),
                actual: clean.len(),
            });
        }
        println!(
            "noise floor rms {:.6e}",
            rms(clean.iter().zip(observed).map(|(a, b)| a - b))
        );
    }
    if let Some(t) = truth {
        let t = read_field_on(&grid, t)?;
        println!(
            "model error     {:.6e}",
            l2_model_error(&kappa, &t, grid.cell_volume())
        );
    }
    println!("volume          {volume:.6e} km^3");
    println!("wrote {}", path.display());
    Ok(())
}
