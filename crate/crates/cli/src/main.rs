use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfde_cli::commands::{
    run_rerun, run_validate, FactorizationSpec, FellerSpec, InvariantSpec, LyapunovSpec,
    SimulateSpec, TightnessSpec,
};
use sfde_cli::config::{
    parse_alpha, parse_float_list, parse_geometric_grid, ResolvedModel, ResolvedPhi,
};
use sfde_cli::context::RunContext;
use sfde_core::factorization::conventional_c_p;
use sfde_core::integrate::SchemeKind;
use sfde_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sfde",
    version,
    about = "Simulation and diagnostics for stochastic delay differential equations with superlinear dissipative drift"
)]
struct Cli {
    /// Worker threads (also SFDE_THREADS). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; relative paths resolve under SFDE_OUT_DIR.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate an ensemble of trajectories and write a summary
    Simulate(SimulateArgs),
    /// Quantitative diagnostics of the segment process
    #[command(subcommand)]
    Diagnose(DiagnoseCommand),
    /// Estimate the invariant segment law and test empirical invariance
    Invariant(InvariantArgs),
    /// Stochastic-convolution bound experiments
    Factorization(FactorizationArgs),
    /// Check a model configuration document
    ValidateModel(ValidateArgs),
    /// Re-run a recorded manifest bit-exactly
    Rerun(RerunArgs),
}

#[derive(Subcommand)]
enum DiagnoseCommand {
    /// Contraction iterates, moment curves and the feasibility sweep
    Lyapunov(LyapunovArgs),
    /// Modulus-of-continuity exceedance and noise-integral increment ratios
    Tightness(TightnessArgs),
    /// Coupled continuity experiment against the Gronwall-type bound
    Feller(FellerArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model configuration file
    #[arg(long)]
    model: Option<PathBuf>,
    /// Built-in model preset (paper-eq11)
    #[arg(long)]
    preset: Option<String>,
    /// Initial segment file; defaults to a constant segment
    #[arg(long)]
    phi: Option<PathBuf>,
    /// Constant initial value used when --phi is absent
    #[arg(long, default_value_t = 1.0)]
    phi_const: f64,
    /// explicit_em | tamed_em | split_step_implicit
    #[arg(long)]
    scheme: String,
    #[arg(long)]
    dt: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    paths: usize,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(ResolvedModel, ResolvedPhi, SchemeKind)> {
        let model = ResolvedModel::resolve(self.model.as_deref(), self.preset.as_deref())?;
        let phi = match &self.phi {
            Some(path) => ResolvedPhi::from_file(path)?,
            None => ResolvedPhi::constant(&vec![self.phi_const; model.model.d()]),
        };
        let scheme = SchemeKind::parse(&self.scheme)?;
        Ok((model, phi, scheme))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Run horizon
    #[arg(long = "T")]
    horizon: f64,
    /// Also write the full-path binary dump paths.bin
    #[arg(long)]
    dump_paths: bool,
    /// Record the running noise integral
    #[arg(long)]
    record_j: bool,
}

#[derive(Args)]
struct LyapunovArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Number of delay-length iterations
    #[arg(long = "K", default_value_t = 40)]
    iterations: usize,
    /// Interpolation exponent for a_{3,lambda}: "mid" or a number
    #[arg(long, default_value = "mid")]
    alpha: String,
    /// Moment constant c_p (defaults to the conventional value for p = 3)
    #[arg(long)]
    cp: Option<f64>,
    /// Override the pinned cube-splitting kappa
    #[arg(long)]
    kappa: Option<f64>,
    /// Feasibility sweep covers lambda = 2^0 .. 2^this
    #[arg(long, default_value_t = 60)]
    lambda_max_exp: u32,
}

#[derive(Args)]
struct TightnessArgs {
    #[command(flatten)]
    common: ModelArgs,
    #[arg(long = "T")]
    horizon: f64,
    /// Discard the run before this time
    #[arg(long)]
    burnin: Option<f64>,
    /// Number of window start times spread over the run
    #[arg(long, default_value_t = 10)]
    starts: usize,
    /// Modulus gaps, e.g. 0.2,0.1,0.05
    #[arg(long, default_value = "0.2,0.1,0.05")]
    gaps: String,
    /// Exceedance thresholds, e.g. 0.5,1.0
    #[arg(long, default_value = "0.5,1.0")]
    gammas: String,
    /// Dyadic increment levels r, r/2, ..., r/2^(levels-1)
    #[arg(long, default_value_t = 6)]
    levels: usize,
    /// Exceedance level the smallest gap must stay below at every start
    #[arg(long, default_value_t = 0.01)]
    pass_threshold: f64,
}

#[derive(Args)]
struct FellerArgs {
    #[command(flatten)]
    common: ModelArgs,
    /// Comparison time
    #[arg(long = "t", default_value_t = 1.0)]
    horizon: f64,
    /// Initial-segment perturbation sizes
    #[arg(long, default_value = "0.1,0.05,0.025,0.0125")]
    perturbations: String,
}

#[derive(Args)]
struct InvariantArgs {
    #[command(flatten)]
    common: ModelArgs,
    #[arg(long = "T")]
    horizon: f64,
    /// Projection offsets in [-r, 0], e.g. -1,-0.5,0
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    proj: String,
    /// Collection burn-in (defaults to 10 r)
    #[arg(long)]
    burnin: Option<f64>,
    /// Collection stride (defaults to r)
    #[arg(long)]
    stride: Option<f64>,
    /// Invariance lag (defaults to 2 r)
    #[arg(long)]
    lag: Option<f64>,
    #[arg(long, default_value_t = 999)]
    permutations: usize,
    /// Cap on path blocks entering the permutation tables
    #[arg(long, default_value_t = 512)]
    max_block_paths: usize,
}

#[derive(Args)]
struct FactorizationArgs {
    #[arg(long, default_value_t = 3.0)]
    p: f64,
    /// Geometric grid start:factor:end
    #[arg(long, default_value = "1:2:1024")]
    mu_grid: String,
    /// "mid" or a number in (1/p, 1/2)
    #[arg(long, default_value = "mid")]
    alpha: String,
    /// Moment constant c_p (defaults to the conventional value)
    #[arg(long)]
    cp: Option<f64>,
    /// Constant integrand level
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long = "T", default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 20000)]
    paths: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Random segment pairs for the one-sided condition check
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct RerunArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = RunContext::new(cli.out, cli.threads)?;
    match cli.command {
        Command::Simulate(args) => {
            let (model, phi, scheme) = args.common.resolve()?;
            SimulateSpec {
                model,
                phi,
                scheme,
                dt: args.common.dt,
                horizon: args.horizon,
                paths: args.common.paths,
                seed: args.common.seed,
                record_noise_integral: args.record_j,
                dump_paths: args.dump_paths,
            }
            .run(&ctx)
        }
        Command::Diagnose(DiagnoseCommand::Lyapunov(args)) => {
            let (model, phi, scheme) = args.common.resolve()?;
            LyapunovSpec {
                model,
                phi,
                scheme,
                dt: args.common.dt,
                iterations: args.iterations,
                paths: args.common.paths,
                seed: args.common.seed,
                alpha: parse_alpha(&args.alpha, 3.0)?,
                c_p: args.cp.unwrap_or_else(|| conventional_c_p(3.0)),
                kappa: args.kappa,
                lambda_max_exp: args.lambda_max_exp,
            }
            .run(&ctx)
        }
        Command::Diagnose(DiagnoseCommand::Tightness(args)) => {
            let (model, phi, scheme) = args.common.resolve()?;
            let r = model.model.r();
            TightnessSpec {
                model,
                phi,
                scheme,
                dt: args.common.dt,
                horizon: args.horizon,
                paths: args.common.paths,
                seed: args.common.seed,
                burn_in: args.burnin.unwrap_or(10.0 * r),
                starts: args.starts,
                gaps: parse_float_list(&args.gaps, "gaps")?,
                gammas: parse_float_list(&args.gammas, "gammas")?,
                levels: args.levels,
                pass_threshold: args.pass_threshold,
            }
            .run(&ctx)
        }
        Command::Diagnose(DiagnoseCommand::Feller(args)) => {
            let (model, phi, scheme) = args.common.resolve()?;
            FellerSpec {
                model,
                phi,
                scheme,
                dt: args.common.dt,
                horizon: args.horizon,
                paths: args.common.paths,
                seed: args.common.seed,
                perturbations: parse_float_list(&args.perturbations, "perturbations")?,
            }
            .run(&ctx)
        }
        Command::Invariant(args) => {
            let (model, phi, scheme) = args.common.resolve()?;
            let r = model.model.r();
            InvariantSpec {
                model,
                phi,
                scheme,
                dt: args.common.dt,
                horizon: args.horizon,
                paths: args.common.paths,
                seed: args.common.seed,
                proj: parse_float_list(&args.proj, "proj")?,
                burn_in: args.burnin.unwrap_or(10.0 * r),
                stride: args.stride.unwrap_or(r),
                lag: args.lag.unwrap_or(2.0 * r),
                permutations: args.permutations,
                max_block_paths: args.max_block_paths,
            }
            .run(&ctx)
        }
        Command::Factorization(args) => {
            let p = args.p;
            FactorizationSpec {
                p,
                mu_grid: parse_geometric_grid(&args.mu_grid, "mu_grid")?,
                alpha: parse_alpha(&args.alpha, p)?,
                c_p: args.cp.unwrap_or_else(|| conventional_c_p(p)),
                eta: args.eta,
                horizon: args.horizon,
                dt: args.dt,
                paths: args.paths,
                seed: args.seed,
            }
            .run(&ctx)
        }
        Command::ValidateModel(args) => run_validate(&args.model, args.pairs, args.seed),
        Command::Rerun(args) => run_rerun(&ctx, &args.manifest),
    }
}

fn exit_code(error: &Error) -> u8 {
    match error {
        Error::ExperimentInvalid(_)
        | Error::SolverNonConvergence { .. }
        | Error::DissipativityProbe { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
