mod config;
mod runner;
mod shell;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Command as SpecCommand;

/// Kinetic-theory toolkit: singular Maxwell kernels, moment eigenproblems,
/// particle simulation, characteristic-function diagnostics, self-similar
/// profiles, and shear scenarios, driven by declarative JSON specs.
#[derive(Parser)]
#[command(name = "kinetos", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment spec (strict JSON; unknown keys are errors)
    #[arg(long)]
    config: PathBuf,
    /// Master seed override; sub-streams derive from it by fixed labels
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory override
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Job list: JSON {"jobs": [spec, ...]}
    #[arg(long)]
    manifest: PathBuf,
    /// Worker count (default: KINETOS_JOBS or 1)
    #[arg(long)]
    jobs: Option<usize>,
    /// Root for job directories and the aggregate report
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Angular constants and moment multipliers of a collision kernel
    KernelReport(RunArgs),
    /// Leading eigenpair of the drifted second-moment operator
    Eig(RunArgs),
    /// Particle run with moment series and conservation audit
    Simulate(RunArgs),
    /// Self-similar profile search
    Profile(RunArgs),
    /// Decay of a perturbed state toward its profile
    Stability(RunArgs),
    /// Two-trajectory non-expansion diagnostic
    Contraction(RunArgs),
    /// Two-envelope comparison bound along paired trajectories
    Comparison(RunArgs),
    /// Shear scenario pipeline in the rescaled clock
    Shear(RunArgs),
    /// Run many specs from a manifest on a worker pool
    Sweep(SweepArgs),
}

impl CliCommand {
    fn expected_spec_command(&self) -> Option<SpecCommand> {
        match self {
            CliCommand::KernelReport(_) => Some(SpecCommand::KernelReport),
            CliCommand::Eig(_) => Some(SpecCommand::Eig),
            CliCommand::Simulate(_) => Some(SpecCommand::Simulate),
            CliCommand::Profile(_) => Some(SpecCommand::Profile),
            CliCommand::Stability(_) => Some(SpecCommand::Stability),
            CliCommand::Contraction(_) => Some(SpecCommand::Contraction),
            CliCommand::Comparison(_) => Some(SpecCommand::Comparison),
            CliCommand::Shear(_) => Some(SpecCommand::Shear),
            CliCommand::Sweep(_) => None,
        }
    }
}

fn fail(messages: impl IntoIterator<Item = String>) -> ExitCode {
    for m in messages {
        eprintln!("error: {m}");
    }
    ExitCode::from(1)
}

fn run_single(args: &RunArgs, expected: SpecCommand) -> ExitCode {
    let mut spec = match config::load_spec(&args.config) {
        Ok(spec) => spec,
        Err(issues) => return fail(issues.into_iter().map(|i| i.to_string())),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if spec.command != expected {
        return fail([format!(
            "config error at command: spec says {:?} but the {} subcommand was invoked",
            spec.command.name(),
            expected.name()
        )]);
    }
    let issues = config::validate(&spec);
    if !issues.is_empty() {
        return fail(issues.into_iter().map(|i| i.to_string()));
    }
    let out = match (&args.out, &spec.output_dir) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => {
            return fail(["config error at output_dir: required when --out is absent".into()])
        }
    };

    match shell::run_to_dir(&spec, &out) {
        Ok(run) => {
            for c in &run.checks {
                println!(
                    "check {}: {} ({})",
                    c.name,
                    if c.pass { "pass" } else { "FAIL" },
                    c.detail
                );
            }
            println!(
                "run {} hash {} -> {} ({})",
                spec.command.name(),
                run.hash,
                out.display(),
                if run.pass { "pass" } else { "check-fail" }
            );
            if run.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(msg) => fail([msg]),
    }
}

fn run_sweep(args: &SweepArgs) -> ExitCode {
    let manifest = match sweep::load_manifest(&args.manifest) {
        Ok(m) => m,
        Err(issues) => return fail(issues.into_iter().map(|i| i.to_string())),
    };
    let workers = args
        .jobs
        .or_else(|| std::env::var("KINETOS_JOBS").ok().and_then(|v| v.parse().ok()))
        .unwrap_or(1);
    match sweep::run_sweep(&manifest, args.out.as_deref(), workers) {
        Ok(code) => ExitCode::from(u8::try_from(code).unwrap_or(1)),
        Err(issues) => fail(issues.into_iter().map(|i| i.to_string())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not errors; everything else exits 1
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match &cli.command {
        CliCommand::Sweep(args) => run_sweep(args),
        other => {
            let expected = other.expected_spec_command().expect("non-sweep commands map");
            let args = match other {
                CliCommand::KernelReport(a)
                | CliCommand::Eig(a)
                | CliCommand::Simulate(a)
                | CliCommand::Profile(a)
                | CliCommand::Stability(a)
                | CliCommand::Contraction(a)
                | CliCommand::Comparison(a)
                | CliCommand::Shear(a) => a,
                CliCommand::Sweep(_) => unreachable!(),
            };
            run_single(args, expected)
        }
    }
}
