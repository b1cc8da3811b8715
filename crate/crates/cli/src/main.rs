use std::fs;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use smf_cli::config::{self, Command, Overrides};
use smf_cli::run;
use splitmeanflow::error::Error;

#[derive(Parser)]
#[command(
    name = "smf",
    about = "Average-velocity few-step generative modeling experiments on toy distributions"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct RunArgs {
    /// Path to a key = value config file
    #[arg(long)]
    config: String,
    /// Master seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Training step count override
    #[arg(long)]
    steps: Option<usize>,
    /// Flow ratio override
    #[arg(long)]
    p: Option<f64>,
    /// Teacher guidance scale override
    #[arg(long = "cfg-scale")]
    cfg_scale: Option<f64>,
    /// Sampling step count override
    #[arg(long)]
    k: Option<usize>,
    /// Output root directory override
    #[arg(long)]
    out: Option<String>,
}

#[derive(Subcommand)]
enum Sub {
    /// Flow matching pretraining (boundary-only objective, condition dropout)
    Pretrain(RunArgs),
    /// Distill an average-velocity student with the split-consistency objective
    Distill(RunArgs),
    /// Distill with the differential-identity (JVP) baseline objective
    MeanflowDistill(RunArgs),
    /// Generate samples from a checkpoint
    Sample(RunArgs),
    /// Quality and identity metrics for a checkpoint
    Eval(RunArgs),
    /// Check the algebraic identities on closed-form fields
    Verify {
        /// constant | time_poly | linear_state | all
        #[arg(long, default_value = "all")]
        field: String,
    },
}

fn overrides_of(a: &RunArgs) -> Overrides {
    Overrides {
        seed: a.seed,
        steps: a.steps,
        p: a.p,
        cfg_scale: a.cfg_scale,
        k: a.k,
        out: a.out.clone(),
    }
}

fn run_command(command: Command, args: &RunArgs) -> Result<(), Error> {
    let text = fs::read_to_string(&args.config)?;
    let cfg = config::resolve(command, &text, &overrides_of(args))?;
    let executed = run::execute(&cfg)?;
    println!("run written to {}", executed.run_dir.display());
    if let Some(report) = executed.report {
        for (name, value) in &report.scalars {
            println!("  {name} = {value}");
        }
    }
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err.category() {
        "config" => 2,
        "shape" => 3,
        "poisoned" => 4,
        "diverged" => 5,
        "missing-teacher" => 6,
        "checkpoint" => 7,
        "io" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Sub::Pretrain(a) => run_command(Command::Pretrain, a),
        Sub::Distill(a) => run_command(Command::Distill, a),
        Sub::MeanflowDistill(a) => run_command(Command::MeanflowDistill, a),
        Sub::Sample(a) => run_command(Command::Sample, a),
        Sub::Eval(a) => run_command(Command::Eval, a),
        Sub::Verify { field } => match run::verify_fields(field, &mut std::io::stdout()) {
            Ok(true) => Ok(()),
            Ok(false) => Err(Error::Config("identity verification failed".into())),
            Err(e) => Err(e),
        },
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.category(),
                "message": err.to_string(),
            });
            eprintln!("{payload}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
