use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use flux_cli::{
    cmd_bench, cmd_eval, cmd_gradcheck, cmd_pretrain, cmd_profile, cmd_train_router, CliError, Context, EvalSpec,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "flux", version, about = "Routed full/sparse attention: train, evaluate, profile, benchmark")]
struct Cli {
    /// Run configuration (flat key = value file).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints and CSV files.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense backbone and write its checkpoint.
    Pretrain,
    /// Train layer routers on a frozen backbone.
    TrainRouter {
        /// Backbone checkpoint; defaults to `paths.backbone`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Per-task metrics and realized sparsity.
    Eval {
        /// dense, routed or forced:<sparsity>.
        #[arg(long, default_value = "dense")]
        mode: String,
        /// Defaults to `paths.routed` for routed mode, `paths.backbone` otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Layer entropy scores and the static sparsity sweep.
    Profile {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Decode latency, modeled head- versus layer-level cost, router cost.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of the router gradient.
    Gradcheck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = cli
        .config
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(&config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Context::new(cfg, cli.out)?;
    let or = |c: Option<PathBuf>, default: PathBuf| c.map_or(default, |p| ctx.resolve(&p));
    match cli.command {
        Command::Pretrain => {
            let r = cmd_pretrain(&ctx)?;
            println!(
                "final loss {:.4}; retrieval accuracy {}; holistic perplexity {} (chain {:.4})",
                r.final_loss,
                r.retrieval_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                r.holistic_perplexity.map_or("n/a".into(), |p| format!("{p:.4}")),
                r.reference_perplexity
            );
            if !r.converged {
                return Err(CliError::CheckFailed("backbone missed its probe targets".into()));
            }
        }
        Command::TrainRouter { checkpoint } => {
            let out = cmd_train_router(&ctx, &or(checkpoint, ctx.backbone_path()))?;
            if let Some(last) = out.history.rows().last() {
                println!("{}", last.summary(&out.history.task_names));
            }
        }
        Command::Eval { mode, checkpoint } => {
            let spec: EvalSpec = mode.parse()?;
            let default = if spec == EvalSpec::Routed {
                ctx.routed_path()
            } else {
                ctx.backbone_path()
            };
            for r in cmd_eval(&ctx, &or(checkpoint, default), spec)? {
                let m = r.metrics;
                println!(
                    "{}: accuracy {} perplexity {:.4} omega_msr {:.4}",
                    r.task,
                    m.accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    m.perplexity,
                    m.omega
                );
            }
        }
        Command::Profile { checkpoint } => {
            for s in cmd_profile(&ctx, &or(checkpoint, ctx.backbone_path()))? {
                println!("layer {}: entropy {:.4} K {}", s.layer, s.entropy, s.k);
            }
        }
        Command::Bench { checkpoint } => {
            cmd_bench(&ctx, &or(checkpoint, ctx.backbone_path()))?;
        }
        Command::Gradcheck => {
            cmd_gradcheck(&ctx)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
