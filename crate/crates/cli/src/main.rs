use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stepreward_cli::{cmd_audit, cmd_collect, cmd_eval, cmd_train_rl, cmd_train_rm, CliError, ExperimentConfig, RlOptions};

#[derive(Debug, Parser)]
#[command(name = "stepreward", version, about = "Step-reward shaping experiments")]
struct Cli {
    /// TOML config file; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, same as `--set output.dir=...`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reward scheme, e.g. `SR+PR-Clip-Delta`.
    #[arg(long, global = true)]
    scheme: Option<String>,
    /// Override one config key, e.g. `--set optim.learning_rate=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample and annotate reward-model training data.
    Collect,
    /// Fit the process and outcome reward models.
    TrainRm {
        /// Output directory of `collect`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a policy under the configured scheme.
    TrainRl {
        /// Output directory of `train-rm`.
        #[arg(long)]
        rm: Option<PathBuf>,
        /// `policy.json` to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Last iteration to run.
        #[arg(long)]
        stop: Option<usize>,
    },
    /// Sweep repetition probes against the shaping schemes.
    Audit {
        #[arg(long)]
        rm: PathBuf,
    },
    /// Evaluate a saved policy, or the reference policy.
    Eval {
        #[arg(long)]
        policy: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.set;
    if let Some(s) = cli.scheme {
        overrides.push(format!("scheme.name={s:?}"));
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(out) = cli.out {
        cfg.output.dir = out;
    }
    let dir = cfg.output.dir.display().to_string();
    match cli.command {
        Command::Collect => {
            let r = cmd_collect(&cfg)?;
            println!("{} solutions, {} prefixes -> {dir}", r.solutions.len(), r.prefixes.len());
        }
        Command::TrainRm { data } => {
            let r = cmd_train_rm(&cfg, &data)?;
            let last = |m: &str| r.losses.iter().rfind(|l| l.model == m).map_or(f64::NAN, |l| l.loss);
            println!("prm loss {:.4}, orm loss {:.4} -> {dir}", last("prm"), last("orm"));
        }
        Command::TrainRl { rm, resume, stop } => {
            let r = cmd_train_rl(&cfg, &RlOptions { rm, resume, stop })?;
            if let Some(row) = r.train.log.last() {
                println!(
                    "{} iter {}: greedy {:.3}, steps {:.2} -> {dir}",
                    cfg.scheme.name, row.iter, row.greedy_acc, row.mean_steps
                );
            }
        }
        Command::Audit { rm } => {
            let r = cmd_audit(&cfg, &rm)?;
            println!("{} rows, eta {:.4} -> {dir}", r.rows.len(), r.eta);
        }
        Command::Eval { policy } => {
            let r = cmd_eval(&cfg, policy.as_deref())?;
            let e = &r.eval.report;
            println!(
                "greedy {:.3}, sampling {:.3}, pass@{} {:.3} -> {dir}",
                e.greedy_acc, e.sampling_acc, e.k, e.pass_at_k
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
