use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpft::accountant::{self, AccountantError, DEFAULT_DELTA};
use dpft::finetune::FineTuneStrategy;
use dpft::harness::{self, config::KEYS, ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "dp", version, about = "Differentially private fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Non-private pretraining on the public split; writes a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Private fine-tuning of the pretrained checkpoint with one strategy.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// whole | last | first-last | custom:<layer,...>
        #[arg(long)]
        strategy: FineTuneStrategy,
        #[arg(long)]
        epsilon: f64,
    },
    /// Every configured strategy at every configured epsilon.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Privacy accounting for the Poisson-subsampled Gaussian mechanism.
    Accountant {
        #[command(subcommand)]
        command: AccountantCommand,
    },
    /// List the documented configuration keys.
    Keys,
}

#[derive(Subcommand)]
enum AccountantCommand {
    /// Epsilon spent after `steps` steps at noise multiplier `sigma`.
    Epsilon {
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
    },
    /// Noise multiplier that meets a target epsilon.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        steps: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<i32, HarnessError> {
    match command {
        Command::Pretrain { config } => pretrain(&ExperimentConfig::load(&config)?),
        Command::Finetune {
            config,
            strategy,
            epsilon,
        } => finetune(&ExperimentConfig::load(&config)?, &strategy, epsilon),
        Command::Sweep { config } => sweep(&ExperimentConfig::load(&config)?),
        Command::Accountant { command } => accountant_cmd(command),
        Command::Keys => {
            for (key, help) in KEYS {
                println!("{key:<24}{help}");
            }
            Ok(0)
        }
    }
}

fn pretrain(cfg: &ExperimentConfig) -> Result<i32, HarnessError> {
    let task = harness::load_task(cfg)?;
    let p = harness::pretrain(cfg, &task)?;
    let path = harness::checkpoint_path(cfg);
    harness::save_checkpoint(&p.model, &path)?;
    println!("checkpoint={}", path.display());
    println!("params={} steps={}", p.model.num_params(), p.summary.steps);
    if let Some(loss) = p.summary.final_loss {
        println!("final_loss={loss}");
    }
    if let Some(acc) = p.summary.holdout_accuracy {
        println!("holdout_accuracy={acc}");
    }
    Ok(0)
}

fn finetune(cfg: &ExperimentConfig, strategy: &FineTuneStrategy, epsilon: f64) -> Result<i32, HarnessError> {
    let task = harness::load_task(cfg)?;
    let path = harness::checkpoint_path(cfg);
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "checkpoint {} not found; run `dp pretrain` first",
            path.display()
        )));
    }
    let model = harness::load_checkpoint(&path)?;
    let out = harness::finetune_dp(cfg, &model, &task, strategy, epsilon)?;
    let mut report = harness::empty_report(cfg, &task, None);
    report.records.push(out.record);
    emit(&report, &out.trace, cfg)?;
    Ok(0)
}

fn sweep(cfg: &ExperimentConfig) -> Result<i32, HarnessError> {
    let out = harness::run_sweep(cfg)?;
    emit(&out.report, &out.trace, cfg)?;
    Ok(out.report.first_failure().unwrap_or(0))
}

fn emit(report: &harness::RunReport, trace: &[harness::TracePoint], cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let files = harness::report_emit(report, trace, &cfg.output)?;
    let mut out = std::io::stdout().lock();
    // Ignore closed pipes.
    let _ = write!(out, "{}", report.table())
        .and_then(|_| writeln!(out))
        .and_then(|_| writeln!(out, "report={}", files.json.display()))
        .and_then(|_| writeln!(out, "table={}", files.table.display()))
        .and_then(|_| writeln!(out, "trace={}", files.trace.display()));
    Ok(())
}

fn accountant_cmd(command: AccountantCommand) -> Result<i32, HarnessError> {
    let orders = accountant::default_orders();
    match command {
        AccountantCommand::Epsilon { sigma, q, steps, delta } => {
            check_delta(delta)?;
            let (eps, alpha) = accountant::epsilon_for(q, sigma, steps, delta, &orders)?;
            println!("epsilon={eps} alpha={alpha}");
        }
        AccountantCommand::Calibrate { epsilon, delta, q, steps } => {
            check_delta(delta)?;
            let sigma = accountant::calibrate_sigma(epsilon, delta, q, steps)?;
            let (eps, alpha) = accountant::epsilon_for(q, sigma, steps, delta, &orders)?;
            println!("sigma={sigma} epsilon={eps} alpha={alpha}");
        }
    }
    Ok(0)
}

fn check_delta(delta: f64) -> Result<(), HarnessError> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(AccountantError::InvalidParameter(format!("delta must lie in (0, 1), got {delta}")).into())
    }
}
