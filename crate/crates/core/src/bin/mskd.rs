use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mskd::checkpoint::{load_checkpoint, optimizer_path, save_checkpoint, save_optimizer};
use mskd::data::{
    append_metrics, generate_synthetic, load_dataset, save_dataset, MetricsRecord, RunConfig,
};
use mskd::evaluation::evaluate;
use mskd::gradcheck::run_suite;
use mskd::trainer::{train_student, train_teacher, TrainEvent, TrainObserver, TrainOutcome};
use mskd::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "mskd", version, about = "Multi-scale cluster contrast with teacher-guided distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic identity dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a teacher encoder from scratch.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Warm up and distill a student from a trained teacher.
    TrainStudent {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on the query/gallery splits.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Needed only when the checkpoint was trained with `batch_norm = off`.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
    CheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path)?;
    if let Ok(seed) = std::env::var("MSKD_SEED") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Failure::Usage(format!("MSKD_SEED is not an integer: {seed:?}")))?;
        cfg.train.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

/// Runs training while streaming each epoch record to the metrics log.
fn with_metrics_log<F>(metrics: &PathBuf, train: F) -> Result<TrainOutcome, Failure>
where
    F: FnOnce(&mut dyn TrainObserver) -> mskd::Result<TrainOutcome>,
{
    let mut log_error = None;
    let mut observer = |event: &TrainEvent<'_>| {
        if let TrainEvent::EpochFinished { record, .. } = event {
            if log_error.is_none() {
                if let Err(e) = append_metrics(&MetricsRecord::Epoch((*record).clone()), metrics) {
                    log_error = Some(e);
                }
            }
        }
    };
    let outcome = train(&mut observer);
    if let Some(e) = log_error {
        return Err(e.into());
    }
    Ok(outcome?)
}

fn save_outcome(outcome: &TrainOutcome, out: &PathBuf) -> Result<(), Failure> {
    save_checkpoint(&outcome.params, out)?;
    save_optimizer(&outcome.optimizer, optimizer_path(out))?;
    if let Some(last) = outcome.records.last() {
        println!("{}", serde_json::to_string(last).map_err(Error::from)?);
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(seed) = seed {
                cfg.synth.seed = seed;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.synth.seed);
            let ds = generate_synthetic(&cfg.synth, &mut rng)?;
            save_dataset(&ds, &out)?;
        }
        Command::TrainTeacher {
            config,
            data,
            out,
            metrics,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let outcome = with_metrics_log(&metrics, |obs| train_teacher(&ds, &cfg.train, obs))?;
            save_outcome(&outcome, &out)?;
        }
        Command::TrainStudent {
            config,
            data,
            teacher,
            out,
            metrics,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let mut teacher = load_checkpoint(&teacher)?;
            teacher.batch_norm = cfg.train.batch_norm;
            let outcome =
                with_metrics_log(&metrics, |obs| train_student(&teacher, &ds, &cfg.train, obs))?;
            save_outcome(&outcome, &out)?;
        }
        Command::Evaluate {
            ckpt,
            data,
            report,
            config,
        } => {
            let mut params = load_checkpoint(&ckpt)?;
            if let Some(config) = config {
                params.batch_norm = load_config(&config)?.train.batch_norm;
            }
            let ds = load_dataset(&data)?;
            let result = evaluate(&params, &ds)?;
            let record = MetricsRecord::Evaluation(result);
            println!("{}", record.to_json()?);
            if let Some(report) = report {
                append_metrics(&record, report)?;
            }
        }
        Command::Gradcheck { trials, seed } => {
            if trials == 0 {
                return Err(Failure::Usage("--trials must be >= 1".into()));
            }
            let results = run_suite(trials, seed)?;
            let mut ok = true;
            for r in &results {
                let verdict = if r.passed { "ok" } else { "FAILED" };
                println!("{:<18} trials={} max_rel_err={:.3e} {verdict}", r.name, r.trials, r.max_rel_error);
                ok &= r.passed;
            }
            if !ok {
                return Err(Failure::CheckFailed);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::CheckFailed) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(EXIT_CHECK_FAILED)
        }
    }
}
