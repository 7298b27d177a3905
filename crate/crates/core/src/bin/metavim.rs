use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metavim::controllers::ControllerKind;
use metavim::diffnet::Checkpoint;
use metavim::harness::{
    gradcheck_suite, mean_travel_time, meta_test, meta_train, plot_travel_time, run_ablation, run_classical,
    ExperimentConfig, MetricsWriter, Variant,
};
use metavim::{Error, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "metavim", version, about = "Decentralized traffic-signal control with latent task inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train the configured variant and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Scenario and initialization seed; defaults to the first config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Also write travel_time.svg.
        #[arg(long)]
        plot: bool,
    },
    /// Evaluate a checkpoint on the config's scenario and seeds.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a classical controller over the config's seeds.
    Baseline {
        /// random, fixedtime, fixedtime_offset, maxpressure or sotl; defaults
        /// to the controller named by the config variant.
        #[arg(long)]
        kind: Option<ControllerKind>,
        #[arg(long)]
        config: PathBuf,
    },
    /// Train and compare the five learned variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference check of the ELBO, PPO and intrinsic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn print_rows(records: &[metavim::harness::MetricsRecord]) -> Result<()> {
    let mut w = MetricsWriter::new(std::io::stdout());
    for r in records {
        w.write(r)?;
    }
    Ok(())
}

fn train(config: &Path, seed: Option<u64>, out: &Path, plot: bool) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    if cfg.variant.is_classical() {
        return Err(Error::Config(format!(
            "variant `{}` is classical; use the baseline command",
            cfg.variant
        )));
    }
    let seed = seed.unwrap_or(cfg.seeds[0]);
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let mut writer = MetricsWriter::create(&out.join("metrics.csv"))?;
    let outcome = meta_train(&cfg, seed, |r| {
        eprintln!(
            "iteration {:>3}  travel {:8.2} s  queue {:6.3}  r_int {:10.3}  elbo {}",
            r.iteration,
            r.avg_travel_time_s,
            r.mean_queue,
            r.int_reward,
            r.elbo_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        writer.write(r)
    })?;
    outcome.checkpoint(&cfg, seed)?.save(&out.join("checkpoint.json"))?;
    if plot && !outcome.metrics.is_empty() {
        plot_travel_time(&outcome.metrics, &out.join("travel_time.svg"))?;
    }
    println!(
        "trained {} for {} iterations (seed {seed}); greedy travel time {:.2} s",
        cfg.variant,
        outcome.metrics.len(),
        outcome.final_eval.avg_travel_time_s
    );
    Ok(())
}

fn eval(ckpt: &Path, config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let ckpt = Checkpoint::load(ckpt)?;
    let records = meta_test(&ckpt, &cfg)?;
    print_rows(&records)?;
    println!("mean travel time {:.2} s over {} seeds", mean_travel_time(&records)?, records.len());
    Ok(())
}

fn baseline(kind: Option<ControllerKind>, config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let kind = match (kind, cfg.variant) {
        (Some(k), _) => k,
        (None, Variant::Classical(k)) => k,
        (None, v) => {
            return Err(Error::Config(format!(
                "no --kind given and variant `{v}` is not classical"
            )))
        }
    };
    let report = run_classical(&cfg, kind)?;
    print_rows(&report.records)?;
    println!(
        "{kind}: mean travel time {:.2} s over {} seeds",
        report.mean_travel_time_s,
        report.records.len()
    );
    Ok(())
}

fn ablate(config: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let table = run_ablation(&cfg)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let reports = gradcheck_suite(seed)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!(
            "{:<10} max rel error {:.3e} over {} parameters",
            r.name, r.report.max_rel_error, r.report.checked
        );
        worst = worst.max(r.report.max_rel_error);
    }
    if worst > GRADCHECK_TOLERANCE {
        return Err(Error::NonFinite(format!(
            "gradient check: relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out, plot } => train(&config, seed, &out, plot),
        Command::Eval { ckpt, config } => eval(&ckpt, &config),
        Command::Baseline { kind, config } => baseline(kind, &config),
        Command::Ablate { config } => ablate(&config),
        Command::Gradcheck { seed } => gradcheck(seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
