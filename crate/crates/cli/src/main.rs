use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hetdistill::config::RunConfig;
use hetdistill::pipeline::{evaluate_model, load_model, write_report, Phase, Run};
use hetdistill::profile::{run_profile, What};
use hetdistill::scene::{generate_synthetic, load_scenarios, save_scenarios};
use hetdistill::train::prepare;
use hetdistill::CoreError;

/// Teacher/student trajectory forecasting with distillation and closed-loop refinement.
#[derive(Parser)]
#[command(name = "hetdistill", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic highway scenarios as JSON lines.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value = "mixed")]
        profile: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one phase or the whole pipeline.
    Train {
        #[arg(long, default_value = "all")]
        phase: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Scenario file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Config override, `section.key=value`; repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on a scenario file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; `.json` and `.csv` files are written next to it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Time model components.
    Profile {
        #[arg(long)]
        what: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::Validation { .. } | CoreError::Parse { .. } => 2,
        _ => 1,
    }
}

fn run(cmd: Cmd) -> hetdistill::Result<()> {
    match cmd {
        Cmd::Generate { seed, count, profile, out, config } => {
            let cfg = RunConfig::load(config.as_deref(), &[])?;
            let set = generate_synthetic(seed, count, &profile, &cfg.data)?;
            save_scenarios(&set, &out)?;
            eprintln!("wrote {} scenarios to {}", set.len(), out.display());
        }
        Cmd::Train { phase, config, out, data, overrides } => {
            let phase: Phase = phase.parse()?;
            let cfg = RunConfig::load(config.as_deref(), &overrides)?;
            let summary = Run { cfg: &cfg, out: out.clone(), data }.execute(phase)?;
            if let Some(m) = &summary.student_metrics {
                eprintln!("student: minADE {:.3} minFDE {:.3} miss {:.3}", m.min_ade, m.min_fde, m.miss_rate);
            }
            eprintln!("outputs in {}", out.display());
        }
        Cmd::Eval { model, data, report } => {
            let (_, cfg, _) = load_model(&model)?;
            let set = load_scenarios(&data, &cfg.data)?;
            let samples = prepare(&set, &cfg.data);
            let r = evaluate_model(&model, &samples)?;
            write_report(&report, &r)?;
            eprintln!("minADE {:.3} minFDE {:.3} miss {:.3} over {} scenarios", r.min_ade, r.min_fde, r.miss_rate, r.count);
        }
        Cmd::Profile { what, config, reps, out } => {
            let what: What = what.parse()?;
            let cfg = RunConfig::load(config.as_deref(), &[])?;
            let text = run_profile(what, &cfg, reps)?;
            match out {
                Some(p) => hetdistill::io::write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("HETDISTILL_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("error: thread pool: {e}");
                    return ExitCode::from(1);
                }
            }
            _ => {
                eprintln!("error: HETDISTILL_THREADS must be a positive integer, got `{v}`");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
