use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mvclip_cli::config::EvalSection;
use mvclip_cli::report::print_line;
use mvclip_cli::{
    cmd_ablate, cmd_audit, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, load_config, CliError, CliResult,
    EvalData, Sweep,
};
use mvclip_core::data::synthetic::{SyntheticSpec, Task};
use mvclip_core::model::Backbone;

#[derive(Parser)]
#[command(name = "mvclip", version, about = "Multi-view vision-language fine-tuning on a CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic four-view dataset and its manifest.
    Synth {
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        balance: f64,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// K-fold fine-tuning from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a manifest or on a config's data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        manifest: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the short zero-shot prompts.
        #[arg(long)]
        zero_shot: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n_boot: usize,
    },
    /// Repeat the k-fold experiment across a sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// local_global, views or adapters.
        #[arg(long)]
        sweep: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Count the parameters of a full-size backbone.
    Audit {
        /// vitb32, vitb16 or vitl14.
        #[arg(long)]
        backbone: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth {
            task,
            n,
            seed,
            balance,
            size,
            out,
        } => {
            let task = Task::parse(&task).ok_or_else(|| CliError::validation(format!("unknown task `{task}`")))?;
            let spec = SyntheticSpec {
                task,
                n_cases: n,
                image_size: size,
                balance,
                seed,
                ..SyntheticSpec::default()
            };
            let manifest = cmd_synth(&spec, &out)?;
            print_line(&manifest.display().to_string());
        }
        Command::Train { config, out, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = cmd_train(&cfg)?;
            let s = &r.summary;
            print_line(&format!(
                "{} folds: accuracy {:.4} ± {:.4}{}",
                r.folds.len(),
                s.accuracy.mean,
                s.accuracy.std,
                s.auc.map(|a| format!(", auc {:.4} ± {:.4}", a.mean, a.std)).unwrap_or_default()
            ));
        }
        Command::Eval {
            checkpoint,
            manifest,
            config,
            zero_shot,
            out,
            seed,
            n_boot,
        } => {
            let data = match (manifest, config) {
                (Some(m), _) => EvalData::Manifest(m),
                (None, Some(c)) => EvalData::Config(Box::new(load_config(&c)?)),
                (None, None) => return Err(CliError::validation("give --manifest or --config")),
            };
            let eval = EvalSection {
                n_boot,
                ..EvalSection::default()
            };
            let r = cmd_eval(&checkpoint, &data, zero_shot, &eval, seed, &out)?;
            let m = &r.metrics;
            print_line(&format!(
                "{} cases: accuracy {:.4}{}",
                m.n_cases,
                m.accuracy,
                match (m.auc, m.auc_ci) {
                    (Some(a), Some([lo, hi])) => format!(", auc {a:.4} [{lo:.4}, {hi:.4}]"),
                    _ => String::new(),
                }
            ));
        }
        Command::Ablate {
            config,
            sweep,
            out,
            seed,
        } => {
            let sweep = Sweep::parse(&sweep).ok_or_else(|| CliError::validation(format!("unknown sweep `{sweep}`")))?;
            let mut cfg = load_config(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let r = cmd_ablate(&cfg, sweep)?;
            for row in &r.rows {
                let a = row.summary.accuracy;
                print_line(&format!("{}: accuracy {:.4} ± {:.4}", row.setting, a.mean, a.std));
            }
        }
        Command::Audit { backbone, out } => {
            let b = Backbone::parse(&backbone)
                .ok_or_else(|| CliError::validation(format!("unknown backbone `{backbone}`")))?;
            let r = cmd_audit(b, out.as_deref())?;
            print_line(&serde_json::to_string_pretty(&r).map_err(|e| CliError::runtime(e.to_string()))?);
        }
        Command::Gradcheck { out } => {
            let r = cmd_gradcheck(out.as_deref())?;
            for c in &r.checks {
                print_line(&format!(
                    "{:<8} {:<24} {:>10.3e} {}",
                    if c.passed { "ok" } else { "FAILED" },
                    c.name,
                    c.max_rel_error,
                    c.op
                ));
            }
            let missing = r.uncovered();
            if !missing.is_empty() {
                print_line(&format!("not covered: {}", missing.join(", ")));
            }
            if !r.passed() {
                return Err(CliError::runtime(format!(
                    "gradient check failed (worst relative error {:.3e})",
                    r.worst()
                )));
            }
            print_line(&format!("all {} checks below {:e}", r.checks.len(), r.tolerance));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
