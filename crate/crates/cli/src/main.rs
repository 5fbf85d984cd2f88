use clap::{Parser, Subcommand};
use crfscale_cli::config::{parse_alphas, parse_seeds, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "crfscale", version, about = "Structured prediction with scaled potentials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config and write telemetry plus a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed list: `5`, `0..7` (inclusive), or `0,3,9`.
        #[arg(long)]
        seeds: Option<String>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train at each fixed unary scale and emit the comparison table.
    AlphaSweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated positive scales, e.g. `0.25,1,4`.
        #[arg(long)]
        alphas: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset with its matched decoder.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Generated dataset file, or a Taskar OCR file for chain models.
        #[arg(long)]
        data: PathBuf,
    },
    /// Generate a synthetic dataset file.
    GenData {
        /// `synth_seq` or `synth_seg`.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        min_len: Option<usize>,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        num_labels: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        unary_snr: Option<f64>,
        #[arg(long)]
        transition_strength: Option<f64>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config, seeds, out } => {
            let run_config = RunConfig::load(&config)?;
            let seeds = match seeds {
                Some(text) => parse_seeds(&text)?,
                None => run_config.seeds.clone(),
            };
            let out_dir = run_config.resolve_output_dir(out.as_deref());
            let result = crfscale_cli::run::cmd_train(&run_config, &seeds, &out_dir)?;
            match result.mean_metric {
                Some(mean) => println!(
                    "{} seeds done, mean metric {:.4} (std {:.4}), {} failed; summary at {}",
                    result.seeds.len(),
                    mean,
                    result.std_metric.unwrap_or(0.0),
                    result.failed_seeds,
                    out_dir.join("summary.json").display()
                ),
                None => println!(
                    "all {} seeds failed; summary at {}",
                    result.seeds.len(),
                    out_dir.join("summary.json").display()
                ),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::AlphaSweep {
            config,
            alphas,
            seeds,
            out,
        } => {
            let run_config = RunConfig::load(&config)?;
            let alphas = parse_alphas(&alphas)?;
            let seeds = match seeds {
                Some(text) => parse_seeds(&text)?,
                None => run_config.seeds.clone(),
            };
            let out_dir = run_config.resolve_output_dir(out.as_deref());
            let rows = crfscale_cli::run::cmd_alpha_sweep(&run_config, &alphas, &seeds, &out_dir)?;
            for row in &rows {
                let alpha = row
                    .alpha
                    .map(|a| format!("{a}"))
                    .unwrap_or_else(|| "-".into());
                let mean = row
                    .mean_metric
                    .map(|m| format!("{m:.4}"))
                    .unwrap_or_else(|| "failed".into());
                println!("{:<12} alpha={:<8} metric={}", row.setting, alpha, mean);
            }
            println!("table at {}", out_dir.join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { ckpt, data } => {
            crfscale_cli::eval::cmd_eval(&ckpt, &data)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::GenData {
            kind,
            seed,
            out,
            count,
            min_len,
            max_len,
            num_labels,
            feature_dim,
            unary_snr,
            transition_strength,
            height,
            width,
            snr,
        } => {
            let overrides = crfscale_cli::eval::GenDataOverrides {
                count,
                min_len,
                max_len,
                num_labels,
                feature_dim,
                unary_snr,
                transition_strength,
                height,
                width,
                snr,
            };
            crfscale_cli::eval::cmd_gen_data(&kind, seed, &out, &overrides)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest => {
            if crfscale_cli::selftest::cmd_selftest() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
