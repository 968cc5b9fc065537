//! `mtlmad`: toy data generation, pseudo-anomaly synthesis, training,
//! evaluation, ablation and single-image scoring.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mtlmad::config::load_config;
use mtlmad::data::ToyConfig;
use mtlmad::eval::{
    cmd_ablate, cmd_eval, cmd_score, cmd_synth, cmd_toydata, cmd_train, flags_label, parse_ablation_rows,
    reference_ablation_rows, EvalReport,
};
use mtlmad::{Error, Result};

#[derive(Parser)]
#[command(name = "mtlmad", version, about = "Multi-task anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic toy dataset.
    Toydata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with toy-generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Synthesize the pseudo-anomaly corpus of the training split.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory of externally generated `<stem>.gen.<ext>` images.
        #[arg(long)]
        external_gen: Option<PathBuf>,
    },
    /// Train one run per seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seeds; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output root, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a test split with one or more checkpoints.
    Eval {
        /// Checkpoint directories (one per seed).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Test manifest; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        maps: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain and evaluate per task combination.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Rows as five-digit 0/1 flags (`10000,11100`), or `reference`.
        #[arg(long, default_value = "reference")]
        rows: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fused score and anomaly map of a single image.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Where to write the anomaly map PNG.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_toy_config(path: &Path) -> Result<ToyConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config("<toy config>", e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Toydata { out, seed, config } => {
            let cfg = match config {
                Some(p) => read_toy_config(&p)?,
                None => ToyConfig::default(),
            };
            let ds = cmd_toydata(&cfg, seed, &out)?;
            println!("train {}\nval {}\ntest {}", ds.train.display(), ds.val.display(), ds.test.display());
        }
        Command::Synth {
            config,
            out,
            seed,
            external_gen,
        } => {
            let mut cfg = load_config(&config)?;
            if external_gen.is_some() {
                cfg.data.external_gen = external_gen;
            }
            let s = cmd_synth(&cfg, seed, &out)?;
            println!("{} images, {} masks ({} external)", s.images, s.masks, s.external);
        }
        Command::Train { config, seeds, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let seeds = seeds.unwrap_or_else(|| cfg.seeds.clone());
            for d in cmd_train(&cfg, &seeds)? {
                println!("{}", d.display());
            }
        }
        Command::Eval {
            checkpoints,
            test,
            maps,
            out,
        } => {
            let mut evals = Vec::new();
            let mut fp = String::new();
            for (i, ckpt) in checkpoints.iter().enumerate() {
                let dir = if checkpoints.len() == 1 { out.clone() } else { out.join(format!("run{i}")) };
                let o = cmd_eval(ckpt, test.as_deref(), maps, &dir)?;
                if fp.is_empty() {
                    let (cfg, _, _) = mtlmad::eval::load_model(ckpt)?;
                    fp = mtlmad::config::fingerprint(&cfg)?;
                }
                evals.push(o.seed_eval);
            }
            let report = EvalReport::new(fp, evals);
            report.write(&out)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { config, rows, seed, out } => {
            let cfg = load_config(&config)?;
            let rows = if rows == "reference" {
                reference_ablation_rows()
            } else {
                parse_ablation_rows(&rows)?
            };
            for r in cmd_ablate(&cfg, &rows, seed, &out)? {
                let a = r.eval.fused.map(|a| format!("{:.2}", 100.0 * a)).unwrap_or_else(|| "-".into());
                println!("{} {a}", flags_label(&r.flags));
            }
        }
        Command::Score { checkpoint, image, out } => {
            let (fused, scores, _) = cmd_score(&checkpoint, &image, out.as_deref())?;
            println!("fused {fused}");
            for t in mtlmad::backbone::TaskId::ALL {
                if let Some(v) = scores.get(t) {
                    println!("{t} {v}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
