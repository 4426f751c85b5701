use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aspan::harness;
use aspan::{Error, Result};

#[derive(Parser)]
#[command(name = "aspan", version, about = "Adaptive-span detector-free image matching")]
struct Cli {
    /// JSON run configuration; omitted sections use defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic homography dataset.
    Gen,
    /// Train on a dataset; writes weights/ and metrics.json.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Match two images (tensor file, PGM or PPM); writes matches.jsonl.
    Match {
        #[arg(long)]
        weights: PathBuf,
        image_a: PathBuf,
        image_b: PathBuf,
        /// Also write match, uncertainty and span figures.
        #[arg(long)]
        viz: bool,
    },
    /// Evaluate weights on a dataset; writes eval.json.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Multiply-add scaling of local against full attention.
    Bench,
    /// Train all three attention modes with one seed and compare.
    Ablate {
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let cfg = harness::load_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::Gen => {
            let out = harness::out_dir(cli.out, "dataset");
            let m = harness::cmd_gen(&cfg, seed, &out)?;
            println!(
                "wrote {} pairs ({}x{}, {:?} warps, seed {}) to {}",
                m.pairs.len(),
                m.config.height,
                m.config.width,
                m.config.tier,
                m.seed,
                out.display()
            );
        }
        Command::Train { data } => {
            let out = harness::out_dir(cli.out, "run");
            let r = harness::cmd_train(&cfg, seed, &data, &out)?;
            for e in &r.epochs {
                println!(
                    "epoch {:>3}  lr {:.2e}  loss {:.4} (coarse {:.4} fine {:.4} flow {:.4})  {:.1}s",
                    e.epoch, e.learning_rate, e.train.total, e.train.coarse, e.train.fine, e.train.flow, e.seconds
                );
            }
            if let Some(e) = &r.final_eval {
                println!("held-out precision@5px {:.3}  epe per block {:?}", e.precision_5px, e.epe_per_block);
            }
            println!("weights and metrics written to {}", out.display());
        }
        Command::Match { weights, image_a, image_b, viz } => {
            let out = harness::out_dir(cli.out, "matches");
            let r = harness::cmd_match(&weights, &image_a, &image_b, &out, viz)?;
            println!("{} matches written to {}", r.matches.len(), out.join(harness::MATCHES_FILE).display());
        }
        Command::Eval { weights, data } => {
            let out = harness::out_dir(cli.out, "eval");
            let r = harness::cmd_eval(&weights, &data, &out)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Bench => {
            let out = harness::out_dir(cli.out, "bench");
            let t = harness::cmd_bench(&cfg, seed, &out)?;
            println!("{:>6} {:>6} {:>8} {:>14} {:>14}", "px", "tokens", "per-q", "local macs", "full macs");
            for r in &t.rows {
                println!("{:>6} {:>6} {:>8} {:>14} {:>14}", r.image_px, r.tokens, r.tokens_per_query, r.local_macs, r.full_macs);
            }
            println!("log-log slope: local {:.3}, full {:.3}", t.local_slope, t.full_slope);
        }
        Command::Ablate { data } => {
            let out = harness::out_dir(cli.out, "ablation");
            let r = harness::cmd_ablate(&cfg, seed, &data, &out)?;
            print!("{}", harness::ablation_table(&r));
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ASPAN_THREADS") {
        let n: usize = v.parse().map_err(|_| Error::Config(format!("ASPAN_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("ASPAN_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match &e {
                Error::Numeric(_) => 3,
                e if e.is_validation() => 2,
                _ => 1,
            })
        }
    }
}
