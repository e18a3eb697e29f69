use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cwcd_cli::commands;

#[derive(Parser)]
#[command(
    name = "cwcd",
    about = "Category-wise contrastive decoding pipeline: decode structured reports, \
             trace attention concentration, evaluate, benchmark, mask"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode structured reports for every corpus example.
    Decode {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-example decode trace sidecars.
        #[arg(long)]
        trace: bool,
        /// Worker threads; output is identical for any degree.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write the per-step attention-concentration CSV for a corpus.
    Lama {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against references.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the synthetic co-occurrence benchmark grid and beta sweep.
    Bench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides the spec file's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Black out boxes ("x0,y0,x1,y1" quads joined with '+') in a PGM image.
    Mask {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        boxes: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> anyhow::Result<usize> {
    let cli = Cli::parse();
    match cli.command {
        Command::Decode {
            corpus,
            config,
            out,
            trace,
            jobs,
        } => commands::cmd_decode(&corpus, &config, &out, trace, jobs),
        Command::Lama {
            corpus,
            config,
            out,
        } => {
            commands::cmd_lama(&corpus, &config, &out)?;
            Ok(0)
        }
        Command::Eval {
            pred,
            reference,
            out,
        } => {
            let summary = commands::cmd_eval(&pred, &reference, &out)?;
            print!("{summary}");
            Ok(0)
        }
        Command::Bench {
            spec,
            out,
            jobs,
            seed,
        } => {
            let mut bench_spec = cwcd_cli::config::load_bench_spec(&spec)?;
            if let Some(seed) = seed {
                bench_spec.seed = seed;
            }
            let summary = commands::bench_to_dir(&bench_spec, &out, jobs)?;
            print!("{summary}");
            Ok(0)
        }
        Command::Mask { image, boxes, out } => {
            commands::cmd_mask(&image, &boxes, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(0) => ExitCode::SUCCESS,
        Ok(errors) => {
            eprintln!("{errors} example(s) failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
