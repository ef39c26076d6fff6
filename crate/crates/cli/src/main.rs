//! `localnet` command-line tool.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use localnet::data::ShapeKind;
use localnet::Error;

use commands::{CenterMethod, PredictInputs, SynthArgs};
use run_config::RunFlags;

#[derive(Parser)]
#[command(
    name = "localnet",
    version,
    about = "Point cloud classification and part segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, model.ckpt and run.cfg.
    Train {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Accepted for symmetry; training itself is single-threaded.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on the test split, with and without voting.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Predict labels for point files, or for the dataset's test split.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Point CSV files (`x,y,z[,label]`). Repeatable.
        #[arg(long)]
        input: Vec<PathBuf>,
        /// Object class id of the inputs (segmentation).
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export a cloud with its FPS and CPL centers as CSV and PLY.
    InspectCenters {
        /// Without a checkpoint the model is initialized from --seed.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// cpl, fps or both.
        #[arg(long, default_value = "both")]
        method: String,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train over a grid of settings and tabulate the results.
    Ablate {
        /// Axis such as `m=192..320`, `k=64..192:32`, `mfc=A..H` or `centers=cpl,fps`. Repeatable.
        #[arg(long, required = true)]
        grid: Vec<String>,
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Sample points uniformly on an OFF mesh surface.
    SampleMesh {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Center and scale into the unit sphere.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        normalize: bool,
        /// Output `.csv` or `.ply` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic primitive-shape dataset with a manifest.
    GenSynthetic {
        #[arg(long, value_delimiter = ',', default_value = "sphere,cube,cylinder,plane")]
        classes: Vec<String>,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
        #[arg(long, default_value_t = 256)]
        points: usize,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numeric(_) => 4,
        Error::Data(_) | Error::Parse { .. } | Error::Io { .. } | Error::Shape(_) => 3,
    }
}

fn run(cli: Cli) -> localnet::Result<()> {
    match cli.command {
        Command::Train { run, out, jobs: _ } => {
            let o = commands::cmd_train(&run, &out)?;
            if let Some(last) = o.log.last() {
                println!("final test metric {}", last.test_metric);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            run,
            out,
            jobs,
        } => {
            let r = commands::cmd_eval(&checkpoint, &run, &out, jobs)?;
            println!("{}", serde_json::to_string(&r).map_err(|e| Error::Data(e.to_string()))?);
        }
        Command::Predict {
            checkpoint,
            input,
            class,
            run,
            out,
            jobs,
        } => {
            let inputs = PredictInputs { files: input, class };
            commands::cmd_predict(&checkpoint, &inputs, &run, &out, jobs)?;
            println!("wrote {}", out.display());
        }
        Command::InspectCenters {
            checkpoint,
            input,
            method,
            run,
            out,
        } => {
            let method: CenterMethod = method.parse()?;
            if let Some(counts) = commands::cmd_inspect_centers(checkpoint.as_deref(), &input, method, &run, &out)? {
                let distinct = counts.iter().filter(|&&c| c > 0).count();
                println!("cpl: {distinct} distinct centers of {}", counts.iter().sum::<usize>());
            }
            println!("wrote {}", out.display());
        }
        Command::Ablate { grid, run, out, jobs } => {
            let axes = grid
                .iter()
                .map(|g| commands::parse_grid(g))
                .collect::<localnet::Result<Vec<_>>>()?;
            let rows = commands::cmd_ablate(&run, &axes, &out, jobs)?;
            println!("{} runs; wrote {}", rows.len(), out.join("ablation.csv").display());
        }
        Command::SampleMesh {
            input,
            points,
            seed,
            normalize,
            out,
        } => {
            let pc = commands::cmd_sample_mesh(&input, points, seed, normalize, &out)?;
            println!("wrote {} points to {}", pc.len(), out.display());
        }
        Command::GenSynthetic {
            classes,
            train_per_class,
            test_per_class,
            points,
            jitter,
            seed,
            out,
        } => {
            let classes = classes
                .iter()
                .map(|c| c.parse())
                .collect::<localnet::Result<Vec<ShapeKind>>>()?;
            let args = SynthArgs {
                classes,
                train_per_class,
                test_per_class,
                points,
                jitter,
                seed,
            };
            let manifest = commands::cmd_gen_synthetic(&args, &out)?;
            println!("wrote {}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
