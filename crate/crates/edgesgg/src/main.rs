//! Command-line driver: dataset generation, dual-graph transformation,
//! training, evaluation, and ablation sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical
//! failure. Logging level comes from `EDGESGG_LOG` (error|info|debug).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use edgesgg::error::{Error, Result};
use edgesgg::harness::{
    ablate, run_eval, run_gen, run_training, run_transform, AblationAxis, ExperimentConfig,
};
use edgesgg::metrics::Subtask;
use edgesgg::scenes::{DetectorNoise, Split, WorldSpec};

#[derive(Parser)]
#[command(
    name = "edgesgg",
    about = "Edge dual scene graph generation on synthetic scenes",
    version
)]
struct Cli {
    /// Worker threads for scene-parallel phases (0 = all cores). Results
    /// are identical for any value; `--jobs 1` is the fully serial
    /// reproducibility mode.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file from a world spec.
    Gen {
        /// World spec JSON file.
        #[arg(long)]
        spec: PathBuf,
        /// Number of scenes.
        #[arg(long)]
        n: usize,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Split tag written into each sample.
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Transform a scene JSON file into its edge dual graph.
    Transform {
        /// Scene JSON file ({"nodes":[...],"edges":[...]}; an empty edge
        /// list means the complete candidate graph).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output dual-graph JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Report to print on stdout (only "counts" is defined).
        #[arg(long)]
        report: Option<String>,
    },
    /// Train a model from an experiment config.
    Train {
        /// Experiment config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Override the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against a dataset file.
    Eval {
        /// Checkpoint JSON file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset JSONL file.
        #[arg(long)]
        data: PathBuf,
        /// Subtask: predcls, sgcls, or sggen.
        #[arg(long)]
        subtask: String,
        /// Report JSON output path (a .longtail.csv sibling is written
        /// too).
        #[arg(long)]
        report: PathBuf,
        /// Detector box jitter sigma (sggen only).
        #[arg(long, default_value_t = 0.02)]
        box_jitter: f64,
        /// Detector label flip probability (sggen only).
        #[arg(long, default_value_t = 0.1)]
        label_flip: f64,
        /// Detector miss rate (sggen only).
        #[arg(long, default_value_t = 0.1)]
        miss_rate: f64,
    },
    /// Run a branch or aggregation ablation sweep.
    Ablate {
        /// Experiment config JSON file.
        #[arg(long)]
        config: PathBuf,
        /// Axis: branches or aggregation.
        #[arg(long)]
        axis: String,
        /// Output directory for the comparison table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let config: ExperimentConfig = serde_json::from_str(&text)?;
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            spec,
            n,
            out,
            seed,
            split,
        } => {
            let spec: WorldSpec = serde_json::from_str(&std::fs::read_to_string(spec)?)?;
            spec.validate()?;
            let split = match split.to_ascii_lowercase().as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => {
                    return Err(Error::InvalidArgument(format!("unknown split {other}")))
                }
            };
            run_gen(&spec, n, seed, split, &out)?;
            println!("wrote {n} scenes to {}", out.display());
        }
        Command::Transform { input, out, report } => {
            let (dual_nodes, dual_edges) = run_transform(&input, &out)?;
            match report.as_deref() {
                Some("counts") => println!(
                    "{}",
                    serde_json::json!({ "dual_nodes": dual_nodes, "dual_edges": dual_edges })
                ),
                Some(other) => {
                    return Err(Error::InvalidArgument(format!("unknown report {other}")))
                }
                None => {}
            }
        }
        Command::Train { config, seed, out } => {
            let mut config = read_config(&config)?;
            if let Some(dir) = out {
                config.out_dir = dir;
            }
            let seed = seed.unwrap_or(config.seeds[0]);
            let out_dir = config.out_dir.clone();
            let record = run_training(&config, seed, &out_dir)?;
            let last = record.per_epoch.last();
            println!(
                "trained seed {seed}: {} epochs, final loss {:.4}, artifacts in {}",
                record.per_epoch.len(),
                last.map_or(f64::NAN, |e| e.total),
                out_dir.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            subtask,
            report,
            box_jitter,
            label_flip,
            miss_rate,
        } => {
            let subtask: Subtask = subtask.parse()?;
            let noise = DetectorNoise {
                box_jitter,
                label_flip,
                miss_rate,
            };
            let metrics = run_eval(&ckpt, &data, subtask, &noise, &report)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        Command::Ablate { config, axis, out } => {
            let config = read_config(&config)?;
            let axis: AblationAxis = axis.parse()?;
            let table = ablate(&config, axis)?;
            let json = serde_json::to_value(&table)?;
            if let Some(dir) = out.or_else(|| Some(config.out_dir.clone())) {
                std::fs::create_dir_all(&dir)?;
                let name = match axis {
                    AblationAxis::Branches => "ablation_branches.json",
                    AblationAxis::Aggregation => "ablation_aggregation.json",
                };
                let mut bytes = serde_json::to_vec_pretty(&json)?;
                bytes.push(b'\n');
                std::fs::write(dir.join(name), bytes)?;
            }
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::default().filter_or("EDGESGG_LOG", "error"),
    )
    .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Treat help/version as success, everything else as usage
            // error (exit 1).
            let _ = err.print();
            return if err.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };

    if cli.jobs > 0 {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: could not size the thread pool: {err}");
            return ExitCode::from(1);
        }
    }

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
