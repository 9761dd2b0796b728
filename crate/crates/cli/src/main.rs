use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ppvqa::data::{bundled_iris, load_iris, Dataset};
use ppvqa::engine::Shots;
use ppvqa::harness::{
    emit_results, load_artifact, run_experiment, sweep_differ, sweep_noise, sweep_threshold, ExperimentConfig,
    NoiseSpec, OutputFormat, FULL_REPETITIONS,
};
use ppvqa::metrics::write_csv;
use ppvqa::net::{run_worker, SocketServer};
use ppvqa::runtime::train_with;

#[derive(Parser)]
#[command(name = "ppvqa", version, about = "Parameter-parallel distributed VQA simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train repeatedly with one configuration and write the run artifact.
    Train(TrainArgs),
    /// Iterations and speed-up over node counts and noise levels.
    SweepNoise(SweepNoiseArgs),
    /// Speed-up against Differ, alternate training off and on.
    SweepDiffer(SweepDifferArgs),
    /// Compression ratio and iterations against the threshold.
    SweepThreshold(SweepThresholdArgs),
    /// Summarize a saved artifact.
    Report(ReportArgs),
    /// Parameter server over TCP; waits for `--nodes` workers.
    Serve(ServeArgs),
    /// Stateless worker connecting to a parameter server.
    Worker(WorkerArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iris CSV; falls back to IRIS_PATH, then the bundled copy.
    #[arg(long, env = "IRIS_PATH")]
    iris: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Paper-scale repetition count.
    #[arg(long)]
    full: bool,
    /// Measurement shots; 0 selects exact expectations.
    #[arg(long)]
    shots: Option<u32>,
    #[arg(long)]
    max_iterations: Option<u64>,
    #[arg(long)]
    normalize: bool,
    /// Keep one train/test split for every repetition.
    #[arg(long)]
    fixed_split: bool,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    nodes: Option<usize>,
    /// Mean single-qubit depolarizing rate of the Gaussian noise model.
    #[arg(long)]
    mean_noise: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    alternate: bool,
}

#[derive(Args)]
struct SweepNoiseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    nodes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.01, 0.03, 0.05])]
    means: Vec<f64>,
}

#[derive(Args)]
struct SweepDifferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.125, 0.25, 0.375, 0.5, 0.625])]
    targets: Vec<f64>,
    /// Noise instances per Differ value.
    #[arg(long, default_value_t = 10)]
    instances: usize,
}

#[derive(Args)]
struct SweepThresholdArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 4)]
    nodes: usize,
    #[arg(long, default_value_t = 0.016)]
    mean_noise: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// `summary.json` written by `train`.
    input: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// Seconds to wait for all replies of one iteration.
    #[arg(long, default_value_t = 60)]
    barrier_timeout: u64,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long, default_value = "127.0.0.1:7070")]
    connect: String,
}

fn load_dataset(common: &Common, config: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let ds = match &common.iris {
        Some(path) => load_iris(path, config.seed)?,
        None => bundled_iris(config.seed),
    };
    Ok(ds)
}

fn base_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.full {
        config.repetitions = FULL_REPETITIONS;
    }
    if let Some(r) = common.repetitions {
        config.repetitions = r;
    }
    if let Some(k) = common.shots {
        config.shots = if k == 0 { Shots::Analytic } else { Shots::Sampled(k) };
    }
    if let Some(n) = common.max_iterations {
        config.max_iterations = n;
    }
    config.normalize |= common.normalize;
    if common.fixed_split {
        config.resplit = false;
    }
    Ok(config)
}

fn train_config(args: &TrainArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = base_config(&args.common)?;
    if let Some(m) = args.nodes {
        config.nodes = m;
    }
    if let Some(mu) = args.mean_noise {
        config.noise = NoiseSpec::Gaussian { mean: mu };
    }
    if args.threshold.is_some() {
        config.threshold = args.threshold;
    }
    config.alternate |= args.alternate;
    Ok(config)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let config = train_config(&args)?;
            let ds = load_dataset(&args.common, &config)?;
            let artifact = run_experiment(&config, &ds)?;
            emit_results(&artifact, &args.common.out, OutputFormat::Both)?;
            let s = &artifact.summary;
            println!(
                "runs={} converged={} failed={} mean_iterations={}",
                s.runs,
                s.converged,
                s.failed,
                s.mean_iterations.map_or("-".into(), |m| format!("{m:.1}"))
            );
            if s.failed > 0 {
                for r in artifact.runs.iter().filter(|r| !r.ok()) {
                    eprintln!("repetition {}: {}", r.repetition, r.error.as_deref().unwrap_or(""));
                }
                bail!("{} of {} runs failed", s.failed, s.runs);
            }
            Ok(if s.converged == s.runs { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::SweepNoise(args) => {
            let config = base_config(&args.common)?;
            let ds = load_dataset(&args.common, &config)?;
            let (rows, _) = sweep_noise(&config, &ds, &args.nodes, &args.means)?;
            prepare_out(&args.common.out)?;
            let csv_rows: Vec<_> = rows
                .iter()
                .map(|r| (r.nodes, r.mean_noise, r.mean_iterations, r.sd_iterations, r.converged, r.runs, r.ideal_speedup, r.speedup))
                .collect();
            write_csv(
                args.common.out.join("sweep_noise.csv"),
                &csv_rows,
                &["nodes", "mean_noise", "mean_iterations", "sd_iterations", "converged", "runs", "ideal_speedup", "speedup"],
            )?;
            write_json(&args.common.out.join("sweep_noise.json"), &rows)?;
            for r in &rows {
                println!("M={} mu={} iterations={:?} speedup={:?}", r.nodes, r.mean_noise, r.mean_iterations, r.speedup);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepDiffer(args) => {
            let mut config = base_config(&args.common)?;
            config.nodes = args.nodes;
            let ds = load_dataset(&args.common, &config)?;
            let rows = sweep_differ(&config, &ds, &args.targets, args.instances)?;
            prepare_out(&args.common.out)?;
            let csv_rows: Vec<_> = rows.iter().map(|r| (r.target, r.alternate, r.mean_speedup, r.variance)).collect();
            write_csv(
                args.common.out.join("sweep_differ.csv"),
                &csv_rows,
                &["differ", "alternate", "mean_speedup", "variance"],
            )?;
            // Instances are built by the simplex-ray construction.
            write_json(&args.common.out.join("sweep_differ.json"), &rows)?;
            for r in &rows {
                println!("differ={} alternate={} speedup={:.3} variance={:.4}", r.target, r.alternate, r.mean_speedup, r.variance);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepThreshold(args) => {
            let mut config = base_config(&args.common)?;
            config.nodes = args.nodes;
            config.noise = NoiseSpec::Gaussian { mean: args.mean_noise };
            let ds = load_dataset(&args.common, &config)?;
            let rows = sweep_threshold(&config, &ds, &args.thresholds)?;
            prepare_out(&args.common.out)?;
            let csv_rows: Vec<_> = rows
                .iter()
                .map(|r| (r.threshold, r.compression_ratio, r.mean_iterations, r.mean_transmitted, r.speedup))
                .collect();
            write_csv(
                args.common.out.join("sweep_threshold.csv"),
                &csv_rows,
                &["threshold", "compression_ratio", "mean_iterations", "mean_transmitted", "speedup"],
            )?;
            write_json(&args.common.out.join("sweep_threshold.json"), &rows)?;
            for r in &rows {
                println!(
                    "thr={} ratio={:.3} iterations={:?} speedup={:?}",
                    r.threshold, r.compression_ratio, r.mean_iterations, r.speedup
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(args) => {
            let artifact = load_artifact(&args.input)?;
            println!("config {}", artifact.config_hash);
            println!("{}", serde_json::to_string_pretty(&artifact.summary)?);
            for r in &artifact.runs {
                println!(
                    "repetition {:>3}: iterations={} converged={} train_acc={:.3} test_acc={} transmitted={}{}",
                    r.repetition,
                    r.iterations,
                    r.converged,
                    r.final_accuracy,
                    r.test_accuracy.map_or("-".into(), |a| format!("{a:.3}")),
                    r.transmitted,
                    r.error.as_ref().map_or(String::new(), |e| format!(" error={e}")),
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve(args) => {
            let config = train_config(&args.train)?;
            let ds = load_dataset(&args.train.common, &config)?;
            let noise = config.noise.instance(config.nodes, config.seed)?;
            let train = config.train_config(noise.profiles, config.seed);
            let server = SocketServer::bind(&args.listen)?;
            eprintln!("listening on {}, waiting for {} workers", server.local_addr()?, config.nodes);
            let mut transport = server.accept(config.nodes, Duration::from_secs(args.barrier_timeout))?;
            let outcome = train_with(&train, &ds, &mut transport)?;
            prepare_out(&args.train.common.out)?;
            write_json(&args.train.common.out.join("outcome.json"), &outcome)?;
            println!(
                "iterations={} converged={} accuracy={:.3}",
                outcome.iterations, outcome.converged, outcome.final_accuracy
            );
            Ok(if outcome.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
        Command::Worker(args) => {
            let served = run_worker(&args.connect)?;
            eprintln!("served {served} iterations");
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
