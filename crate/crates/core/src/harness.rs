//! Repeated experiments, parameter sweeps and result emission.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compression::compression_ratio_counts;
use crate::data::Dataset;
use crate::engine::{NoiseMode, NoiseProfile, Shots};
use crate::error::{Error, Result};
use crate::metrics::{self, ideal_speedup, speedup_from_iterations};
use crate::model::Classifier;
use crate::noise_lab::{generate_profiles_for_differ, sample_gaussian_profiles, NoiseInstance, DIFFER_MEAN};
use crate::runtime::{train, ConvergenceCriterion, IterationRecord, Optimizer, TrainConfig};
use crate::seed;

pub const SCHEMA_VERSION: u32 = 1;
pub const HISTORY_COLUMNS: [&str; 6] = [
    "iteration",
    "loss",
    "train_acc",
    "grad_norm",
    "transmitted_components",
    "circuits",
];
pub const DEFAULT_REPETITIONS: usize = 20;
pub const FULL_REPETITIONS: usize = 100;

/// Where node noise comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NoiseSpec {
    /// Fresh Gaussian draw per repetition.
    Gaussian { mean: f64 },
    /// One Differ-targeted instance shared by every repetition.
    Differ { target: f64, mean: f64, instance_seed: u64 },
    Fixed { instance: NoiseInstance },
}

impl NoiseSpec {
    pub fn instance(&self, m: usize, repetition_seed: u64) -> Result<NoiseInstance> {
        match self {
            NoiseSpec::Gaussian { mean } => sample_gaussian_profiles(m, *mean, repetition_seed),
            NoiseSpec::Differ {
                target,
                mean,
                instance_seed,
            } => generate_profiles_for_differ(m, *target, *mean, *instance_seed),
            NoiseSpec::Fixed { instance } if instance.profiles.len() == m => Ok(instance.clone()),
            NoiseSpec::Fixed { instance } => Err(Error::Spec(format!(
                "fixed noise instance has {} nodes, experiment has {m}",
                instance.profiles.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub nodes: usize,
    pub noise: NoiseSpec,
    pub shots: Shots,
    pub batch_size: usize,
    pub full_batch: bool,
    pub threshold: Option<f64>,
    pub alternate: bool,
    pub convergence: ConvergenceCriterion,
    pub repetitions: usize,
    pub seed: u64,
    pub max_iterations: u64,
    pub layers: usize,
    pub noise_mode: NoiseMode,
    pub lambda: f64,
    pub optimizer: Optimizer,
    /// Scale each feature by its maximum before encoding.
    pub normalize: bool,
    /// Draw a new train/test split for every repetition.
    pub resplit: bool,
    /// Keep per-iteration histories in the artifact.
    pub keep_history: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            nodes: 1,
            noise: NoiseSpec::Gaussian { mean: 0.0 },
            shots: Shots::Sampled(8192),
            batch_size: 5,
            full_batch: false,
            threshold: None,
            alternate: false,
            convergence: ConvergenceCriterion::default(),
            repetitions: DEFAULT_REPETITIONS,
            seed: 0,
            max_iterations: 10_000,
            layers: Classifier::DEFAULT_LAYERS,
            noise_mode: NoiseMode::PerGate,
            lambda: 0.0,
            optimizer: Optimizer::default(),
            normalize: false,
            resplit: true,
            keep_history: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Spec("repetitions must be >= 1".into()));
        }
        if self.nodes == 0 {
            return Err(Error::Spec("at least one node required".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn repetition_seed(&self, repetition: usize) -> u64 {
        seed::derive(self.seed, &[seed::tag::REPETITION, repetition as u64])
    }

    pub fn train_config(&self, profiles: Vec<NoiseProfile>, seed: u64) -> TrainConfig {
        TrainConfig {
            layers: self.layers,
            noise_mode: self.noise_mode,
            profiles,
            shots: self.shots,
            batch_size: self.batch_size,
            full_batch: self.full_batch,
            lambda: self.lambda,
            optimizer: self.optimizer,
            alternate: self.alternate,
            threshold: self.threshold,
            convergence: self.convergence,
            stop_on_convergence: true,
            max_iterations: self.max_iterations,
            seed,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repetition: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub noise: Option<NoiseInstance>,
    pub iterations: u64,
    pub converged: bool,
    pub final_accuracy: f64,
    /// Accuracy on the held-out split with the final parameters.
    pub test_accuracy: Option<f64>,
    pub transmitted: u64,
    pub circuits: u64,
    pub error: Option<String>,
    #[serde(default)]
    pub history: Vec<IterationRecord>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub runs: usize,
    pub failed: usize,
    pub converged: usize,
    pub mean_iterations: Option<f64>,
    pub sd_iterations: f64,
    pub mean_transmitted: Option<f64>,
    pub mean_circuits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub summary: ExperimentSummary,
    pub runs: Vec<RunRecord>,
}

impl RunArtifact {
    pub fn iterations(&self) -> Vec<f64> {
        self.runs.iter().filter(|r| r.ok()).map(|r| r.iterations as f64).collect()
    }

    pub fn mean_iterations(&self) -> Option<f64> {
        self.summary.mean_iterations
    }
}

fn summarize(runs: &[RunRecord]) -> ExperimentSummary {
    let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.ok()).collect();
    let its: Vec<f64> = ok.iter().map(|r| r.iterations as f64).collect();
    let tx: Vec<f64> = ok.iter().map(|r| r.transmitted as f64).collect();
    let circ: Vec<f64> = ok.iter().map(|r| r.circuits as f64).collect();
    ExperimentSummary {
        runs: runs.len(),
        failed: runs.len() - ok.len(),
        converged: ok.iter().filter(|r| r.converged).count(),
        mean_iterations: metrics::mean(&its),
        sd_iterations: metrics::variance(&its).sqrt(),
        mean_transmitted: metrics::mean(&tx),
        mean_circuits: metrics::mean(&circ),
    }
}

fn run_once(config: &ExperimentConfig, dataset: &Dataset, repetition: usize) -> RunRecord {
    let seed = config.repetition_seed(repetition);
    let split_seed = if config.resplit { seed } else { dataset.split_seed };
    let mut record = RunRecord {
        repetition,
        seed,
        split_seed,
        noise: None,
        iterations: 0,
        converged: false,
        final_accuracy: 0.0,
        test_accuracy: None,
        transmitted: 0,
        circuits: 0,
        error: None,
        history: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let noise = config.noise.instance(config.nodes, seed)?;
        record.noise = Some(noise.clone());
        let mut data = if config.resplit {
            dataset.resplit(split_seed)
        } else {
            dataset.clone()
        };
        if config.normalize && !data.normalized {
            data = data.normalized_per_feature();
        }
        let train_config = config.train_config(noise.profiles, seed);
        let outcome = train(&train_config, &data)?;
        record.iterations = outcome.iterations;
        record.converged = outcome.converged;
        record.final_accuracy = outcome.final_accuracy;
        record.transmitted = outcome.ledger.transmitted;
        record.circuits = outcome.ledger.circuits;
        let test = data.test_examples();
        if !test.is_empty() {
            let model = Classifier::new(config.layers, config.noise_mode)?;
            let profile = train_config.profiles[outcome.test_node];
            let preds = test
                .iter()
                .enumerate()
                .map(|(k, ex)| {
                    model.predict(
                        &ex.features,
                        &outcome.theta,
                        &profile,
                        config.shots,
                        seed::derive(seed, &[seed::tag::CONVERGENCE, u64::MAX, k as u64]),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            record.test_accuracy = Some(crate::model::accuracy(&preds, &test));
        }
        if config.keep_history {
            record.history = outcome.history;
        }
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("repetition {repetition} failed: {e}");
        record.error = Some(e.to_string());
    }
    record
}

/// Runs every repetition (in parallel) and assembles the artifact. Run
/// failures are recorded in the artifact rather than returned.
pub fn run_experiment(config: &ExperimentConfig, dataset: &Dataset) -> Result<RunArtifact> {
    config.validate()?;
    let runs: Vec<RunRecord> = (0..config.repetitions)
        .into_par_iter()
        .map(|r| run_once(config, dataset, r))
        .collect();
    Ok(RunArtifact {
        schema_version: SCHEMA_VERSION,
        config_hash: config.hash()?,
        config: config.clone(),
        summary: summarize(&runs),
        runs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputFormat {
    Csv,
    Json,
    Both,
}

/// Writes `history-NNN.csv` per run and/or `summary.json` into `dir`.
pub fn emit_results(artifact: &RunArtifact, dir: impl AsRef<Path>, format: OutputFormat) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if matches!(format, OutputFormat::Csv | OutputFormat::Both) {
        for run in &artifact.runs {
            let path = dir.join(format!("history-{:03}.csv", run.repetition));
            let rows: Vec<_> = run
                .history
                .iter()
                .map(|h| (h.iteration, h.loss, h.train_acc, h.grad_norm, h.transmitted_components, h.circuits))
                .collect();
            metrics::write_csv(&path, &rows, &HISTORY_COLUMNS)?;
            written.push(path);
        }
    }
    if matches!(format, OutputFormat::Json | OutputFormat::Both) {
        let path = dir.join("summary.json");
        let json = serde_json::to_string_pretty(artifact)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<RunArtifact> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let artifact: RunArtifact = serde_json::from_str(&text)?;
    if artifact.schema_version != SCHEMA_VERSION {
        return Err(Error::Spec(format!(
            "artifact schema {} (expected {SCHEMA_VERSION})",
            artifact.schema_version
        )));
    }
    Ok(artifact)
}

/// Speed-up of `multi` over `single` from the repetitions where both runs
/// converged. Repetitions are matched by index, so both artifacts must share
/// repetition seeds. Returns the speed-up and the number of pairs used.
pub fn paired_speedup(single: &RunArtifact, multi: &RunArtifact, d: usize, m: usize) -> Result<(f64, usize)> {
    let done = |r: &RunRecord| r.ok() && r.converged;
    let (a, b): (Vec<f64>, Vec<f64>) = single
        .runs
        .iter()
        .zip(&multi.runs)
        .filter(|(x, y)| done(x) && done(y))
        .map(|(x, y)| (x.iterations as f64, y.iterations as f64))
        .unzip();
    match (metrics::mean(&a), metrics::mean(&b)) {
        (Some(n1), Some(nm)) => Ok((speedup_from_iterations(n1, nm, d, m)?, a.len())),
        _ => Err(Error::SpeedupUndefined("no repetition converged in both runs".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepRow {
    pub nodes: usize,
    pub mean_noise: f64,
    pub mean_iterations: Option<f64>,
    pub sd_iterations: f64,
    pub converged: usize,
    pub runs: usize,
    pub ideal_speedup: f64,
    /// Against the single-node run at the same noise level.
    pub speedup: Option<f64>,
    /// Repetitions that converged in both runs.
    pub pairs: usize,
}

/// Iterations to convergence over an `M x mu` grid. Every cell shares the
/// repetition seeds of `base`.
pub fn sweep_noise(
    base: &ExperimentConfig,
    dataset: &Dataset,
    nodes: &[usize],
    means: &[f64],
) -> Result<(Vec<NoiseSweepRow>, Vec<RunArtifact>)> {
    let d = Classifier::new(base.layers, base.noise_mode)?.n_params();
    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for &mu in means {
        let single = run_experiment(
            &ExperimentConfig {
                nodes: 1,
                noise: NoiseSpec::Gaussian { mean: mu },
                ..base.clone()
            },
            dataset,
        )?;
        for &m in nodes {
            let art = if m == 1 {
                single.clone()
            } else {
                run_experiment(
                    &ExperimentConfig {
                        nodes: m,
                        noise: NoiseSpec::Gaussian { mean: mu },
                        ..base.clone()
                    },
                    dataset,
                )?
            };
            let (speedup, pairs) = match paired_speedup(&single, &art, d, m) {
                Ok((s, n)) => (Some(s), n),
                Err(_) => (None, 0),
            };
            rows.push(NoiseSweepRow {
                nodes: m,
                mean_noise: mu,
                mean_iterations: art.mean_iterations(),
                sd_iterations: art.summary.sd_iterations,
                converged: art.summary.converged,
                runs: art.summary.runs,
                ideal_speedup: ideal_speedup(d, m),
                speedup,
                pairs,
            });
            artifacts.push(art);
        }
    }
    Ok((rows, artifacts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferSweepRow {
    pub target: f64,
    pub alternate: bool,
    /// Speed-up per noise instance (mean over seeds).
    pub instance_speedups: Vec<f64>,
    pub mean_speedup: f64,
    pub variance: f64,
}

/// Speed-up against Differ for fixed and alternate assignment. Each target
/// gets `instances` noise instances with mean rate 0.04, each trained over
/// `base.repetitions` seeds; the single-node baseline runs at the mean rate.
/// Speed-ups are paired per seed as in [`paired_speedup`].
pub fn sweep_differ(
    base: &ExperimentConfig,
    dataset: &Dataset,
    targets: &[f64],
    instances: usize,
) -> Result<Vec<DifferSweepRow>> {
    let d = Classifier::new(base.layers, base.noise_mode)?.n_params();
    let m = base.nodes;
    let single = run_experiment(
        &ExperimentConfig {
            nodes: 1,
            noise: NoiseSpec::Fixed {
                instance: NoiseInstance {
                    profiles: vec![NoiseProfile::new(0, DIFFER_MEAN)?],
                    mean: DIFFER_MEAN,
                    mode: crate::noise_lab::GenerationMode::Gaussian,
                },
            },
            alternate: false,
            ..base.clone()
        },
        dataset,
    )?;
    let mut rows = Vec::new();
    for (ti, &target) in targets.iter().enumerate() {
        for alternate in [false, true] {
            let mut speedups = Vec::with_capacity(instances);
            for i in 0..instances {
                let instance_seed = seed::derive(base.seed, &[seed::tag::NOISE, ti as u64, i as u64]);
                let art = run_experiment(
                    &ExperimentConfig {
                        noise: NoiseSpec::Differ {
                            target,
                            mean: DIFFER_MEAN,
                            instance_seed,
                        },
                        alternate,
                        keep_history: false,
                        ..base.clone()
                    },
                    dataset,
                )?;
                let (s, _) = paired_speedup(&single, &art, d, m)
                    .map_err(|e| Error::SpeedupUndefined(format!("differ {target} instance {i}: {e}")))?;
                speedups.push(s);
            }
            rows.push(DifferSweepRow {
                target,
                alternate,
                mean_speedup: metrics::mean(&speedups).unwrap_or(f64::NAN),
                variance: metrics::variance(&speedups),
                instance_speedups: speedups,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSweepRow {
    pub threshold: f64,
    pub compression_ratio: f64,
    pub mean_iterations: Option<f64>,
    pub mean_transmitted: f64,
    pub speedup: Option<f64>,
}

/// Compression ratio and iterations against the threshold. Ratios compare
/// mean transmitted volume with the uncompressed run on the same seeds.
pub fn sweep_threshold(base: &ExperimentConfig, dataset: &Dataset, thresholds: &[f64]) -> Result<Vec<ThresholdSweepRow>> {
    let d = Classifier::new(base.layers, base.noise_mode)?.n_params();
    let keep = ExperimentConfig {
        keep_history: false,
        ..base.clone()
    };
    let single = run_experiment(
        &ExperimentConfig {
            nodes: 1,
            threshold: None,
            ..keep.clone()
        },
        dataset,
    )?;
    let plain = run_experiment(&ExperimentConfig { threshold: None, ..keep.clone() }, dataset)?;
    let cv_without = plain
        .summary
        .mean_transmitted
        .ok_or_else(|| Error::Ledger("uncompressed runs failed".into()))?;
    let mut rows = Vec::new();
    for &thr in thresholds {
        let art = run_experiment(
            &ExperimentConfig {
                threshold: Some(thr),
                ..keep.clone()
            },
            dataset,
        )?;
        let cv_with = art.summary.mean_transmitted.unwrap_or(f64::NAN);
        let speedup = paired_speedup(&single, &art, d, base.nodes).ok().map(|(s, _)| s);
        rows.push(ThresholdSweepRow {
            threshold: thr,
            compression_ratio: 1.0 - cv_with / cv_without,
            mean_iterations: art.mean_iterations(),
            mean_transmitted: cv_with,
            speedup,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRow {
    pub nodes: usize,
    pub threshold: f64,
    pub iterations_plain: Option<f64>,
    pub iterations_compressed: Option<f64>,
    pub compression_ratio: Option<f64>,
    pub speedup_plain: Option<f64>,
    pub speedup_compressed: Option<f64>,
}

/// Paired uncompressed/compressed comparison per node count.
pub fn compression_table(
    base: &ExperimentConfig,
    dataset: &Dataset,
    nodes: &[usize],
    threshold: f64,
) -> Result<Vec<CompressionRow>> {
    let d = Classifier::new(base.layers, base.noise_mode)?.n_params();
    let keep = ExperimentConfig {
        keep_history: false,
        threshold: None,
        ..base.clone()
    };
    let single = run_experiment(&ExperimentConfig { nodes: 1, ..keep.clone() }, dataset)?;
    let mut rows = Vec::new();
    for &m in nodes {
        let plain = run_experiment(&ExperimentConfig { nodes: m, ..keep.clone() }, dataset)?;
        let comp = run_experiment(
            &ExperimentConfig {
                nodes: m,
                threshold: Some(threshold),
                ..keep.clone()
            },
            dataset,
        )?;
        let ratio = match (comp.summary.mean_transmitted, plain.summary.mean_transmitted) {
            (Some(a), Some(b)) => compression_ratio_counts(a.round() as u64, b.round() as u64).ok(),
            _ => None,
        };
        let speed = |a: &RunArtifact| paired_speedup(&single, a, d, m).ok().map(|(s, _)| s);
        rows.push(CompressionRow {
            nodes: m,
            threshold,
            iterations_plain: plain.mean_iterations(),
            iterations_compressed: comp.mean_iterations(),
            compression_ratio: ratio,
            speedup_plain: speed(&plain),
            speedup_compressed: speed(&comp),
        });
    }
    Ok(rows)
}
