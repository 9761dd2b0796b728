//! Iris ingestion and the versicolor/virginica binary task.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// The canonical 150-row Iris table shipped with the crate.
pub const BUNDLED_IRIS: &str = include_str!("../data/iris.csv");

pub const EXAMPLES_PER_CLASS: usize = 50;
pub const TRAIN_SIZE: usize = 75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    /// 0 = versicolor, 1 = virginica.
    pub label: u8,
}

impl Example {
    pub fn target(&self) -> f64 {
        f64::from(self.label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub split_seed: u64,
    pub normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Species {
    Setosa,
    Versicolor,
    Virginica,
}

fn parse_species(field: &str) -> Option<Species> {
    let f = field.trim().to_ascii_lowercase();
    match f.as_str() {
        "0" => Some(Species::Setosa),
        "1" => Some(Species::Versicolor),
        "2" => Some(Species::Virginica),
        _ if f.contains("setosa") => Some(Species::Setosa),
        _ if f.contains("versicolor") => Some(Species::Versicolor),
        _ if f.contains("virginica") => Some(Species::Virginica),
        _ => None,
    }
}

/// Reads an Iris CSV (4 numeric columns + species) and keeps the
/// versicolor (label 0) and virginica (label 1) rows.
pub fn load_iris(path: impl AsRef<Path>, split_seed: u64) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_iris(&text, split_seed)
}

pub fn bundled_iris(split_seed: u64) -> Dataset {
    parse_iris(BUNDLED_IRIS, split_seed).expect("bundled Iris table is well formed")
}

pub fn parse_iris(text: &str, split_seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if record.len() != 5 {
            return Err(Error::Parse {
                line,
                message: format!("expected 5 fields, found {}", record.len()),
            });
        }
        let numbers: std::result::Result<Vec<f64>, _> =
            record.iter().take(4).map(str::parse::<f64>).collect();
        let features = match numbers {
            Ok(v) => v,
            // A non-numeric first line is a header.
            Err(_) if line == 1 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    line,
                    message: e.to_string(),
                })
            }
        };
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite feature".into(),
            });
        }
        let species = parse_species(&record[4]).ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown species {:?}", &record[4]),
        })?;
        let label = match species {
            Species::Setosa => continue,
            Species::Versicolor => 0,
            Species::Virginica => 1,
        };
        if features.iter().all(|&v| v == 0.0) {
            return Err(Error::Data(format!("line {line}: all-zero feature vector")));
        }
        examples.push(Example { features, label });
    }
    let ones = examples.iter().filter(|e| e.label == 1).count();
    let zeros = examples.len() - ones;
    if zeros != EXAMPLES_PER_CLASS || ones != EXAMPLES_PER_CLASS {
        return Err(Error::Data(format!(
            "expected {EXAMPLES_PER_CLASS} versicolor and {EXAMPLES_PER_CLASS} virginica rows, found {zeros} and {ones}"
        )));
    }
    Ok(Dataset::with_split(examples, split_seed))
}

impl Dataset {
    /// Seeded random 75/25 split.
    pub fn with_split(examples: Vec<Example>, split_seed: u64) -> Self {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seed::rng(split_seed, &[seed::tag::SPLIT]));
        let n_train = examples.len() * 3 / 4;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Self {
            examples,
            train,
            test,
            split_seed,
            normalized: false,
        }
    }

    pub fn resplit(&self, split_seed: u64) -> Self {
        let mut out = Self::with_split(self.examples.clone(), split_seed);
        out.normalized = self.normalized;
        out
    }

    /// Scales each feature by its maximum absolute value over the dataset.
    pub fn normalized_per_feature(&self) -> Self {
        let width = self.examples[0].features.len();
        let scale: Vec<f64> = (0..width)
            .map(|f| {
                self.examples
                    .iter()
                    .map(|e| e.features[f].abs())
                    .fold(0.0, f64::max)
            })
            .map(|m| if m > 0.0 { m } else { 1.0 })
            .collect();
        let examples = self
            .examples
            .iter()
            .map(|e| Example {
                features: e.features.iter().zip(&scale).map(|(v, s)| v / s).collect(),
                label: e.label,
            })
            .collect();
        Self {
            examples,
            normalized: true,
            ..self.clone()
        }
    }

    pub fn train_examples(&self) -> Vec<Example> {
        self.train.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn test_examples(&self) -> Vec<Example> {
        self.test.iter().map(|&i| self.examples[i].clone()).collect()
    }
}
