//! Heterogeneous node noise: Gaussian sampling, the Differ metric and
//! Differ-targeted instance construction.

use rand_distr::{Distribution, Exp1, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::NoiseProfile;
use crate::error::{Error, Result};
use crate::seed;

/// Mean single-qubit rate of Differ-targeted instances.
pub const DIFFER_MEAN: f64 = 0.04;

const MAX_DIRECTION_DRAWS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GenerationMode {
    Gaussian,
    /// Simplex-ray construction hitting a target Differ.
    DifferTargeted { target: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseInstance {
    pub profiles: Vec<NoiseProfile>,
    pub mean: f64,
    pub mode: GenerationMode,
}

impl NoiseInstance {
    pub fn p1(&self) -> Vec<f64> {
        self.profiles.iter().map(|p| p.p1).collect()
    }

    pub fn differ(&self) -> Result<f64> {
        differ_metric(&self.p1())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn profile(node_id: usize, p1: f64) -> Result<NoiseProfile> {
    NoiseProfile::with_rates(node_id, p1, (4.0 * p1).min(1.0))
}

/// `M` nodes with `p_i ~ N(mu, (mu/9)^2)` clamped to `[0, 1]` and
/// two-qubit rate `4 p_i` (capped at 1).
pub fn sample_gaussian_profiles(m: usize, mu: f64, seed: u64) -> Result<NoiseInstance> {
    if !(0.0..=0.25).contains(&mu) {
        return Err(Error::Noise(format!("mean rate {mu} outside [0, 0.25]")));
    }
    let profiles = if mu == 0.0 {
        (0..m).map(NoiseProfile::noiseless).collect()
    } else {
        let normal = Normal::new(mu, mu / 9.0).map_err(|e| Error::Noise(e.to_string()))?;
        let mut rng = seed::rng(seed, &[seed::tag::NOISE]);
        (0..m)
            .map(|i| profile(i, normal.sample(&mut rng).clamp(0.0, 1.0)))
            .collect::<Result<_>>()?
    };
    Ok(NoiseInstance {
        profiles,
        mean: mu,
        mode: GenerationMode::Gaussian,
    })
}

fn kl_from_uniform(p: &[f64]) -> f64 {
    let m = p.len() as f64;
    p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * (x * m).ln())
        .sum::<f64>()
        .max(0.0)
}

/// KL divergence (natural log) of the normalized rates from uniform.
pub fn differ_metric(rates: &[f64]) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::Metric("no nodes".into()));
    }
    if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::Metric("rates must be finite and non-negative".into()));
    }
    let total: f64 = rates.iter().sum();
    if total <= 0.0 {
        return Err(Error::Metric("all node rates are zero".into()));
    }
    let p: Vec<f64> = rates.iter().map(|r| r / total).collect();
    Ok(kl_from_uniform(&p))
}

/// Largest Differ reachable for `m` nodes when every rate must satisfy
/// `4 p <= 1` at the given mean.
pub fn max_differ(m: usize, mean: f64) -> f64 {
    let cap = (0.25 / (mean * m as f64)).min(1.0);
    let full = (1.0 / cap).floor() as usize;
    let mut p = vec![0.0; m];
    for x in p.iter_mut().take(full.min(m)) {
        *x = cap;
    }
    if full < m {
        p[full] = 1.0 - cap * full as f64;
    }
    kl_from_uniform(&p)
}

/// Builds an instance with mean rate `mean` whose Differ equals `target`.
///
/// A flat Dirichlet direction `q` defines the ray `P(s) = u + s (q - u)` from the
/// uniform point `u`; the ray is followed until a coordinate reaches zero
/// or the `4 p <= 1` cap, and `s` is found by bisection. Directions whose
/// ray cannot reach the target are redrawn.
pub fn generate_profiles_for_differ(m: usize, target: f64, mean: f64, seed: u64) -> Result<NoiseInstance> {
    if m < 2 && target > 0.0 {
        return Err(Error::InfeasibleTarget { target, m, max: 0.0 });
    }
    if m == 0 || !(mean > 0.0) || 4.0 * mean > 1.0 {
        return Err(Error::Noise(format!("mean rate {mean} invalid for {m} nodes")));
    }
    let max = max_differ(m, mean);
    if !(target >= 0.0) || target > max - 1e-9 {
        return Err(Error::InfeasibleTarget { target, m, max });
    }
    let uniform = 1.0 / m as f64;
    let cap = (0.25 / (mean * m as f64)).min(1.0);
    let finish = |p: &[f64]| -> Result<NoiseInstance> {
        let profiles = p
            .iter()
            .enumerate()
            .map(|(i, &x)| profile(i, x * mean * m as f64))
            .collect::<Result<_>>()?;
        Ok(NoiseInstance {
            profiles,
            mean,
            mode: GenerationMode::DifferTargeted { target },
        })
    };
    if target == 0.0 {
        return finish(&vec![uniform; m]);
    }
    let mut rng = seed::rng(seed, &[seed::tag::NOISE]);
    for _ in 0..MAX_DIRECTION_DRAWS {
        // Flat Dirichlet draw: normalized unit exponentials.
        let e: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
        let sum: f64 = e.iter().sum();
        let q: Vec<f64> = e.iter().map(|x: &f64| x / sum).collect();
        let step: Vec<f64> = q.iter().map(|x| x - uniform).collect();
        // Furthest s keeping every coordinate inside [0, cap].
        let s_max = step
            .iter()
            .map(|&v| {
                if v < 0.0 {
                    -uniform / v
                } else if v > 0.0 {
                    (cap - uniform) / v
                } else {
                    f64::INFINITY
                }
            })
            .fold(f64::INFINITY, f64::min);
        if !s_max.is_finite() {
            continue;
        }
        let at = |s: f64| -> Vec<f64> {
            step.iter()
                .map(|v| (uniform + s * v).clamp(0.0, 1.0))
                .collect()
        };
        if kl_from_uniform(&at(s_max)) < target {
            continue;
        }
        let (mut lo, mut hi) = (0.0, s_max);
        let mut kl_lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let kl = kl_from_uniform(&at(mid));
            assert!(kl + 1e-12 >= kl_lo, "KL must be nondecreasing along the ray");
            if kl < target {
                lo = mid;
                kl_lo = kl;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        let p = at(0.5 * (lo + hi));
        let total: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|x| x / total).collect();
        let instance = finish(&p)?;
        if (instance.differ()? - target).abs() <= 1e-6 {
            return Ok(instance);
        }
    }
    Err(Error::InfeasibleTarget { target, m, max })
}
