//! Parameter-shift gradients of the classifier loss, a central-difference
//! oracle, and the empirical noise-bias decomposition.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::engine::{NoiseProfile, Shots};
use crate::error::{Error, Result};
use crate::model::{mse_loss, Classifier, LossConfig};
use crate::seed;

/// Dense gradient plus the number of circuit runs spent producing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub circuit_executions: u64,
}

impl GradientVector {
    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Identifies the random streams of one gradient evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
///
/// Streams are keyed by the circuit, not by the node that runs it, so the
/// same circuit draws the same stream whatever the node count.
pub struct SeedPath {
    pub base: u64,
    pub iteration: u64,
}

impl SeedPath {
    pub fn new(base: u64, iteration: u64) -> Self {
        Self { base, iteration }
    }

    /// Seed for one shifted circuit: `shift` is `2j + 1` for `+pi/2` on
    /// component `j` and `2j + 2` for `-pi/2`.
    pub fn circuit(&self, example: usize, shift: u64) -> u64 {
        seed::derive(self.base, &[seed::tag::GRADIENT, self.iteration, example as u64, shift])
    }

    /// Seed for the forward pass of the slice starting at component `lead`.
    pub fn forward(&self, example: usize, lead: usize) -> u64 {
        seed::derive(self.base, &[seed::tag::GRADIENT, self.iteration, example as u64, 0, lead as u64])
    }
}

/// Circuit runs a node spends on `batch` examples for `components` components.
pub fn circuit_cost(batch: usize, components: usize) -> u64 {
    (batch as u64) * (1 + 2 * components as u64)
}

/// Gradient of the MSE loss restricted to `components`, estimated with the
/// `+-pi/2` shift rule on the node described by `profile`.
///
/// Each example gets one forward circuit and two shifted circuits per
/// component, each with its own shot stream. Components outside the slice
/// are exactly zero.
pub fn parameter_shift_gradient(
    model: &Classifier,
    loss: &LossConfig,
    batch: &[Example],
    params: &[f64],
    components: &[usize],
    profile: &NoiseProfile,
    seeds: SeedPath,
) -> Result<GradientVector> {
    if batch.is_empty() {
        return Err(Error::Batch);
    }
    let d = model.n_params();
    if params.len() != d {
        return Err(Error::Spec(format!("expected {d} parameters, got {}", params.len())));
    }
    if let Some(&j) = components.iter().find(|&&j| j >= d) {
        return Err(Error::Spec(format!("component {j} out of range 0..{d}")));
    }
    let n = batch.len() as f64;
    let mut values = vec![0.0; d];
    let mut shifted = params.to_vec();
    // Residuals first so the per-component sums run in example order, which
    // keeps each component independent of how components are sliced.
    let lead = components.iter().copied().min().unwrap_or(0);
    let residuals: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(k, ex)| {
            let y_hat = model.predict(&ex.features, params, profile, loss.shots, seeds.forward(k, lead))?;
            Ok(y_hat - ex.target())
        })
        .collect::<Result<_>>()?;
    for &j in components {
        let mut acc = 0.0;
        for (k, ex) in batch.iter().enumerate() {
            shifted[j] = params[j] + FRAC_PI_2;
            let plus = model.predict(&ex.features, &shifted, profile, loss.shots, seeds.circuit(k, 2 * j as u64 + 1))?;
            shifted[j] = params[j] - FRAC_PI_2;
            let minus = model.predict(&ex.features, &shifted, profile, loss.shots, seeds.circuit(k, 2 * j as u64 + 2))?;
            shifted[j] = params[j];
            acc += residuals[k] * (plus - minus) / 2.0;
        }
        values[j] = acc / n + loss.lambda * params[j];
    }
    Ok(GradientVector {
        values,
        circuit_executions: circuit_cost(batch.len(), components.len()),
    })
}

/// Shift-rule derivative of the raw readout expectation `<O>` with respect
/// to parameter `j`.
pub fn expectation_derivative(
    model: &Classifier,
    features: &[f64],
    params: &[f64],
    j: usize,
    profile: &NoiseProfile,
    shots: Shots,
    seed: u64,
) -> Result<f64> {
    if j >= params.len() {
        return Err(Error::Spec(format!("component {j} out of range")));
    }
    let mut shifted = params.to_vec();
    shifted[j] = params[j] + FRAC_PI_2;
    let plus = model.expectation(features, &shifted, profile, shots, seed::derive(seed, &[1]))?;
    shifted[j] = params[j] - FRAC_PI_2;
    let minus = model.expectation(features, &shifted, profile, shots, seed::derive(seed, &[2]))?;
    Ok((plus - minus) / 2.0)
}

/// Full-batch MSE loss evaluated exactly on a noiseless device.
pub fn exact_loss(model: &Classifier, lambda: f64, batch: &[Example], params: &[f64]) -> Result<f64> {
    let clean = NoiseProfile::noiseless(0);
    let preds = batch
        .iter()
        .map(|ex| model.predict(&ex.features, params, &clean, Shots::Analytic, 0))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = batch.iter().map(Example::target).collect();
    mse_loss(&preds, &labels, params, lambda)
}

/// Central differences of the noiseless analytic loss over every component.
pub fn finite_difference_gradient(
    model: &Classifier,
    loss: &LossConfig,
    batch: &[Example],
    params: &[f64],
    eps: f64,
) -> Result<GradientVector> {
    if !loss.shots.is_analytic() {
        return Err(Error::OracleMode);
    }
    if !(eps > 0.0) {
        return Err(Error::Spec(format!("step {eps} must be > 0")));
    }
    if batch.is_empty() {
        return Err(Error::Batch);
    }
    let d = params.len();
    let mut values = vec![0.0; d];
    let mut probe = params.to_vec();
    for j in 0..d {
        probe[j] = params[j] + eps;
        let up = exact_loss(model, loss.lambda, batch, &probe)?;
        probe[j] = params[j] - eps;
        let down = exact_loss(model, loss.lambda, batch, &probe)?;
        probe[j] = params[j];
        values[j] = (up - down) / (2.0 * eps);
    }
    Ok(GradientVector {
        values,
        circuit_executions: (batch.len() * 2 * d) as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasComponent {
    pub index: usize,
    /// Noiseless analytic gradient component.
    pub clean: f64,
    /// Mean of the noisy estimates.
    pub noisy_mean: f64,
    /// `(1 - p)^2 * clean`.
    pub scaled_clean: f64,
    /// `noisy_mean - scaled_clean`: the noise-induced bias.
    pub bias: f64,
    /// Sample variance of the noisy estimates (zero-mean fluctuation).
    pub variance: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDecomposition {
    /// Register-wide depolarizing strength used for the scaling.
    pub effective_p: f64,
    pub repetitions: usize,
    pub components: Vec<BiasComponent>,
}

/// Splits the noisy gradient into `(1 - p)^2 * clean + bias + fluctuation`
/// from `repetitions` independent noisy estimates.
pub fn estimate_bias_decomposition(
    model: &Classifier,
    loss: &LossConfig,
    batch: &[Example],
    params: &[f64],
    profile: &NoiseProfile,
    repetitions: usize,
    base_seed: u64,
) -> Result<BiasDecomposition> {
    if repetitions == 0 {
        return Err(Error::Spec("need at least one repetition".into()));
    }
    let d = model.n_params();
    let all: Vec<usize> = (0..d).collect();
    let clean = parameter_shift_gradient(
        model,
        &LossConfig::analytic(loss.lambda),
        batch,
        params,
        &all,
        &NoiseProfile::noiseless(profile.node_id),
        SeedPath::new(base_seed, 0),
    )?;
    let mut samples = Vec::with_capacity(repetitions);
    for r in 0..repetitions {
        let path = SeedPath::new(seed::derive(base_seed, &[seed::tag::BIAS, r as u64]), 0);
        samples.push(parameter_shift_gradient(model, loss, batch, params, &all, profile, path)?.values);
    }
    let p = model.effective_depolarizing(profile)?;
    let scale = (1.0 - p) * (1.0 - p);
    let r = repetitions as f64;
    let components = (0..d)
        .map(|j| {
            let mean = samples.iter().map(|s| s[j]).sum::<f64>() / r;
            let variance = if repetitions > 1 {
                samples.iter().map(|s| (s[j] - mean).powi(2)).sum::<f64>() / (r - 1.0)
            } else {
                0.0
            };
            BiasComponent {
                index: j,
                clean: clean.values[j],
                noisy_mean: mean,
                scaled_clean: scale * clean.values[j],
                bias: mean - scale * clean.values[j],
                variance,
                standard_error: (variance / r).sqrt(),
            }
        })
        .collect();
    Ok(BiasDecomposition {
        effective_p: p,
        repetitions,
        components,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{PI, TAU};

    use approx::assert_abs_diff_eq;
    use rand::Rng;

    use super::*;
    use crate::data::bundled_iris;
    use crate::engine::{CircuitSpec, GateOp, NoiseMode, Observable};

    fn toy() -> Classifier {
        let c = CircuitSpec::new(1, vec![GateOp::ry(0, 0)], NoiseMode::None).unwrap();
        Classifier::from_circuit(c, Observable::z_parity(1), 1).unwrap()
    }

    fn batch(n: usize) -> Vec<Example> {
        bundled_iris(0).train_examples().into_iter().take(n).collect()
    }

    fn random_theta(seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed, &[]);
        (0..8).map(|_| rng.random_range(0.0..TAU)).collect()
    }

    #[test]
    fn toy_shift_rule() {
        let m = toy();
        let clean = NoiseProfile::noiseless(0);
        let d0 = expectation_derivative(&m, &[1.0, 0.0], &[0.0], 0, &clean, Shots::Analytic, 0).unwrap();
        assert_abs_diff_eq!(d0, 0.0, epsilon = 1e-15);
        let d1 = expectation_derivative(&m, &[1.0, 0.0], &[PI / 2.0], 0, &clean, Shots::Analytic, 0).unwrap();
        assert_abs_diff_eq!(d1, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        // Labels equal to the model's own analytic predictions.
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let theta = random_theta(4);
        let clean = NoiseProfile::noiseless(0);
        let fitted: Vec<Example> = batch(5)
            .into_iter()
            .map(|e| e.features)
            .map(|features| Example { features, label: 0 })
            .collect();
        // Pick an input whose prediction is exactly 1 so label 1 is a perfect fit.
        let x = [1.0, 0.0, 0.0, 0.0];
        let zeros = vec![0.0; 8];
        let y = m.predict(&x, &zeros, &clean, Shots::Analytic, 0).unwrap();
        assert_eq!(y, 1.0);
        let perfect = vec![Example { features: x.to_vec(), label: 1 }; 3];
        let g = parameter_shift_gradient(&m, &LossConfig::analytic(0.0), &perfect, &zeros, &[0, 1, 2], &clean, SeedPath::new(0, 0)).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert_eq!(g.circuit_executions, 3 * 7);
        // Sanity: a generic batch does give a nonzero gradient.
        let g = parameter_shift_gradient(&m, &LossConfig::analytic(0.0), &fitted, &theta, &[0], &clean, SeedPath::new(0, 0)).unwrap();
        assert_ne!(g.values[0], 0.0);
    }

    #[test]
    fn slice_sparsity_and_accounting() {
        let m = Classifier::new(4, NoiseMode::PerGate).unwrap();
        let prof = NoiseProfile::new(2, 0.02).unwrap();
        let loss = LossConfig::new(0.0, Shots::Sampled(512)).unwrap();
        let g = parameter_shift_gradient(&m, &loss, &batch(5), &random_theta(1), &[2, 3], &prof, SeedPath::new(1, 7)).unwrap();
        assert_eq!(g.circuit_executions, 5 * (1 + 4));
        for (j, v) in g.values.iter().enumerate() {
            if j != 2 && j != 3 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let err = parameter_shift_gradient(&m, &LossConfig::analytic(0.0), &[], &random_theta(0), &[0], &NoiseProfile::noiseless(0), SeedPath::new(0, 0));
        assert!(matches!(err, Err(Error::Batch)));
    }

    #[test]
    fn shift_matches_finite_difference() {
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let all: Vec<usize> = (0..8).collect();
        for (s, lambda) in [(0u64, 0.0), (1, 0.0), (2, 0.05), (3, 0.3)] {
            let loss = LossConfig::analytic(lambda);
            let theta = random_theta(s);
            let b = batch(5);
            let ps = parameter_shift_gradient(&m, &loss, &b, &theta, &all, &NoiseProfile::noiseless(0), SeedPath::new(0, 0)).unwrap();
            let fd = finite_difference_gradient(&m, &loss, &b, &theta, 1e-6).unwrap();
            for j in 0..8 {
                assert!((ps.values[j] - fd.values[j]).abs() < 1e-6, "{j}: {} vs {}", ps.values[j], fd.values[j]);
            }
        }
    }

    #[test]
    fn regularizer_only_gradient() {
        // Inputs predicted exactly: the data term vanishes and the oracle
        // returns lambda * theta.
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let theta = vec![0.0; 8];
        let b = vec![Example { features: vec![1.0, 0.0, 0.0, 0.0], label: 1 }];
        let fd = finite_difference_gradient(&m, &LossConfig::analytic(0.7), &b, &theta, 1e-4).unwrap();
        for v in fd.values {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-9);
        }
        let theta = random_theta(5);
        let lam = 0.4;
        let ps = parameter_shift_gradient(&m, &LossConfig::analytic(lam), &b, &theta, &(0..8).collect::<Vec<_>>(), &NoiseProfile::noiseless(0), SeedPath::new(0, 0)).unwrap();
        let data_only = parameter_shift_gradient(&m, &LossConfig::analytic(0.0), &b, &theta, &(0..8).collect::<Vec<_>>(), &NoiseProfile::noiseless(0), SeedPath::new(0, 0)).unwrap();
        for j in 0..8 {
            assert_abs_diff_eq!(ps.values[j] - data_only.values[j], lam * theta[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn finite_difference_is_second_order() {
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let loss = LossConfig::analytic(0.0);
        let theta = random_theta(11);
        let b = batch(5);
        let exact = parameter_shift_gradient(&m, &loss, &b, &theta, &(0..8).collect::<Vec<_>>(), &NoiseProfile::noiseless(0), SeedPath::new(0, 0)).unwrap();
        let err = |eps| {
            let fd = finite_difference_gradient(&m, &loss, &b, &theta, eps).unwrap();
            fd.values.iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn oracle_refuses_sampled_mode() {
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let loss = LossConfig::new(0.0, Shots::Sampled(100)).unwrap();
        assert!(matches!(finite_difference_gradient(&m, &loss, &batch(2), &random_theta(0), 1e-6), Err(Error::OracleMode)));
    }

    #[test]
    fn bias_vanishes_without_noise() {
        let m = Classifier::new(4, NoiseMode::PerGate).unwrap();
        let d = estimate_bias_decomposition(&m, &LossConfig::analytic(0.0), &batch(5), &random_theta(2), &NoiseProfile::noiseless(0), 30, 1).unwrap();
        for c in d.components {
            assert!(c.bias.abs() < 1e-15);
            assert!(c.variance < 1e-30);
        }
    }

    #[test]
    fn merged_noise_bias_matches_closed_form() {
        // Under a register-wide channel y_noisy = 1/2 + (1-p)(y - 1/2), so the
        // data term of the noisy gradient is
        //   (1-p)^2 clean + p(1-p)/N sum_k (1/2 - y_k) dy_k/dtheta_j.
        let m = Classifier::new(4, NoiseMode::Merged { depth: 4 }).unwrap();
        let prof = NoiseProfile::new(0, 0.05).unwrap();
        let p = 1.0 - 0.95f64.powi(4);
        let b = batch(5);
        let theta = random_theta(8);
        let clean = NoiseProfile::noiseless(0);
        let loss = LossConfig::new(0.0, Shots::Sampled(8192)).unwrap();
        let dec = estimate_bias_decomposition(&m, &loss, &b, &theta, &prof, 200, 3).unwrap();
        assert_abs_diff_eq!(dec.effective_p, p, epsilon = 1e-15);
        for c in &dec.components {
            let j = c.index;
            let mut closed = 0.0;
            for ex in &b {
                let mut t = theta.clone();
                t[j] += PI / 2.0;
                let plus = m.predict(&ex.features, &t, &clean, Shots::Analytic, 0).unwrap();
                t[j] -= PI;
                let minus = m.predict(&ex.features, &t, &clean, Shots::Analytic, 0).unwrap();
                closed += (0.5 - ex.target()) * (plus - minus) / 2.0;
            }
            let closed = p * (1.0 - p) * closed / b.len() as f64;
            let se = c.standard_error.max(1e-12);
            assert!((c.bias - closed).abs() <= 5.0 * se, "component {j}: bias {} vs {closed} (se {se})", c.bias);
        }
    }

    #[test]
    fn fully_depolarized_gradient_is_regularizer() {
        let m = Classifier::new(4, NoiseMode::Merged { depth: 4 }).unwrap();
        let prof = NoiseProfile::with_rates(0, 1.0, 1.0).unwrap();
        let theta = random_theta(9);
        let lam = 0.2;
        let dec = estimate_bias_decomposition(&m, &LossConfig::analytic(lam), &batch(5), &theta, &prof, 30, 0).unwrap();
        for c in dec.components {
            assert_abs_diff_eq!(c.noisy_mean, lam * theta[c.index], epsilon = 1e-12);
        }
    }

    #[test]
    fn sampled_gradient_is_unbiased() {
        let m = Classifier::new(4, NoiseMode::PerGate).unwrap();
        let prof = NoiseProfile::new(0, 0.03).unwrap();
        let b = batch(5);
        let theta = random_theta(6);
        let all: Vec<usize> = (0..8).collect();
        let exact = parameter_shift_gradient(&m, &LossConfig::analytic(0.0), &b, &theta, &all, &prof, SeedPath::new(0, 0)).unwrap();
        let loss = LossConfig::new(0.0, Shots::Sampled(1024)).unwrap();
        let runs: Vec<Vec<f64>> = (0..500)
            .map(|s| parameter_shift_gradient(&m, &loss, &b, &theta, &all, &prof, SeedPath::new(s, 0)).unwrap().values)
            .collect();
        for j in 0..8 {
            let mean = runs.iter().map(|r| r[j]).sum::<f64>() / 500.0;
            let var = runs.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 499.0;
            let se = (var / 500.0).sqrt();
            assert!((mean - exact.values[j]).abs() <= 5.0 * se, "component {j}");
        }
    }
}
