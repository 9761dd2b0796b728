//! Amplitude-encoded two-qubit classifier with a hardware-efficient ansatz
//! and `Z (x) Z` parity readout.

use std::f64::consts::TAU;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::engine::{
    amplitude_encode, expectation, merged_depolarizing_prob, run_circuit, CircuitSpec, GateOp,
    NoiseMode, NoiseProfile, Observable, Shots,
};
use crate::error::{Error, Result};

/// Trainable angles, kept in `[0, 2pi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    /// Wraps every angle into `[0, 2pi)`.
    pub fn wrapped(values: Vec<f64>) -> Self {
        Self(values.into_iter().map(wrap_angle).collect())
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs.
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Regularizer strength and readout mode of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub shots: Shots,
}

impl LossConfig {
    pub fn new(lambda: f64, shots: Shots) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Spec(format!("regularizer {lambda} must be >= 0")));
        }
        if shots == Shots::Sampled(0) {
            return Err(Error::Spec("shot count must be >= 1".into()));
        }
        Ok(Self { lambda, shots })
    }

    pub fn analytic(lambda: f64) -> Self {
        Self {
            lambda,
            shots: Shots::Analytic,
        }
    }
}

/// `layers` rounds of `Ry` on every qubit; rounds 1..layers-1 are followed by
/// a CZ chain. Parameter `l * n_qubits + q` drives qubit `q` in round `l`.
pub fn build_ansatz(n_qubits: usize, layers: usize, noise_mode: NoiseMode) -> Result<CircuitSpec> {
    if layers == 0 {
        return Err(Error::Spec("ansatz needs at least one layer".into()));
    }
    let mut gates = Vec::with_capacity(layers * (2 * n_qubits));
    for l in 0..layers {
        for q in 0..n_qubits {
            gates.push(GateOp::ry(q, l * n_qubits + q));
        }
        if l + 1 < layers {
            for q in 0..n_qubits.saturating_sub(1) {
                gates.push(GateOp::cz(q, q + 1));
            }
        }
    }
    CircuitSpec::new(n_qubits, gates, noise_mode)
}

/// The classifier: ansatz plus readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    circuit: CircuitSpec,
    observable: Observable,
    layers: usize,
}

impl Classifier {
    pub const DEFAULT_LAYERS: usize = 4;

    pub fn new(layers: usize, noise_mode: NoiseMode) -> Result<Self> {
        let circuit = build_ansatz(2, layers, noise_mode)?;
        Ok(Self {
            circuit,
            observable: Observable::z_parity(2),
            layers,
        })
    }

    /// Wraps an arbitrary circuit; `layers` is the depth used when an
    /// effective register-wide noise level is needed.
    pub fn from_circuit(circuit: CircuitSpec, observable: Observable, layers: usize) -> Result<Self> {
        if observable.n_qubits() != circuit.n_qubits() {
            return Err(Error::Shape("observable and circuit sizes differ".into()));
        }
        Ok(Self {
            circuit,
            observable,
            layers,
        })
    }

    pub fn circuit(&self) -> &CircuitSpec {
        &self.circuit
    }

    pub fn observable(&self) -> &Observable {
        &self.observable
    }

    pub fn n_params(&self) -> usize {
        self.circuit.n_params()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Register-wide depolarizing strength equivalent to the profile under
    /// this model's noise mode (per-gate mode uses the layer count as depth).
    pub fn effective_depolarizing(&self, profile: &NoiseProfile) -> Result<f64> {
        match self.circuit.noise_mode() {
            NoiseMode::None => Ok(0.0),
            NoiseMode::Merged { depth } => merged_depolarizing_prob(profile.p1, depth),
            NoiseMode::PerGate => merged_depolarizing_prob(profile.p1, self.layers as u32),
        }
    }

    /// Readout expectation `<O>` for one input.
    pub fn expectation(
        &self,
        features: &[f64],
        params: &[f64],
        profile: &NoiseProfile,
        shots: Shots,
        seed: u64,
    ) -> Result<f64> {
        let input = amplitude_encode(features)?;
        let out = run_circuit(&self.circuit, &input, params, profile)?;
        expectation(&out, &self.observable, shots, seed)
    }

    /// `y_hat = (1 + <O>) / 2`.
    pub fn predict(
        &self,
        features: &[f64],
        params: &[f64],
        profile: &NoiseProfile,
        shots: Shots,
        seed: u64,
    ) -> Result<f64> {
        let e = self.expectation(features, params, profile, shots, seed)?;
        Ok(((1.0 + e) / 2.0).clamp(0.0, 1.0))
    }
}

/// Class decision for a prediction.
pub fn predicted_label(y_hat: f64) -> u8 {
    u8::from(y_hat >= 0.5)
}

/// Fraction of examples whose decision matches the label.
pub fn accuracy(predictions: &[f64], examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(examples)
        .filter(|(p, e)| predicted_label(**p) == e.label)
        .count();
    hits as f64 / examples.len() as f64
}

/// `1/(2 N) sum_k (y_hat_k - y_k)^2 + lambda/2 ||theta||^2`.
pub fn mse_loss(predictions: &[f64], labels: &[f64], params: &[f64], lambda: f64) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Shape("loss over an empty set".into()));
    }
    let n = predictions.len() as f64;
    let data: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    let reg: f64 = params.iter().map(|t| t * t).sum();
    Ok(data / (2.0 * n) + lambda / 2.0 * reg)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::engine::GateKind;

    fn noiseless() -> NoiseProfile {
        NoiseProfile::noiseless(0)
    }

    #[test]
    fn default_ansatz_shape() {
        let spec = build_ansatz(2, 4, NoiseMode::PerGate).unwrap();
        assert_eq!(spec.n_params(), 8);
        let cz = spec
            .gates()
            .iter()
            .filter(|g| g.kind == GateKind::ControlledZ)
            .count();
        assert_eq!(cz, 3);
        let order: Vec<(usize, usize)> = spec
            .gates()
            .iter()
            .filter_map(|g| g.param_index.map(|p| (p, g.targets[0])))
            .collect();
        assert_eq!(order, (0..8).map(|p| (p, p % 2)).collect::<Vec<_>>());
    }

    #[test]
    fn single_layer_ansatz() {
        let spec = build_ansatz(2, 1, NoiseMode::None).unwrap();
        assert_eq!(spec.n_params(), 2);
        assert!(spec.gates().iter().all(|g| g.kind == GateKind::RotationY));
    }

    #[test]
    fn prediction_examples() {
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let zero = vec![0.0; 8];
        let p = m.predict(&[1.0, 0.0, 0.0, 0.0], &zero, &noiseless(), Shots::Analytic, 0).unwrap();
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-15);
        let p = m.predict(&[0.0, 1.0, 0.0, 0.0], &zero, &noiseless(), Shots::Analytic, 0).unwrap();
        assert_abs_diff_eq!(p, 0.0, epsilon = 1e-15);

        let merged = Classifier::new(4, NoiseMode::Merged { depth: 4 }).unwrap();
        let full = NoiseProfile::with_rates(0, 1.0, 1.0).unwrap();
        let theta = [0.3, 1.1, 2.0, 4.0, 0.2, 5.5, 3.3, 0.9];
        let p = merged.predict(&[5.1, 3.5, 1.4, 0.2], &theta, &full, Shots::Analytic, 0).unwrap();
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(mse_loss(&[0.3, 0.7], &[0.3, 0.7], &[1.0], 0.0).unwrap(), 0.0);
        let l = mse_loss(&[0.3], &[0.3], &[2.0, 0.0], 0.1).unwrap();
        assert_abs_diff_eq!(l, 0.2, epsilon = 1e-15);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 1.0], &[], 0.0).unwrap(), 0.5);
        assert!(matches!(mse_loss(&[1.0], &[0.0, 1.0], &[], 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn wrapping() {
        let p = ParameterVector::wrapped(vec![-0.5, 7.0, TAU, -1e-18]);
        assert_abs_diff_eq!(p[0], TAU - 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 7.0 - TAU, epsilon = 1e-15);
        assert_eq!(p[2], 0.0);
        assert!(p.iter().all(|v| (0.0..TAU).contains(v)));
    }

    #[test]
    fn accuracy_rule() {
        let ex = |label| Example {
            features: vec![1.0; 4],
            label,
        };
        let examples = vec![ex(0), ex(1), ex(1), ex(0)];
        assert_eq!(accuracy(&[0.1, 0.9, 0.6, 0.4], &examples), 1.0);
        // Ties go to class 1.
        assert_eq!(accuracy(&[0.5; 4], &examples), 0.5);
    }

    proptest! {
        #[test]
        fn predictions_in_unit_interval(
            theta in proptest::collection::vec(0.0f64..TAU, 8),
            x in proptest::collection::vec(0.1f64..8.0, 4),
            p in 0.0f64..0.25,
            seed in 0u64..100,
        ) {
            let m = Classifier::new(4, NoiseMode::PerGate).unwrap();
            let prof = NoiseProfile::new(1, p).unwrap();
            let a = m.predict(&x, &theta, &prof, Shots::Analytic, 0).unwrap();
            let s = m.predict(&x, &theta, &prof, Shots::Sampled(100), seed).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn noiseless_prediction_is_periodic(
            theta in proptest::collection::vec(0.0f64..TAU, 8),
            j in 0usize..8,
        ) {
            let m = Classifier::new(4, NoiseMode::None).unwrap();
            let x = [6.3, 3.3, 6.0, 2.5];
            let base = m.predict(&x, &theta, &noiseless(), Shots::Analytic, 0).unwrap();
            let mut shifted = theta.clone();
            shifted[j] += 2.0 * PI;
            let other = m.predict(&x, &shifted, &noiseless(), Shots::Analytic, 0).unwrap();
            prop_assert!((base - other).abs() < 1e-12);
        }

        #[test]
        fn loss_permutation_invariant(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20),
            rot in 0usize..20,
        ) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let mut rotated = pairs.clone();
            let k = rot % pairs.len();
            rotated.rotate_left(k);
            let (p2, y2): (Vec<f64>, Vec<f64>) = rotated.into_iter().unzip();
            let a = mse_loss(&p, &y, &[0.5], 0.2).unwrap();
            let b = mse_loss(&p2, &y2, &[0.5], 0.2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }
    }
}
