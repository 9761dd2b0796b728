//! Exact density-matrix simulation of small parameterized circuits with
//! depolarizing noise and shot-based readout.
//!
//! Qubit 0 is the most significant bit of a basis index, so for two qubits
//! the basis order is `|q0 q1>` = 00, 01, 10, 11.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Largest register the engine accepts.
pub const MAX_QUBITS: usize = 8;

/// Mixed state of `n_qubits` qubits stored as a dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityMatrix {
    n_qubits: usize,
    data: Vec<Complex64>,
}

impl DensityMatrix {
    /// `|0...0><0...0|`.
    pub fn zero_state(n_qubits: usize) -> Result<Self> {
        check_register(n_qubits)?;
        let dim = 1 << n_qubits;
        let mut data = vec![ZERO; dim * dim];
        data[0] = ONE;
        Ok(Self { n_qubits, data })
    }

    /// `|k><k|` for a computational basis index.
    pub fn basis_state(n_qubits: usize, index: usize) -> Result<Self> {
        check_register(n_qubits)?;
        let dim = 1 << n_qubits;
        if index >= dim {
            return Err(Error::Encoding(format!(
                "basis index {index} out of range for {n_qubits} qubits"
            )));
        }
        let mut data = vec![ZERO; dim * dim];
        data[index * dim + index] = ONE;
        Ok(Self { n_qubits, data })
    }

    /// `I / 2^n`.
    pub fn maximally_mixed(n_qubits: usize) -> Result<Self> {
        check_register(n_qubits)?;
        let dim = 1 << n_qubits;
        let mut data = vec![ZERO; dim * dim];
        let w = 1.0 / dim as f64;
        for i in 0..dim {
            data[i * dim + i] = Complex64::new(w, 0.0);
        }
        Ok(Self { n_qubits, data })
    }

    /// `|psi><psi|` from a (not necessarily normalized) amplitude vector.
    pub fn from_pure(amplitudes: &[Complex64]) -> Result<Self> {
        let n_qubits = register_size(amplitudes.len())?;
        let norm = amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Encoding("state vector has zero or non-finite norm".into()));
        }
        let dim = amplitudes.len();
        let psi: Vec<Complex64> = amplitudes.iter().map(|a| a / norm).collect();
        let mut data = vec![ZERO; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                data[i * dim + j] = psi[i] * psi[j].conj();
            }
        }
        Ok(Self { n_qubits, data })
    }

    /// Builds a state from raw row-major entries. The entries are not checked
    /// for positivity; use [`DensityMatrix::validate`] for that.
    pub fn from_entries(n_qubits: usize, data: Vec<Complex64>) -> Result<Self> {
        check_register(n_qubits)?;
        let dim = 1 << n_qubits;
        if data.len() != dim * dim {
            return Err(Error::Shape(format!(
                "expected {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        Ok(Self { n_qubits, data })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.n_qubits
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dim() + col]
    }

    pub fn trace(&self) -> Complex64 {
        let dim = self.dim();
        (0..dim).map(|i| self.data[i * dim + i]).sum()
    }

    /// Real parts of the diagonal, i.e. the computational-basis outcome
    /// distribution.
    pub fn diagonal(&self) -> Vec<f64> {
        let dim = self.dim();
        (0..dim).map(|i| self.data[i * dim + i].re).collect()
    }

    pub fn purity(&self) -> f64 {
        // Tr(rho^2) = sum |rho_ij|^2 for Hermitian rho.
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Largest deviation from Hermiticity, `max |rho_ij - conj(rho_ji)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in i..dim {
                let d = (self.get(i, j) - self.get(j, i).conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }

    /// Smallest eigenvalue of the Hermitian part, via cyclic Jacobi on the
    /// real 2n x 2n embedding `[[A, -B], [B, A]]`.
    pub fn min_eigenvalue(&self) -> f64 {
        let dim = self.dim();
        let n = 2 * dim;
        let mut a = vec![0.0f64; n * n];
        for i in 0..dim {
            for j in 0..dim {
                let h = (self.get(i, j) + self.get(j, i).conj()) * 0.5;
                a[i * n + j] = h.re;
                a[(i + dim) * n + (j + dim)] = h.re;
                a[i * n + (j + dim)] = -h.im;
                a[(i + dim) * n + j] = h.im;
            }
        }
        jacobi_eigenvalues(&mut a, n)
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks the density-matrix invariants at the engine tolerances.
    pub fn validate(&self) -> Result<()> {
        let tr = self.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(Error::Numerics(format!("trace {tr} != 1")));
        }
        let herm = self.hermiticity_error();
        if herm > 1e-10 {
            return Err(Error::Numerics(format!("hermiticity error {herm:e}")));
        }
        let min = self.min_eigenvalue();
        if min < -1e-9 {
            return Err(Error::Numerics(format!("negative eigenvalue {min:e}")));
        }
        Ok(())
    }

    fn check_qubit(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            return Err(Error::Gate(format!(
                "target qubit {q} out of range for {} qubits",
                self.n_qubits
            )));
        }
        Ok(())
    }

    fn bit(&self, q: usize) -> usize {
        1 << (self.n_qubits - 1 - q)
    }

    /// In-place `rho -> U rho U^dagger` for a single-qubit `U` on `q`.
    fn conjugate_1q(&mut self, q: usize, u: &Matrix2) {
        let dim = self.dim();
        let b = self.bit(q);
        // Left multiply: rows.
        for r0 in (0..dim).filter(|r| r & b == 0) {
            let r1 = r0 | b;
            for c in 0..dim {
                let x0 = self.data[r0 * dim + c];
                let x1 = self.data[r1 * dim + c];
                self.data[r0 * dim + c] = u.0[0][0] * x0 + u.0[0][1] * x1;
                self.data[r1 * dim + c] = u.0[1][0] * x0 + u.0[1][1] * x1;
            }
        }
        // Right multiply by U^dagger: columns.
        for c0 in (0..dim).filter(|c| c & b == 0) {
            let c1 = c0 | b;
            for r in 0..dim {
                let x0 = self.data[r * dim + c0];
                let x1 = self.data[r * dim + c1];
                self.data[r * dim + c0] = x0 * u.0[0][0].conj() + x1 * u.0[0][1].conj();
                self.data[r * dim + c1] = x0 * u.0[1][0].conj() + x1 * u.0[1][1].conj();
            }
        }
    }

    fn conjugate_cz(&mut self, a: usize, b: usize) {
        let dim = self.dim();
        let mask = self.bit(a) | self.bit(b);
        let sign = |i: usize| if i & mask == mask { -1.0 } else { 1.0 };
        for r in 0..dim {
            for c in 0..dim {
                let s = sign(r) * sign(c);
                if s < 0.0 {
                    self.data[r * dim + c] = -self.data[r * dim + c];
                }
            }
        }
    }

    fn depolarize_in_place(&mut self, mask: usize, p: f64) {
        if p == 0.0 {
            return;
        }
        let dim = self.dim();
        let k = mask.count_ones();
        let weight = 1.0 / (1usize << k) as f64;
        // Enumerate the sub-register assignments s that are subsets of mask.
        let subsets: Vec<usize> = (0..dim).filter(|s| s & !mask == 0).collect();
        let mut replaced = vec![ZERO; dim * dim];
        for r in 0..dim {
            for c in 0..dim {
                if r & mask != c & mask {
                    continue;
                }
                let (ro, co) = (r & !mask, c & !mask);
                let sum: Complex64 = subsets
                    .iter()
                    .map(|s| self.data[(ro | s) * dim + (co | s)])
                    .sum();
                replaced[r * dim + c] = sum * weight;
            }
        }
        for (x, y) in self.data.iter_mut().zip(replaced) {
            *x = *x * (1.0 - p) + y * p;
        }
    }
}

fn check_register(n_qubits: usize) -> Result<()> {
    if n_qubits == 0 || n_qubits > MAX_QUBITS {
        return Err(Error::Spec(format!(
            "register size {n_qubits} outside 1..={MAX_QUBITS}"
        )));
    }
    Ok(())
}

fn register_size(len: usize) -> Result<usize> {
    if len < 2 || !len.is_power_of_two() {
        return Err(Error::Encoding(format!(
            "length {len} is not a power of two >= 2"
        )));
    }
    let n = len.trailing_zeros() as usize;
    if n > MAX_QUBITS {
        return Err(Error::Encoding(format!("{n} qubits exceeds {MAX_QUBITS}")));
    }
    Ok(n)
}

/// Eigenvalues of a real symmetric matrix (destroys `a`).
fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// A 2x2 complex matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matrix2(pub [[Complex64; 2]; 2]);

impl Matrix2 {
    pub fn ry(theta: f64) -> Self {
        let (s, c) = (theta / 2.0).sin_cos();
        let (c, s) = (Complex64::new(c, 0.0), Complex64::new(s, 0.0));
        Matrix2([[c, -s], [s, c]])
    }

    pub fn rz(theta: f64) -> Self {
        let half = theta / 2.0;
        Matrix2([
            [Complex64::from_polar(1.0, -half), ZERO],
            [ZERO, Complex64::from_polar(1.0, half)],
        ])
    }

    pub fn hadamard() -> Self {
        let h = Complex64::new(FRAC_1_SQRT_2, 0.0);
        Matrix2([[h, h], [h, -h]])
    }

    /// `max |U^dagger U - I|`.
    pub fn unitarity_error(&self) -> f64 {
        let m = &self.0;
        let mut worst = 0.0f64;
        for i in 0..2 {
            for j in 0..2 {
                let v = m[0][i].conj() * m[0][j] + m[1][i].conj() * m[1][j];
                let target = if i == j { ONE } else { ZERO };
                worst = worst.max((v - target).norm());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    RotationY,
    RotationZ,
    ControlledZ,
    Unitary1q(Matrix2),
}

impl GateKind {
    pub fn is_rotation(&self) -> bool {
        matches!(self, GateKind::RotationY | GateKind::RotationZ)
    }

    pub fn arity(&self) -> usize {
        match self {
            GateKind::ControlledZ => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateOp {
    pub kind: GateKind,
    pub targets: Vec<usize>,
    /// Fixed angle for unparameterized rotations.
    #[serde(default)]
    pub angle: f64,
    /// Index into the parameter vector that binds this gate's angle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_index: Option<usize>,
}

impl GateOp {
    pub fn ry(target: usize, param_index: usize) -> Self {
        Self {
            kind: GateKind::RotationY,
            targets: vec![target],
            angle: 0.0,
            param_index: Some(param_index),
        }
    }

    pub fn rz(target: usize, param_index: usize) -> Self {
        Self {
            kind: GateKind::RotationZ,
            targets: vec![target],
            angle: 0.0,
            param_index: Some(param_index),
        }
    }

    pub fn fixed_ry(target: usize, angle: f64) -> Self {
        Self {
            kind: GateKind::RotationY,
            targets: vec![target],
            angle,
            param_index: None,
        }
    }

    pub fn cz(a: usize, b: usize) -> Self {
        Self {
            kind: GateKind::ControlledZ,
            targets: vec![a, b],
            angle: 0.0,
            param_index: None,
        }
    }

    pub fn unitary(target: usize, u: Matrix2) -> Self {
        Self {
            kind: GateKind::Unitary1q(u),
            targets: vec![target],
            angle: 0.0,
            param_index: None,
        }
    }

    /// Checks target count and distinctness against a register size.
    pub fn validate(&self, n_qubits: usize) -> Result<()> {
        if self.targets.len() != self.kind.arity() {
            return Err(Error::Gate(format!(
                "{:?} takes {} target(s), got {}",
                self.kind,
                self.kind.arity(),
                self.targets.len()
            )));
        }
        if let Some(&q) = self.targets.iter().find(|&&q| q >= n_qubits) {
            return Err(Error::Gate(format!(
                "target qubit {q} out of range for {n_qubits} qubits"
            )));
        }
        if self.targets.len() == 2 && self.targets[0] == self.targets[1] {
            return Err(Error::Gate("two-qubit gate targets must be distinct".into()));
        }
        if self.param_index.is_some() && !self.kind.is_rotation() {
            return Err(Error::Gate("only rotations can carry a parameter".into()));
        }
        Ok(())
    }
}

/// Depolarizing strengths of one simulated QPU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub node_id: usize,
    /// Single-qubit gate depolarizing probability.
    pub p1: f64,
    /// Two-qubit gate depolarizing probability.
    pub p2: f64,
}

impl NoiseProfile {
    /// Profile with the two-qubit rate set to `4 * p1`.
    pub fn new(node_id: usize, p1: f64) -> Result<Self> {
        Self::with_rates(node_id, p1, 4.0 * p1)
    }

    pub fn with_rates(node_id: usize, p1: f64, p2: f64) -> Result<Self> {
        check_probability(p1)?;
        check_probability(p2)?;
        Ok(Self { node_id, p1, p2 })
    }

    pub fn noiseless(node_id: usize) -> Self {
        Self {
            node_id,
            p1: 0.0,
            p2: 0.0,
        }
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Noise(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum NoiseMode {
    None,
    /// Depolarizing channel on each gate's support right after the gate.
    PerGate,
    /// Noiseless circuit followed by one register-wide channel whose
    /// strength is the per-layer rate compounded over `depth` layers.
    Merged { depth: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitSpec {
    n_qubits: usize,
    gates: Vec<GateOp>,
    noise_mode: NoiseMode,
    n_params: usize,
}

impl CircuitSpec {
    pub fn new(n_qubits: usize, gates: Vec<GateOp>, noise_mode: NoiseMode) -> Result<Self> {
        check_register(n_qubits)?;
        for g in &gates {
            g.validate(n_qubits)?;
        }
        if let NoiseMode::Merged { depth: 0 } = noise_mode {
            return Err(Error::Spec("merged depth must be >= 1".into()));
        }
        let mut indices: Vec<usize> = gates.iter().filter_map(|g| g.param_index).collect();
        indices.sort_unstable();
        if indices.iter().enumerate().any(|(i, &p)| i != p) {
            return Err(Error::Spec(
                "parameter indices must cover 0..d-1 exactly once".into(),
            ));
        }
        Ok(Self {
            n_qubits,
            n_params: indices.len(),
            gates,
            noise_mode,
        })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn gates(&self) -> &[GateOp] {
        &self.gates
    }

    pub fn noise_mode(&self) -> NoiseMode {
        self.noise_mode
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn with_noise_mode(mut self, noise_mode: NoiseMode) -> Result<Self> {
        if let NoiseMode::Merged { depth: 0 } = noise_mode {
            return Err(Error::Spec("merged depth must be >= 1".into()));
        }
        self.noise_mode = noise_mode;
        Ok(self)
    }
}

/// Amplitude-encodes a real vector of length `2^n` as a pure state.
pub fn amplitude_encode(x: &[f64]) -> Result<DensityMatrix> {
    register_size(x.len())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Encoding("non-finite feature".into()));
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(Error::Encoding("zero vector".into()));
    }
    let amps: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    DensityMatrix::from_pure(&amps)
}

/// Applies `gate` with `bound_angle` (ignored for non-rotations).
pub fn apply_gate(state: &DensityMatrix, gate: &GateOp, bound_angle: f64) -> Result<DensityMatrix> {
    let mut out = state.clone();
    apply_gate_in_place(&mut out, gate, bound_angle)?;
    Ok(out)
}

fn apply_gate_in_place(state: &mut DensityMatrix, gate: &GateOp, angle: f64) -> Result<()> {
    gate.validate(state.n_qubits)?;
    match gate.kind {
        GateKind::RotationY => state.conjugate_1q(gate.targets[0], &Matrix2::ry(angle)),
        GateKind::RotationZ => state.conjugate_1q(gate.targets[0], &Matrix2::rz(angle)),
        GateKind::Unitary1q(u) => {
            if u.unitarity_error() > 1e-10 {
                return Err(Error::Gate("matrix is not unitary".into()));
            }
            state.conjugate_1q(gate.targets[0], &u)
        }
        GateKind::ControlledZ => state.conjugate_cz(gate.targets[0], gate.targets[1]),
    }
    Ok(())
}

/// `(1 - p) rho + p (Tr_S rho) (x) I_S / 2^|S|` on the qubit subset `S`.
pub fn apply_depolarizing(state: &DensityMatrix, qubits: &[usize], p: f64) -> Result<DensityMatrix> {
    check_probability(p)?;
    let mut mask = 0;
    for &q in qubits {
        state.check_qubit(q).map_err(|e| Error::Noise(e.to_string()))?;
        mask |= state.bit(q);
    }
    let mut out = state.clone();
    out.depolarize_in_place(mask, p);
    Ok(out)
}

/// Strength of the single channel equivalent to `layers` stacked channels of
/// strength `p`: `1 - (1 - p)^layers`.
pub fn merged_depolarizing_prob(p: f64, layers: u32) -> Result<f64> {
    check_probability(p)?;
    if layers == 0 {
        return Err(Error::Noise("layer count must be >= 1".into()));
    }
    Ok(1.0 - (1.0 - p).powi(layers as i32))
}

/// Runs `spec` on `input` with angles bound from `params`, inserting noise as
/// dictated by the spec's noise mode and `profile`.
pub fn run_circuit(
    spec: &CircuitSpec,
    input: &DensityMatrix,
    params: &[f64],
    profile: &NoiseProfile,
) -> Result<DensityMatrix> {
    if params.len() != spec.n_params {
        return Err(Error::Spec(format!(
            "circuit has {} parameters, got {}",
            spec.n_params,
            params.len()
        )));
    }
    if input.n_qubits != spec.n_qubits {
        return Err(Error::Spec(format!(
            "circuit acts on {} qubits, input has {}",
            spec.n_qubits, input.n_qubits
        )));
    }
    let mut state = input.clone();
    for gate in &spec.gates {
        let angle = gate.param_index.map_or(gate.angle, |i| params[i]);
        apply_gate_in_place(&mut state, gate, angle)?;
        if spec.noise_mode == NoiseMode::PerGate {
            let p = if gate.kind.arity() == 2 { profile.p2 } else { profile.p1 };
            let mask = gate.targets.iter().fold(0, |m, &q| m | state.bit(q));
            state.depolarize_in_place(mask, p);
        }
    }
    if let NoiseMode::Merged { depth } = spec.noise_mode {
        let p = merged_depolarizing_prob(profile.p1, depth)?;
        let full = state.dim() - 1;
        state.depolarize_in_place(full, p);
    }
    Ok(state)
}

/// Measured observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Observable {
    /// `Z (x) ... (x) Z`: eigenvalue +1 on even-parity bitstrings, -1 on odd.
    ZParity { n_qubits: usize },
    /// Arbitrary Hermitian matrix, row-major.
    Matrix {
        n_qubits: usize,
        entries: Vec<Complex64>,
    },
}

impl Observable {
    pub fn z_parity(n_qubits: usize) -> Self {
        Observable::ZParity { n_qubits }
    }

    pub fn n_qubits(&self) -> usize {
        match self {
            Observable::ZParity { n_qubits } | Observable::Matrix { n_qubits, .. } => *n_qubits,
        }
    }

    /// Eigenvalues per basis outcome, if the observable is diagonal.
    pub fn diagonal(&self) -> Option<Vec<f64>> {
        match self {
            Observable::ZParity { n_qubits } => Some(
                (0..1usize << n_qubits)
                    .map(|k| if k.count_ones() % 2 == 0 { 1.0 } else { -1.0 })
                    .collect(),
            ),
            Observable::Matrix { n_qubits, entries } => {
                let dim = 1 << n_qubits;
                let off_diag = (0..dim)
                    .flat_map(|i| (0..dim).map(move |j| (i, j)))
                    .any(|(i, j)| i != j && entries[i * dim + j].norm() > 1e-12);
                if off_diag {
                    None
                } else {
                    Some((0..dim).map(|i| entries[i * dim + i].re).collect())
                }
            }
        }
    }
}

/// How an expectation value is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Shots {
    /// Exact `Tr(O rho)`.
    Analytic,
    /// Mean of this many sampled eigenvalues.
    Sampled(u32),
}

impl Shots {
    pub fn is_analytic(&self) -> bool {
        matches!(self, Shots::Analytic)
    }
}

/// Estimates `<O>` on `state`. In sampled mode `seed` fully determines the
/// drawn outcomes.
pub fn expectation(
    state: &DensityMatrix,
    observable: &Observable,
    shots: Shots,
    seed: u64,
) -> Result<f64> {
    if observable.n_qubits() != state.n_qubits {
        return Err(Error::Shape(format!(
            "observable on {} qubits, state on {}",
            observable.n_qubits(),
            state.n_qubits
        )));
    }
    match shots {
        Shots::Analytic => Ok(analytic_expectation(state, observable)),
        Shots::Sampled(0) => Err(Error::Spec("shot count must be >= 1".into())),
        Shots::Sampled(k) => {
            let eig = observable.diagonal().ok_or(Error::UnsupportedObservable)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(sample_mean(&state.diagonal(), &eig, k, &mut rng))
        }
    }
}

fn analytic_expectation(state: &DensityMatrix, observable: &Observable) -> f64 {
    let dim = state.dim();
    match observable {
        Observable::ZParity { .. } => state
            .diagonal()
            .iter()
            .enumerate()
            .map(|(k, p)| if k.count_ones() % 2 == 0 { *p } else { -*p })
            .sum(),
        Observable::Matrix { entries, .. } => {
            let mut acc = ZERO;
            for i in 0..dim {
                for j in 0..dim {
                    acc += entries[i * dim + j] * state.get(j, i);
                }
            }
            acc.re
        }
    }
}

/// Mean eigenvalue over `shots` i.i.d. outcomes drawn from `probs`. Outcome
/// counts are drawn as a multinomial via sequential conditional binomials,
/// which has the same law as drawing the shots one by one.
fn sample_mean(probs: &[f64], eigenvalues: &[f64], shots: u32, rng: &mut ChaCha8Rng) -> f64 {
    let probs: Vec<f64> = probs.iter().map(|p| p.max(0.0)).collect();
    let mut mass: f64 = probs.iter().sum();
    let mut remaining = shots as u64;
    let mut total = 0.0;
    for (k, (&p, &eig)) in probs.iter().zip(eigenvalues).enumerate() {
        if remaining == 0 {
            break;
        }
        let count = if k + 1 == probs.len() || p >= mass {
            remaining
        } else if p <= 0.0 {
            0
        } else {
            let q = (p / mass).clamp(0.0, 1.0);
            Binomial::new(remaining, q)
                .expect("probability clamped to [0, 1]")
                .sample(rng)
        };
        total += count as f64 * eig;
        remaining -= count;
        mass -= p;
    }
    total / shots as f64
}
