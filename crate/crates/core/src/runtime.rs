//! Parameter-server training loop: partitioning, scheduling, workers,
//! barrier aggregation, optimizer updates and the convergence test.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::mpsc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{CommLedger, ResidualSlot};
use crate::data::{Dataset, Example};
use crate::engine::{NoiseMode, NoiseProfile, Shots};
use crate::error::{Error, Result};
use crate::gradient::{parameter_shift_gradient, GradientVector, SeedPath};
use crate::model::{accuracy, mse_loss, Classifier, LossConfig, ParameterVector};
use crate::seed;

/// Contiguous parameter groups, one per node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    ranges: Vec<Range<usize>>,
}

impl Partition {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn group(&self, g: usize) -> Vec<usize> {
        self.ranges[g].clone().collect()
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Group `i` is `[i*d/M, (i+1)*d/M)`; equal parts when `M` divides `d`.
pub fn partition_parameters(d: usize, m: usize) -> Result<Partition> {
    if m == 0 || m > d {
        return Err(Error::Partition { d, m });
    }
    let ranges = (0..m).map(|i| i * d / m..(i + 1) * d / m).collect();
    Ok(Partition { ranges })
}

/// Group -> node mapping at iteration `t` under cyclic reassignment:
/// group `g` goes to node `(g + t) mod M`.
pub fn assign_alternate(t: u64, m: usize) -> Vec<usize> {
    let shift = (t % m as u64) as usize;
    (0..m).map(|g| (g + shift) % m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentSchedule {
    pub nodes: usize,
    pub alternate: bool,
}

impl AssignmentSchedule {
    /// Group -> node.
    pub fn at(&self, t: u64) -> Vec<usize> {
        if self.alternate {
            assign_alternate(t, self.nodes)
        } else {
            (0..self.nodes).collect()
        }
    }

    /// Group handled by `node` at iteration `t`.
    pub fn group_of(&self, node: usize, t: u64) -> usize {
        if self.alternate {
            let shift = (t % self.nodes as u64) as usize;
            (node + self.nodes - shift) % self.nodes
        } else {
            node
        }
    }
}

/// Worker -> server reply for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientMessage {
    pub node_id: usize,
    pub iteration: u64,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub circuit_executions: u64,
    /// Residual slot handed back when compression is on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualSlot>,
}

/// Everything a stateless worker needs for one iteration (the payload of a
/// `params` message).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkOrder {
    pub iteration: u64,
    pub node_id: usize,
    pub nodes: usize,
    pub alternate: bool,
    pub group: usize,
    pub indices: Vec<usize>,
    pub theta: Vec<f64>,
    pub batch: Vec<Example>,
    pub profile: NoiseProfile,
    pub shots: Shots,
    pub lambda: f64,
    pub layers: usize,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualSlot>,
}

/// Computes the gradient slice a node owes for one iteration.
pub fn worker_step(order: &WorkOrder) -> Result<GradientMessage> {
    let schedule = AssignmentSchedule {
        nodes: order.nodes,
        alternate: order.alternate,
    };
    if order.node_id >= order.nodes {
        return Err(Error::Protocol(format!("node {} of {}", order.node_id, order.nodes)));
    }
    let expected = schedule.group_of(order.node_id, order.iteration);
    if expected != order.group {
        return Err(Error::Protocol(format!(
            "node {} assigned group {} at iteration {}, schedule says {expected}",
            order.node_id, order.group, order.iteration
        )));
    }
    let model = Classifier::new(order.layers, order.noise_mode)?;
    let partition = partition_parameters(model.n_params(), order.nodes)?;
    if partition.group(order.group) != order.indices {
        return Err(Error::Protocol(format!(
            "indices {:?} do not match group {}",
            order.indices, order.group
        )));
    }
    let loss = LossConfig::new(order.lambda, order.shots)?;
    let grad = parameter_shift_gradient(
        &model,
        &loss,
        &order.batch,
        &order.theta,
        &order.indices,
        &order.profile,
        SeedPath::new(order.seed, order.iteration),
    )?;
    let raw: Vec<f64> = order.indices.iter().map(|&j| grad.values[j]).collect();
    match order.threshold {
        None => Ok(GradientMessage {
            node_id: order.node_id,
            iteration: order.iteration,
            indices: order.indices.clone(),
            values: raw,
            circuit_executions: grad.circuit_executions,
            residual: None,
        }),
        Some(thr) => {
            let mut slot = order
                .residual
                .clone()
                .ok_or_else(|| Error::Protocol("compressed order without residual slot".into()))?;
            if slot.group != order.group || slot.indices != order.indices {
                return Err(Error::Protocol(format!(
                    "residual slot for group {} handed to group {}",
                    slot.group, order.group
                )));
            }
            let (indices, values) = slot.absorb(&raw, thr).into_iter().unzip();
            Ok(GradientMessage {
                node_id: order.node_id,
                iteration: order.iteration,
                indices,
                values,
                circuit_executions: grad.circuit_executions,
                residual: Some(slot),
            })
        }
    }
}

/// What the server expects back in one round.
#[derive(Debug, Clone)]
pub struct RoundPlan {
    pub iteration: u64,
    pub d: usize,
    /// Indices owned by each node this round.
    pub node_indices: Vec<Vec<usize>>,
    /// Compressed rounds accept any subset of the owned indices.
    pub sparse: bool,
}

/// Places every node's components into a dense gradient. Untransmitted
/// components are zero.
pub fn aggregate(messages: &[GradientMessage], plan: &RoundPlan) -> Result<GradientVector> {
    let m = plan.node_indices.len();
    let mut seen = vec![false; m];
    for msg in messages {
        if msg.node_id >= m {
            return Err(Error::Protocol(format!("unknown node {}", msg.node_id)));
        }
        if std::mem::replace(&mut seen[msg.node_id], true) {
            return Err(Error::Protocol(format!("duplicate message from node {}", msg.node_id)));
        }
        if msg.iteration != plan.iteration {
            return Err(Error::Protocol(format!(
                "node {} sent iteration {}, expected {}",
                msg.node_id, msg.iteration, plan.iteration
            )));
        }
    }
    let missing: Vec<usize> = (0..m).filter(|&i| !seen[i]).collect();
    if !missing.is_empty() {
        return Err(Error::BarrierTimeout {
            iteration: plan.iteration,
            missing,
        });
    }
    let mut values = vec![0.0; plan.d];
    let mut placed = vec![false; plan.d];
    let mut circuits = 0;
    for msg in messages {
        if msg.indices.len() != msg.values.len() {
            return Err(Error::Protocol(format!("node {}: ragged message", msg.node_id)));
        }
        let owned: BTreeSet<usize> = plan.node_indices[msg.node_id].iter().copied().collect();
        if !plan.sparse && msg.indices != plan.node_indices[msg.node_id] {
            return Err(Error::Protocol(format!(
                "node {} sent indices {:?}, owns {:?}",
                msg.node_id, msg.indices, plan.node_indices[msg.node_id]
            )));
        }
        for (&j, &v) in msg.indices.iter().zip(&msg.values) {
            if j >= plan.d || !owned.contains(&j) {
                return Err(Error::Protocol(format!("node {} sent foreign index {j}", msg.node_id)));
            }
            if std::mem::replace(&mut placed[j], true) {
                return Err(Error::Protocol(format!("index {j} sent twice")));
            }
            if !v.is_finite() {
                return Err(Error::Numerics(format!("gradient component {j} from node {}", msg.node_id)));
            }
            values[j] = v;
        }
        circuits += msg.circuit_executions;
    }
    Ok(GradientVector {
        values,
        circuit_executions: circuits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Optimizer {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    /// Plain gradient descent with a fixed step.
    Sgd { lr: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Optimizer {
    /// Step `1/S` with the smoothness constant of the MSE loss.
    pub fn smoothness_sgd(d: usize, lambda: f64) -> Self {
        Optimizer::Sgd {
            lr: 1.0 / crate::metrics::smoothness(d, lambda),
        }
    }
}

/// Parameters and optimizer state owned by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParameterVector,
    pub optimizer: Optimizer,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ServerState {
    pub fn new(theta: ParameterVector, optimizer: Optimizer) -> Self {
        let d = theta.len();
        Self {
            theta,
            optimizer,
            first_moment: vec![0.0; d],
            second_moment: vec![0.0; d],
            step: 0,
        }
    }

    /// Applies one optimizer step; angles are wrapped into `[0, 2pi)`.
    pub fn apply(&mut self, gradient: &[f64]) -> Result<()> {
        let d = self.theta.len();
        if gradient.len() != d {
            return Err(Error::Shape(format!("gradient length {} != {d}", gradient.len())));
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerics("gradient".into()));
        }
        self.step += 1;
        let mut theta = self.theta.values().to_vec();
        match self.optimizer {
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for j in 0..d {
                    let g = gradient[j];
                    self.first_moment[j] = beta1 * self.first_moment[j] + (1.0 - beta1) * g;
                    self.second_moment[j] = beta2 * self.second_moment[j] + (1.0 - beta2) * g * g;
                    let m_hat = self.first_moment[j] / c1;
                    let v_hat = self.second_moment[j] / c2;
                    theta[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            Optimizer::Sgd { lr } => {
                for j in 0..d {
                    theta[j] -= lr * gradient[j];
                }
            }
        }
        self.theta = ParameterVector::wrapped(theta);
        Ok(())
    }
}

/// Adam step on `state`.
pub fn adam_update(state: &mut ServerState, gradient: &[f64]) -> Result<()> {
    if !matches!(state.optimizer, Optimizer::Adam { .. }) {
        return Err(Error::Spec("server is not configured for Adam".into()));
    }
    state.apply(gradient)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCheck {
    pub converged: bool,
    pub accuracy: f64,
    pub loss: f64,
}

/// Classifies `examples` on `profile`'s device and compares the accuracy
/// with `threshold` (`>=`, or `>` when `strict`).
#[allow(clippy::too_many_arguments)]
pub fn convergence_test(
    model: &Classifier,
    profile: &NoiseProfile,
    params: &[f64],
    examples: &[Example],
    threshold: f64,
    strict: bool,
    loss: &LossConfig,
    seed: u64,
) -> Result<ConvergenceCheck> {
    if examples.is_empty() {
        return Err(Error::Data("convergence test on an empty set".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Spec(format!("accuracy threshold {threshold} outside (0, 1]")));
    }
    let preds = examples
        .iter()
        .enumerate()
        .map(|(k, ex)| {
            model.predict(&ex.features, params, profile, loss.shots, seed::derive(seed, &[k as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    let acc = accuracy(&preds, examples);
    let labels: Vec<f64> = examples.iter().map(Example::target).collect();
    let converged = if strict { acc > threshold } else { acc >= threshold };
    Ok(ConvergenceCheck {
        converged,
        accuracy: acc,
        loss: mse_loss(&preds, &labels, params, loss.lambda)?,
    })
}

/// Which node runs the convergence test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "policy", content = "node")]
pub enum TestNodePolicy {
    /// The node with the smallest single-qubit error rate (lowest id on ties).
    #[default]
    LeastNoisy,
    Fixed(usize),
}

impl TestNodePolicy {
    pub fn select(&self, profiles: &[NoiseProfile]) -> Result<usize> {
        match *self {
            TestNodePolicy::Fixed(i) if i < profiles.len() => Ok(i),
            TestNodePolicy::Fixed(i) => Err(Error::Spec(format!("test node {i} does not exist"))),
            TestNodePolicy::LeastNoisy => profiles
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.p1.total_cmp(&b.1.p1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .ok_or_else(|| Error::Spec("no nodes".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCriterion {
    pub accuracy: f64,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub node: TestNodePolicy,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            accuracy: 0.96,
            strict: false,
            node: TestNodePolicy::LeastNoisy,
        }
    }
}

/// One training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub layers: usize,
    pub noise_mode: NoiseMode,
    /// One profile per node; `M` is the number of profiles.
    pub profiles: Vec<NoiseProfile>,
    pub shots: Shots,
    pub batch_size: usize,
    /// Use the whole training set every iteration instead of mini-batches.
    pub full_batch: bool,
    pub lambda: f64,
    pub optimizer: Optimizer,
    pub alternate: bool,
    /// Compression threshold; `None` disables compression.
    pub threshold: Option<f64>,
    pub convergence: ConvergenceCriterion,
    /// Stop at the first iteration that passes the convergence test.
    pub stop_on_convergence: bool,
    pub max_iterations: u64,
    pub seed: u64,
    /// Record the aggregated gradient and parameters every iteration.
    pub trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: Classifier::DEFAULT_LAYERS,
            noise_mode: NoiseMode::PerGate,
            profiles: vec![NoiseProfile::noiseless(0)],
            shots: Shots::Sampled(8192),
            batch_size: 5,
            full_batch: false,
            lambda: 0.0,
            optimizer: Optimizer::default(),
            alternate: false,
            threshold: None,
            convergence: ConvergenceCriterion::default(),
            stop_on_convergence: true,
            max_iterations: 10_000,
            seed: 0,
            trace: false,
        }
    }
}

impl TrainConfig {
    pub fn nodes(&self) -> usize {
        self.profiles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::Spec("at least one node required".into()));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if p.node_id != i {
                return Err(Error::Spec(format!("profile {i} carries node id {}", p.node_id)));
            }
            NoiseProfile::with_rates(i, p.p1, p.p2)?;
        }
        if self.batch_size == 0 {
            return Err(Error::Spec("batch size must be >= 1".into()));
        }
        if let Some(thr) = self.threshold {
            if !(thr >= 0.0) {
                return Err(Error::Spec(format!("threshold {thr} must be >= 0")));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Spec("max_iterations must be >= 1".into()));
        }
        LossConfig::new(self.lambda, self.shots)?;
        let model = Classifier::new(self.layers, self.noise_mode)?;
        partition_parameters(model.n_params(), self.nodes())?;
        self.convergence.node.select(&self.profiles)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Training-set loss measured during the convergence test.
    pub loss: f64,
    pub train_acc: f64,
    pub grad_norm: f64,
    pub transmitted_components: u64,
    pub circuits: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradient: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

/// Per-group compression audit at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionAudit {
    /// Final residual slots, one per group.
    pub slots: Vec<ResidualSlot>,
    /// Server-side sum of every value received, per component.
    pub received_total: Vec<f64>,
}

impl CompressionAudit {
    /// Worst `|received + residual - raw| / max(|raw|, 1)` over components.
    pub fn max_relative_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for slot in &self.slots {
            for (k, &j) in slot.indices.iter().enumerate() {
                let raw = slot.raw_total[k];
                let err = (self.received_total[j] + slot.residual[k] - raw).abs();
                worst = worst.max(err / raw.abs().max(1.0));
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    pub initial_theta: Vec<f64>,
    pub iterations: u64,
    pub converged: bool,
    pub final_accuracy: f64,
    pub test_node: usize,
    pub ledger: CommLedger,
    pub history: Vec<IterationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<CompressionAudit>,
}

/// Delivers work orders and collects replies for one synchronous round.
pub trait Transport {
    fn nodes(&self) -> usize;

    /// Sends `orders[i]` to node `i` and blocks until every node replied for
    /// that iteration.
    fn round(&mut self, iteration: u64, orders: Vec<WorkOrder>) -> Result<Vec<GradientMessage>>;

    /// Tells every node training has ended.
    fn finish(&mut self, iteration: u64, accuracy: f64) -> Result<()>;
}

enum ToWorker {
    Params(Box<WorkOrder>),
    Converged,
}

type Reply = (usize, Result<GradientMessage>);

/// Worker threads connected to the server by channels.
pub struct InProcessTransport {
    senders: Vec<mpsc::Sender<ToWorker>>,
    replies: mpsc::Receiver<Reply>,
    handles: Vec<JoinHandle<()>>,
}

impl InProcessTransport {
    pub fn spawn(nodes: usize) -> Self {
        let (reply_tx, replies) = mpsc::channel::<Reply>();
        let mut senders = Vec::with_capacity(nodes);
        let mut handles = Vec::with_capacity(nodes);
        for node in 0..nodes {
            let (tx, rx) = mpsc::channel::<ToWorker>();
            let reply_tx = reply_tx.clone();
            let handle = std::thread::Builder::new()
                .name(format!("qpu-worker-{node}"))
                .spawn(move || {
                    while let Ok(ToWorker::Params(order)) = rx.recv() {
                        if reply_tx.send((node, worker_step(&order))).is_err() {
                            break;
                        }
                    }
                })
                .expect("spawn worker thread");
            senders.push(tx);
            handles.push(handle);
        }
        Self {
            senders,
            replies,
            handles,
        }
    }
}

impl Transport for InProcessTransport {
    fn nodes(&self) -> usize {
        self.senders.len()
    }

    fn round(&mut self, iteration: u64, orders: Vec<WorkOrder>) -> Result<Vec<GradientMessage>> {
        let m = self.senders.len();
        if orders.len() != m {
            return Err(Error::Protocol(format!("{} orders for {m} nodes", orders.len())));
        }
        for (tx, order) in self.senders.iter().zip(orders) {
            tx.send(ToWorker::Params(Box::new(order)))
                .map_err(|_| Error::Transport("worker thread exited".into()))?;
        }
        let mut slots: Vec<Option<GradientMessage>> = vec![None; m];
        for _ in 0..m {
            let (node, reply) = self
                .replies
                .recv()
                .map_err(|_| Error::Transport("all workers exited".into()))?;
            let msg = reply?;
            if msg.iteration != iteration || msg.node_id != node {
                return Err(Error::Protocol(format!(
                    "reply from node {node} for iteration {} during iteration {iteration}",
                    msg.iteration
                )));
            }
            slots[node] = Some(msg);
        }
        Ok(slots.into_iter().flatten().collect())
    }

    fn finish(&mut self, _iteration: u64, _accuracy: f64) -> Result<()> {
        for tx in &self.senders {
            let _ = tx.send(ToWorker::Converged);
        }
        Ok(())
    }
}

impl Drop for InProcessTransport {
    fn drop(&mut self) {
        for tx in &self.senders {
            let _ = tx.send(ToWorker::Converged);
        }
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

/// Seeded epoch shuffler over the training indices.
struct BatchSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(pool: Vec<usize>, seed: u64) -> Self {
        Self {
            pool,
            order: Vec::new(),
            rng: seed::rng(seed, &[seed::tag::BATCH]),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        if self.order.len() < size {
            let mut fresh = self.pool.clone();
            fresh.shuffle(&mut self.rng);
            // Leftovers of the previous epoch go first.
            self.order.splice(0..0, fresh);
        }
        let at = self.order.len() - size.min(self.order.len());
        self.order.split_off(at)
    }
}

/// Initial angles drawn uniformly from `[0, 2pi)`.
pub fn initial_theta(d: usize, seed: u64) -> ParameterVector {
    let mut rng = seed::rng(seed, &[seed::tag::INIT]);
    ParameterVector::wrapped((0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect())
}

/// Trains with worker threads over in-process channels.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let mut transport = InProcessTransport::spawn(config.nodes());
    train_with(config, dataset, &mut transport)
}

/// Runs the training loop over an arbitrary transport.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    transport: &mut dyn Transport,
) -> Result<TrainOutcome> {
    config.validate()?;
    let m = config.nodes();
    if transport.nodes() != m {
        return Err(Error::Spec(format!(
            "transport has {} nodes, config has {m}",
            transport.nodes()
        )));
    }
    let model = Classifier::new(config.layers, config.noise_mode)?;
    let d = model.n_params();
    let partition = partition_parameters(d, m)?;
    let schedule = AssignmentSchedule {
        nodes: m,
        alternate: config.alternate,
    };
    let train_set = dataset.train_examples();
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let loss = LossConfig::new(config.lambda, config.shots)?;
    let test_node = config.convergence.node.select(&config.profiles)?;
    let test_profile = config.profiles[test_node];

    let initial = initial_theta(d, config.seed);
    let mut server = ServerState::new(initial.clone(), config.optimizer);
    let mut sampler = BatchSampler::new((0..train_set.len()).collect(), config.seed);
    let mut slots: Option<Vec<ResidualSlot>> = config
        .threshold
        .map(|_| (0..m).map(|g| ResidualSlot::new(g, partition.group(g))).collect());
    let mut received_total = vec![0.0; d];
    let mut ledger = CommLedger::default();
    let mut history = Vec::new();
    let mut converged = false;
    let mut final_accuracy = 0.0;
    let mut iterations = 0;

    for t in 0..config.max_iterations {
        let batch: Vec<Example> = if config.full_batch {
            train_set.clone()
        } else {
            sampler
                .next(config.batch_size)
                .into_iter()
                .map(|i| train_set[i].clone())
                .collect()
        };
        let group_to_node = schedule.at(t);
        let mut node_indices = vec![Vec::new(); m];
        let mut orders: Vec<Option<WorkOrder>> = vec![None; m];
        for (g, &node) in group_to_node.iter().enumerate() {
            node_indices[node] = partition.group(g);
            orders[node] = Some(WorkOrder {
                iteration: t,
                node_id: node,
                nodes: m,
                alternate: config.alternate,
                group: g,
                indices: partition.group(g),
                theta: server.theta.values().to_vec(),
                batch: batch.clone(),
                profile: config.profiles[node],
                shots: config.shots,
                lambda: config.lambda,
                layers: config.layers,
                noise_mode: config.noise_mode,
                seed: config.seed,
                threshold: config.threshold,
                residual: slots.as_mut().map(|s| s[g].clone()),
            });
        }
        let orders: Vec<WorkOrder> = orders.into_iter().map(|o| o.expect("bijective schedule")).collect();
        let messages = transport.round(t, orders)?;
        let plan = RoundPlan {
            iteration: t,
            d,
            node_indices,
            sparse: config.threshold.is_some(),
        };
        let gradient = aggregate(&messages, &plan)?;
        if let Some(slots) = slots.as_mut() {
            for msg in &messages {
                let slot = msg
                    .residual
                    .clone()
                    .ok_or_else(|| Error::Protocol(format!("node {} dropped its residual", msg.node_id)))?;
                if group_to_node[slot.group] != msg.node_id {
                    return Err(Error::Protocol(format!(
                        "node {} returned residual of group {}",
                        msg.node_id, slot.group
                    )));
                }
                let g = slot.group;
                slots[g] = slot;
            }
            for (j, v) in gradient.values.iter().enumerate() {
                received_total[j] += v;
            }
        }
        let transmitted: u64 = messages.iter().map(|m| m.indices.len() as u64).sum();
        ledger.record(t, transmitted, gradient.circuit_executions);
        server.apply(&gradient.values)?;

        let check = convergence_test(
            &model,
            &test_profile,
            server.theta.values(),
            &train_set,
            config.convergence.accuracy,
            config.convergence.strict,
            &loss,
            seed::derive(config.seed, &[seed::tag::CONVERGENCE, t]),
        )?;
        ledger.test_circuits += train_set.len() as u64;
        history.push(IterationRecord {
            iteration: t,
            loss: check.loss,
            train_acc: check.accuracy,
            grad_norm: gradient.norm_sqr().sqrt(),
            transmitted_components: transmitted,
            circuits: gradient.circuit_executions,
            gradient: config.trace.then(|| gradient.values.clone()),
            theta: config.trace.then(|| server.theta.values().to_vec()),
        });
        iterations = t + 1;
        final_accuracy = check.accuracy;
        converged = check.converged;
        if converged && config.stop_on_convergence {
            break;
        }
    }
    transport.finish(iterations, final_accuracy)?;
    log::debug!(
        "run seed={} M={m} iterations={iterations} converged={converged} acc={final_accuracy:.3}",
        config.seed
    );
    Ok(TrainOutcome {
        theta: server.theta.into_inner(),
        initial_theta: initial.into_inner(),
        iterations,
        converged,
        final_accuracy,
        test_node,
        ledger,
        history,
        audit: slots.map(|slots| CompressionAudit {
            slots,
            received_total,
        }),
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::TAU;

    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    use super::*;
    use crate::data::bundled_iris;

    #[test]
    fn partition_examples() {
        let p = partition_parameters(8, 4).unwrap();
        assert_eq!(p.ranges(), &[0..2, 2..4, 4..6, 6..8]);
        assert_eq!(partition_parameters(8, 1).unwrap().ranges(), &[0..8]);
        let p = partition_parameters(8, 8).unwrap();
        assert!(p.ranges().iter().enumerate().all(|(i, r)| *r == (i..i + 1)));
        assert!(matches!(partition_parameters(8, 9), Err(Error::Partition { .. })));
        assert!(matches!(partition_parameters(8, 0), Err(Error::Partition { .. })));
        // Near-equal split when M does not divide d.
        assert_eq!(partition_parameters(8, 3).unwrap().ranges(), &[0..2, 2..5, 5..8]);
    }

    #[test]
    fn alternate_examples() {
        assert_eq!(assign_alternate(0, 3), vec![0, 1, 2]);
        // theta_3 -> QPU_1, theta_1 -> QPU_2, theta_2 -> QPU_3.
        assert_eq!(assign_alternate(1, 3), vec![1, 2, 0]);
        assert_eq!(assign_alternate(3, 3), vec![0, 1, 2]);
    }

    #[test]
    fn schedule_inverse() {
        let s = AssignmentSchedule { nodes: 5, alternate: true };
        for t in 0..12 {
            let at = s.at(t);
            for (g, &node) in at.iter().enumerate() {
                assert_eq!(s.group_of(node, t), g);
            }
        }
    }

    fn msg(node: usize, indices: Vec<usize>, values: Vec<f64>) -> GradientMessage {
        GradientMessage {
            node_id: node,
            iteration: 3,
            indices,
            values,
            circuit_executions: 10,
            residual: None,
        }
    }

    fn plan(node_indices: Vec<Vec<usize>>, sparse: bool) -> RoundPlan {
        RoundPlan {
            iteration: 3,
            d: 4,
            node_indices,
            sparse,
        }
    }

    #[test]
    fn aggregate_places_components() {
        let p = plan(vec![vec![0, 1], vec![2, 3]], false);
        let g = aggregate(&[msg(1, vec![2, 3], vec![3.0, 4.0]), msg(0, vec![0, 1], vec![1.0, 2.0])], &p).unwrap();
        assert_eq!(g.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.circuit_executions, 20);

        let p1 = plan(vec![vec![0, 1, 2, 3]], false);
        let g = aggregate(&[msg(0, vec![0, 1, 2, 3], vec![0.1, 0.2, 0.3, 0.4])], &p1).unwrap();
        assert_eq!(g.values, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn aggregate_rejects_violations() {
        let p = plan(vec![vec![0, 1], vec![2, 3]], true);
        let dup = aggregate(&[msg(0, vec![1], vec![1.0]), msg(1, vec![1], vec![1.0])], &p);
        assert!(matches!(dup, Err(Error::Protocol(_))));
        let missing = aggregate(&[msg(0, vec![0], vec![1.0])], &p);
        assert!(matches!(missing, Err(Error::BarrierTimeout { missing, .. }) if missing == vec![1]));
        let mut late = msg(1, vec![2], vec![1.0]);
        late.iteration = 4;
        assert!(matches!(aggregate(&[msg(0, vec![], vec![]), late], &p), Err(Error::Protocol(_))));
        let nan = aggregate(&[msg(0, vec![0], vec![f64::NAN]), msg(1, vec![], vec![])], &p);
        assert!(matches!(nan, Err(Error::Numerics(_))));
        // Dense rounds must cover the owned group.
        let dense = plan(vec![vec![0, 1], vec![2, 3]], false);
        let partial = aggregate(&[msg(0, vec![0], vec![1.0]), msg(1, vec![2, 3], vec![1.0, 1.0])], &dense);
        assert!(matches!(partial, Err(Error::Protocol(_))));
    }

    #[test]
    fn adam_first_steps() {
        let theta = ParameterVector::wrapped(vec![1.0, 2.0, 3.0]);
        let mut s = ServerState::new(theta.clone(), Optimizer::default());
        adam_update(&mut s, &[0.0; 3]).unwrap();
        assert_eq!(s.theta, theta);

        let mut s = ServerState::new(theta.clone(), Optimizer::default());
        let g = [0.5, -0.2, 1e-3];
        adam_update(&mut s, &g).unwrap();
        for j in 0..3 {
            let expected = theta[j] - 0.01 * g[j] / (g[j].abs() + 1e-8);
            assert_abs_diff_eq!(s.theta[j], expected, epsilon = 1e-12);
        }

        let mut s = ServerState::new(ParameterVector::wrapped(vec![1.0, 1.0]), Optimizer::default());
        adam_update(&mut s, &[0.3, -0.3]).unwrap();
        adam_update(&mut s, &[-0.3, 0.3]).unwrap();
        assert_eq!(s.first_moment[0], -s.first_moment[1]);
        assert_eq!(s.second_moment[0], s.second_moment[1]);
        assert_eq!(s.step, 2);
    }

    #[test]
    fn adam_wraps_and_rejects_nan() {
        let mut s = ServerState::new(ParameterVector::wrapped(vec![0.001]), Optimizer::default());
        adam_update(&mut s, &[1.0]).unwrap();
        assert!(s.theta[0] > 6.0 && s.theta[0] < TAU);
        assert!(matches!(adam_update(&mut s, &[f64::INFINITY]), Err(Error::Numerics(_))));
    }

    fn examples(labels: &[u8]) -> Vec<Example> {
        labels
            .iter()
            .map(|&l| Example {
                // |00> gives y_hat = 1 with all-zero angles, |01> gives 0.
                features: if l == 1 { vec![1.0, 0.0, 0.0, 0.0] } else { vec![0.0, 1.0, 0.0, 0.0] },
                label: l,
            })
            .collect()
    }

    #[test]
    fn convergence_examples() {
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let clean = NoiseProfile::noiseless(0);
        let loss = LossConfig::analytic(0.0);
        let ex = examples(&[1, 0, 1, 0]);
        let c = convergence_test(&m, &clean, &[0.0; 8], &ex, 0.96, false, &loss, 0).unwrap();
        assert_eq!(c.accuracy, 1.0);
        assert!(c.converged);

        // Fully depolarized device: every prediction is 0.5, decided as 1.
        let merged = Classifier::new(4, NoiseMode::Merged { depth: 4 }).unwrap();
        let dead = NoiseProfile::with_rates(0, 1.0, 1.0).unwrap();
        let ex = examples(&[1, 0, 0, 0]);
        let c = convergence_test(&merged, &dead, &[0.0; 8], &ex, 0.96, false, &loss, 0).unwrap();
        assert_eq!(c.accuracy, 0.25);

        assert!(matches!(convergence_test(&m, &clean, &[0.0; 8], &[], 0.9, false, &loss, 0), Err(Error::Data(_))));
    }

    #[test]
    fn threshold_boundary() {
        // 72 of 75 correct is exactly 0.96.
        let m = Classifier::new(4, NoiseMode::None).unwrap();
        let loss = LossConfig::analytic(0.0);
        let mut ex = examples(&[1; 72]);
        ex.extend(examples(&[1; 3]).into_iter().map(|mut e| {
            e.label = 0;
            e.features = vec![1.0, 0.0, 0.0, 0.0];
            e
        }));
        let clean = NoiseProfile::noiseless(0);
        let c = convergence_test(&m, &clean, &[0.0; 8], &ex, 0.96, false, &loss, 0).unwrap();
        assert_eq!(c.accuracy, 72.0 / 75.0);
        assert!(c.converged);
        let c = convergence_test(&m, &clean, &[0.0; 8], &ex, 0.96, true, &loss, 0).unwrap();
        assert!(!c.converged);
    }

    #[test]
    fn least_noisy_policy() {
        let profiles = vec![
            NoiseProfile::new(0, 0.03).unwrap(),
            NoiseProfile::new(1, 0.01).unwrap(),
            NoiseProfile::new(2, 0.01).unwrap(),
        ];
        assert_eq!(TestNodePolicy::LeastNoisy.select(&profiles).unwrap(), 1);
        assert_eq!(TestNodePolicy::Fixed(2).select(&profiles).unwrap(), 2);
        assert!(TestNodePolicy::Fixed(3).select(&profiles).is_err());
    }

    fn order(iteration: u64, node: usize, group: usize, alternate: bool) -> WorkOrder {
        let ds = bundled_iris(0);
        WorkOrder {
            iteration,
            node_id: node,
            nodes: 4,
            alternate,
            group,
            indices: partition_parameters(8, 4).unwrap().group(group),
            theta: initial_theta(8, 1).into_inner(),
            batch: ds.train_examples().into_iter().take(5).collect(),
            profile: NoiseProfile::noiseless(node),
            shots: Shots::Analytic,
            lambda: 0.0,
            layers: 4,
            noise_mode: NoiseMode::PerGate,
            seed: 1,
            threshold: None,
            residual: None,
        }
    }

    #[test]
    fn worker_step_checks_schedule() {
        let ok = worker_step(&order(1, 2, 1, true)).unwrap();
        assert_eq!(ok.indices, vec![2, 3]);
        assert_eq!(ok.circuit_executions, 5 * (1 + 2 * 2));
        assert!(matches!(worker_step(&order(1, 2, 2, true)), Err(Error::Protocol(_))));
        assert!(worker_step(&order(1, 2, 2, false)).is_ok());
        let mut bad = order(0, 0, 0, false);
        bad.indices = vec![0, 1, 2];
        assert!(matches!(worker_step(&bad), Err(Error::Protocol(_))));
        let mut no_slot = order(0, 0, 0, false);
        no_slot.threshold = Some(0.1);
        assert!(matches!(worker_step(&no_slot), Err(Error::Protocol(_))));
    }

    #[test]
    fn single_node_covers_everything() {
        let mut o = order(0, 0, 0, false);
        o.nodes = 1;
        o.indices = (0..8).collect();
        let msg = worker_step(&o).unwrap();
        assert_eq!(msg.indices, (0..8).collect::<Vec<_>>());
        assert_eq!(msg.circuit_executions, 5 * 17);
    }

    #[test]
    fn batches_cycle_epochs() {
        let mut s = BatchSampler::new((0..10).collect(), 3);
        let mut seen: Vec<usize> = (0..2).flat_map(|_| s.next(5)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let mut s = BatchSampler::new((0..7).collect(), 3);
        for _ in 0..20 {
            assert_eq!(s.next(5).len(), 5);
        }
    }

    #[test]
    fn short_noiseless_run_is_deterministic() {
        let ds = bundled_iris(0);
        let config = TrainConfig {
            profiles: (0..2).map(NoiseProfile::noiseless).collect(),
            shots: Shots::Sampled(256),
            max_iterations: 5,
            stop_on_convergence: false,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train(&config, &ds).unwrap();
        let b = train(&config, &ds).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.iterations, 5);
        assert_eq!(a.ledger.circuits, 5 * 2 * 5 * (1 + 2 * 4));
        assert_eq!(a.ledger.transmitted, 5 * 8);
    }

    proptest! {
        #[test]
        fn schedule_is_bijective(m in 1usize..9, t in 0u64..1000) {
            let mut at = assign_alternate(t, m);
            at.sort_unstable();
            prop_assert_eq!(at, (0..m).collect::<Vec<_>>());
        }

        #[test]
        fn schedule_visits_every_pair(m in 1usize..9, start in 0u64..100) {
            let mut pairs = BTreeSet::new();
            for t in start..start + m as u64 {
                for (g, n) in assign_alternate(t, m).into_iter().enumerate() {
                    prop_assert!(pairs.insert((g, n)));
                }
            }
            prop_assert_eq!(pairs.len(), m * m);
        }

        #[test]
        fn partition_covers(d in 1usize..40, m in 1usize..40) {
            prop_assume!(m <= d);
            let p = partition_parameters(d, m).unwrap();
            let flat: Vec<usize> = p.ranges().iter().flat_map(|r| r.clone()).collect();
            prop_assert_eq!(flat, (0..d).collect::<Vec<_>>());
            prop_assert!(p.ranges().iter().all(|r| !r.is_empty()));
        }
    }
}
