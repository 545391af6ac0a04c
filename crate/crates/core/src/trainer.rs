//! Federated training on a synthetic classification task.
//!
//! Each round, a selected client wraps the distributed global weights as
//! frozen LoRA bases with fresh factors (`b = 0`), runs `E` epochs of
//! mini-batch SGD on the factors only, and uploads `(b, a)`. The server folds
//! the weighted average of the products `b a` into the global weights. The
//! FedAvg baseline trains and averages every weight instead.
//!
//! The model is an MLP without biases: ReLU between layers and a softmax
//! cross-entropy head.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, LoraLayer, ModelSpec};
use crate::scenario::VehicleId;
use crate::seeding::{self, domain};

/// Samples stored column-wise (`dim x n`) with one label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_columns(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Isotropic Gaussian clusters, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    /// `dim x classes`
    means: DMatrix<f64>,
    noise_std: f64,
}

impl GaussianMixture {
    /// Class means are drawn i.i.d. `N(0, (separation^2 / dim))` per
    /// coordinate, so their pairwise distance is about `separation * sqrt(2)`.
    pub fn new(classes: usize, dim: usize, separation: f64, noise_std: f64, seed: u64) -> Self {
        let mut rng = seeding::stream(seed, &[domain::DATASET, 0]);
        let scale = separation / (dim as f64).sqrt();
        let means = DMatrix::from_fn(dim, classes, |_, _| {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self { means, noise_std }
    }

    pub fn classes(&self) -> usize {
        self.means.ncols()
    }

    pub fn dim(&self) -> usize {
        self.means.nrows()
    }

    /// `n` samples with labels cycling through the classes, in shuffled order.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = seeding::stream(seed, &[domain::DATASET, 1]);
        let classes = self.classes();
        let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let mut features = DMatrix::zeros(self.dim(), n);
        for (j, &label) in labels.iter().enumerate() {
            for i in 0..self.dim() {
                let z: f64 = StandardNormal.sample(&mut rng);
                features[(i, j)] = self.means[(i, label)] + self.noise_std * z;
            }
        }
        Dataset {
            features,
            labels,
            classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DataMode {
    Iid,
    /// Each client sees at most `class_budget` randomly chosen classes.
    NonIid {
        class_budget: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPartition {
    /// Partition index; vehicles are mapped onto partitions by the harness.
    pub owner: usize,
    pub data: Dataset,
    pub classes_present: BTreeSet<usize>,
}

/// Splits `dataset` into `n_icvs` disjoint partitions of `samples_per_icv`.
pub fn partition_dataset(
    dataset: &Dataset,
    n_icvs: usize,
    samples_per_icv: usize,
    mode: DataMode,
    seed: u64,
) -> Result<Vec<DataPartition>> {
    if n_icvs == 0 || samples_per_icv == 0 {
        return Err(Error::Partition(
            "need at least one client and one sample".into(),
        ));
    }
    let needed = n_icvs * samples_per_icv;
    if dataset.len() < needed {
        return Err(Error::Partition(format!(
            "{} samples cannot fill {n_icvs} partitions of {samples_per_icv}",
            dataset.len()
        )));
    }
    let mut rng = seeding::stream(seed, &[domain::PARTITION]);

    let index_sets: Vec<Vec<usize>> = match mode {
        DataMode::Iid => {
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            order
                .chunks(samples_per_icv)
                .take(n_icvs)
                .map(<[usize]>::to_vec)
                .collect()
        }
        DataMode::NonIid { class_budget } => {
            if class_budget == 0 || class_budget > dataset.classes {
                return Err(Error::Partition(format!(
                    "class budget {class_budget} outside 1..={}",
                    dataset.classes
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); dataset.classes];
            for (i, &label) in dataset.labels.iter().enumerate() {
                pools[label].push(i);
            }
            for pool in &mut pools {
                pool.shuffle(&mut rng);
            }
            let all_classes: Vec<usize> = (0..dataset.classes).collect();
            let mut sets = Vec::with_capacity(n_icvs);
            for icv in 0..n_icvs {
                let mut chosen: Vec<usize> = all_classes
                    .choose_multiple(&mut rng, class_budget)
                    .copied()
                    .collect();
                chosen.sort_unstable();
                let mut indices = Vec::with_capacity(samples_per_icv);
                for (k, &class) in chosen.iter().enumerate() {
                    let take = samples_per_icv / class_budget
                        + usize::from(k < samples_per_icv % class_budget);
                    let pool = &mut pools[class];
                    if pool.len() < take {
                        return Err(Error::Partition(format!(
                            "class {class} ran out of samples while filling partition {icv}"
                        )));
                    }
                    indices.extend(pool.split_off(pool.len() - take));
                }
                indices.shuffle(&mut rng);
                sets.push(indices);
            }
            sets
        }
    };

    Ok(index_sets
        .into_iter()
        .enumerate()
        .map(|(owner, indices)| {
            let data = dataset.subset(&indices);
            let classes_present = data.labels.iter().copied().collect();
            DataPartition {
                owner,
                data,
                classes_present,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rounds: usize,
    pub seed: u64,
    /// Std of the Gaussian the `a` factor is drawn from each round. `None`
    /// uses `1 / sqrt(rank)`, which makes `E[a^T a]` the identity so the first
    /// step on `b` moves the effective weight like a plain SGD step.
    pub a_init_std: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            epochs: 4,
            batch_size: 32,
            rounds: 60,
            seed: 0,
            a_init_std: None,
        }
    }
}

impl TrainConfig {
    pub fn a_std(&self, rank: usize) -> f64 {
        self.a_init_std.unwrap_or(1.0 / (rank as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if let Some(std) = self.a_init_std {
            if !(std > 0.0 && std.is_finite()) {
                return Err(Error::Config(format!(
                    "a_init_std must be positive, got {std}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub layers: Vec<DMatrix<f64>>,
    pub round: usize,
    pub spec: ModelSpec,
}

impl GlobalModel {
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        Self {
            layers: lora::init_base_weights(spec, seed),
            round: 0,
            spec: spec.clone(),
        }
    }

    pub fn from_layers(spec: &ModelSpec, layers: Vec<DMatrix<f64>>) -> Result<Self> {
        if layers.len() != spec.layer_count()
            || layers
                .iter()
                .zip(spec.layer_dims())
                .any(|(m, &d)| m.shape() != d)
        {
            return Err(Error::shape(
                "global model",
                format!("{:?}", spec.layer_dims()),
                format!("{:?}", layers.iter().map(|m| m.shape()).collect::<Vec<_>>()),
            ));
        }
        Ok(Self {
            layers,
            round: 0,
            spec: spec.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub vehicle: VehicleId,
    /// `(b, a)` per layer.
    pub factors: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// Mean training loss over all local batches.
    pub local_loss: f64,
    pub rank: usize,
}

/// Full-weight client result for the FedAvg baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FullUpdate {
    pub vehicle: VehicleId,
    /// Trained minus received weights, per layer.
    pub deltas: Vec<DMatrix<f64>>,
    pub local_loss: f64,
}

/// One trainable dense layer as seen by the SGD loop.
trait TrainLayer {
    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64>;
    /// Gradient w.r.t. the layer input, given the gradient w.r.t. its output.
    fn backward_input(&self, delta: &DMatrix<f64>) -> DMatrix<f64>;
    fn sgd_step(&mut self, delta: &DMatrix<f64>, input: &DMatrix<f64>, eta: f64);
}

impl TrainLayer for LoraLayer {
    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_batch(input)
            .expect("shapes checked by the model spec")
    }

    fn backward_input(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        LoraLayer::backward_input(self, delta)
    }

    fn sgd_step(&mut self, delta: &DMatrix<f64>, input: &DMatrix<f64>, eta: f64) {
        let (grad_b, grad_a) = self.batch_gradients(delta, input);
        LoraLayer::sgd_step(self, &grad_b, &grad_a, eta);
    }
}

struct Dense(DMatrix<f64>);

impl TrainLayer for Dense {
    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        &self.0 * input
    }

    fn backward_input(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.transpose() * delta
    }

    fn sgd_step(&mut self, delta: &DMatrix<f64>, input: &DMatrix<f64>, eta: f64) {
        self.0.gemm(-eta, delta, &input.transpose(), 1.0);
    }
}

fn relu_in_place(m: &mut DMatrix<f64>) {
    m.apply(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Column-wise softmax of `logits` and the mean cross-entropy against
/// `labels`. Returns the probabilities for reuse in backprop.
fn softmax_cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (DMatrix<f64>, f64) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for (j, mut col) in probs.column_iter_mut().enumerate() {
        let max = col.max();
        let target = col[labels[j]] - max;
        col.apply(|v| *v = (*v - max).exp());
        let sum = col.sum();
        col /= sum;
        loss += sum.ln() - target;
    }
    (probs, loss / labels.len() as f64)
}

/// Forward pass returning every layer input (post-activation) and the logits.
fn forward_all<L: TrainLayer>(layers: &[L], x: DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
    let mut inputs = Vec::with_capacity(layers.len());
    let mut h = x;
    for (i, layer) in layers.iter().enumerate() {
        let mut z = layer.forward(&h);
        if i + 1 < layers.len() {
            relu_in_place(&mut z);
        }
        inputs.push(h);
        h = z;
    }
    (inputs, h)
}

/// Runs `cfg.epochs` of mini-batch SGD over `data`; returns the mean batch loss.
fn run_sgd<L: TrainLayer, R: Rng>(
    layers: &mut [L],
    data: &Dataset,
    cfg: &TrainConfig,
    round: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.features.select_columns(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (inputs, logits) = forward_all(layers, x);
            let (mut delta, loss) = softmax_cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    round,
                    epoch,
                    batch,
                });
            }
            loss_sum += loss;
            batches += 1;

            for (j, &label) in labels.iter().enumerate() {
                delta[(label, j)] -= 1.0;
            }
            delta /= labels.len() as f64;
            for l in (0..layers.len()).rev() {
                let next = (l > 0).then(|| {
                    let mut back = layers[l].backward_input(&delta);
                    back.zip_apply(&inputs[l], |g, act| {
                        if act <= 0.0 {
                            *g = 0.0
                        }
                    });
                    back
                });
                layers[l].sgd_step(&delta, &inputs[l], cfg.eta);
                if let Some(next) = next {
                    delta = next;
                }
            }
        }
    }
    Ok(loss_sum / batches.max(1) as f64)
}

/// Seed of one client's local run, independent of scheduling order.
pub fn client_seed(run_seed: u64, round: usize, vehicle: VehicleId) -> u64 {
    seeding::mix(run_seed, &[round as u64, vehicle.0])
}

/// Local training on LoRA factors over the frozen global weights.
pub fn local_train(
    global: &GlobalModel,
    vehicle: VehicleId,
    partition: &DataPartition,
    cfg: &TrainConfig,
    rank: usize,
    seed: u64,
) -> Result<ClientUpdate> {
    global.spec.check_rank(rank)?;
    let mut init_rng = seeding::stream(seed, &[domain::FACTOR_INIT]);
    let mut layers = global
        .layers
        .iter()
        .map(|w0| LoraLayer::from_base(w0.clone(), rank, cfg.a_std(rank), &mut init_rng))
        .collect::<Result<Vec<_>>>()?;
    let mut shuffle_rng = seeding::stream(seed, &[domain::SHUFFLE]);
    let local_loss = run_sgd(
        &mut layers,
        &partition.data,
        cfg,
        global.round,
        &mut shuffle_rng,
    )?;
    Ok(ClientUpdate {
        vehicle,
        factors: layers.into_iter().map(LoraLayer::into_factors).collect(),
        local_loss,
        rank,
    })
}

/// Local training of every weight (FedAvg client).
pub fn local_train_full(
    global: &GlobalModel,
    vehicle: VehicleId,
    partition: &DataPartition,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<FullUpdate> {
    let mut layers: Vec<Dense> = global.layers.iter().cloned().map(Dense).collect();
    let mut shuffle_rng = seeding::stream(seed, &[domain::SHUFFLE]);
    let local_loss = run_sgd(
        &mut layers,
        &partition.data,
        cfg,
        global.round,
        &mut shuffle_rng,
    )?;
    Ok(FullUpdate {
        vehicle,
        deltas: layers
            .into_iter()
            .zip(&global.layers)
            .map(|(trained, w0)| trained.0 - w0)
            .collect(),
        local_loss,
    })
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if n == 0 {
        return Err(Error::Aggregation("no client updates to aggregate".into()));
    }
    if weights.len() != n {
        return Err(Error::Aggregation(format!(
            "{} weights for {n} updates",
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::Aggregation(format!(
            "weights must be nonnegative and sum to 1, sum is {total}"
        )));
    }
    Ok(())
}

/// `W0(t+1) = W0(t) + sum_n alpha_n b_n a_n`, summed in ascending vehicle
/// order. `weights[i]` belongs to `updates[i]`.
pub fn aggregate(
    global: &GlobalModel,
    updates: &[ClientUpdate],
    weights: &[f64],
) -> Result<GlobalModel> {
    check_weights(updates.len(), weights)?;
    let rank = updates[0].rank;
    if let Some(u) = updates.iter().find(|u| u.rank != rank) {
        return Err(Error::Aggregation(format!(
            "mixed ranks: vehicle {} has rank {}, expected {rank}",
            u.vehicle, u.rank
        )));
    }
    for u in updates {
        if u.factors.len() != global.layers.len() {
            return Err(Error::Aggregation(format!(
                "vehicle {} sent {} layers, model has {}",
                u.vehicle,
                u.factors.len(),
                global.layers.len()
            )));
        }
        for ((b, a), w0) in u.factors.iter().zip(&global.layers) {
            let (h, w) = w0.shape();
            if b.shape() != (h, rank) || a.shape() != (rank, w) {
                return Err(Error::Aggregation(format!(
                    "vehicle {} factor shapes {:?}/{:?} do not fit a {h}x{w} layer at rank {rank}",
                    u.vehicle,
                    b.shape(),
                    a.shape()
                )));
            }
        }
        if u.factors
            .iter()
            .any(|(b, a)| b.iter().chain(a.iter()).any(|v| !v.is_finite()))
        {
            return Err(Error::Aggregation(format!(
                "vehicle {} sent non-finite factors",
                u.vehicle
            )));
        }
    }

    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].vehicle);
    let layers = global
        .layers
        .iter()
        .enumerate()
        .map(|(l, w0)| {
            let mut sum = DMatrix::zeros(w0.nrows(), w0.ncols());
            for &i in &order {
                let (b, a) = &updates[i].factors[l];
                sum.gemm(weights[i], b, a, 1.0);
            }
            w0 + sum
        })
        .collect();
    Ok(GlobalModel {
        layers,
        round: global.round + 1,
        spec: global.spec.clone(),
    })
}

/// FedAvg server step: `W(t+1) = W(t) + sum_n alpha_n dW_n`.
pub fn aggregate_full(
    global: &GlobalModel,
    updates: &[FullUpdate],
    weights: &[f64],
) -> Result<GlobalModel> {
    check_weights(updates.len(), weights)?;
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].vehicle);
    let layers = global
        .layers
        .iter()
        .enumerate()
        .map(|(l, w0)| {
            let mut sum = DMatrix::zeros(w0.nrows(), w0.ncols());
            for &i in &order {
                sum += &updates[i].deltas[l] * weights[i];
            }
            w0 + sum
        })
        .collect();
    Ok(GlobalModel {
        layers,
        round: global.round + 1,
        spec: global.spec.clone(),
    })
}

/// Trains the given clients in parallel. Output order follows `clients`.
pub fn train_lora_clients(
    global: &GlobalModel,
    clients: &[(VehicleId, &DataPartition)],
    cfg: &TrainConfig,
    rank: usize,
) -> Result<Vec<ClientUpdate>> {
    clients
        .par_iter()
        .map(|&(id, part)| {
            local_train(
                global,
                id,
                part,
                cfg,
                rank,
                client_seed(cfg.seed, global.round, id),
            )
        })
        .collect()
}

pub fn train_full_clients(
    global: &GlobalModel,
    clients: &[(VehicleId, &DataPartition)],
    cfg: &TrainConfig,
) -> Result<Vec<FullUpdate>> {
    clients
        .par_iter()
        .map(|&(id, part)| {
            local_train_full(
                global,
                id,
                part,
                cfg,
                client_seed(cfg.seed, global.round, id),
            )
        })
        .collect()
}

/// One FedAvg round over `clients` with uniform weights.
pub fn fedavg_baseline_round(
    global: &GlobalModel,
    clients: &[(VehicleId, &DataPartition)],
    cfg: &TrainConfig,
) -> Result<GlobalModel> {
    let updates = train_full_clients(global, clients, cfg)?;
    aggregate_full(global, &updates, &uniform_weights(updates.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

pub fn evaluate(global: &GlobalModel, test: &Dataset) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if test.features.nrows() != global.spec.input_dim() {
        return Err(Error::shape(
            "evaluate",
            global.spec.input_dim(),
            test.features.nrows(),
        ));
    }
    let layers: Vec<Dense> = global.layers.iter().cloned().map(Dense).collect();
    let (_, logits) = forward_all(&layers, test.features.clone());
    let (probs, loss) = softmax_cross_entropy(&logits, &test.labels);
    let correct = probs
        .column_iter()
        .zip(&test.labels)
        .filter(|(col, &label)| col.argmax().0 == label)
        .count();
    Ok(Evaluation {
        loss,
        accuracy: correct as f64 / test.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (GaussianMixture, ModelSpec) {
        (
            GaussianMixture::new(10, 32, 3.0, 1.0, 7),
            ModelSpec::mlp(&[32, 64, 10]).unwrap(),
        )
    }

    fn one_partition(data: &Dataset) -> DataPartition {
        partition_dataset(data, 1, data.len(), DataMode::Iid, 0)
            .unwrap()
            .remove(0)
    }

    #[test]
    fn iid_partitions_are_disjoint_and_roughly_uniform() {
        let (mix, _) = toy();
        let data = mix.sample(6000, 1);
        let parts = partition_dataset(&data, 20, 300, DataMode::Iid, 3).unwrap();
        assert_eq!(parts.len(), 20);
        let mut pooled = [0usize; 10];
        for p in &parts {
            assert_eq!(p.data.len(), 300);
            let mut hist = [0usize; 10];
            for &l in &p.data.labels {
                hist[l] += 1;
                pooled[l] += 1;
            }
            // chi-square with 9 dof; 40 is far beyond the 0.9999 quantile (~33.7)
            let chi2: f64 = hist.iter().map(|&c| (c as f64 - 30.0).powi(2) / 30.0).sum();
            assert!(chi2 < 40.0, "chi2 {chi2}");
        }
        assert!(pooled.iter().all(|&c| c == 600));
    }

    #[test]
    fn noniid_respects_class_budget() {
        let (mix, _) = toy();
        let data = mix.sample(12000, 1);
        let parts =
            partition_dataset(&data, 20, 300, DataMode::NonIid { class_budget: 3 }, 5).unwrap();
        for p in &parts {
            assert_eq!(p.data.len(), 300);
            assert!(p.classes_present.len() <= 3);
        }
    }

    #[test]
    fn single_iid_partition_is_a_subset() {
        let (mix, _) = toy();
        let data = mix.sample(500, 2);
        let p = partition_dataset(&data, 1, 100, DataMode::Iid, 1)
            .unwrap()
            .remove(0);
        for j in 0..p.data.len() {
            let col = p.data.features.column(j);
            let found = (0..data.len())
                .any(|k| data.features.column(k) == col && data.labels[k] == p.data.labels[j]);
            assert!(found);
        }
    }

    #[test]
    fn partition_errors() {
        let (mix, _) = toy();
        let data = mix.sample(100, 2);
        assert!(matches!(
            partition_dataset(&data, 2, 60, DataMode::Iid, 0),
            Err(Error::Partition(_))
        ));
        assert!(matches!(
            partition_dataset(&data, 1, 10, DataMode::NonIid { class_budget: 11 }, 0),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn zero_learning_rate_keeps_initial_factors() {
        let (mix, spec) = toy();
        let part = one_partition(&mix.sample(64, 3));
        let global = GlobalModel::init(&spec, 1);
        let cfg = TrainConfig {
            eta: 0.0,
            ..TrainConfig::default()
        };
        let u = local_train(&global, VehicleId(0), &part, &cfg, 3, 42).unwrap();
        let mut rng = seeding::stream(42, &[domain::FACTOR_INIT]);
        for ((b, a), w0) in u.factors.iter().zip(&global.layers) {
            let fresh = LoraLayer::from_base(w0.clone(), 3, cfg.a_std(3), &mut rng).unwrap();
            assert_eq!(b, fresh.b());
            assert_eq!(a, fresh.a());
            assert!((b * a).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_step_matches_closed_form_gradient() {
        // Two classes, two features, a single 2x2 layer at rank 1.
        let spec = ModelSpec::mlp(&[2, 2]).unwrap();
        let w0 = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.1, 0.4]);
        let global = GlobalModel::from_layers(&spec, vec![w0.clone()]).unwrap();
        let (x0, x1, label) = (1.5, -0.5, 1usize);
        let data = Dataset {
            features: DMatrix::from_column_slice(2, 1, &[x0, x1]),
            labels: vec![label],
            classes: 2,
        };
        let part = DataPartition {
            owner: 0,
            data,
            classes_present: [label].into(),
        };
        let cfg = TrainConfig {
            eta: 0.1,
            epochs: 1,
            batch_size: 1,
            a_init_std: Some(0.5),
            ..TrainConfig::default()
        };
        let u = local_train(&global, VehicleId(0), &part, &cfg, 1, 5).unwrap();
        let (b, a) = &u.factors[0];

        // b starts at 0, so the logits are w0 x and the a-gradient b^T G vanishes.
        let z0 = 0.3 * x0 - 0.2 * x1;
        let z1 = 0.1 * x0 + 0.4 * x1;
        let p1 = 1.0 / (1.0 + (z0 - z1).exp());
        let p0 = 1.0 - p1;
        let err = [p0 - 0.0, p1 - 1.0];
        let (a0, a1) = (a[(0, 0)], a[(0, 1)]);
        for (i, e) in err.iter().enumerate() {
            // dL/db_i = sum_j G_ij a_j with G = err x^T
            let grad = e * (x0 * a0 + x1 * a1);
            assert!((b[(i, 0)] - (-0.1 * grad)).abs() < 1e-15);
        }
        let expected_loss = -p1.ln();
        assert!((u.local_loss - expected_loss).abs() < 1e-15);
    }

    #[test]
    fn local_training_is_deterministic_and_reduces_loss() {
        let (mix, spec) = toy();
        let part = one_partition(&mix.sample(300, 4));
        let global = GlobalModel::init(&spec, 2);
        let cfg = TrainConfig::default();
        let a = local_train(&global, VehicleId(3), &part, &cfg, 4, 11).unwrap();
        let b = local_train(&global, VehicleId(3), &part, &cfg, 4, 11).unwrap();
        assert_eq!(a, b);
        let after = aggregate(&global, &[a], &[1.0]).unwrap();
        let before_loss = evaluate(&global, &part.data).unwrap().loss;
        assert!(evaluate(&after, &part.data).unwrap().loss < before_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let (mix, spec) = toy();
        let part = one_partition(&mix.sample(64, 4));
        let mut global = GlobalModel::init(&spec, 2);
        global.layers[0][(0, 0)] = f64::NAN;
        global.round = 7;
        let err =
            local_train(&global, VehicleId(0), &part, &TrainConfig::default(), 2, 0).unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence {
                round: 7,
                epoch: 0,
                batch: 0
            }
        ));
    }

    fn random_update(spec: &ModelSpec, id: u64, rank: usize, rng: &mut ChaCha8Rng) -> ClientUpdate {
        ClientUpdate {
            vehicle: VehicleId(id),
            factors: spec
                .layer_dims()
                .iter()
                .map(|&(h, w)| {
                    (
                        DMatrix::from_fn(h, rank, |_, _| rng.gen_range(-1.0..1.0)),
                        DMatrix::from_fn(rank, w, |_, _| rng.gen_range(-1.0..1.0)),
                    )
                })
                .collect(),
            local_loss: 0.0,
            rank,
        }
    }

    #[test]
    fn aggregation_examples() {
        let (_, spec) = toy();
        let global = GlobalModel::init(&spec, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let single = random_update(&spec, 0, 2, &mut rng);
        let next = aggregate(&global, std::slice::from_ref(&single), &[1.0]).unwrap();
        assert_eq!(next.round, 1);
        for (l, (b, a)) in single.factors.iter().enumerate() {
            assert!((&next.layers[l] - (&global.layers[l] + b * a)).norm() < 1e-12);
        }

        let mut negated = single.clone();
        negated.vehicle = VehicleId(1);
        for (b, _) in &mut negated.factors {
            *b = -b.clone();
        }
        let cancelled = aggregate(&global, &[single, negated], &[0.5, 0.5]).unwrap();
        for (l, w) in cancelled.layers.iter().enumerate() {
            assert!((w - &global.layers[l]).norm() < 1e-14);
        }

        let three: Vec<_> = (0..3)
            .map(|i| random_update(&spec, 10 - i, 3, &mut rng))
            .collect();
        let avg = aggregate(&global, &three, &uniform_weights(3)).unwrap();
        for l in 0..spec.layer_count() {
            let dense: DMatrix<f64> = three
                .iter()
                .map(|u| &u.factors[l].0 * &u.factors[l].1)
                .fold(
                    DMatrix::zeros(spec.layer_dims()[l].0, spec.layer_dims()[l].1),
                    |acc, d| acc + d,
                )
                / 3.0;
            assert!((&avg.layers[l] - (&global.layers[l] + dense)).amax() < 1e-12);
        }
    }

    #[test]
    fn aggregation_errors() {
        let (_, spec) = toy();
        let global = GlobalModel::init(&spec, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            aggregate(&global, &[], &[]),
            Err(Error::Aggregation(_))
        ));
        let mixed = vec![
            random_update(&spec, 0, 2, &mut rng),
            random_update(&spec, 1, 3, &mut rng),
        ];
        assert!(matches!(
            aggregate(&global, &mixed, &[0.5, 0.5]),
            Err(Error::Aggregation(_))
        ));
        let one = vec![random_update(&spec, 0, 2, &mut rng)];
        assert!(matches!(
            aggregate(&global, &one, &[0.7]),
            Err(Error::Aggregation(_))
        ));
    }

    #[test]
    fn evaluation_examples() {
        let spec = ModelSpec::mlp(&[4, 8, 10]).unwrap();
        let zero =
            GlobalModel::from_layers(&spec, vec![DMatrix::zeros(8, 4), DMatrix::zeros(10, 8)])
                .unwrap();
        let mix = GaussianMixture::new(10, 4, 1.0, 1.0, 0);
        let balanced = mix.sample(1000, 0);
        let e = evaluate(&zero, &balanced).unwrap();
        // Uniform logits: argmax picks class 0, i.e. exactly a tenth of a balanced set.
        assert!((e.accuracy - 0.1).abs() < 1e-12);
        assert!((e.loss - 10f64.ln()).abs() < 1e-12);

        let empty = Dataset {
            features: DMatrix::zeros(4, 0),
            labels: vec![],
            classes: 10,
        };
        assert!(matches!(evaluate(&zero, &empty), Err(Error::Evaluation(_))));
    }

    #[test]
    fn memorized_point_reaches_full_accuracy() {
        let spec = ModelSpec::mlp(&[2, 2]).unwrap();
        let global = GlobalModel::from_layers(
            &spec,
            vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0])],
        )
        .unwrap();
        let point = Dataset {
            features: DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            labels: vec![1],
            classes: 2,
        };
        let part = DataPartition {
            owner: 0,
            data: point.clone(),
            classes_present: [1].into(),
        };
        let cfg = TrainConfig {
            eta: 0.5,
            epochs: 50,
            batch_size: 1,
            ..TrainConfig::default()
        };
        let trained = fedavg_baseline_round(&global, &[(VehicleId(0), &part)], &cfg).unwrap();
        let replay = Dataset {
            features: DMatrix::from_fn(2, 5, |i, _| point.features[(i, 0)]),
            labels: vec![1; 5],
            classes: 2,
        };
        assert_eq!(evaluate(&trained, &replay).unwrap().accuracy, 1.0);
    }

    #[test]
    fn fedavg_examples() {
        let (mix, spec) = toy();
        let data = mix.sample(600, 5);
        let parts = partition_dataset(&data, 2, 300, DataMode::Iid, 0).unwrap();
        let global = GlobalModel::init(&spec, 3);
        let cfg = TrainConfig::default();

        let one = fedavg_baseline_round(&global, &[(VehicleId(4), &parts[0])], &cfg).unwrap();
        let solo = local_train_full(
            &global,
            VehicleId(4),
            &parts[0],
            &cfg,
            client_seed(cfg.seed, 0, VehicleId(4)),
        )
        .unwrap();
        for l in 0..2 {
            assert_eq!(one.layers[l], &global.layers[l] + &solo.deltas[l]);
        }

        let frozen = TrainConfig { eta: 0.0, ..cfg };
        let same = fedavg_baseline_round(
            &global,
            &[(VehicleId(0), &parts[0]), (VehicleId(1), &parts[1])],
            &frozen,
        )
        .unwrap();
        assert_eq!(same.layers, global.layers);
    }

    #[test]
    fn update_ranks_fedavg_vs_lora() {
        let (mix, spec) = toy();
        let part = one_partition(&mix.sample(300, 6));
        let global = GlobalModel::init(&spec, 3);
        let cfg = TrainConfig::default();
        let rank = 2;
        let full = local_train_full(&global, VehicleId(0), &part, &cfg, 9).unwrap();
        let low = local_train(&global, VehicleId(0), &part, &cfg, rank, 9).unwrap();
        let numeric_rank =
            |m: &DMatrix<f64>| gap::svd(m).unwrap().1.iter().filter(|&&s| s > 1e-9).count();
        for (l, &(h, w)) in spec.layer_dims().iter().enumerate() {
            let dense_rank = numeric_rank(&full.deltas[l]);
            assert!(dense_rank <= h.min(w));
            assert!(dense_rank > rank);
            let (b, a) = &low.factors[l];
            assert!(numeric_rank(&(b * a)) <= rank);
        }
    }

    #[test]
    fn training_loss_trends_down_with_fixed_clients() {
        let (mix, spec) = toy();
        let data = mix.sample(1500, 8);
        let parts = partition_dataset(&data, 5, 300, DataMode::Iid, 1).unwrap();
        let clients: Vec<_> = parts
            .iter()
            .enumerate()
            .map(|(i, p)| (VehicleId(i as u64), p))
            .collect();
        let cfg = TrainConfig::default();
        let mut global = GlobalModel::init(&spec, 4);
        let mut losses = Vec::new();
        for _ in 0..20 {
            let updates = train_lora_clients(&global, &clients, &cfg, 8).unwrap();
            losses.push(updates.iter().map(|u| u.local_loss).sum::<f64>() / updates.len() as f64);
            global = aggregate(&global, &updates, &uniform_weights(updates.len())).unwrap();
        }
        let violations = losses.windows(2).filter(|p| p[1] > p[0] + 1e-3).count();
        assert!(violations <= 1, "losses {losses:?}");
        assert!(losses[19] < losses[0]);
    }
}
