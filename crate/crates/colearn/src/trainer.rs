//! Synchronous co-training.
//!
//! Each minibatch runs in two phases. PHASE 1: every network computes its
//! forward pass on the same batch (parallelizable across networks). At the
//! barrier the full prediction set is frozen. PHASE 2: every network computes
//! its coupled gradient against the frozen set, backpropagates, and takes an
//! SGD step (parallelizable). A network's PHASE 2 can only read the frozen
//! predictions and its own state, so no step ever observes another's update,
//! and results are bitwise independent of the worker count.
//!
//! Degenerate case worth knowing: with literally identical initialization and
//! data order, symmetric coupling keeps all members identical forever; member
//! diversity comes from distinct per-network init seeds.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{dissimilarity_matrix, DissimilarityMatrix};
use crate::data::Dataset;
use crate::ensemble::{
    combine_arithmetic_rows, for_each_sample_predictions, Ensemble, Network,
};
use crate::error::{Error, Result};
use crate::loss::{
    argmax_lowest, coupled_grad_logits_batch, coupled_loss_batch_mean, nll_row, CouplingMatrix,
};
use crate::nn::{backward, forward, save_ensemble, softmax_rows, ForwardCache};
use crate::seeds::{derive_seed, STREAM_AUGMENT, STREAM_ORDER};
use crate::tensor::{Element, Tensor};

/// Learning-rate schedules. `eta0` must be positive; cosine anneals to zero
/// at `t_max`; step multiplies by `factor` at each milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { eta0: f64 },
    Step { eta0: f64, milestones: Vec<usize>, factor: f64 },
    Cosine { eta0: f64, t_max: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let eta0 = match self {
            LrSchedule::Constant { eta0 } => *eta0,
            LrSchedule::Step { eta0, factor, .. } => {
                if *factor <= 0.0 {
                    return Err(Error::Config("step factor must be > 0".into()));
                }
                *eta0
            }
            LrSchedule::Cosine { eta0, t_max } => {
                if *t_max < 1 {
                    return Err(Error::Config("cosine schedule needs t_max >= 1".into()));
                }
                *eta0
            }
        };
        if eta0 <= 0.0 {
            return Err(Error::Config(format!("eta0 must be > 0, got {eta0}")));
        }
        Ok(())
    }
}

/// Learning rate at epoch `t`: constant `eta0`; cosine
/// `eta0/2 * (1 + cos(t*pi/t_max))`; step `eta0 * factor^(milestones <= t)`.
pub fn lr_at_epoch(schedule: &LrSchedule, t: usize) -> Result<f64> {
    schedule.validate()?;
    match schedule {
        LrSchedule::Constant { eta0 } => Ok(*eta0),
        LrSchedule::Step {
            eta0,
            milestones,
            factor,
        } => {
            let hits = milestones.iter().filter(|&&m| m <= t).count();
            Ok(eta0 * factor.powi(hits as i32))
        }
        LrSchedule::Cosine { eta0, t_max } => {
            if t > *t_max {
                return Err(Error::Config(format!(
                    "epoch {t} outside cosine schedule range 0..={t_max}"
                )));
            }
            Ok(0.5 * eta0 * (1.0 + (t as f64 * std::f64::consts::PI / *t_max as f64).cos()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Seed of the minibatch-order and augmentation streams.
    pub seed: u64,
    pub shuffle: bool,
    /// Evaluate every this many epochs (the final epoch always evaluates).
    pub eval_every: usize,
    /// Weight decay applies to biases only when set.
    pub decay_biases: bool,
    pub augment: bool,
    /// Record the pairwise dissimilarity matrix every this many epochs
    /// (0 = never).
    pub dissim_every: usize,
    /// Record probe-set predictions every this many epochs (0 = never);
    /// feeds the trajectory embedding.
    pub probe_every: usize,
    pub probe_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            schedule: LrSchedule::Constant { eta0: 0.01 },
            seed: 0,
            shuffle: true,
            eval_every: 1,
            decay_biases: false,
            augment: false,
            dissim_every: 0,
            probe_every: 0,
            probe_samples: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size < 1 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay < 0.0 {
            problems.push(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.eval_every < 1 {
            problems.push("eval_every must be >= 1".to_string());
        }
        if let Err(e) = self.schedule.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// One SGD-with-momentum update:
/// `v <- momentum*v + (grad + weight_decay*w); w <- w - lr*v`.
/// Biases skip the decay term unless `decay_biases` is set. This exact
/// variant (decay folded into the gradient, classical momentum) is frozen;
/// tests pin its two-step displacement.
pub fn sgd_step<E: Element>(
    params: &mut crate::nn::NetworkParams<E>,
    grads: &crate::nn::Gradients<E>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    decay_biases: bool,
) -> Result<()> {
    if params.layers().len() != grads.layers.len() {
        return Err(Error::Shape(format!(
            "gradients have {} layer slots, params {}",
            grads.layers.len(),
            params.layers().len()
        )));
    }
    let lr = E::from_f64(lr);
    let mom = E::from_f64(momentum);
    let wd = E::from_f64(weight_decay);
    for (p, g) in params.layers_mut().iter_mut().zip(&grads.layers) {
        let (p, g) = match (p, g) {
            (Some(p), Some(g)) => (p, g),
            (None, None) => continue,
            _ => return Err(Error::Shape("gradient/parameter layout mismatch".into())),
        };
        if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
            return Err(Error::Shape("gradient/parameter shape mismatch".into()));
        }
        for ((w, v), &dw) in p
            .weight
            .data_mut()
            .iter_mut()
            .zip(p.weight_momentum.data_mut().iter_mut())
            .zip(g.weight.data())
        {
            *v = mom * *v + (dw + wd * *w);
            *w -= lr * *v;
        }
        for ((b, v), &db) in p
            .bias
            .data_mut()
            .iter_mut()
            .zip(p.bias_momentum.data_mut().iter_mut())
            .zip(g.bias.data())
        {
            let d = if decay_biases { db + wd * *b } else { db };
            *v = mom * *v + d;
            *b -= lr * *v;
        }
    }
    params.bump_version();
    Ok(())
}

/// The prediction-exchange barrier artifact: every member's `(B, C)`
/// probability matrix for the current batch, frozen together with the
/// parameter versions they were computed at.
pub struct FrozenPredictions<E> {
    pub probs: Vec<Tensor<E>>,
    pub versions: Vec<u64>,
}

/// One synchronous co-training step over a batch. Returns each network's
/// batch-mean coupled loss. Networks with `trainable[i] == false` still
/// contribute predictions but take no update.
#[allow(clippy::too_many_arguments)]
pub fn train_step<E: Element>(
    networks: &mut [Network<E>],
    coupling: &CouplingMatrix,
    inputs: &Tensor<E>,
    targets: &Tensor<E>,
    lr: f64,
    config: &TrainConfig,
    trainable: Option<&[bool]>,
    epoch: usize,
    batch_idx: usize,
) -> Result<Vec<f64>> {
    if coupling.n() != networks.len() {
        return Err(Error::Shape(format!(
            "coupling matrix {0}x{0} for {1} networks",
            coupling.n(),
            networks.len()
        )));
    }
    if let Some(mask) = trainable {
        if mask.len() != networks.len() {
            return Err(Error::Shape("trainable mask length mismatch".into()));
        }
    }

    // PHASE 1: simultaneous forward passes.
    let phase1: Vec<(Tensor<E>, ForwardCache<E>)> = networks
        .par_iter()
        .map(|net| {
            let (logits, cache) = forward(&net.arch, &net.params, inputs)?;
            Ok((softmax_rows(&logits), cache))
        })
        .collect::<Result<_>>()?;

    // BARRIER: the prediction set is frozen before any gradient is computed.
    let mut probs = Vec::with_capacity(networks.len());
    let mut caches = Vec::with_capacity(networks.len());
    for (p, c) in phase1 {
        probs.push(p);
        caches.push(c);
    }
    let frozen = FrozenPredictions {
        versions: networks.iter().map(|n| n.params.version()).collect(),
        probs,
    };

    // PHASE 2: coupled gradients against the frozen set, backprop, step.
    networks
        .par_iter_mut()
        .zip(caches.into_par_iter())
        .enumerate()
        .map(|(i, (net, cache))| {
            let loss = coupled_loss_batch_mean(i, &frozen.probs, targets, coupling).to_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    network: i,
                    epoch,
                    batch: batch_idx,
                });
            }
            if trainable.map_or(true, |m| m[i]) {
                // Barrier safety: this network's parameters must not have
                // moved since its predictions were frozen.
                if net.params.version() != frozen.versions[i]
                    || cache.params_version() != frozen.versions[i]
                {
                    return Err(Error::Contract(format!(
                        "network {i} parameters changed between the prediction barrier and its update"
                    )));
                }
                let grad = coupled_grad_logits_batch(i, &frozen.probs, targets, coupling)?;
                let grads = backward(&net.arch, &net.params, cache, &grad)?;
                sgd_step(
                    &mut net.params,
                    &grads,
                    lr,
                    config.momentum,
                    config.weight_decay,
                    config.decay_biases,
                )?;
            }
            Ok(loss)
        })
        .collect()
}

/// Per-evaluation metrics: one record per evaluated epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Number of completed epochs at evaluation time (1-based).
    pub epoch: usize,
    pub lr: f64,
    /// Mean coupled loss per network over the epoch's batches.
    pub mean_train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// Mean `KL(q || p_i)` over the test set per network.
    pub test_mean_kl: Vec<f64>,
    pub ensemble_train_accuracy: f64,
    pub ensemble_test_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dissimilarity: Option<DissimilarityMatrix>,
}

/// Probe-set predictions of every member plus the ensemble mean, recorded at
/// a fixed cadence; the raw material of the trajectory embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    pub epoch: usize,
    /// `[network][sample][class]`; the last entry is the ensemble average.
    pub probs: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub probes: Vec<ProbeSnapshot>,
}

impl TrainHistory {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Streams evaluation records and periodic checkpoints into a run directory.
pub struct RunLogger {
    dir: PathBuf,
    metrics: std::io::BufWriter<std::fs::File>,
    /// Checkpoint every this many epochs (0 = only the final one).
    pub checkpoint_every: usize,
}

impl RunLogger {
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let metrics = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?);
        Ok(RunLogger {
            dir,
            metrics,
            checkpoint_every: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn on_record(&mut self, record: &EpochRecord) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    fn on_epoch_end<E: Element>(&mut self, ensemble: &Ensemble<E>, epoch: usize, last: bool) -> Result<()> {
        if last {
            self.metrics.flush()?;
            save_ensemble(self.dir.join("checkpoint_final.json"), ensemble, epoch)?;
        } else if self.checkpoint_every > 0 && epoch % self.checkpoint_every == 0 {
            save_ensemble(
                self.dir.join(format!("checkpoint_epoch_{epoch}.json")),
                ensemble,
                epoch,
            )?;
        }
        Ok(())
    }
}

fn check_dataset<E: Element>(ensemble: &Ensemble<E>, dataset: &Dataset<E>, what: &str) -> Result<()> {
    if dataset.classes() != ensemble.classes() {
        return Err(Error::Config(format!(
            "{what} set has {} classes, ensemble {}",
            dataset.classes(),
            ensemble.classes()
        )));
    }
    for (i, net) in ensemble.networks.iter().enumerate() {
        if net.arch.input.elements() != dataset.input_volume().elements() {
            return Err(Error::Config(format!(
                "{what} set volume {} does not match network {i} input {}",
                dataset.input_volume(),
                net.arch.input
            )));
        }
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

struct SplitStats {
    accuracy: Vec<f64>,
    ensemble_accuracy: f64,
    mean_kl: Vec<f64>,
}

fn evaluate_split<E: Element>(ensemble: &Ensemble<E>, dataset: &Dataset<E>) -> Result<SplitStats> {
    let n = ensemble.len();
    let classes = ensemble.classes();
    let mut correct = vec![0usize; n];
    let mut kl_sum = vec![0.0f64; n];
    let mut ens_correct = 0usize;
    let mut mean_buf = vec![E::zero(); classes];
    for_each_sample_predictions(&ensemble.networks, dataset, EVAL_CHUNK, |s, rows| {
        let label = dataset.label(s);
        for (i, row) in rows.iter().enumerate() {
            if argmax_lowest(row) == label {
                correct[i] += 1;
            }
            kl_sum[i] += nll_row(row, label).to_f64();
        }
        combine_arithmetic_rows(rows, &mut mean_buf);
        if argmax_lowest(&mean_buf) == label {
            ens_correct += 1;
        }
    })?;
    let total = dataset.len() as f64;
    Ok(SplitStats {
        accuracy: correct.iter().map(|&c| c as f64 / total).collect(),
        ensemble_accuracy: ens_correct as f64 / total,
        mean_kl: kl_sum.iter().map(|&s| s / total).collect(),
    })
}

fn probe_snapshot<E: Element>(
    ensemble: &Ensemble<E>,
    dataset: &Dataset<E>,
    samples: usize,
    epoch: usize,
) -> Result<ProbeSnapshot> {
    let k = samples.min(dataset.len());
    let batch = dataset.gather_inputs(0..k);
    let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ensemble.len() + 1);
    for net in &ensemble.networks {
        let (logits, _) = forward(&net.arch, &net.params, &batch)?;
        let p = softmax_rows(&logits);
        probs.push(
            (0..k)
                .map(|s| p.row(s).iter().map(|v| v.to_f64()).collect())
                .collect(),
        );
    }
    let ens: Vec<Vec<f64>> = (0..k)
        .map(|s| {
            (0..ensemble.classes())
                .map(|c| {
                    probs.iter().map(|net| net[s][c]).sum::<f64>() / ensemble.len() as f64
                })
                .collect()
        })
        .collect();
    probs.push(ens);
    Ok(ProbeSnapshot { epoch, probs })
}

/// Full co-training run: epochs of shuffled minibatch steps with evaluation,
/// dissimilarity, and probe records at their configured cadences.
/// Deterministic given the config seed and the ensemble's member seeds.
pub fn train<E: Element>(
    ensemble: &mut Ensemble<E>,
    train_set: &Dataset<E>,
    test_set: &Dataset<E>,
    config: &TrainConfig,
    logger: Option<&mut RunLogger>,
) -> Result<TrainHistory> {
    train_with_mask(ensemble, train_set, test_set, config, None, logger)
}

/// [`train`] with a per-network trainable mask; frozen members keep
/// predicting (their outputs enter every coupled loss) but never update.
pub fn train_with_mask<E: Element>(
    ensemble: &mut Ensemble<E>,
    train_set: &Dataset<E>,
    test_set: &Dataset<E>,
    config: &TrainConfig,
    trainable: Option<&[bool]>,
    mut logger: Option<&mut RunLogger>,
) -> Result<TrainHistory> {
    config.validate()?;
    check_dataset(ensemble, train_set, "train")?;
    check_dataset(ensemble, test_set, "test")?;

    let n = ensemble.len();
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(&config.schedule, epoch)?;
        if config.shuffle {
            let order_seed = derive_seed(&[config.seed, STREAM_ORDER, epoch as u64]);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        }

        let mut loss_sums = vec![0.0f64; n];
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut aug_rng = if config.augment {
                Some(ChaCha8Rng::seed_from_u64(derive_seed(&[
                    config.seed,
                    STREAM_AUGMENT,
                    epoch as u64,
                    batch_idx as u64,
                ])))
            } else {
                None
            };
            let (inputs, targets) = train_set.gather_batch(chunk, aug_rng.as_mut());
            let losses = train_step(
                &mut ensemble.networks,
                &ensemble.coupling,
                &inputs,
                &targets,
                lr,
                config,
                trainable,
                epoch,
                batch_idx,
            )?;
            for (s, l) in loss_sums.iter_mut().zip(losses) {
                *s += l;
            }
            batches += 1;
        }

        let done = epoch + 1;
        let is_last = done == config.epochs;
        if done % config.eval_every == 0 || is_last {
            let train_stats = evaluate_split(ensemble, train_set)?;
            let test_stats = evaluate_split(ensemble, test_set)?;
            let dissim = if config.dissim_every > 0 && (done % config.dissim_every == 0 || is_last)
            {
                Some(dissimilarity_matrix(ensemble, test_set, "test")?)
            } else {
                None
            };
            let record = EpochRecord {
                epoch: done,
                lr,
                mean_train_loss: loss_sums.iter().map(|&s| s / batches.max(1) as f64).collect(),
                train_accuracy: train_stats.accuracy,
                test_accuracy: test_stats.accuracy,
                test_mean_kl: test_stats.mean_kl,
                ensemble_train_accuracy: train_stats.ensemble_accuracy,
                ensemble_test_accuracy: test_stats.ensemble_accuracy,
                dissimilarity: dissim,
            };
            if let Some(logger) = logger.as_deref_mut() {
                logger.on_record(&record)?;
            }
            history.records.push(record);
        }
        if config.probe_every > 0 && (done % config.probe_every == 0 || is_last) {
            history
                .probes
                .push(probe_snapshot(ensemble, test_set, config.probe_samples, done)?);
        }
        if let Some(logger) = logger.as_deref_mut() {
            logger.on_epoch_end(ensemble, done, is_last)?;
        }
    }

    Ok(history)
}
