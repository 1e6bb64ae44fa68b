//! Training, evaluation and per-example score extraction for classifiers.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, gather, ExampleSource};
use crate::error::{BenchError, Result};
use crate::nn::loss::{cross_entropy, log_softmax};
use crate::nn::optim::{clip_grad_norm, LrSchedule, Sgd};
use crate::nn::{ArchitectureSpec, Mode, Network};
use crate::store::{CheckpointRef, IndexSet, Provenance, Store};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logit scaling.
pub const PROB_CLAMP: f64 = 1e-6;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
    /// Recorded in provenance. The CPU kernels here are sequential, so runs
    /// are bitwise reproducible either way.
    pub deterministic: bool,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            schedule: LrSchedule::Cosine { lr: 0.05 },
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            seed: 0,
            deterministic: true,
            max_grad_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(BenchError::Config("batch size must be positive".into()));
        }
        let lr = self.schedule.base_lr();
        if !lr.is_finite() || lr < 0.0 || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(BenchError::Config("optimizer settings out of range".into()));
        }
        Ok(())
    }
}

/// A model plus where it came from. `id` is set once registered in a store.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub provenance: Provenance,
    pub id: Option<String>,
}

impl Checkpoint {
    pub fn arch(&self) -> &ArchitectureSpec {
        self.network.arch()
    }

    /// Registers weights and provenance; idempotent.
    pub fn register(&mut self, store: &Store) -> Result<CheckpointRef> {
        let r = store.register_checkpoint(
            &self.network.to_blob(),
            &self.network.arch().tag(),
            self.provenance.clone(),
        )?;
        self.id = Some(r.checkpoint_id.clone());
        Ok(r)
    }

    pub fn load(store: &Store, id: &str) -> Result<Self> {
        let (reference, blob) = store.load_checkpoint(id)?;
        let arch = ArchitectureSpec::from_tag(&reference.architecture)?;
        Ok(Checkpoint {
            network: Network::from_blob(&arch, &blob)?,
            provenance: reference.provenance,
            id: Some(reference.checkpoint_id),
        })
    }
}

/// Per-epoch training progress, written as one JSON line per record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// Random words drawn for shuffling and augmentation.
    pub rng_draws: u64,
    pub gradient_steps: u64,
    pub forward_examples: u64,
}

impl TrainOutcome {
    pub fn history_jsonl(&self) -> String {
        self.history
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// RNG wrapper that counts the 32/64-bit words handed out.
pub struct CountingRng<R> {
    inner: R,
    pub draws: u64,
}

impl<R> CountingRng<R> {
    pub fn new(inner: R) -> Self {
        CountingRng { inner, draws: 0 }
    }
}

impl<R: RngCore> RngCore for CountingRng<R> {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += dst.len().div_ceil(4) as u64;
        self.inner.fill_bytes(dst)
    }
}

/// Stream seed for shuffling, kept apart from the initialization stream.
pub fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Trains a freshly initialized network on `data` for `cfg.epochs` epochs.
pub fn train_model(
    arch: &ArchitectureSpec,
    source: &dyn ExampleSource,
    data: &IndexSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs > 0 && data.is_empty() {
        return Err(BenchError::EmptyData("training set"));
    }
    let mut network = Network::new(arch, cfg.seed)?;
    let mut rng = CountingRng::new(ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed)));
    let mut opt = Sgd::new(network.param_count(), cfg.momentum, cfg.weight_decay);
    let mut steps = 0u64;
    let mut forwards = 0u64;
    let history = fit_epochs(
        &mut network,
        &mut opt,
        source,
        data.as_slice(),
        cfg,
        &mut rng,
        &mut steps,
        &mut forwards,
    )?;
    let provenance = Provenance {
        recipe: if cfg.epochs == 0 { "init" } else { "train" }.to_string(),
        data_hash: data.content_hash(),
        epochs: cfg.epochs,
        seed: cfg.seed,
        parent: None,
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            network,
            provenance,
            id: None,
        },
        history,
        rng_draws: rng.draws,
        gradient_steps: steps,
        forward_examples: forwards,
    })
}

/// Cross-entropy minibatch SGD over `indices` for `cfg.epochs` epochs,
/// continuing from the network's current weights.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fit_epochs(
    network: &mut Network,
    opt: &mut Sgd,
    source: &dyn ExampleSource,
    indices: &[u32],
    cfg: &TrainConfig,
    rng: &mut impl rand::Rng,
    steps: &mut u64,
    forwards: &mut u64,
) -> Result<Vec<EpochRecord>> {
    let shape = source.shape();
    let d = source.feature_len();
    let classes = network.classes();
    let batches_per_epoch = indices.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut order = indices.to_vec();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grads = vec![0.0f32; network.param_count()];
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut lr = cfg.schedule.base_lr();
        for batch in order.chunks(cfg.batch_size) {
            let (mut x, y) = gather(source, batch);
            if cfg.augment {
                for row in x.chunks_exact_mut(d) {
                    augment(row, shape, rng);
                }
            }
            let (logits, tape) = network.forward(&x, batch.len(), Mode::Train);
            let (loss, dlogits) = cross_entropy(&logits, &y, classes);
            if !loss.is_finite() {
                return Err(BenchError::Diverged(format!("loss {loss} at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            correct += count_correct(&logits, &y, classes);
            grads.fill(0.0);
            network.backward(tape, &dlogits, &mut grads);
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            lr = cfg.schedule.lr_at(step, total_steps, epoch);
            opt.step(&mut network.params, &grads, lr);
            step += 1;
            *steps += 1;
            *forwards += batch.len() as u64;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / indices.len().max(1) as f64,
            train_accuracy: correct as f64 / indices.len().max(1) as f64,
            lr,
        });
    }
    if network.params.iter().any(|p| !p.is_finite()) {
        return Err(BenchError::Diverged("non-finite parameters".into()));
    }
    Ok(history)
}

pub(crate) fn count_correct(logits: &[f32], labels: &[usize], classes: usize) -> usize {
    logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Eval-mode logits for `indices`, in order.
pub fn predict_logits(network: &Network, source: &dyn ExampleSource, indices: &[u32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(indices.len() * network.classes());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = gather(source, chunk);
        out.extend(network.predict(&x, chunk.len()));
    }
    out
}

pub fn evaluate_accuracy(network: &Network, source: &dyn ExampleSource, data: &IndexSet) -> Result<Accuracy> {
    if data.is_empty() {
        return Err(BenchError::EmptyData("evaluation set"));
    }
    let classes = network.classes();
    let logits = predict_logits(network, source, data.as_slice());
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (row, i) in logits.chunks_exact(classes).zip(data.iter()) {
        let y = source.label(i);
        if argmax(row) == y {
            correct += 1;
        }
        loss -= log_softmax(row, 1.0)[y];
    }
    Ok(Accuracy {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
    })
}

/// Scalar signals an attack can read from one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub index: u32,
    /// Cross-entropy loss, `-ln p`.
    pub loss: f64,
    /// Unclamped true-class probability.
    pub p: f64,
    /// Logit-scaled confidence `ln(p / (1 - p))` of the clamped probability.
    pub phi: f64,
}

/// `ln(p / (1 - p))` after clamping `p` into `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub fn logit_confidence(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

/// One record per index, in input order.
pub fn extract_scores(network: &Network, source: &dyn ExampleSource, data: &[u32]) -> Result<Vec<ScoreRecord>> {
    if data.is_empty() {
        return Err(BenchError::EmptyData("score extraction set"));
    }
    let classes = network.classes();
    let logits = predict_logits(network, source, data);
    Ok(logits
        .chunks_exact(classes)
        .zip(data)
        .map(|(row, &index)| {
            let logp = log_softmax(row, 1.0)[source.label(index)];
            let p = logp.exp();
            ScoreRecord {
                index,
                loss: -logp,
                p,
                phi: logit_confidence(p),
            }
        })
        .collect())
}
