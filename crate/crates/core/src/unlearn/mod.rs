//! The unlearning interface `U: M × (D_r, D_f) → M'` with eight algorithms and
//! compute-cost accounting.
//!
//! Mechanisms, and where they differ from the methods they are named after:
//!
//! * `ssd`: selective synaptic dampening with diagonal-Fisher importances from
//!   per-example squared gradients. The "full data" importances use
//!   `D_r ∪ D_f` of the current request, never previously forgotten data.
//! * `scrub_r`: alternating max/min distillation against the frozen base
//!   model. The first `msteps` epochs run a max pass on `D_f` followed by a
//!   min pass on `D_r`; later epochs run the min pass only. The rewind step
//!   keeps the epoch whose forget error is closest to the base model's error
//!   on a held-out proxy set.
//! * `badteach`: the student matches a randomly initialized teacher on forget
//!   rows and the base model on retain rows, both through `KL(student‖teacher)`
//!   (the original minimizes the reverse direction).
//! * `randlabel`: fine-tuning on `D_f` with labels redrawn uniformly among the
//!   wrong classes, each forget batch followed by one retain batch.
//!
//! Gradient steps are counted in minibatch units: one step is one gradient
//! evaluation over up to `batch_size` examples. SSD takes no optimizer steps
//! but its per-example gradients cost `ceil(|D_r|/B) + ceil(|D_f|/B)` steps.

pub mod hyper;

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use hyper::{hyperparam_descriptor, schema, HyperParams, ParamSpec};

use crate::data::{gather, ExampleSource, Restricted};
use crate::error::{BenchError, Result};
use crate::nn::loss::{cross_entropy, kl_divergence};
use crate::nn::optim::{clip_grad_norm, LrSchedule, Sgd};
use crate::nn::{Mode, Network};
use crate::store::{IndexSet, Provenance};
use crate::zoo::{evaluate_accuracy, fit_epochs, shuffle_seed, train_model, Checkpoint, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmId {
    Identity,
    Retrain,
    Finetune,
    #[serde(rename = "randlabel")]
    RandLabel,
    #[serde(rename = "badteach")]
    BadTeach,
    ScrubR,
    Ssd,
    SsdFt,
}

impl AlgorithmId {
    pub const ALL: &'static [AlgorithmId] = &[
        AlgorithmId::Identity,
        AlgorithmId::Retrain,
        AlgorithmId::Finetune,
        AlgorithmId::RandLabel,
        AlgorithmId::BadTeach,
        AlgorithmId::ScrubR,
        AlgorithmId::Ssd,
        AlgorithmId::SsdFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmId::Identity => "identity",
            AlgorithmId::Retrain => "retrain",
            AlgorithmId::Finetune => "finetune",
            AlgorithmId::RandLabel => "randlabel",
            AlgorithmId::BadTeach => "badteach",
            AlgorithmId::ScrubR => "scrub_r",
            AlgorithmId::Ssd => "ssd",
            AlgorithmId::SsdFt => "ssd_ft",
        }
    }
}

impl std::str::FromStr for AlgorithmId {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmId::ALL
            .iter()
            .copied()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| BenchError::UnknownAlgo(s.to_string()))
    }
}

impl std::fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub wall_seconds: f64,
    pub gradient_steps: u64,
    /// Examples pushed through a forward pass, counting teachers.
    pub forward_passes: u64,
    /// Largest number of parameters changed by a single update.
    pub peak_param_updates: u64,
}

#[derive(Debug, Clone)]
pub struct UnlearnRequest<'a> {
    pub base: &'a Checkpoint,
    pub retain: &'a IndexSet,
    pub forget: &'a IndexSet,
    pub algorithm: AlgorithmId,
    pub hyperparams: HyperParams,
    pub seed: u64,
    /// Held-out proxy set for the SCRUB+R rewind. Without it SCRUB keeps its
    /// last epoch. Other algorithms ignore it.
    pub rewind_reference: Option<&'a IndexSet>,
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub model: Checkpoint,
    pub cost: CostReport,
}

/// Training configuration of the original base model. Unlearned checkpoints
/// carry it under `config.train`.
pub fn base_train_config(base: &Checkpoint) -> Result<TrainConfig> {
    let cfg = &base.provenance.config;
    serde_json::from_value::<TrainConfig>(cfg.clone())
        .or_else(|_| serde_json::from_value::<TrainConfig>(cfg["train"].clone()))
        .map_err(|_| BenchError::Config("checkpoint provenance carries no training configuration".into()))
}

/// Applies `req.algorithm` to the base model. The base is never modified and
/// only examples in `D_r ∪ D_f` (plus the SCRUB rewind proxy) are read.
pub fn run_unlearning(source: &dyn ExampleSource, req: &UnlearnRequest) -> Result<UnlearnOutcome> {
    let started = Instant::now();
    let hp = HyperParams::validated(req.algorithm, req.hyperparams.as_map())?;
    if !req.retain.is_disjoint(req.forget) {
        return Err(BenchError::BadSizes("retain and forget sets overlap".into()));
    }
    let train_cfg = base_train_config(req.base)?;
    let mut allowed = req.retain.union(req.forget);
    if req.algorithm == AlgorithmId::ScrubR {
        if let Some(r) = req.rewind_reference {
            allowed = allowed.union(r);
        }
    }
    let view = Restricted::new(source, allowed);
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(req.seed));
    let mut session = SgdSession::new(&req.base.network, &train_cfg, 0.0, 0);
    let retain = req.retain.as_slice();
    let forget = req.forget.as_slice();

    let (network, epochs) = match req.algorithm {
        AlgorithmId::Identity => (req.base.network.clone(), 0),
        AlgorithmId::Retrain => {
            let out = train_model(req.base.arch(), &view, req.retain, &train_cfg)?;
            let mut model = out.checkpoint;
            // retraining starts over, so the base is not a parent
            model.provenance.parent = None;
            let cost = CostReport {
                wall_seconds: started.elapsed().as_secs_f64(),
                gradient_steps: out.gradient_steps,
                forward_passes: out.forward_examples,
                peak_param_updates: if out.gradient_steps > 0 { model.network.param_count() as u64 } else { 0 },
            };
            return Ok(UnlearnOutcome { model, cost });
        }
        AlgorithmId::Finetune => {
            let mut net = req.base.network.clone();
            finetune(&mut net, &view, retain, &train_cfg, &hp, &mut rng, &mut session.cost)?;
            (net, hp.count("epochs"))
        }
        AlgorithmId::RandLabel => {
            let net = randlabel(req.base, &view, retain, forget, &train_cfg, &hp, &mut rng, &mut session)?;
            (net, hp.count("epochs"))
        }
        AlgorithmId::BadTeach => {
            let net = badteach(req.base, &view, retain, forget, &train_cfg, &hp, &mut rng, &mut session)?;
            (net, hp.count("epochs"))
        }
        AlgorithmId::ScrubR => {
            let net = scrub(
                req.base,
                &view,
                retain,
                forget,
                req.rewind_reference,
                &train_cfg,
                &hp,
                &mut rng,
                &mut session,
            )?;
            (net, hp.count("epochs"))
        }
        AlgorithmId::Ssd | AlgorithmId::SsdFt => {
            let mut net = req.base.network.clone();
            ssd(&mut net, &view, retain, forget, train_cfg.batch_size, &hp, &mut session.cost)?;
            if req.algorithm == AlgorithmId::SsdFt {
                finetune(&mut net, &view, retain, &train_cfg, &hp, &mut rng, &mut session.cost)?;
            }
            let epochs = if req.algorithm == AlgorithmId::SsdFt { hp.count("epochs") } else { 0 };
            (net, epochs)
        }
    };

    let provenance = Provenance {
        recipe: req.algorithm.as_str().to_string(),
        data_hash: req.retain.content_hash(),
        epochs,
        seed: req.seed,
        parent: req.base.id.clone(),
        config: serde_json::json!({
            "algorithm": req.algorithm.as_str(),
            "hyperparams": hp.to_json(),
            "forget_hash": req.forget.content_hash(),
            "train": serde_json::to_value(&train_cfg).expect("config serializes"),
        }),
    };
    let mut cost = session.cost;
    cost.wall_seconds = started.elapsed().as_secs_f64();
    Ok(UnlearnOutcome {
        model: Checkpoint {
            network,
            provenance,
            id: None,
        },
        cost,
    })
}

/// SGD with momentum and weight decay from a base configuration, a constant
/// or scheduled rate, and cost counters.
pub struct SgdSession {
    opt: Sgd,
    schedule: LrSchedule,
    total_steps: usize,
    step: usize,
    pub epoch: usize,
    max_grad_norm: Option<f64>,
    pub batch_size: usize,
    grads: Vec<f32>,
    pub cost: CostReport,
}

impl SgdSession {
    /// Optimizer family of `cfg` with peak rate `lr`, annealed over `total_steps`
    /// (a constant rate when `total_steps` is 0).
    pub fn new(network: &Network, cfg: &TrainConfig, lr: f64, total_steps: usize) -> Self {
        let schedule = if total_steps == 0 {
            LrSchedule::Constant { lr }
        } else {
            cfg.schedule.with_lr(lr)
        };
        SgdSession {
            opt: Sgd::new(network.param_count(), cfg.momentum, cfg.weight_decay),
            schedule,
            total_steps,
            step: 0,
            epoch: 0,
            max_grad_norm: cfg.max_grad_norm,
            batch_size: cfg.batch_size,
            grads: vec![0.0; network.param_count()],
            cost: CostReport::default(),
        }
    }

    fn reset(&mut self, network: &Network, cfg: &TrainConfig, lr: f64, total_steps: usize) {
        let cost = self.cost;
        *self = SgdSession::new(network, cfg, lr, total_steps);
        self.cost = cost;
    }

    /// One update on a stacked batch: train-mode forward, `objective` maps
    /// logits to (loss, dloss/dlogits), then backward and an SGD step.
    pub fn update(
        &mut self,
        network: &mut Network,
        x: &[f32],
        n: usize,
        objective: impl FnOnce(&[f32]) -> Result<(f64, Vec<f32>)>,
    ) -> Result<f64> {
        let (logits, tape) = network.forward(x, n, Mode::Train);
        let (loss, dlogits) = objective(&logits)?;
        if !loss.is_finite() {
            return Err(BenchError::Diverged(format!("loss {loss} at step {}", self.step)));
        }
        self.grads.fill(0.0);
        network.backward(tape, &dlogits, &mut self.grads);
        if let Some(max) = self.max_grad_norm {
            clip_grad_norm(&mut self.grads, max);
        }
        let lr = self.schedule.lr_at(self.step, self.total_steps, self.epoch);
        self.opt.step(&mut network.params, &self.grads, lr);
        self.step += 1;
        self.cost.gradient_steps += 1;
        self.cost.forward_passes += n as u64;
        self.cost.peak_param_updates = self.cost.peak_param_updates.max(network.param_count() as u64);
        Ok(loss)
    }
}

fn shuffled_batches(indices: &[u32], batch: usize, rng: &mut impl Rng) -> Vec<Vec<u32>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(<[u32]>::to_vec).collect()
}

fn check_finite(network: &Network) -> Result<()> {
    if network.params.iter().any(|p| !p.is_finite()) {
        return Err(BenchError::Diverged("non-finite parameters".into()));
    }
    Ok(())
}

/// Cross-entropy fine-tuning on `D_r` with the base optimizer family.
fn finetune(
    network: &mut Network,
    source: &dyn ExampleSource,
    retain: &[u32],
    base: &TrainConfig,
    hp: &HyperParams,
    rng: &mut ChaCha8Rng,
    cost: &mut CostReport,
) -> Result<()> {
    let cfg = TrainConfig {
        epochs: hp.count("epochs"),
        schedule: base.schedule.with_lr(hp.get("lr")),
        ..base.clone()
    };
    if cfg.epochs == 0 {
        return Ok(());
    }
    if retain.is_empty() {
        return Err(BenchError::EmptyData("retain set"));
    }
    let mut opt = Sgd::new(network.param_count(), cfg.momentum, cfg.weight_decay);
    let (mut steps, mut forwards) = (0u64, 0u64);
    fit_epochs(network, &mut opt, source, retain, &cfg, rng, &mut steps, &mut forwards)?;
    cost.gradient_steps += steps;
    cost.forward_passes += forwards;
    cost.peak_param_updates = cost.peak_param_updates.max(network.param_count() as u64);
    Ok(())
}

// ---------------------------------------------------------------------------
// RandLabel

/// How replacement labels are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelRule {
    /// Uniform over the `C − 1` wrong classes.
    ExcludeTrue,
    /// Uniform over all `C` classes.
    UniformAll,
}

/// Replaces every label with a uniform draw from the other `C − 1` classes.
pub fn randlabel_relabel(labels: &[usize], classes: usize, seed: u64) -> Result<Vec<usize>> {
    randlabel_relabel_with(labels, classes, seed, RelabelRule::ExcludeTrue)
}

pub fn randlabel_relabel_with(labels: &[usize], classes: usize, seed: u64, rule: RelabelRule) -> Result<Vec<usize>> {
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(BenchError::BadLabel { label, classes });
    }
    if classes < 2 {
        return Err(BenchError::BadLabel { label: 0, classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(labels
        .iter()
        .map(|&y| match rule {
            RelabelRule::UniformAll => rng.random_range(0..classes),
            RelabelRule::ExcludeTrue => {
                let r = rng.random_range(0..classes - 1);
                if r >= y {
                    r + 1
                } else {
                    r
                }
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn randlabel(
    base: &Checkpoint,
    source: &dyn ExampleSource,
    retain: &[u32],
    forget: &[u32],
    cfg: &TrainConfig,
    hp: &HyperParams,
    rng: &mut ChaCha8Rng,
    session: &mut SgdSession,
) -> Result<Network> {
    if forget.is_empty() {
        return Err(BenchError::EmptyData("forget set"));
    }
    let mut net = base.network.clone();
    let classes = net.classes();
    let true_labels: Vec<usize> = forget.iter().map(|&i| source.label(i)).collect();
    let wrong = randlabel_relabel(&true_labels, classes, rng.next_u64())?;
    let relabel: std::collections::HashMap<u32, usize> = forget.iter().copied().zip(wrong).collect();
    let epochs = hp.count("epochs");
    let per_epoch = 2 * forget.len().div_ceil(cfg.batch_size);
    session.reset(&net, cfg, hp.get("lr"), epochs * per_epoch);
    for epoch in 0..epochs {
        session.epoch = epoch;
        let forget_batches = shuffled_batches(forget, cfg.batch_size, rng);
        let retain_batches = shuffled_batches(retain, cfg.batch_size, rng);
        for (k, fb) in forget_batches.iter().enumerate() {
            let (x, _) = gather(source, fb);
            let y: Vec<usize> = fb.iter().map(|i| relabel[i]).collect();
            session.update(&mut net, &x, fb.len(), |z| Ok(cross_entropy(z, &y, classes)))?;
            if !retain_batches.is_empty() {
                let rb = &retain_batches[k % retain_batches.len()];
                let (x, y) = gather(source, rb);
                session.update(&mut net, &x, rb.len(), |z| Ok(cross_entropy(z, &y, classes)))?;
            }
        }
    }
    check_finite(&net)?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// BadTeach

/// Dual-teacher objective: `KL(student‖bad)` on rows where `forget_mask` is
/// set and `KL(student‖good)` elsewhere, averaged over the batch.
pub fn badteach_loss(
    student: &[f32],
    good: &[f32],
    bad: &[f32],
    forget_mask: &[bool],
    classes: usize,
    temperature: f64,
) -> Result<(f64, Vec<f32>)> {
    let n = forget_mask.len();
    if classes == 0 || student.len() != n * classes || good.len() != student.len() || bad.len() != student.len() {
        return Err(BenchError::ShapeMismatch(format!(
            "{n} mask rows against logits of length {}/{}/{}",
            student.len(),
            good.len(),
            bad.len()
        )));
    }
    let teachers: Vec<&[f32]> = forget_mask
        .iter()
        .enumerate()
        .map(|(r, &f)| {
            let t = if f { bad } else { good };
            &t[r * classes..(r + 1) * classes]
        })
        .collect();
    Ok(kl_divergence(student, &teachers, &vec![1.0; n], classes, temperature))
}

/// One BadTeach update on a stacked batch. Teachers are evaluated frozen.
#[allow(clippy::too_many_arguments)]
pub fn badteach_step(
    student: &mut Network,
    good_teacher: &Network,
    bad_teacher: &Network,
    x: &[f32],
    forget_mask: &[bool],
    temperature: f64,
    session: &mut SgdSession,
) -> Result<f64> {
    let n = forget_mask.len();
    let classes = student.classes();
    if x.len() != n * student.arch().input_len()
        || good_teacher.arch() != student.arch()
        || bad_teacher.arch() != student.arch()
    {
        return Err(BenchError::ShapeMismatch("batch or teacher shape differs from student".into()));
    }
    let good = good_teacher.predict(x, n);
    let bad = bad_teacher.predict(x, n);
    session.cost.forward_passes += 2 * n as u64;
    session.update(student, x, n, |z| badteach_loss(z, &good, &bad, forget_mask, classes, temperature))
}

#[allow(clippy::too_many_arguments)]
fn badteach(
    base: &Checkpoint,
    source: &dyn ExampleSource,
    retain: &[u32],
    forget: &[u32],
    cfg: &TrainConfig,
    hp: &HyperParams,
    rng: &mut ChaCha8Rng,
    session: &mut SgdSession,
) -> Result<Network> {
    let bad = Network::new(base.arch(), rng.next_u64())?;
    let keep = ((hp.get("retain_fraction") * retain.len() as f64).round() as usize).min(retain.len());
    let mut pool: Vec<u32> = index::sample(rng, retain.len(), keep).into_iter().map(|k| retain[k]).collect();
    pool.extend_from_slice(forget);
    if pool.is_empty() {
        return Err(BenchError::EmptyData("badteach pool"));
    }
    let forget_set: std::collections::HashSet<u32> = forget.iter().copied().collect();
    let epochs = hp.count("epochs");
    let mut net = base.network.clone();
    session.reset(&net, cfg, hp.get("lr"), epochs * pool.len().div_ceil(cfg.batch_size));
    for epoch in 0..epochs {
        session.epoch = epoch;
        for batch in shuffled_batches(&pool, cfg.batch_size, rng) {
            let (x, _) = gather(source, &batch);
            let mask: Vec<bool> = batch.iter().map(|i| forget_set.contains(i)).collect();
            badteach_step(&mut net, &base.network, &bad, &x, &mask, hp.get("temperature"), session)?;
        }
    }
    check_finite(&net)?;
    Ok(net)
}

// ---------------------------------------------------------------------------
// SCRUB

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScrubPhase {
    /// Ascend `KL(student‖teacher)` on the forget set.
    Max,
    /// Descend `α·KL + γ·CE` on the retain set.
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScrubWeights {
    pub alpha: f64,
    pub gamma: f64,
}

/// One pass of the given phase over `data` in shuffled minibatches. Returns the
/// mean objective (the KL for the max phase).
#[allow(clippy::too_many_arguments)]
pub fn scrub_round(
    student: &mut Network,
    teacher: &Network,
    source: &dyn ExampleSource,
    data: &[u32],
    phase: ScrubPhase,
    weights: ScrubWeights,
    temperature: f64,
    session: &mut SgdSession,
    rng: &mut impl Rng,
) -> Result<f64> {
    if data.is_empty() {
        return Err(BenchError::EmptyData(match phase {
            ScrubPhase::Max => "forget set",
            ScrubPhase::Min => "retain set",
        }));
    }
    let classes = student.classes();
    let mut total = 0.0;
    for batch in shuffled_batches(data, session.batch_size, rng) {
        let n = batch.len();
        let (x, y) = gather(source, &batch);
        let t = teacher.predict(&x, n);
        session.cost.forward_passes += n as u64;
        let rows: Vec<&[f32]> = t.chunks_exact(classes).collect();
        let ones = vec![1.0; n];
        let loss = session.update(student, &x, n, |z| {
            let (kl, dkl) = kl_divergence(z, &rows, &ones, classes, temperature);
            Ok(match phase {
                ScrubPhase::Max => (-kl, dkl.iter().map(|g| -g).collect()),
                ScrubPhase::Min => {
                    let (ce, dce) = cross_entropy(z, &y, classes);
                    let grad = dkl
                        .iter()
                        .zip(&dce)
                        .map(|(&a, &b)| (weights.alpha * a as f64 + weights.gamma * b as f64) as f32)
                        .collect();
                    (weights.alpha * kl + weights.gamma * ce, grad)
                }
            })
        })?;
        total += loss * n as f64;
    }
    let mean = total / data.len() as f64;
    Ok(if phase == ScrubPhase::Max { -mean } else { mean })
}

/// Index of the entry closest to `reference_error`, earliest on ties.
pub fn rewind_index(forget_errors: &[f64], reference_error: f64) -> Result<usize> {
    if forget_errors.is_empty() {
        return Err(BenchError::EmptyTrajectory);
    }
    let mut best = 0;
    let mut best_gap = f64::INFINITY;
    for (k, &e) in forget_errors.iter().enumerate() {
        let gap = (e - reference_error).abs();
        if gap < best_gap - 1e-12 {
            best = k;
            best_gap = gap;
        }
    }
    Ok(best)
}

/// Picks the per-round checkpoint whose forget error is closest to
/// `reference_error`, breaking ties toward the earliest round.
pub fn scrub_rewind<T>(checkpoints: Vec<T>, forget_errors: &[f64], reference_error: f64) -> Result<T> {
    if checkpoints.len() != forget_errors.len() {
        return Err(BenchError::LengthMismatch {
            left: checkpoints.len(),
            right: forget_errors.len(),
        });
    }
    let k = rewind_index(forget_errors, reference_error)?;
    Ok(checkpoints.into_iter().nth(k).expect("index within trajectory"))
}

#[allow(clippy::too_many_arguments)]
fn scrub(
    base: &Checkpoint,
    source: &dyn ExampleSource,
    retain: &[u32],
    forget: &[u32],
    reference: Option<&IndexSet>,
    cfg: &TrainConfig,
    hp: &HyperParams,
    rng: &mut ChaCha8Rng,
    session: &mut SgdSession,
) -> Result<Network> {
    let weights = ScrubWeights {
        alpha: hp.get("alpha"),
        gamma: hp.get("gamma"),
    };
    let temperature = hp.get("temperature");
    let epochs = hp.count("epochs");
    let msteps = hp.count("msteps");
    let forget_set = IndexSet::new(forget.to_vec());
    let mut student = base.network.clone();
    session.reset(&student, cfg, hp.get("lr"), 0);
    let mut trajectory = Vec::with_capacity(epochs);
    let mut errors = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        session.epoch = epoch;
        if epoch < msteps {
            scrub_round(&mut student, &base.network, source, forget, ScrubPhase::Max, weights, temperature, session, rng)?;
        }
        scrub_round(&mut student, &base.network, source, retain, ScrubPhase::Min, weights, temperature, session, rng)?;
        check_finite(&student)?;
        if reference.is_some() && !forget_set.is_empty() {
            errors.push(1.0 - evaluate_accuracy(&student, source, &forget_set)?.accuracy);
            session.cost.forward_passes += forget.len() as u64;
        }
        trajectory.push((student.params.clone(), student.buffers.clone()));
    }
    let chosen = match reference {
        Some(r) if !errors.is_empty() => {
            let reference_error = 1.0 - evaluate_accuracy(&base.network, source, r)?.accuracy;
            session.cost.forward_passes += r.len() as u64;
            scrub_rewind(trajectory, &errors, reference_error)?
        }
        _ => match trajectory.pop() {
            Some(last) => last,
            None => return Ok(student),
        },
    };
    student.params = chosen.0;
    student.buffers = chosen.1;
    Ok(student)
}

// ---------------------------------------------------------------------------
// SSD

/// Sums of per-example squared loss gradients over `data`.
fn squared_gradient_sums(model: &Network, source: &dyn ExampleSource, data: &[u32]) -> Vec<f64> {
    let mut scratch = model.clone();
    let classes = model.classes();
    let mut sums = vec![0.0f64; model.param_count()];
    let mut grads = vec![0.0f32; model.param_count()];
    for &i in data {
        let (x, y) = gather(source, &[i]);
        let (logits, tape) = scratch.forward(&x, 1, Mode::Eval);
        let (_, dlogits) = cross_entropy(&logits, &y, classes);
        grads.fill(0.0);
        scratch.backward(tape, &dlogits, &mut grads);
        for (s, &g) in sums.iter_mut().zip(&grads) {
            *s += (g as f64) * (g as f64);
        }
    }
    sums
}

/// Diagonal Fisher importances: the mean over `data` of squared per-example
/// gradients of the loss, evaluated in eval mode.
pub fn ssd_importances(model: &Network, source: &dyn ExampleSource, data: &[u32]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(BenchError::EmptyData("importance set"));
    }
    let n = data.len() as f64;
    Ok(squared_gradient_sums(model, source, data).into_iter().map(|s| s / n).collect())
}

/// Floor added to forget importances before dividing.
pub const SSD_FLOOR: f64 = 1e-12;

/// Selective dampening: parameters much more important to `D_f` than to the
/// full data are shrunk by `min(λ·imp_D / imp_Df, 1)`.
pub fn ssd_dampen(theta: &[f32], imp_d: &[f64], imp_df: &[f64], alpha: f64, lambda: f64) -> Result<Vec<f32>> {
    let mut out = theta.to_vec();
    dampen_in_place(&mut out, imp_d, imp_df, alpha, lambda)?;
    Ok(out)
}

fn dampen_in_place(theta: &mut [f32], imp_d: &[f64], imp_df: &[f64], alpha: f64, lambda: f64) -> Result<usize> {
    for other in [imp_d.len(), imp_df.len()] {
        if other != theta.len() {
            return Err(BenchError::LengthMismatch {
                left: theta.len(),
                right: other,
            });
        }
    }
    if !(alpha > 0.0 && lambda > 0.0) {
        return Err(BenchError::BadHyperparams("alpha_ssd and lambda_ssd must be positive".into()));
    }
    let mut changed = 0;
    for ((t, &d), &f) in theta.iter_mut().zip(imp_d).zip(imp_df) {
        if f > alpha * d {
            let beta = (lambda * d / (f + SSD_FLOOR)).min(1.0);
            if beta < 1.0 {
                *t = (*t as f64 * beta) as f32;
                changed += 1;
            }
        }
    }
    Ok(changed)
}

fn ssd(
    network: &mut Network,
    source: &dyn ExampleSource,
    retain: &[u32],
    forget: &[u32],
    batch_size: usize,
    hp: &HyperParams,
    cost: &mut CostReport,
) -> Result<()> {
    if forget.is_empty() {
        return Err(BenchError::EmptyData("forget set"));
    }
    let forget_sums = squared_gradient_sums(network, source, forget);
    let retain_sums = squared_gradient_sums(network, source, retain);
    let n_all = (retain.len() + forget.len()) as f64;
    let n_f = forget.len() as f64;
    let imp_d: Vec<f64> = forget_sums.iter().zip(&retain_sums).map(|(f, r)| (f + r) / n_all).collect();
    let imp_df: Vec<f64> = forget_sums.iter().map(|f| f / n_f).collect();
    let changed = dampen_in_place(&mut network.params, &imp_d, &imp_df, hp.get("alpha_ssd"), hp.get("lambda_ssd"))?;
    cost.gradient_steps += (retain.len().div_ceil(batch_size) + forget.len().div_ceil(batch_size)) as u64;
    cost.forward_passes += (retain.len() + forget.len()) as u64;
    cost.peak_param_updates = cost.peak_param_updates.max(changed as u64);
    Ok(())
}
