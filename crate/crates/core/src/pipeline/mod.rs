//! End-to-end benchmark orchestration: iterative unlearning runs with
//! scheduled attacks, single-step privacy evaluation, hyperparameter search
//! and report emission.

mod config;
mod report;
mod tune;

pub mod commands;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{
    apply_override, config_help, AttackConfig, BenchConfig, DataConfig, DataSource, ModelConfig, ReportConfig,
    TuneConfig, UnlearnConfig,
};
pub use report::{emit_report, ReportBundle, ReportInputs, RunRecords};
pub use tune::{tune_hyperparams, TrialRecord, TuneOutcome, TuneSpec};

use crate::attack::{
    base_model_attack, build_shadow_pairs, lira_offline, lr_mia, pair_epsilon, train_shadow_models, update_leak_attack,
    AttackResult, LiraConfig, PairedScoreMatrix, ScoreMatrix,
};
use crate::data::{Dataset, ExampleSource};
use crate::error::{BenchError, Result};
use crate::metrics::{
    roc_epsilon, roc_from_scores, tpr_at_fpr, worst_case_report, EpsilonEstimate, WorstCaseReport, DEFAULT_CONFIDENCE,
};
use crate::nn::ArchitectureSpec;
use crate::store::{now_unix, sha256_hex, IndexSet, ManifestIteration, RunManifest, SplitPlan, Store};
use crate::unlearn::{run_unlearning, AlgorithmId, CostReport, HyperParams, UnlearnRequest};
use crate::zoo::{evaluate_accuracy, extract_scores, train_model, Checkpoint, TrainConfig};

/// One unlearning iteration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub algorithm: AlgorithmId,
    pub test_accuracy: f64,
    pub retain_accuracy: f64,
    /// Accuracy on this iteration's forget set.
    pub forget_accuracy: f64,
    pub cost: CostReport,
    pub checkpoint_id: String,
    pub attack: Option<WorstCaseReport>,
}

/// Loaded dataset, plan and store for one config.
pub struct Workspace {
    pub config: BenchConfig,
    pub store: Store,
    pub dataset: Dataset,
    pub plan: SplitPlan,
    pub plan_id: String,
    pub arch: ArchitectureSpec,
}

impl Workspace {
    /// Opens the store named by `BENCH_STORE` or the config.
    pub fn open(config: BenchConfig) -> Result<Self> {
        let store = Store::open_from_env(&config.store)?;
        Workspace::with_store(config, store)
    }

    pub fn with_store(config: BenchConfig, store: Store) -> Result<Self> {
        let dataset = config.data.load_dataset()?;
        let plan = config.data.build_plan(&dataset)?;
        dataset.check_plan(&plan)?;
        let plan_id = store.save_plan(&plan)?;
        let arch = config.model.arch(&dataset);
        Ok(Workspace {
            config,
            store,
            dataset,
            plan,
            plan_id,
            arch,
        })
    }

    fn base_ref(&self) -> String {
        let key = serde_json::json!({
            "plan": self.plan_id,
            "arch": self.arch.tag(),
            "train": self.config.model.train,
        });
        format!("base-{}", &sha256_hex(key.to_string().as_bytes())[..16])
    }

    /// The base model for this config, trained on `D_train` and registered on
    /// first use.
    pub fn base(&self) -> Result<Checkpoint> {
        if let Some(id) = self.store.get_ref(&self.base_ref())? {
            return Checkpoint::load(&self.store, &id);
        }
        let out = train_model(&self.arch, &self.dataset, &self.plan.train_indices, &self.config.model.train)?;
        let history = out.history_jsonl();
        let mut model = out.checkpoint;
        let r = model.register(&self.store)?;
        crate::store::write_atomic(
            &self.store.root().join("refs").join(format!("{}.history.jsonl", self.base_ref())),
            history.as_bytes(),
        )?;
        self.store.set_ref(&self.base_ref(), &r.checkpoint_id)?;
        Ok(model)
    }

    /// `δ` for ε̂: configured, or `1 / |D_train|`.
    pub fn delta(&self) -> f64 {
        self.config
            .attack
            .delta
            .unwrap_or(1.0 / self.plan.train_indices.len() as f64)
    }

    /// Held-out nonmember queries drawn from `D_test`.
    pub fn nonmember_queries(&self) -> IndexSet {
        let test = self.plan.test_indices.as_slice();
        let want = self
            .config
            .attack
            .nonmembers
            .unwrap_or(self.plan.forget_sequence[0].len())
            .min(test.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.attack.seed ^ 0x4E4F_4E4D);
        index::sample(&mut rng, test.len(), want).into_iter().map(|k| test[k]).collect()
    }

    pub fn shadow_train_config(&self) -> TrainConfig {
        let mut cfg = self.config.model.train.clone();
        if let Some(e) = self.config.attack.shadow_epochs {
            cfg.epochs = e;
        }
        cfg
    }

    fn cache_path(&self, kind: &str, key: &serde_json::Value) -> std::path::PathBuf {
        let h = sha256_hex(key.to_string().as_bytes());
        self.store.root().join("shadows").join(format!("{kind}-{}.fbsm", &h[..24]))
    }

    /// Offline-LiRA shadow population over `queries`, cached in the store.
    pub fn lira_shadows(&self, queries: &[u32]) -> Result<ScoreMatrix> {
        let cfg = self.shadow_train_config();
        let key = serde_json::json!({
            "plan": self.plan_id,
            "arch": self.arch.tag(),
            "train": cfg,
            "shadows": self.config.attack.shadows,
            "seed": self.config.attack.seed,
            "queries": IndexSet::new(queries.to_vec()).content_hash(),
        });
        let path = self.cache_path("lira", &key);
        if path.exists() {
            let m = ScoreMatrix::load(&path)?;
            return m.select(queries);
        }
        let set = train_shadow_models(
            &self.dataset,
            &self.arch,
            &cfg,
            &self.plan.train_indices,
            queries,
            self.config.attack.shadows,
            self.config.attack.seed,
        )?;
        set.matrix.save(&path)?;
        Ok(set.matrix)
    }

    /// Shadow pairs for `algorithm`, cached in the store.
    pub fn shadow_pairs(&self, queries: &[u32], algorithm: AlgorithmId, hp: &HyperParams) -> Result<PairedScoreMatrix> {
        let cfg = self.shadow_train_config();
        let key = serde_json::json!({
            "plan": self.plan_id,
            "arch": self.arch.tag(),
            "train": cfg,
            "pairs": self.config.attack.pairs,
            "seed": self.config.attack.seed,
            "algorithm": algorithm.as_str(),
            "hyperparams": hp.to_json(),
            // pair planes are positional, so the key keeps query order
            "queries": sha256_hex(&serde_json::to_vec(queries).expect("queries serialize")),
        });
        let path = self.cache_path("pairs", &key);
        if path.exists() {
            return PairedScoreMatrix::load(&path);
        }
        let m = build_shadow_pairs(
            &self.dataset,
            &self.arch,
            &cfg,
            &self.plan.train_indices,
            queries,
            algorithm,
            hp,
            self.config.attack.pairs,
            self.config.attack.seed,
            Some(&self.plan.val_indices),
        )?;
        m.save(&path)?;
        Ok(m)
    }

    /// Attack setup for iterative runs covering the first `iterations` forget sets.
    pub fn iteration_attacks(&self, iterations: usize) -> Result<IterationAttacks> {
        let nonmembers = self.nonmember_queries();
        let forgotten = self.plan.forgotten_through(iterations.saturating_sub(1));
        let queries = forgotten.union(&nonmembers);
        Ok(IterationAttacks {
            shadows: self.lira_shadows(queries.as_slice())?,
            nonmembers,
            lira: self.config.attack.lira,
            lr_folds: self.config.attack.lr_folds,
        })
    }
}

/// What iterative runs need to attack intermediate models.
pub struct IterationAttacks {
    /// Shadow population whose queries cover every attacked forget set and
    /// the nonmembers.
    pub shadows: ScoreMatrix,
    pub nonmembers: IndexSet,
    pub lira: LiraConfig,
    pub lr_folds: usize,
}

/// Members first, then nonmembers, each ascending.
fn query_layout(members: &IndexSet, nonmembers: &IndexSet) -> (Vec<u32>, Vec<u8>) {
    let queries: Vec<u32> = members.iter().chain(nonmembers.iter()).collect();
    let labels = std::iter::repeat_n(1u8, members.len())
        .chain(std::iter::repeat_n(0u8, nonmembers.len()))
        .collect();
    (queries, labels)
}

fn lr_mia_on(model: &Checkpoint, source: &dyn ExampleSource, members: &IndexSet, nonmembers: &IndexSet, folds: usize) -> Result<AttackResult> {
    let m: Vec<f64> = extract_scores(&model.network, source, members.as_slice())?.iter().map(|r| r.loss).collect();
    let n: Vec<f64> = extract_scores(&model.network, source, nonmembers.as_slice())?.iter().map(|r| r.loss).collect();
    let mut r = lr_mia(&m, &n, folds)?;
    r.queries = query_layout(members, nonmembers).0;
    Ok(r)
}

impl IterationAttacks {
    /// `lr_mia` and offline LiRA against `model`, with `forget` as members.
    pub fn run(&self, model: &Checkpoint, source: &dyn ExampleSource, forget: &IndexSet) -> Result<Vec<AttackResult>> {
        let lr = lr_mia_on(model, source, forget, &self.nonmembers, self.lr_folds)?;
        let (queries, labels) = query_layout(forget, &self.nonmembers);
        let phi: Vec<f64> = extract_scores(&model.network, source, &queries)?.iter().map(|r| r.phi).collect();
        let lira = lira_offline(&queries, &phi, &labels, &self.shadows.select(&queries)?, &self.lira)?;
        Ok(vec![lr, lira])
    }
}

#[derive(Clone)]
pub struct IterativeSpec<'a> {
    pub algorithm: AlgorithmId,
    pub hyperparams: HyperParams,
    pub iterations: usize,
    /// Attack on iterations `i` with `i % attack_every == 0`; 0 never attacks.
    pub attack_every: usize,
    pub attacks: Option<&'a IterationAttacks>,
    pub rewind_reference: Option<&'a IndexSet>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeOutcome {
    pub run_id: String,
    pub records: Vec<IterationRecord>,
    /// Set when an unlearning step failed; earlier records are kept.
    pub failure: Option<String>,
}

pub fn records_path(store: &Store, run_id: &str) -> std::path::PathBuf {
    store.run_dir(run_id).join("records.json")
}

pub fn load_records(store: &Store, run_id: &str) -> Result<Vec<IterationRecord>> {
    let path = records_path(store, run_id);
    if !path.exists() {
        return Ok(Vec::new());
    }
    crate::store::read_json(&path)
}

/// Applies the algorithm to its own output over the plan's forget sequence:
/// `M_{i+1} = U(M_i, retain_set(i), forget_set(i))`. Accuracies are recorded
/// after every iteration, every checkpoint is registered, and the manifest
/// and record list under `run_id` grow by one entry per iteration.
pub fn run_iterative(
    store: &Store,
    source: &dyn ExampleSource,
    plan: &SplitPlan,
    base: &Checkpoint,
    spec: &IterativeSpec,
    run_id: &str,
) -> Result<IterativeOutcome> {
    if spec.iterations > plan.iterations() {
        return Err(BenchError::PlanExhausted {
            requested: spec.iterations,
            available: plan.iterations(),
        });
    }
    if spec.attack_every > 0 && spec.attacks.is_none() {
        return Err(BenchError::Config("attacks scheduled without an attack setup".into()));
    }
    if base.provenance.data_hash != plan.train_indices.content_hash() {
        return Err(BenchError::Config("base model was not trained on this plan's training set".into()));
    }
    let hp = HyperParams::validated(spec.algorithm, spec.hyperparams.as_map())?;
    let mut current = base.clone();
    let base_id = current.register(store)?.checkpoint_id;
    let mut manifest = RunManifest::new(run_id, &plan.plan_id(), spec.algorithm.as_str(), hp.to_json());
    manifest.base_checkpoint = Some(base_id);
    store.create_manifest(&manifest)?;

    let mut seeds = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut outcome = IterativeOutcome {
        run_id: run_id.to_string(),
        records: Vec::with_capacity(spec.iterations),
        failure: None,
    };
    for i in 0..spec.iterations {
        let seed = seeds.next_u64();
        let started = now_unix();
        let forget = plan.forget_set_for_iteration(i)?;
        let retain = plan.retain_set_for_iteration(i)?;
        let step = run_unlearning(
            source,
            &UnlearnRequest {
                base: &current,
                retain: &retain,
                forget,
                algorithm: spec.algorithm,
                hyperparams: hp.clone(),
                seed,
                rewind_reference: spec.rewind_reference,
            },
        );
        let step = match step {
            Ok(s) => s,
            Err(e) => {
                let reason = format!("iteration {i}: {}: {e}", e.code());
                store.mark_failed(run_id, &reason)?;
                outcome.failure = Some(reason);
                return Ok(outcome);
            }
        };
        let mut model = step.model;
        let checkpoint_id = model.register(store)?.checkpoint_id;
        let attack = match spec.attacks {
            Some(a) if spec.attack_every > 0 && i % spec.attack_every == 0 => {
                Some(worst_case_report(&a.run(&model, source, forget)?, None)?)
            }
            _ => None,
        };
        let record = IterationRecord {
            iteration: i,
            algorithm: spec.algorithm,
            test_accuracy: evaluate_accuracy(&model.network, source, &plan.test_indices)?.accuracy,
            retain_accuracy: evaluate_accuracy(&model.network, source, &retain)?.accuracy,
            forget_accuracy: evaluate_accuracy(&model.network, source, forget)?.accuracy,
            cost: step.cost,
            checkpoint_id: checkpoint_id.clone(),
            attack,
        };
        outcome.records.push(record);
        crate::store::write_json_atomic(&records_path(store, run_id), &outcome.records)?;
        store.append_iteration(
            run_id,
            ManifestIteration {
                index: i,
                checkpoint_id,
                seed,
                started_unix: started,
                finished_unix: now_unix(),
            },
        )?;
        current = model;
    }
    Ok(outcome)
}

/// Worst-case numbers compared by the do-no-harm check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub auc: f64,
    pub tpr_at_1e2: f64,
    pub max_epsilon: f64,
}

impl AttackMetrics {
    fn values(&self) -> [f64; 3] {
        [self.auc, self.tpr_at_1e2, self.max_epsilon]
    }
}

pub fn attack_metrics(result: &AttackResult, delta: f64, confidence: f64) -> Result<AttackMetrics> {
    let curve = roc_from_scores(&result.scores, &result.labels)?;
    Ok(AttackMetrics {
        auc: curve.auc,
        tpr_at_1e2: tpr_at_fpr(&curve, 1e-2),
        max_epsilon: roc_epsilon(&curve, delta, confidence)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoNoHarmVerdict {
    /// The update-leak attack beats the base-model attack by more than
    /// `band` on some metric.
    pub harm: bool,
    /// The update-leak attack does worse than against retraining by more
    /// than `band` on some metric and better on none.
    pub benefit: bool,
    pub band: f64,
    pub base: AttackMetrics,
    pub update: AttackMetrics,
    pub retrain_update: AttackMetrics,
}

pub fn do_no_harm_check(
    base_attack: &AttackResult,
    update_attack: &AttackResult,
    retrain_update_attack: &AttackResult,
    band: f64,
    delta: f64,
    confidence: f64,
) -> Result<DoNoHarmVerdict> {
    for other in [update_attack, retrain_update_attack] {
        if other.queries != base_attack.queries || other.labels != base_attack.labels {
            return Err(BenchError::QueryMismatch);
        }
    }
    let base = attack_metrics(base_attack, delta, confidence)?;
    let update = attack_metrics(update_attack, delta, confidence)?;
    let retrain_update = attack_metrics(retrain_update_attack, delta, confidence)?;
    let (u, b, r) = (update.values(), base.values(), retrain_update.values());
    let harm = u.iter().zip(&b).any(|(u, b)| u > &(b + band));
    let benefit = u.iter().zip(&r).any(|(u, r)| u < &(r - band)) && !u.iter().zip(&r).any(|(u, r)| u > &(r + band));
    Ok(DoNoHarmVerdict {
        harm,
        benefit,
        band,
        base,
        update,
        retrain_update,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracy {
    pub test: f64,
    pub retain: f64,
    pub forget: f64,
}

/// A single unlearning step on the first forget set, attacked every way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEvaluation {
    pub algorithm: AlgorithmId,
    pub base_checkpoint: String,
    pub unlearned_checkpoint: String,
    pub cost: CostReport,
    pub accuracy: StepAccuracy,
    /// `lr_mia`, `lira_offline`, `update_leak`, `base_model`, `retrain_update`.
    pub attacks: Vec<AttackResult>,
    /// Per forget example, from the algorithm's shadow pairs.
    pub epsilon: EpsilonEstimate,
    pub report: WorstCaseReport,
    pub verdict: DoNoHarmVerdict,
}

impl StepEvaluation {
    pub fn attack(&self, name: &str) -> Option<&AttackResult> {
        self.attacks.iter().find(|a| a.attack == name)
    }
}

fn unlearn_once(ws: &Workspace, base: &Checkpoint, algorithm: AlgorithmId, hp: &HyperParams) -> Result<(Checkpoint, CostReport)> {
    let forget = &ws.plan.forget_sequence[0];
    let retain = ws.plan.retain_set_for_iteration(0)?;
    let out = run_unlearning(
        &ws.dataset,
        &UnlearnRequest {
            base,
            retain: &retain,
            forget,
            algorithm,
            hyperparams: hp.clone(),
            seed: ws.config.unlearn.seed,
            rewind_reference: Some(&ws.plan.val_indices),
        },
    )?;
    let mut model = out.model;
    model.register(&ws.store)?;
    Ok((model, out.cost))
}

fn phis(model: &Checkpoint, source: &dyn ExampleSource, queries: &[u32]) -> Result<Vec<f64>> {
    Ok(extract_scores(&model.network, source, queries)?.iter().map(|r| r.phi).collect())
}

/// Unlearns the first forget set with `algorithm`, then runs the loss attack,
/// offline LiRA, the update-leak attack, the base-model attack and the
/// update-leak attack against retraining, estimates per-example ε̂ from the
/// algorithm's shadow pairs and checks do-no-harm.
pub fn evaluate_step(ws: &Workspace, algorithm: AlgorithmId, hp: &HyperParams) -> Result<StepEvaluation> {
    let source: &dyn ExampleSource = &ws.dataset;
    let cfg = &ws.config.attack;
    let mut base = ws.base()?;
    let base_id = base.register(&ws.store)?.checkpoint_id;
    let forget = &ws.plan.forget_sequence[0];
    let (model, cost) = unlearn_once(ws, &base, algorithm, hp)?;
    let retrained = if algorithm == AlgorithmId::Retrain {
        model.clone()
    } else {
        unlearn_once(ws, &base, AlgorithmId::Retrain, &HyperParams::defaults(AlgorithmId::Retrain))?.0
    };

    let nonmembers = ws.nonmember_queries();
    let (queries, labels) = query_layout(forget, &nonmembers);
    let lr = lr_mia_on(&model, source, forget, &nonmembers, cfg.lr_folds)?;
    let shadows = ws.lira_shadows(&queries)?;
    let phi_unlearned = phis(&model, source, &queries)?;
    let lira = lira_offline(&queries, &phi_unlearned, &labels, &shadows, &cfg.lira)?;

    let pairs = ws.shadow_pairs(&queries, algorithm, hp)?;
    let retrain_pairs = ws.shadow_pairs(&queries, AlgorithmId::Retrain, &HyperParams::defaults(AlgorithmId::Retrain))?;
    let phi_base = phis(&base, source, &queries)?;
    let update = update_leak_attack(&queries, &phi_base, &phi_unlearned, &labels, &pairs, &cfg.update_leak)?;
    let base_attack = base_model_attack(&queries, &phi_base, &labels, &pairs, &cfg.update_leak)?;
    let mut retrain_update = update_leak_attack(
        &queries,
        &phi_base,
        &phis(&retrained, source, &queries)?,
        &labels,
        &retrain_pairs,
        &cfg.update_leak,
    )?;
    retrain_update.attack = "retrain_update".into();

    let delta = ws.delta();
    let columns: Vec<usize> = (0..forget.len()).collect();
    let epsilon = pair_epsilon(&pairs, &columns, delta, cfg.confidence, &cfg.lira)?;
    let confidence = cfg.confidence.unwrap_or(DEFAULT_CONFIDENCE);
    let verdict = do_no_harm_check(&base_attack, &update, &retrain_update, cfg.harm_band, delta, confidence)?;
    let attacks = vec![lr, lira, update, base_attack, retrain_update];
    let report = worst_case_report(&attacks, Some(&epsilon))?;
    let accuracy = StepAccuracy {
        test: evaluate_accuracy(&model.network, source, &ws.plan.test_indices)?.accuracy,
        retain: evaluate_accuracy(&model.network, source, &ws.plan.retain_set_for_iteration(0)?)?.accuracy,
        forget: evaluate_accuracy(&model.network, source, forget)?.accuracy,
    };
    Ok(StepEvaluation {
        algorithm,
        base_checkpoint: base_id,
        unlearned_checkpoint: model.id.clone().expect("registered"),
        cost,
        accuracy,
        attacks,
        epsilon,
        report,
        verdict,
    })
}

#[cfg(test)]
mod tests;
