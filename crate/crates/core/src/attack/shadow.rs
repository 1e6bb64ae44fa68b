//! Shadow-model populations for offline LiRA and shadow pairs for the
//! update-leakage attack.

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MatrixProvenance, PairedScoreMatrix, ScoreMatrix};
use crate::data::ExampleSource;
use crate::error::{BenchError, Result};
use crate::nn::ArchitectureSpec;
use crate::store::IndexSet;
use crate::unlearn::{run_unlearning, AlgorithmId, HyperParams, UnlearnRequest};
use crate::zoo::{extract_scores, train_model, Checkpoint, TrainConfig};

/// Smallest shadow population accepted.
pub const MIN_SHADOWS: usize = 4;

pub struct ShadowSet {
    pub models: Vec<Checkpoint>,
    pub matrix: ScoreMatrix,
}

/// Runs `job(k)` for `k in 0..n` on up to `available_parallelism` threads and
/// returns results in index order.
pub(crate) fn parallel_map<R: Send>(n: usize, job: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |w| w.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(job).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..n).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= n {
                    break;
                }
                let r = job(k);
                results.lock().expect("no poisoned workers")[k] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Independent per-model seeds drawn from one master seed.
fn model_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

fn random_half(pool: &[u32], rng: &mut impl Rng) -> IndexSet {
    index::sample(rng, pool.len(), pool.len() / 2).into_iter().map(|k| pool[k]).collect()
}

fn phi_row(model: &Checkpoint, source: &dyn ExampleSource, queries: &[u32]) -> Result<Vec<f32>> {
    Ok(extract_scores(&model.network, source, queries)?.iter().map(|r| r.phi as f32).collect())
}

/// Trains `s` shadow models, each on an independent uniform half of `pool`,
/// and records every query's φ and IN/OUT status.
pub fn train_shadow_models(
    source: &dyn ExampleSource,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
    pool: &IndexSet,
    queries: &[u32],
    s: usize,
    seed: u64,
) -> Result<ShadowSet> {
    if s < MIN_SHADOWS {
        return Err(BenchError::TooFewShadows(format!("{s} shadows, need at least {MIN_SHADOWS}")));
    }
    if queries.is_empty() {
        return Err(BenchError::EmptyInput("shadow queries"));
    }
    let seeds = model_seeds(seed, s);
    let jobs = parallel_map(s, |k| -> Result<(Checkpoint, IndexSet, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[k]);
        let half = random_half(pool.as_slice(), &mut rng);
        let shadow_cfg = TrainConfig {
            seed: seeds[k],
            ..cfg.clone()
        };
        let model = train_model(arch, source, &half, &shadow_cfg)?.checkpoint;
        let row = phi_row(&model, source, queries)?;
        Ok((model, half, row))
    });
    let nq = queries.len();
    let mut matrix = ScoreMatrix {
        shadows: s,
        queries: queries.to_vec(),
        query_classes: queries.iter().map(|&q| source.label(q) as u32).collect(),
        scores: Vec::with_capacity(s * nq),
        member: Vec::with_capacity(s * nq),
        provenance: MatrixProvenance {
            seeds,
            half_hashes: Vec::with_capacity(s),
            algorithm: None,
        },
    };
    let mut models = Vec::with_capacity(s);
    for job in jobs {
        let (model, half, row) = job?;
        matrix.scores.extend(row);
        matrix.member.extend(queries.iter().map(|&q| half.contains(q)));
        matrix.provenance.half_hashes.push(half.content_hash());
        models.push(model);
    }
    for q in 0..nq {
        let outs = (0..s).filter(|&k| !matrix.member[k * nq + q]).count();
        if outs < 2 {
            return Err(BenchError::TooFewShadows(format!("query {} is OUT in only {outs} shadows", queries[q])));
        }
    }
    Ok(ShadowSet { models, matrix })
}

/// Builds `pairs` shadow pairs. For each pair a random half `H` of
/// `pool \ queries` is drawn and each query is independently put in the
/// forget set `F` with probability 1/2. A base model is trained on `H ∪ F`
/// and unlearned with `D_r = H`, `D_f = F`. Queries outside `F` never enter
/// the pair's training data.
#[allow(clippy::too_many_arguments)]
pub fn build_shadow_pairs(
    source: &dyn ExampleSource,
    arch: &ArchitectureSpec,
    cfg: &TrainConfig,
    pool: &IndexSet,
    queries: &[u32],
    algorithm: AlgorithmId,
    hyperparams: &HyperParams,
    pairs: usize,
    seed: u64,
    rewind_reference: Option<&IndexSet>,
) -> Result<PairedScoreMatrix> {
    if pairs < MIN_SHADOWS {
        return Err(BenchError::TooFewShadows(format!("{pairs} shadow pairs, need at least {MIN_SHADOWS}")));
    }
    if queries.is_empty() {
        return Err(BenchError::EmptyInput("shadow queries"));
    }
    let query_set = IndexSet::new(queries.to_vec());
    let candidates = pool.difference(&query_set);
    if let Some(r) = rewind_reference {
        if !r.is_disjoint(&query_set) {
            return Err(BenchError::BadSizes("rewind reference overlaps the queries".into()));
        }
    }
    let seeds = model_seeds(seed, pairs);
    let jobs = parallel_map(pairs, |k| -> Result<(IndexSet, Vec<bool>, Vec<f32>, Vec<f32>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds[k]);
        let half = random_half(candidates.as_slice(), &mut rng);
        let mut forgotten: Vec<bool> = queries.iter().map(|_| rng.random_bool(0.5)).collect();
        if !forgotten.iter().any(|&f| f) {
            forgotten[rng.random_range(0..queries.len())] = true;
        }
        let forget: IndexSet = queries.iter().zip(&forgotten).filter(|(_, &f)| f).map(|(&q, _)| q).collect();
        let base_cfg = TrainConfig {
            seed: seeds[k],
            ..cfg.clone()
        };
        let base = train_model(arch, source, &half.union(&forget), &base_cfg)?.checkpoint;
        // the rewind proxy must stay out of the pair's training data
        let retain = match rewind_reference {
            Some(r) => half.difference(r),
            None => half.clone(),
        };
        let out = run_unlearning(
            source,
            &UnlearnRequest {
                base: &base,
                retain: &retain,
                forget: &forget,
                algorithm,
                hyperparams: hyperparams.clone(),
                seed: seeds[k] ^ 0x5EED,
                rewind_reference,
            },
        )?;
        Ok((
            half,
            forgotten,
            phi_row(&base, source, queries)?,
            phi_row(&out.model, source, queries)?,
        ))
    });
    let nq = queries.len();
    let mut m = PairedScoreMatrix {
        pairs,
        queries: queries.to_vec(),
        query_classes: queries.iter().map(|&q| source.label(q) as u32).collect(),
        base: Vec::with_capacity(pairs * nq),
        unlearned: Vec::with_capacity(pairs * nq),
        forgotten: Vec::with_capacity(pairs * nq),
        provenance: MatrixProvenance {
            seeds,
            half_hashes: Vec::with_capacity(pairs),
            algorithm: Some(algorithm.as_str().to_string()),
        },
    };
    for job in jobs {
        let (half, forgotten, base, unlearned) = job?;
        m.provenance.half_hashes.push(half.content_hash());
        m.forgotten.extend(forgotten);
        m.base.extend(base);
        m.unlearned.extend(unlearned);
    }
    Ok(m)
}
