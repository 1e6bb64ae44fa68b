//! Membership-inference attacks: a loss-based logistic-regression baseline,
//! offline LiRA, and an update-leakage attack over (base, unlearned) pairs.

mod format;
mod shadow;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

pub use format::{SCORE_FILE_MAGIC, SCORE_FILE_TRAILER, SCORE_FILE_VERSION};
pub(crate) use shadow::parallel_map;
pub use shadow::{build_shadow_pairs, train_shadow_models, ShadowSet, MIN_SHADOWS};

use crate::error::{BenchError, Result};
use crate::metrics::{estimate_epsilon, EpsilonEstimate};
use crate::store::sha256_hex;

/// Per-query membership scores (higher = more likely member) with ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    /// sha256 of the attack configuration JSON.
    pub config_hash: String,
    pub queries: Vec<u32>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl AttackResult {
    pub fn new(attack: &str, scores: Vec<f64>, labels: Vec<u8>, queries: Vec<u32>) -> Result<Self> {
        if scores.len() != labels.len() || scores.len() != queries.len() {
            return Err(BenchError::LengthMismatch {
                left: scores.len(),
                right: labels.len().min(queries.len()),
            });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(BenchError::NanInput("attack scores"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(BenchError::BadLabel { label: 2, classes: 2 });
        }
        Ok(AttackResult {
            attack: attack.to_string(),
            config_hash: config_hash(&serde_json::Value::Null),
            queries,
            scores,
            labels,
        })
    }

    pub fn with_config(mut self, config: &impl Serialize) -> Self {
        self.config_hash = config_hash(config);
        self
    }

    /// Accuracy of thresholding scores at `threshold`.
    pub fn accuracy_at(&self, threshold: f64) -> f64 {
        crate::metrics::accuracy_at(&self.scores, &self.labels, threshold)
    }
}

fn config_hash(config: &impl Serialize) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

/// Lineage of a shadow population.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixProvenance {
    pub seeds: Vec<u64>,
    /// Content hash of each shadow's training index set.
    pub half_hashes: Vec<String>,
    /// Unlearning algorithm applied to shadow pairs, if any.
    #[serde(default)]
    pub algorithm: Option<String>,
}

/// φ scores of `S` shadow models on a fixed query list, with IN/OUT mask.
/// Both planes are row-major `S × Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub shadows: usize,
    pub queries: Vec<u32>,
    /// Class label of each query, used for pooling.
    pub query_classes: Vec<u32>,
    pub scores: Vec<f32>,
    /// True where the query was in the shadow's training data.
    pub member: Vec<bool>,
    pub provenance: MatrixProvenance,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        let cells = self.shadows * self.queries.len();
        if self.scores.len() != cells || self.member.len() != cells || self.query_classes.len() != self.queries.len()
        {
            return Err(BenchError::ShapeMismatch(format!(
                "score matrix {}x{} with {} scores and {} mask cells",
                self.shadows,
                self.queries.len(),
                self.scores.len(),
                self.member.len()
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(BenchError::NanInput("shadow scores"));
        }
        Ok(())
    }

    /// OUT scores of query column `q`.
    pub fn out_scores(&self, q: usize) -> Vec<f64> {
        let nq = self.queries.len();
        (0..self.shadows)
            .filter(|&s| !self.member[s * nq + q])
            .map(|s| self.scores[s * nq + q] as f64)
            .collect()
    }

    /// The sub-matrix over the given query ids, in the given order.
    pub fn select(&self, queries: &[u32]) -> Result<ScoreMatrix> {
        let position: std::collections::HashMap<u32, usize> =
            self.queries.iter().enumerate().map(|(k, &q)| (q, k)).collect();
        let columns = queries
            .iter()
            .map(|q| position.get(q).copied().ok_or(BenchError::MisalignedQueries))
            .collect::<Result<Vec<usize>>>()?;
        let nq = self.queries.len();
        let mut out = ScoreMatrix {
            shadows: self.shadows,
            queries: queries.to_vec(),
            query_classes: columns.iter().map(|&c| self.query_classes[c]).collect(),
            scores: Vec::with_capacity(self.shadows * columns.len()),
            member: Vec::with_capacity(self.shadows * columns.len()),
            provenance: self.provenance.clone(),
        };
        for s in 0..self.shadows {
            for &c in &columns {
                out.scores.push(self.scores[s * nq + c]);
                out.member.push(self.member[s * nq + c]);
            }
        }
        Ok(out)
    }
}

/// Aligned (φ_base, φ_unlearned) planes over `P` shadow pairs and `Q` queries.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScoreMatrix {
    pub pairs: usize,
    pub queries: Vec<u32>,
    pub query_classes: Vec<u32>,
    pub base: Vec<f32>,
    pub unlearned: Vec<f32>,
    /// True where the query was in the pair's forget set (FORGOTTEN); false
    /// where it never entered the pair's training data (NEVER).
    pub forgotten: Vec<bool>,
    pub provenance: MatrixProvenance,
}

impl PairedScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        let cells = self.pairs * self.queries.len();
        if self.base.len() != cells
            || self.unlearned.len() != cells
            || self.forgotten.len() != cells
            || self.query_classes.len() != self.queries.len()
        {
            return Err(BenchError::ShapeMismatch(format!(
                "paired matrix {}x{} with planes {}/{}/{}",
                self.pairs,
                self.queries.len(),
                self.base.len(),
                self.unlearned.len(),
                self.forgotten.len()
            )));
        }
        if self.base.iter().chain(&self.unlearned).any(|s| !s.is_finite()) {
            return Err(BenchError::NanInput("shadow pair scores"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Logistic-regression loss attack

/// One-feature logistic regression fitted by penalized Newton steps on
/// standardized inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Logistic {
    a: f64,
    b: f64,
    mean: f64,
    scale: f64,
}

const LOGISTIC_RIDGE: f64 = 1e-4;

impl Logistic {
    fn fit(x: &[f64], y: &[f64]) -> Self {
        let n = x.len().max(1) as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        let z: Vec<f64> = x.iter().map(|v| (v - mean) / scale).collect();
        let (mut a, mut b) = (0.0f64, 0.0f64);
        for _ in 0..100 {
            let (mut ga, mut gb) = (-LOGISTIC_RIDGE * a, -LOGISTIC_RIDGE * b);
            let (mut haa, mut hab, mut hbb) = (LOGISTIC_RIDGE, 0.0, LOGISTIC_RIDGE);
            for (&zi, &yi) in z.iter().zip(y) {
                let p = sigmoid(a + b * zi);
                let w = p * (1.0 - p);
                ga += yi - p;
                gb += (yi - p) * zi;
                haa += w;
                hab += w * zi;
                hbb += w * zi * zi;
            }
            let det = haa * hbb - hab * hab;
            if det <= 0.0 {
                break;
            }
            let da = (hbb * ga - hab * gb) / det;
            let db = (haa * gb - hab * ga) / det;
            a += da;
            b += db;
            if da.abs().max(db.abs()) < 1e-10 {
                break;
            }
        }
        Logistic { a, b, mean, scale }
    }

    fn predict(&self, x: f64) -> f64 {
        sigmoid(self.a + self.b * (x - self.mean) / self.scale)
    }
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Folds by rank within each class, so the split depends only on values.
fn rank_folds(values: &[f64], folds: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut fold = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        fold[i] = rank % folds;
    }
    fold
}

/// Cross-fitted logistic regression on losses: members are `forget_losses`.
/// Each example is scored by a model fitted on the other folds. Queries in
/// the result are positions, members first; attach dataset indices with
/// [`AttackResult::queries`] if needed.
pub fn lr_mia(forget_losses: &[f64], nonmember_losses: &[f64], folds: usize) -> Result<AttackResult> {
    if forget_losses.is_empty() || nonmember_losses.is_empty() {
        return Err(BenchError::EmptyInput("loss lists"));
    }
    if forget_losses.iter().chain(nonmember_losses).any(|v| !v.is_finite()) {
        return Err(BenchError::NanInput("losses"));
    }
    if folds < 2 {
        return Err(BenchError::Config("lr_mia needs at least 2 folds".into()));
    }
    let values: Vec<f64> = forget_losses.iter().chain(nonmember_losses).copied().collect();
    let labels: Vec<u8> = std::iter::repeat_n(1u8, forget_losses.len())
        .chain(std::iter::repeat_n(0u8, nonmember_losses.len()))
        .collect();
    let mut fold = rank_folds(forget_losses, folds);
    fold.extend(rank_folds(nonmember_losses, folds));
    let mut scores = vec![0.0; values.len()];
    for k in 0..folds {
        let mut train: Vec<(f64, f64)> = values
            .iter()
            .zip(&labels)
            .zip(&fold)
            .filter(|&(_, &f)| f != k)
            .map(|((&v, &l), _)| (v, l as f64))
            .collect();
        // fixed order so the fit does not depend on input order
        train.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let (x, y): (Vec<f64>, Vec<f64>) = train.into_iter().unzip();
        let model = Logistic::fit(&x, &y);
        for i in (0..values.len()).filter(|&i| fold[i] == k) {
            scores[i] = model.predict(values[i]);
        }
    }
    let queries = (0..values.len() as u32).collect();
    Ok(AttackResult::new("lr_mia", scores, labels, queries)?.with_config(&serde_json::json!({ "folds": folds })))
}

// ---------------------------------------------------------------------------
// Offline LiRA

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiraConfig {
    pub sigma_min: f64,
    /// Queries with fewer OUT scores than this borrow the global variance.
    pub shrink_below: usize,
}

impl Default for LiraConfig {
    fn default() -> Self {
        LiraConfig {
            sigma_min: 1e-3,
            shrink_below: 8,
        }
    }
}

/// Pooled within-column variance: Σ (x − μ_col)² / Σ (n_col − 1).
fn pooled_variance(columns: &[Vec<f64>]) -> f64 {
    let (mut ss, mut dof) = (0.0, 0usize);
    for c in columns.iter().filter(|c| c.len() >= 2) {
        let m = c.iter().sum::<f64>() / c.len() as f64;
        ss += c.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        dof += c.len() - 1;
    }
    if dof == 0 {
        0.0
    } else {
        ss / dof as f64
    }
}

/// Mean and shrunk standard deviation of one OUT column.
fn fit_column(values: &[f64], global_var: f64, cfg: &LiraConfig) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let var = if values.len() < cfg.shrink_below {
        let w = n / cfg.shrink_below as f64;
        w * var + (1.0 - w) * global_var
    } else {
        var
    };
    (mean, var.sqrt().max(cfg.sigma_min))
}

/// Per-query `(μ_out, σ_out)` from the OUT cells of `shadows`.
pub fn fit_out_gaussians(shadows: &ScoreMatrix, cfg: &LiraConfig) -> Result<Vec<(f64, f64)>> {
    shadows.validate()?;
    let columns: Vec<Vec<f64>> = (0..shadows.queries.len()).map(|q| shadows.out_scores(q)).collect();
    if let Some(q) = columns.iter().position(|c| c.len() < 2) {
        return Err(BenchError::TooFewShadows(format!(
            "query {} has {} OUT scores, need 2",
            shadows.queries[q],
            columns[q].len()
        )));
    }
    let global = pooled_variance(&columns);
    Ok(columns.iter().map(|c| fit_column(c, global, cfg)).collect())
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    0.5 * erfc(-(x - mean) / (sd * std::f64::consts::SQRT_2))
}

/// Offline LiRA: the target's φ is placed in the Gaussian fitted to the
/// query's OUT shadow scores, and the score is `P(φ_out ≤ φ_target)`, which
/// grows with the target's confidence.
pub fn lira_offline(
    queries: &[u32],
    target_phi: &[f64],
    labels: &[u8],
    shadows: &ScoreMatrix,
    cfg: &LiraConfig,
) -> Result<AttackResult> {
    if queries != shadows.queries.as_slice() || target_phi.len() != queries.len() {
        return Err(BenchError::MisalignedQueries);
    }
    if target_phi.iter().any(|v| !v.is_finite()) {
        return Err(BenchError::NanInput("target scores"));
    }
    let fits = fit_out_gaussians(shadows, cfg)?;
    let scores = target_phi
        .iter()
        .zip(&fits)
        .map(|(&phi, &(m, s))| normal_cdf(phi, m, s))
        .collect();
    Ok(AttackResult::new("lira_offline", scores, labels.to_vec(), queries.to_vec())?.with_config(cfg))
}

// ---------------------------------------------------------------------------
// Update leakage

/// How shadow pairs are pooled when a query has too few pairs under a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Per query, falling back to the query's class and then to all queries.
    PerQuery,
    /// Always pool within the query's class.
    Class,
    /// Always pool across all queries.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateLeakConfig {
    /// Ridge added to every fitted covariance.
    pub kappa: f64,
    pub min_pairs: usize,
    pub pooling: Pooling,
}

impl Default for UpdateLeakConfig {
    fn default() -> Self {
        UpdateLeakConfig {
            kappa: 1e-2,
            min_pairs: 3,
            pooling: Pooling::PerQuery,
        }
    }
}

/// Bivariate Gaussian with a precomputed inverse.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gauss2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl Gauss2 {
    /// Sample mean and unbiased covariance plus `kappa·I`.
    pub fn fit(points: &[(f64, f64)], kappa: f64) -> Self {
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let dof = (n - 1.0).max(1.0);
        let sxx = points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>() / dof;
        let syy = points.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>() / dof;
        let sxy = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / dof;
        Gauss2 {
            mean: [mx, my],
            cov: [[sxx + kappa, sxy], [sxy, syy + kappa]],
        }
    }

    pub fn log_density(&self, x: (f64, f64)) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let dx = x.0 - self.mean[0];
        let dy = x.1 - self.mean[1];
        let quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -0.5 * quad - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }
}

/// Points of one hypothesis for column `q`, after applying `project`.
fn hypothesis_points(
    pairs: &PairedScoreMatrix,
    cols: impl Iterator<Item = usize>,
    forgotten: bool,
    project: fn(f64, f64) -> (f64, f64),
) -> Vec<(f64, f64)> {
    let nq = pairs.queries.len();
    let cols: Vec<usize> = cols.collect();
    let mut out = Vec::new();
    for p in 0..pairs.pairs {
        for &q in &cols {
            let k = p * nq + q;
            if pairs.forgotten[k] == forgotten {
                out.push(project(pairs.base[k] as f64, pairs.unlearned[k] as f64));
            }
        }
    }
    out
}

fn fit_hypothesis(pairs: &PairedScoreMatrix, q: usize, forgotten: bool, cfg: &UpdateLeakConfig, project: fn(f64, f64) -> (f64, f64)) -> Result<Gauss2> {
    let nq = pairs.queries.len();
    let own = || hypothesis_points(pairs, std::iter::once(q), forgotten, project);
    let class = || {
        let c = pairs.query_classes[q];
        hypothesis_points(pairs, (0..nq).filter(|&j| pairs.query_classes[j] == c), forgotten, project)
    };
    let global = || hypothesis_points(pairs, 0..nq, forgotten, project);
    let candidates: Vec<&dyn Fn() -> Vec<(f64, f64)>> = match cfg.pooling {
        Pooling::PerQuery => vec![&own, &class, &global],
        Pooling::Class => vec![&class, &global],
        Pooling::Global => vec![&global],
    };
    for make in candidates {
        let pts = make();
        if pts.len() >= cfg.min_pairs {
            return Ok(Gauss2::fit(&pts, cfg.kappa));
        }
    }
    Err(BenchError::TooFewShadows(format!(
        "fewer than {} {} pairs even after pooling",
        cfg.min_pairs,
        if forgotten { "FORGOTTEN" } else { "NEVER" }
    )))
}

fn likelihood_ratio_attack(
    name: &str,
    queries: &[u32],
    target: &[(f64, f64)],
    labels: &[u8],
    pairs: &PairedScoreMatrix,
    cfg: &UpdateLeakConfig,
    project: fn(f64, f64) -> (f64, f64),
) -> Result<AttackResult> {
    if queries != pairs.queries.as_slice() || target.len() != queries.len() || labels.len() != queries.len() {
        return Err(BenchError::MisalignedQueries);
    }
    pairs.validate()?;
    if cfg.min_pairs < 2 || !(cfg.kappa > 0.0) {
        return Err(BenchError::Config("update-leak needs min_pairs >= 2 and kappa > 0".into()));
    }
    let mut scores = Vec::with_capacity(queries.len());
    for (q, &(b, u)) in target.iter().enumerate() {
        if !b.is_finite() || !u.is_finite() {
            return Err(BenchError::NanInput("target scores"));
        }
        let f = fit_hypothesis(pairs, q, true, cfg, project)?;
        let n = fit_hypothesis(pairs, q, false, cfg, project)?;
        let x = project(b, u);
        scores.push(f.log_density(x) - n.log_density(x));
    }
    Ok(AttackResult::new(name, scores, labels.to_vec(), queries.to_vec())?.with_config(cfg))
}

/// Update-leakage attack: per query, Gaussians fitted to shadow
/// `(φ_base, φ_unlearned)` under FORGOTTEN and NEVER; the score is the
/// log-likelihood ratio of the target pair.
pub fn update_leak_attack(
    queries: &[u32],
    base_phi: &[f64],
    unlearned_phi: &[f64],
    labels: &[u8],
    pairs: &PairedScoreMatrix,
    cfg: &UpdateLeakConfig,
) -> Result<AttackResult> {
    if base_phi.len() != unlearned_phi.len() {
        return Err(BenchError::MisalignedQueries);
    }
    let target: Vec<(f64, f64)> = base_phi.iter().copied().zip(unlearned_phi.iter().copied()).collect();
    likelihood_ratio_attack("update_leak", queries, &target, labels, pairs, cfg, |b, u| (b, u))
}

/// The same likelihood-ratio machinery using only the base model: both
/// coordinates are `φ_base`, on the target and on every shadow pair.
pub fn base_model_attack(
    queries: &[u32],
    base_phi: &[f64],
    labels: &[u8],
    pairs: &PairedScoreMatrix,
    cfg: &UpdateLeakConfig,
) -> Result<AttackResult> {
    let target: Vec<(f64, f64)> = base_phi.iter().map(|&b| (b, b)).collect();
    likelihood_ratio_attack("base_model", queries, &target, labels, pairs, cfg, |b, _| (b, b))
}

// ---------------------------------------------------------------------------
// Per-example ε from shadow pairs

/// LiRA thresholds tried when turning scores into decisions.
pub const EPSILON_THRESHOLDS: [f64; 5] = [0.5, 0.75, 0.9, 0.95, 0.99];

/// Offline-LiRA verdicts on each unlearned shadow model for query column `q`:
/// `(decisions where FORGOTTEN, decisions where NEVER)`. NEVER trials are
/// scored leave-one-out so a model is never part of its own reference fit.
pub fn pair_decisions(
    pairs: &PairedScoreMatrix,
    q: usize,
    threshold: f64,
    global_var: f64,
    cfg: &LiraConfig,
) -> Result<(Vec<bool>, Vec<bool>)> {
    let nq = pairs.queries.len();
    let never: Vec<(usize, f64)> = (0..pairs.pairs)
        .filter(|&p| !pairs.forgotten[p * nq + q])
        .map(|p| (p, pairs.unlearned[p * nq + q] as f64))
        .collect();
    if never.len() < 3 {
        return Err(BenchError::TooFewShadows(format!(
            "query {} has {} NEVER pairs, need 3 for leave-one-out",
            pairs.queries[q],
            never.len()
        )));
    }
    let all: Vec<f64> = never.iter().map(|&(_, v)| v).collect();
    let (m, s) = fit_column(&all, global_var, cfg);
    let member = (0..pairs.pairs)
        .filter(|&p| pairs.forgotten[p * nq + q])
        .map(|p| normal_cdf(pairs.unlearned[p * nq + q] as f64, m, s) >= threshold)
        .collect();
    let nonmember = never
        .iter()
        .map(|&(p, v)| {
            let rest: Vec<f64> = never.iter().filter(|&&(o, _)| o != p).map(|&(_, w)| w).collect();
            let (m, s) = fit_column(&rest, global_var, cfg);
            normal_cdf(v, m, s) >= threshold
        })
        .collect();
    Ok((member, nonmember))
}

/// Per-example ε̂ for the query columns in `columns`, maximized over
/// [`EPSILON_THRESHOLDS`]. The reported bounds are those of the maximizing
/// threshold.
pub fn pair_epsilon(
    pairs: &PairedScoreMatrix,
    columns: &[usize],
    delta: f64,
    confidence: Option<f64>,
    cfg: &LiraConfig,
) -> Result<EpsilonEstimate> {
    pairs.validate()?;
    let nq = pairs.queries.len();
    let never_columns: Vec<Vec<f64>> = (0..nq)
        .map(|q| {
            (0..pairs.pairs)
                .filter(|&p| !pairs.forgotten[p * nq + q])
                .map(|p| pairs.unlearned[p * nq + q] as f64)
                .collect()
        })
        .collect();
    let global = pooled_variance(&never_columns);
    let mut best: Option<EpsilonEstimate> = None;
    for &t in &EPSILON_THRESHOLDS {
        let mut members = Vec::with_capacity(columns.len());
        let mut nonmembers = Vec::with_capacity(columns.len());
        for &q in columns {
            if q >= nq {
                return Err(BenchError::OutOfRange { index: q, len: nq });
            }
            let (m, n) = pair_decisions(pairs, q, t, global, cfg)?;
            members.push(m);
            nonmembers.push(n);
        }
        let est = estimate_epsilon(&members, &nonmembers, delta, confidence)?;
        best = Some(match best {
            None => est,
            Some(mut b) => {
                for k in 0..b.epsilon.len() {
                    if est.epsilon[k] > b.epsilon[k] {
                        b.epsilon[k] = est.epsilon[k];
                        b.fpr_upper[k] = est.fpr_upper[k];
                        b.fnr_upper[k] = est.fnr_upper[k];
                    }
                }
                b
            }
        });
    }
    Ok(best.expect("threshold grid is nonempty"))
}
