//! Deterministic train/val/test partitions and forget-set sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// A set of dataset indices, kept sorted and free of duplicates.
///
/// Serializes as a sorted integer array so hashes of serialized plans are
/// stable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexSet(Vec<u32>);

impl IndexSet {
    pub fn new(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        IndexSet(indices)
    }

    pub fn range(start: u32, end: u32) -> Self {
        IndexSet((start..end).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, index: u32) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn union(&self, other: &IndexSet) -> IndexSet {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => {
                    out.push(self.0[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    out.push(other.0[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    out.push(self.0[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        out.extend_from_slice(&self.0[i..]);
        out.extend_from_slice(&other.0[j..]);
        IndexSet(out)
    }

    pub fn difference(&self, other: &IndexSet) -> IndexSet {
        IndexSet(self.iter().filter(|&x| !other.contains(x)).collect())
    }

    pub fn intersection(&self, other: &IndexSet) -> IndexSet {
        IndexSet(self.iter().filter(|&x| other.contains(x)).collect())
    }

    pub fn is_disjoint(&self, other: &IndexSet) -> bool {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.iter().all(|x| !large.contains(x))
    }

    pub fn is_subset(&self, other: &IndexSet) -> bool {
        self.iter().all(|x| other.contains(x))
    }

    /// SHA-256 over the little-endian encoding of the sorted indices.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for &i in &self.0 {
            hasher.update(i.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

impl FromIterator<u32> for IndexSet {
    fn from_iter<T: IntoIterator<Item = u32>>(iter: T) -> Self {
        IndexSet::new(iter.into_iter().collect())
    }
}

/// Partition of a dataset into train/val/test plus the ordered forget sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub schema_version: u32,
    pub dataset_id: String,
    pub train_indices: IndexSet,
    pub val_indices: IndexSet,
    pub test_indices: IndexSet,
    pub forget_sequence: Vec<IndexSet>,
    pub forget_fraction: f64,
    pub seed: u64,
}

/// Builds a split plan.
///
/// The dataset index range is laid out as `[0, n_train + n_val)` for the
/// official training split (val is carved from it) followed by
/// `[n_train + n_val, n_train + n_val + n_test)` for the official test split.
///
/// Sampling procedure, driven by a single `ChaCha8Rng` seeded with `seed`:
/// 1. Partial Fisher-Yates over the training pool: for `i in 0..n_val`, swap
///    position `i` with a uniform position in `i..pool_len`. The first `n_val`
///    entries become the val set, the rest the train set.
/// 2. For each iteration, the same partial Fisher-Yates draws
///    `floor(forget_fraction * n_train)` entries from the sorted list of train
///    indices not yet forgotten.
pub fn build_split_plan(
    dataset_id: &str,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    forget_fraction: f64,
    n_iterations: usize,
    seed: u64,
) -> Result<SplitPlan> {
    if n_train == 0 || n_val == 0 || n_test == 0 || n_iterations == 0 {
        return Err(BenchError::BadSizes(format!(
            "counts must be positive (train {n_train}, val {n_val}, test {n_test}, iterations {n_iterations})"
        )));
    }
    if !(forget_fraction > 0.0 && forget_fraction <= 1.0) {
        return Err(BenchError::BadSizes(format!(
            "forget fraction {forget_fraction} outside (0, 1]"
        )));
    }
    let total = n_train as u64 + n_val as u64 + n_test as u64;
    if total > u32::MAX as u64 {
        return Err(BenchError::BadSizes(format!("{total} examples exceed u32 index range")));
    }
    let per_iter = forget_set_size(forget_fraction, n_train);
    if per_iter == 0 {
        return Err(BenchError::BadSizes(format!(
            "forget fraction {forget_fraction} of {n_train} rounds to an empty forget set"
        )));
    }
    let demand = per_iter * n_iterations;
    if demand > n_train || forget_fraction * n_iterations as f64 > 1.0 + 1e-12 {
        return Err(BenchError::Infeasible {
            demand: ((forget_fraction * n_iterations as f64) * n_train as f64).ceil() as usize,
            available: n_train,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<u32> = (0..(n_train + n_val) as u32).collect();
    partial_shuffle(&mut pool, n_val, &mut rng);
    let val_indices = IndexSet::new(pool[..n_val].to_vec());
    let train_indices = IndexSet::new(pool[n_val..].to_vec());
    let base = (n_train + n_val) as u32;
    let test_indices = IndexSet::range(base, base + n_test as u32);

    let mut remaining = train_indices.as_slice().to_vec();
    let mut forget_sequence = Vec::with_capacity(n_iterations);
    for _ in 0..n_iterations {
        partial_shuffle(&mut remaining, per_iter, &mut rng);
        forget_sequence.push(IndexSet::new(remaining[..per_iter].to_vec()));
        remaining.drain(..per_iter);
        remaining.sort_unstable();
    }

    Ok(SplitPlan {
        schema_version: PLAN_SCHEMA_VERSION,
        dataset_id: dataset_id.to_string(),
        train_indices,
        val_indices,
        test_indices,
        forget_sequence,
        forget_fraction,
        seed,
    })
}

/// `floor(fraction * n)`, tolerant of binary rounding just below an integer.
pub fn forget_set_size(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 1e-9).floor() as usize
}

fn partial_shuffle(items: &mut [u32], take: usize, rng: &mut ChaCha8Rng) {
    let len = items.len();
    for i in 0..take.min(len) {
        let j = rng.random_range(i..len);
        items.swap(i, j);
    }
}

impl SplitPlan {
    pub fn iterations(&self) -> usize {
        self.forget_sequence.len()
    }

    pub fn forget_set_for_iteration(&self, i: usize) -> Result<&IndexSet> {
        self.forget_sequence.get(i).ok_or(BenchError::OutOfRange {
            index: i,
            len: self.forget_sequence.len(),
        })
    }

    /// Train indices minus every forget set up to and including iteration `i`.
    pub fn retain_set_for_iteration(&self, i: usize) -> Result<IndexSet> {
        self.forget_set_for_iteration(i)?;
        let forgotten = self.forgotten_through(i);
        Ok(self.train_indices.difference(&forgotten))
    }

    /// Union of forget sets `0..=i`.
    pub fn forgotten_through(&self, i: usize) -> IndexSet {
        self.forget_sequence
            .iter()
            .take(i + 1)
            .fold(IndexSet::default(), |acc, s| acc.union(s))
    }

    pub fn dataset_len(&self) -> usize {
        self.train_indices.len() + self.val_indices.len() + self.test_indices.len()
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let sets = [&self.train_indices, &self.val_indices, &self.test_indices];
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            if !sets[a].is_disjoint(sets[b]) {
                return Err(BenchError::BadSizes("train/val/test overlap".into()));
            }
        }
        let n = self.dataset_len() as u32;
        let all = sets.iter().fold(IndexSet::default(), |acc, s| acc.union(s));
        if all != IndexSet::range(0, n) {
            return Err(BenchError::BadSizes("splits do not cover the index range".into()));
        }
        let expected = forget_set_size(self.forget_fraction, self.train_indices.len());
        let mut seen = IndexSet::default();
        for (i, f) in self.forget_sequence.iter().enumerate() {
            if f.len() != expected {
                return Err(BenchError::BadSizes(format!(
                    "forget set {i} has {} entries, expected {expected}",
                    f.len()
                )));
            }
            if !f.is_subset(&self.train_indices) || !f.is_disjoint(&seen) {
                return Err(BenchError::BadSizes(format!(
                    "forget set {i} is not a fresh subset of train"
                )));
            }
            seen = seen.union(f);
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn plan_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("plan serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cifar_plan() -> SplitPlan {
        build_split_plan("cifar10", 45_000, 5_000, 10_000, 0.01, 10, 17).unwrap()
    }

    #[test]
    fn cifar_sized_plan_has_ten_disjoint_sets_of_450() {
        let plan = cifar_plan();
        assert_eq!(plan.iterations(), 10);
        for f in &plan.forget_sequence {
            assert_eq!(f.len(), 450);
        }
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert!(plan.forget_sequence[i].is_disjoint(&plan.forget_sequence[j]));
            }
        }
        plan.validate().unwrap();
    }

    #[test]
    fn same_inputs_give_identical_plans() {
        let a = cifar_plan();
        let b = cifar_plan();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        assert_ne!(a, build_split_plan("cifar10", 45_000, 5_000, 10_000, 0.01, 10, 18).unwrap());
    }

    #[test]
    fn over_demand_is_infeasible() {
        let err = build_split_plan("d", 1000, 100, 100, 0.2, 6, 1).unwrap_err();
        assert_eq!(err.code(), "INFEASIBLE");
    }

    #[test]
    fn zero_counts_are_bad_sizes() {
        let err = build_split_plan("d", 0, 100, 100, 0.1, 1, 1).unwrap_err();
        assert_eq!(err.code(), "BAD_SIZES");
        let err = build_split_plan("d", 10, 100, 100, 0.01, 1, 1).unwrap_err();
        assert_eq!(err.code(), "BAD_SIZES");
    }

    #[test]
    fn retain_sets_shrink_cumulatively() {
        let plan = cifar_plan();
        assert_eq!(plan.retain_set_for_iteration(0).unwrap().len(), 44_550);
        assert_eq!(plan.retain_set_for_iteration(9).unwrap().len(), 40_500);
        for i in [0, 4, 9] {
            let retain = plan.retain_set_for_iteration(i).unwrap();
            let forgotten = plan.forgotten_through(i);
            assert!(retain.is_disjoint(&forgotten));
            assert_eq!(retain.union(&forgotten), plan.train_indices);
        }
    }

    #[test]
    fn out_of_range_iteration() {
        let plan = cifar_plan();
        assert_eq!(plan.forget_set_for_iteration(10).unwrap_err().code(), "OUT_OF_RANGE");
        assert_eq!(plan.retain_set_for_iteration(10).unwrap_err().code(), "OUT_OF_RANGE");
    }

    #[test]
    fn index_set_ops() {
        let a = IndexSet::new(vec![5, 1, 3, 3]);
        let b = IndexSet::new(vec![3, 4]);
        assert_eq!(a.as_slice(), &[1, 3, 5]);
        assert_eq!(a.union(&b).as_slice(), &[1, 3, 4, 5]);
        assert_eq!(a.difference(&b).as_slice(), &[1, 5]);
        assert_eq!(a.intersection(&b).as_slice(), &[3]);
        assert!(!a.is_disjoint(&b));
        assert_eq!(serde_json::to_string(&a).unwrap(), "[1,3,5]");
    }
}
